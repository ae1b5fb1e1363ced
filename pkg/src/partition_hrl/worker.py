"""Option workers: Double DQN with prioritized replay and Polyak-averaged targets.

The same learner drives the flat DQN-PER baseline, acting on raw environment
reward instead of option rewards.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .envs import EpisodeOver, TransitionBatch
from .nncore import Network, make_optimizer, optimizer_step, polyak_update
from .smdp import AbstractGraph, Node, Option, option_reward

WORKER_ARCH = ("conv:32:7:1", "relu", "fc:32", "relu", "fc:32", "relu")


@dataclass
class DQNConfig:
    lr: float = 1e-3
    gamma: float = 0.95
    batch_size: int = 100
    tau: float = 0.05
    eps_start: float = 1.0
    eps_decay: float = 0.9998
    eps_min: float = 0.0
    buffer_size: int = 500_000
    alpha: float = 0.6
    beta: float = 0.1
    priority_eps: float = 1e-3
    train_every: int = 1
    arch: tuple = WORKER_ARCH


# --------------------------------------------------------------------------- replay


class PrioritizedBuffer:
    """Proportional prioritized replay: P(i) = p_i^alpha / sum_j p_j^alpha."""

    def __init__(self, capacity: int, obs_shape: Sequence[int], obs_dtype=np.float32,
                 alpha: float = 0.6, beta: float = 0.1, priority_eps: float = 1e-3):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.obs_dtype = np.dtype(obs_dtype)
        self.alpha, self.beta, self.priority_eps = alpha, beta, priority_eps
        self.size = 0
        self.next = 0
        self.max_priority = 1.0
        self._alloc(min(capacity, 1024))

    def _alloc(self, n):
        def grow(old, shape, dtype):
            new = np.zeros((n,) + shape, dtype=dtype)
            if old is not None:
                new[:len(old)] = old
            return new
        get = lambda k: getattr(self, k, None)
        self.s = grow(get("s"), self.obs_shape, self.obs_dtype)
        self.s2 = grow(get("s2"), self.obs_shape, self.obs_dtype)
        self.a = grow(get("a"), (), np.int64)
        self.r = grow(get("r"), (), np.float64)
        self.done = grow(get("done"), (), bool)
        self.pa = grow(get("pa"), (), np.float64)    # p_i ** alpha

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done, priority: float | None = None) -> int:
        i = self.next
        if i >= len(self.a):
            self._alloc(min(self.capacity, 2 * len(self.a)))
        p = self.max_priority if priority is None else max(float(priority), self.priority_eps)
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, done
        self.pa[i] = p ** self.alpha
        self.next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def probabilities(self) -> np.ndarray:
        pa = self.pa[:self.size]
        return pa / pa.sum()

    def sample(self, k: int, rng: np.random.Generator):
        """Returns (batch, importance weights normalized by their buffer-wide maximum)."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        pa = self.pa[:self.size]
        cum = np.cumsum(pa)
        total = cum[-1]
        idx = np.searchsorted(cum, rng.random(k) * total, side="right")
        idx = np.minimum(idx, self.size - 1)
        probs = pa[idx] / total
        w = (self.size * probs) ** -self.beta
        w_max = (self.size * pa.min() / total) ** -self.beta
        batch = TransitionBatch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx], idx)
        return batch, w / w_max

    def update_priorities(self, idx: np.ndarray, td_errors: np.ndarray):
        p = np.abs(np.asarray(td_errors, dtype=np.float64)) + self.priority_eps
        self.pa[idx] = p ** self.alpha
        self.max_priority = max(self.max_priority, float(p.max()))


def per_sample(buffer: PrioritizedBuffer, k: int, rng: np.random.Generator):
    batch, w = buffer.sample(k, rng)
    return batch, batch.indices, w


# --------------------------------------------------------------------------- learner


def td_target(r, s2, done, online: Network, target: Network, gamma: float) -> np.ndarray:
    """Double DQN: r + gamma * Q_target(s', argmax_a Q_online(s', a)); terminals do not bootstrap."""
    r = np.asarray(r, dtype=np.float64)
    done = np.asarray(done, dtype=bool)
    if gamma == 0 or done.all():
        return r.copy()
    a_star = np.argmax(online.forward(s2, "eval"), axis=1)
    q_next = target.forward(s2, "eval")[np.arange(len(r)), a_star].astype(np.float64)
    return r + gamma * np.where(done, 0.0, q_next)


class EpsilonSchedule:
    """Multiplicative epsilon decay; one instance may be shared by several learners."""

    def __init__(self, start: float = 1.0, decay: float = 0.9998, minimum: float = 0.0):
        self.start, self.decay, self.minimum = start, decay, minimum
        self.decays = 0

    @property
    def value(self) -> float:
        return max(self.minimum, self.start * self.decay ** self.decays)

    def step(self):
        self.decays += 1


class DQNLearner:
    """Online/target Q networks, Adam, prioritized replay and a decaying epsilon.

    Pass ``schedule`` to share one exploration schedule between learners.
    """

    def __init__(self, obs_shape: Sequence[int], n_actions: int, cfg: DQNConfig | None = None,
                 seed: int = 0, obs_dtype=np.uint8, schedule: EpsilonSchedule | None = None):
        self.cfg = cfg or DQNConfig()
        self.n_actions = n_actions
        self.obs_shape = tuple(obs_shape)
        self.online = Network(self.obs_shape, list(self.cfg.arch) + [f"fc:{n_actions}"], seed=seed)
        self.target = self.online.clone()
        self.opt = make_optimizer("adam", self.cfg.lr)
        self.buffer = PrioritizedBuffer(self.cfg.buffer_size, self.obs_shape, obs_dtype,
                                        self.cfg.alpha, self.cfg.beta, self.cfg.priority_eps)
        self.rng = np.random.default_rng(seed)
        self.schedule = schedule or EpsilonSchedule(self.cfg.eps_start, self.cfg.eps_decay, self.cfg.eps_min)
        self.steps = 0
        self.updates = 0

    @property
    def epsilon(self) -> float:
        return self.schedule.value

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        return self.online.forward(np.asarray(obs)[None], "eval")[0]

    def act(self, obs: np.ndarray, greedy: bool = False) -> int:
        if not greedy and self.rng.random() < self.epsilon:
            return int(self.rng.integers(self.n_actions))
        return int(np.argmax(self.q_values(obs)))

    def learn(self) -> float | None:
        """One prioritized Double-DQN gradient step; None until a full batch is stored."""
        cfg = self.cfg
        if len(self.buffer) < cfg.batch_size:
            return None
        batch, w = self.buffer.sample(cfg.batch_size, self.rng)
        target = td_target(batch.r, batch.s2, batch.done, self.online, self.target, cfg.gamma)
        q = self.online.forward(batch.s, "train").astype(np.float64)
        rows = np.arange(len(target))
        delta = q[rows, batch.a] - target
        up = np.zeros_like(q)
        up[rows, batch.a] = w * delta / len(target)      # d/dq of mean(w * delta^2 / 2)
        grads = self.online.backward(up)
        optimizer_step(self.opt, self.online.params(), grads)
        polyak_update(self.target.params(), self.online.params(), cfg.tau)
        self.buffer.update_priorities(batch.indices, delta)
        self.updates += 1
        return float(np.mean(w * delta ** 2) / 2)

    def observe(self, s, a, r, s2, done) -> float | None:
        """Store a transition, learn on schedule, decay epsilon once."""
        self.buffer.add(s, a, r, s2, done)
        self.steps += 1
        loss = None
        if self.steps % self.cfg.train_every == 0:
            loss = self.learn()
        self.schedule.step()
        return loss


# --------------------------------------------------------------------------- options


@dataclass
class OptionStep:
    """One primitive step as seen from the option executing it."""
    s: np.ndarray
    a: int
    env_reward: float
    s2: np.ndarray
    landed: Node            # abstract state (or terminal node) of s'
    env_terminal: bool      # task completion, not a time limit


def train_option_step(worker: DQNLearner, option: Option, step: OptionStep, rho: float) -> float | None:
    """Option reward, storage and one learning step for a transition option.

    The option's episode ends when the agent leaves the initiation partition or
    the task terminates.
    """
    r = option_reward(step.env_reward, option.source, step.landed, option.target, rho)
    done = step.landed != option.source or step.env_terminal
    return worker.observe(step.s, step.a, r, step.s2, done)


def relabel_transition(graph: AbstractGraph, option: Option, step: OptionStep,
                       workers: dict[int, DQNLearner]) -> int | None:
    """Credit a failed terminating step to the option that targets where it landed.

    Returns the id of the credited option, or None when nothing was relabeled.
    The caller grows the graph before calling, so the credited option exists.
    """
    if step.landed == option.source or step.landed == option.target:
        return None
    other = graph.option_for(option.source, step.landed)
    if other is None or other.id not in workers:
        return None
    r = option_reward(step.env_reward, other.source, step.landed, other.target, other.rho)
    workers[other.id].buffer.add(step.s, step.a, r, step.s2, True)
    return other.id


# --------------------------------------------------------------------------- flat baseline


@dataclass
class EpisodeStats:
    episode: int
    steps: int
    reward: float
    total_steps: int


class FlatAgent:
    """DQN-PER on primitive actions and raw environment reward."""

    def __init__(self, env, cfg: DQNConfig | None = None, seed: int = 0,
                 view: Callable[[np.ndarray], np.ndarray] | None = None):
        self.env = env
        self.view = view or (lambda o: o)
        self.learner = DQNLearner(env.obs_shape, env.n_actions, cfg, seed=seed, obs_dtype=env.obs_dtype)

    def step(self, s, a, r, s2, terminal) -> float | None:
        return self.learner.observe(s, a, r, s2, terminal)

    def run(self, budget: int, seed: int = 0) -> list[EpisodeStats]:
        env, learner = self.env, self.learner
        episodes: list[EpisodeStats] = []
        obs = self.view(env.reset(seed=seed))
        ep_steps, ep_reward = 0, 0.0
        for t in range(budget):
            a = learner.act(obs)
            nxt, r, done = env.step(a)
            nxt = self.view(nxt)
            self.step(obs, a, r, nxt, env.terminal)
            ep_steps += 1
            ep_reward += r
            obs = nxt
            if done:
                episodes.append(EpisodeStats(len(episodes), ep_steps, ep_reward, t + 1))
                obs = self.view(env.reset())
                ep_steps, ep_reward = 0, 0.0
        return episodes


def flat_agent_step(agent: FlatAgent, s, a, r, s2, terminal) -> float | None:
    return agent.step(s, a, r, s2, terminal)
