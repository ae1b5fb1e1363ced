"""The manager loop: grows the abstract graph online, dispatches options, trains
their workers and replans by value iteration after every abstract transition."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .envs import task_free_view
from .nncore import load_checkpoint, save_checkpoint
from .smdp import (EXPLORE, TRANSITION, AbstractGraph, Node, best_option, is_terminal,
                   option_reward, terminal_node, value_iteration)
from .worker import DQNConfig, DQNLearner, EpsilonSchedule, OptionStep, relabel_transition, train_option_step

Labeler = Callable[[np.ndarray], Node]


@dataclass
class ManagerConfig:
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_decay: float = 0.995
    eps_min: float = 0.0
    explore_budget: int = 30
    vi_eps: float = 1e-6
    vi_max_sweeps: int = 10_000
    discounted_return: bool = False
    learn_options: bool = True
    relabel: bool = True
    shared_worker_epsilon: bool = True    # one worker decay schedule, advanced once per primitive step
    worker: DQNConfig = field(default_factory=DQNConfig)


@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    reward: float
    total_steps: int
    nodes: int
    edges: int


def _grid_view(obs):
    return task_free_view(obs) if obs.ndim == 3 else obs


class Manager:
    """Owns the graph, Q-table, option workers and the episode loop.

    ``g`` maps an observation to an abstract state. Terminal task states are
    mapped to ``terminal:<event>`` nodes instead.
    """

    def __init__(self, env, g: Labeler, cfg: ManagerConfig | None = None, seed: int = 0,
                 graph: AbstractGraph | None = None, workers: dict[int, DQNLearner] | None = None,
                 view: Callable[[np.ndarray], np.ndarray] = _grid_view):
        self.env = env
        self.g = g
        self.cfg = cfg or ManagerConfig()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.graph = graph if graph is not None else AbstractGraph()
        self.workers: dict[int, DQNLearner] = dict(workers or {})
        self.view = view
        self.q: dict[int, float] = {o: 0.0 for o in self.graph.options}
        self.decisions = 0
        self.total_steps = 0
        self.episodes: list[EpisodeRecord] = []
        self.option_log: list[tuple[int, Node]] = []   # (option, partition of the state it was picked in)
        self._worker_seed = np.random.SeedSequence(seed)
        w = self.cfg.worker
        shared = [wk.schedule for wk in self.workers.values()]
        self.worker_schedule = shared[0] if shared else EpsilonSchedule(w.eps_start, w.eps_decay, w.eps_min)

    # -- policy -----------------------------------------------------------

    @property
    def epsilon(self) -> float:
        return max(self.cfg.eps_min, self.cfg.eps_start * self.cfg.eps_decay ** self.decisions)

    def get_option(self, z: Node) -> int:
        oid = best_option(self.q, self.graph, z, self.epsilon, self.rng)
        self.decisions += 1
        self.option_log.append((oid, z))
        return oid

    def update_policy(self, oid: int, ret: float, landed: Node) -> dict[int, float]:
        self.graph.record_option_outcome(oid, ret, landed)
        self.q = value_iteration(self.graph, self.cfg.gamma, self.cfg.vi_eps, self.cfg.vi_max_sweeps)
        return self.q

    # -- graph growth -----------------------------------------------------

    def _new_worker(self) -> DQNLearner:
        seed = int(self._worker_seed.spawn(1)[0].generate_state(1)[0])
        schedule = self.worker_schedule if self.cfg.shared_worker_epsilon else None
        return DQNLearner(self.env.obs_shape, self.env.n_actions, self.cfg.worker, seed=seed,
                          obs_dtype=self.env.obs_dtype, schedule=schedule)

    def _grow(self, z: Node, z2: Node):
        for oid in self.graph.observe_transition(z, z2):
            if self.graph.options[oid].kind == TRANSITION and self.cfg.learn_options:
                self.workers[oid] = self._new_worker()

    def _enter(self, z: Node):
        self.graph.add_node(z)

    # -- acting -----------------------------------------------------------

    def _act(self, oid: int, obs: np.ndarray) -> int:
        opt = self.graph.options[oid]
        worker = self.workers.get(oid)
        if opt.kind == EXPLORE or worker is None:
            return int(self.rng.integers(self.env.n_actions))
        return worker.act(self.view(obs))

    def _label(self, obs) -> Node:
        return self.g(obs)

    def run(self, budget: int) -> list[EpisodeRecord]:
        """Run the manager for ``budget`` primitive steps (episodes restart on done)."""
        env, cfg = self.env, self.cfg
        obs = env.reset(seed=self.seed)
        z = self._label(obs)
        self._enter(z)
        oid, ret, k = None, 0.0, 0
        ep_steps, ep_reward = 0, 0.0
        for _ in range(budget):
            if oid is None:
                oid, ret, k = self.get_option(z), 0.0, 0
            opt = self.graph.options[oid]
            a = self._act(oid, obs)
            obs2, r, done = env.step(a)
            z2 = terminal_node(env.event) if env.terminal else self._label(obs2)
            if z2 != z:
                self._grow(z, z2)
            self._train(opt, obs, a, r, obs2, z, z2, env.terminal)
            if self.cfg.shared_worker_epsilon and (opt.kind != TRANSITION or not self.cfg.learn_options):
                self.worker_schedule.step()     # the worker clock advances on every primitive step
            ret += (cfg.gamma ** k) * r if cfg.discounted_return else r
            k += 1
            self.total_steps += 1
            ep_steps += 1
            ep_reward += r

            if z2 != z:
                self.update_policy(oid, ret, z2)
                oid = None if (done or is_terminal(z2)) else self.get_option(z2)
                ret, k = 0.0, 0
            elif opt.kind == EXPLORE and k >= cfg.explore_budget:
                self.update_policy(oid, ret, z)
                oid = None if done else self.get_option(z)
                ret, k = 0.0, 0
            obs, z = obs2, z2

            if done:
                self.graph.end_episode()
                self.episodes.append(EpisodeRecord(len(self.episodes), ep_steps, ep_reward, self.total_steps,
                                                   len(self.graph.nodes), len(self.graph.edges)))
                obs = env.reset()
                z = self._label(obs)
                self._enter(z)
                oid, ret, k = None, 0.0, 0
                ep_steps, ep_reward = 0, 0.0
        return self.episodes

    def _train(self, opt, s, a, r, s2, z, z2, terminal):
        if not self.cfg.learn_options:
            return
        step = OptionStep(self.view(s), a, r, self.view(s2), z2, terminal)
        if opt.kind == TRANSITION:
            train_option_step(self.workers[opt.id], opt, step, opt.rho)
            if self.cfg.relabel:
                relabel_transition(self.graph, opt, step, self.workers)
        elif z2 != z:
            # a random exploration step that crossed into z2 is a success sample for o_{z,z2}
            target = self.graph.option_for(z, z2)
            if target is not None and target.id in self.workers:
                r2 = option_reward(r, z, z2, z2, target.rho)
                self.workers[target.id].buffer.add(step.s, a, r2, step.s2, True)

    # -- persistence ------------------------------------------------------

    def save(self, directory: str | Path):
        """Graph text file plus one checkpoint per option worker."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.graph.save(d / "graph.txt")
        for oid, w in self.workers.items():
            save_checkpoint(w.online, d / f"option_{oid}.ckpt")
        (d / "schedule.json").write_text(json.dumps({"decays": self.worker_schedule.decays}))


def load_pretrained(directory: str | Path, env, cfg: ManagerConfig | None = None,
                    seed: int = 0) -> tuple[AbstractGraph, dict[int, DQNLearner]]:
    """Load a saved graph and option workers, checking they belong together."""
    cfg = cfg or ManagerConfig()
    d = Path(directory)
    graph_file = d / "graph.txt"
    if not graph_file.exists():
        raise ValueError(f"no graph file in {d}")
    graph = AbstractGraph.load(graph_file)
    trans = sorted(o.id for o in graph.options.values() if o.kind == TRANSITION)
    files = {int(p.stem.split("_")[1]) for p in d.glob("option_*.ckpt")}
    if cfg.learn_options and set(trans) != files:
        raise ValueError(f"checkpoints {sorted(files)} do not match transition options {trans}")
    workers = {}
    sched_file = d / "schedule.json"
    schedule = EpsilonSchedule(cfg.worker.eps_start, cfg.worker.eps_decay, cfg.worker.eps_min)
    if sched_file.exists():
        schedule.decays = int(json.loads(sched_file.read_text())["decays"])
    for oid in sorted(files & set(trans)):
        w = DQNLearner(env.obs_shape, env.n_actions, cfg.worker, seed=seed + oid, obs_dtype=env.obs_dtype,
                       schedule=schedule if cfg.shared_worker_epsilon else None)
        load_checkpoint(w.online, d / f"option_{oid}.ckpt")
        w.target = w.online.clone()
        workers[oid] = w
    return graph, workers


def transfer_state(graph: AbstractGraph, workers: dict[int, DQNLearner]):
    """Graph and workers for a new task: terminal parts dropped, option ids remapped."""
    new_graph, remap = graph.for_transfer()
    return new_graph, {remap[o]: w for o, w in workers.items() if o in remap}


def run_manager(env, g: Labeler, budget: int, seed: int = 0, cfg: ManagerConfig | None = None,
                graph: AbstractGraph | None = None, workers: dict[int, DQNLearner] | None = None) -> Manager:
    m = Manager(env, g, cfg, seed, graph, workers)
    m.run(budget)
    return m


def transfer_run(graph: AbstractGraph, workers: dict[int, DQNLearner], envs: Sequence, g: Labeler,
                 budget: int, seed: int = 0, cfg: ManagerConfig | None = None) -> list[Manager]:
    """Run each task env starting from the pretrained graph and options with Q reset to zero.

    Option policies keep training online; every task starts from the pretrained
    state, not from the previous task.
    """
    runs = []
    for i, env in enumerate(envs):
        new_graph, new_workers = transfer_state(graph, copy.deepcopy(workers))    # keeps shared schedules shared
        runs.append(run_manager(env, g, budget, seed + i, cfg, new_graph, new_workers))
    return runs


def exploration_rollout(env, g: Labeler, budget: int, rng: np.random.Generator) -> list[tuple]:
    """Uniform random actions until g changes, the episode ends or ``budget`` steps pass.

    Returns the (s, a, r, s') segment; the env must already be reset.
    """
    obs = env.observe()
    z = g(obs)
    segment = []
    for _ in range(budget):
        a = int(rng.integers(env.n_actions))
        obs2, r, done = env.step(a)
        segment.append((obs, a, r, obs2))
        obs = obs2
        if done or g(obs2) != z:
            break
    return segment


def steps_to_first_success(records: Sequence, key: str = "reward") -> int | None:
    """Total steps elapsed when the first rewarded episode ended (None if never)."""
    for rec in records:
        if getattr(rec, key) > 0:
            return rec.total_steps
    return None


def episodes_to_first_success(records: Sequence) -> int | None:
    for rec in records:
        if rec.reward > 0:
            return rec.episode + 1
    return None
