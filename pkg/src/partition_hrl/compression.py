"""Learning a state-space partition from transitions.

The compression model maps an observation to a distribution over ``n_abstract``
abstract states. It is trained on three terms computed from a batch of
transitions (s, s'):

* ``loss_z``: cross-entropy between f(.|s) and f(.|s'), summed over the batch;
  small when consecutive states share an abstract state.
* ``loss_h``: negative entropy of the batch-averaged distribution over s;
  small when all abstract states are used equally.
* ``loss_d``: mean entropy of f(.|s); small when each state is assigned
  deterministically.

All logarithms are floored at ``LOG_FLOOR`` so deterministic outputs stay finite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import json
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .envs import (AGENT, HAS_KEY, TASK_CHANNELS, GridState, GridWorld, ReplayMemory,
                   enumerate_states, sample_indices)
from .nncore import Network, load_checkpoint, make_optimizer, optimizer_step, save_checkpoint, softmax

LOG_FLOOR = 1e-8

GRID_ARCH = ("conv:16:1:1", "bn", "selu", "conv:32:5:1", "bn", "selu", "conv:32:3:1", "bn", "selu",
             "fc:64", "bn", "selu")
VECTOR_ARCH = ("bn", "fc:64", "bn", "selu", "fc:64", "bn", "selu")


@dataclass(frozen=True)
class LossWeights:
    w_h: float = 0.2
    w_d: float = 0.1


GRIDWORLD_WEIGHTS = LossWeights(0.2, 0.1)
MOUNTAINCAR_WEIGHTS = LossWeights(2.0, 0.1)


# --------------------------------------------------------------------------- loss terms


def _log(p):
    return np.log(np.maximum(p, LOG_FLOOR))


def loss_z(p: np.ndarray, q: np.ndarray, reduction: str = "sum") -> float:
    """Cross-entropy of f(.|s') under f(.|s); ``p``, ``q`` are (B, |Z|) rows."""
    ce = -(p * _log(q)).sum(axis=1)
    return float(ce.sum() if reduction == "sum" else ce.mean())


def loss_h(p: np.ndarray) -> float:
    big_f = p.mean(axis=0)
    return float((big_f * _log(big_f)).sum())


def loss_d(p: np.ndarray) -> float:
    return float(-(p * _log(p)).sum(axis=1).mean())


def total_loss(p: np.ndarray, q: np.ndarray, weights: LossWeights, reduction: str = "sum") -> float:
    return loss_z(p, q, reduction) + weights.w_h * loss_h(p) + weights.w_d * loss_d(p)


@dataclass
class LossValues:
    l_z: float          # as used in the objective (sum or mean)
    l_z_mean: float
    l_h: float
    l_d: float
    total: float


def loss_and_grads(p: np.ndarray, q: np.ndarray, weights: LossWeights, reduction: str = "sum"):
    """Loss terms plus dL/dp and dL/dq for probability rows ``p`` (states s) and ``q`` (s')."""
    b = p.shape[0]
    scale = 1.0 if reduction == "sum" else 1.0 / b
    log_q = _log(q)
    log_p = _log(p)
    ce = -(p * log_q).sum(axis=1)
    big_f = p.mean(axis=0)
    log_f = _log(big_f)
    l_z = float(ce.sum() * scale)
    l_h = float((big_f * log_f).sum())
    l_d = float(-(p * log_p).sum(axis=1).mean())
    vals = LossValues(l_z, float(ce.mean()), l_h, l_d, l_z + weights.w_h * l_h + weights.w_d * l_d)

    # d(x log x)/dx is log x + 1 above the floor and log(floor) below it
    dq = np.where(q > LOG_FLOOR, -p / np.maximum(q, LOG_FLOOR), 0.0) * scale
    dp = -log_q * scale
    d_flogf = np.where(big_f > LOG_FLOOR, log_f + 1.0, log_f)
    dp = dp + weights.w_h * d_flogf[None, :] / b
    d_plogp = np.where(p > LOG_FLOOR, log_p + 1.0, log_p)
    dp = dp - weights.w_d * d_plogp / b
    return vals, dp, dq


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))


# --------------------------------------------------------------------------- model


def default_arch(obs_shape: Sequence[int]) -> tuple[str, ...]:
    return GRID_ARCH if len(obs_shape) == 3 else VECTOR_ARCH


class CompressionModel:
    """f(z | s): a network with an |Z|-way softmax head.

    Image inputs have their task-object channels cleared before the network sees
    them, so a model trained on a task-free layout applies unchanged once goals
    or doors are added.
    """

    def __init__(self, obs_shape: Sequence[int], n_abstract: int, arch: Sequence[str] | None = None,
                 seed: int = 0, dtype=np.float32):
        if n_abstract < 2:
            raise ValueError("need at least 2 abstract states")
        self.obs_shape = tuple(obs_shape)
        self.n_abstract = n_abstract
        self.arch = tuple(default_arch(obs_shape) if arch is None else arch)
        self.net = Network(self.obs_shape, list(self.arch) + [f"fc:{n_abstract}"], seed=seed, dtype=dtype)

    def prepare(self, obs: np.ndarray) -> np.ndarray:
        if len(self.obs_shape) == 3 and np.any(obs[:, TASK_CHANNELS]):
            obs = obs.copy()
            obs[:, TASK_CHANNELS] = 0
        return obs

    def logits(self, obs: np.ndarray) -> np.ndarray:
        return self.net.forward(self.prepare(np.asarray(obs)), "eval")

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return softmax(self.logits(obs).astype(np.float64))

    def labels(self, obs: np.ndarray, chunk: int = 512) -> np.ndarray:
        obs = np.asarray(obs)
        out = [np.argmax(self.logits(obs[i:i + chunk]), axis=1) for i in range(0, len(obs), chunk)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def labeler(self) -> Callable[[np.ndarray], int]:
        """Cached deterministic g(s) = argmax_z f(z|s) for single observations."""
        cache: dict[bytes, int] = {}

        def g(obs):
            key = obs.tobytes()
            z = cache.get(key)
            if z is None:
                z = cache[key] = compress(self, obs)
            return z
        return g


def save_model(model: CompressionModel, path: str | Path):
    """Checkpoint plus a JSON sidecar describing the architecture."""
    path = Path(path)
    save_checkpoint(model.net, path)
    meta = {"obs_shape": list(model.obs_shape), "n_abstract": model.n_abstract, "arch": list(model.arch)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_model(path: str | Path) -> CompressionModel:
    path = Path(path)
    meta_file = path.with_suffix(".json")
    if not path.exists() or not meta_file.exists():
        raise ValueError(f"compression checkpoint {path} (and its .json sidecar) not found")
    meta = json.loads(meta_file.read_text())
    model = CompressionModel(meta["obs_shape"], meta["n_abstract"], meta["arch"])
    load_checkpoint(model.net, path)
    return model


def compress(model: CompressionModel, obs: np.ndarray) -> int:
    """argmax_z f(z|s); ties go to the lowest index."""
    return int(np.argmax(model.logits(np.asarray(obs)[None])[0]))


def batch_loss(model: CompressionModel, s: np.ndarray, s2: np.ndarray, weights: LossWeights,
               reduction: str = "sum", backward: bool = False) -> LossValues:
    """Evaluate the objective on a batch (train-mode forward, so batch-norm uses
    batch statistics). With ``backward`` the parameter gradients are filled."""
    b = len(s)
    x = model.prepare(np.concatenate([np.asarray(s), np.asarray(s2)]))
    logits = model.net.forward(x, "train").astype(np.float64)
    probs = softmax(logits)
    p, q = probs[:b], probs[b:]
    vals, dp, dq = loss_and_grads(p, q, weights, reduction)
    if backward:
        up = np.concatenate([softmax_backward(p, dp), softmax_backward(q, dq)])
        model.net.backward(up)
    else:
        model.net._out = None
    return vals


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: CompressionModel
    trace: list[LossValues] = field(default_factory=list)


def train_compression(memory: ReplayMemory, n_abstract: int, weights: LossWeights = GRIDWORLD_WEIGHTS,
                      iters: int = 4000, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                      arch: Sequence[str] | None = None, weight_decay: float = 0.01,
                      reduction: str = "mean") -> TrainResult:
    """AdamW on the three-term objective over uniformly sampled transitions.

    ``reduction="mean"`` divides the cross-entropy term by the batch size so the
    learning rate does not depend on it; ``"sum"`` keeps the plain sum.
    """
    if n_abstract < 2:
        raise ValueError("need at least 2 abstract states")
    if len(memory) == 0:
        raise ValueError("replay memory is empty")
    rng = np.random.default_rng(seed)
    model = CompressionModel(memory.obs_shape, n_abstract, arch, seed=seed)
    opt = make_optimizer("adamw", lr, weight_decay)
    trace = []
    for _ in range(iters):
        idx = sample_indices(memory, batch_size, rng)
        vals = batch_loss(model, memory.s[idx], memory.s2[idx], weights, reduction, backward=True)
        optimizer_step(opt, model.net.params(), model.net.grads())
        trace.append(vals)
    return TrainResult(model, trace)


# --------------------------------------------------------------------------- evaluation


def partition_error(learned: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of states mislabeled under the best one-to-one label matching.

    States whose truth label is negative are ignored. Unequal label counts are
    handled by the rectangular assignment (surplus labels match nothing).
    """
    learned = np.asarray(learned)
    truth = np.asarray(truth)
    if learned.shape != truth.shape:
        raise ValueError("label arrays must cover the same states")
    keep = truth >= 0
    learned, truth = learned[keep], truth[keep]
    if len(truth) == 0:
        return 0.0
    _, li = np.unique(learned, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    conf = np.zeros((li.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(conf, (li, ti), 1)
    rows, cols = linear_sum_assignment(conf, maximize=True)
    return 1.0 - conf[rows, cols].sum() / len(truth)


def grid_observations(env: GridWorld, states: Sequence[GridState] | None = None) -> tuple[list[GridState], np.ndarray]:
    states = list(states) if states is not None else enumerate_states(env)
    obs = np.stack([env.render_state(s.x, s.y, s.has_key) for s in states])
    return states, obs


def ground_truth_labels(env: GridWorld, states: Sequence[GridState]) -> np.ndarray:
    """Rooms for room layouts (doorway cells -> -1, ignored); has-key bit otherwise."""
    spec = env.spec
    if spec.wall_xs:
        return np.array([-1 if (s.x, s.y) in spec.doorways else spec.room_of(s.x, s.y) for s in states])
    if spec.key is not None:
        return np.array([int(s.has_key) for s in states])
    raise ValueError(f"no ground-truth partition defined for {spec.name}")


def grid_partition_error(model: CompressionModel, env: GridWorld) -> float:
    states, obs = grid_observations(env)
    return partition_error(model.labels(obs), ground_truth_labels(env, states))


def ground_truth_labeler(env: GridWorld) -> Callable[[np.ndarray], int]:
    """g(s) from the layout itself: room index, or the has-key bit for key worlds."""
    spec = env.spec
    if spec.wall_xs:
        table = {}
        for x, y in spec.free_cells:
            table[(x, y)] = spec.room_of(x, y)

        def g(obs):
            y, x = np.unravel_index(np.argmax(obs[AGENT]), obs[AGENT].shape)
            return table[(int(x), int(y))]
        return g
    if spec.key is not None:
        return lambda obs: int(obs[HAS_KEY, 0, 0])
    raise ValueError(f"no ground-truth partition defined for {spec.name}")


def mountaincar_grid(n: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """An n x n grid over (position, velocity); returns (points, normalized points in [0,1]^2)."""
    pos = np.linspace(-1.2, 0.6, n)
    vel = np.linspace(-0.07, 0.07, n)
    pp, vv = np.meshgrid(pos, vel, indexing="ij")
    pts = np.stack([pp.ravel(), vv.ravel()], axis=1).astype(np.float32)
    norm = np.stack([(pp.ravel() + 1.2) / 1.8, (vv.ravel() + 0.07) / 0.14], axis=1)
    return pts, norm


def locality_stats(labels: np.ndarray, points: np.ndarray) -> dict:
    """Occupancy and within- vs global variance of ``points`` under ``labels``."""
    global_var = points.var(axis=0).sum()
    within = []
    for z in np.unique(labels):
        pts = points[labels == z]
        within.append(pts.var(axis=0).sum())
    return {"occupied": int(len(within)), "mean_within_var": float(np.mean(within)),
            "global_var": float(global_var)}
