"""Experiment orchestration: configs, the pretrain -> compress -> hrl pipeline,
baselines, curve aggregation and artifact writers (CSV, PPM, JSON manifest)."""
from __future__ import annotations

import argparse
import colorsys
import configparser
import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .compression import (CompressionModel, LossWeights, compress, ground_truth_labeler, ground_truth_labels,
                          grid_observations, load_model, locality_stats, mountaincar_grid, partition_error,
                          save_model, train_compression)
from .envs import GridWorld, MountainCar, ReplayMemory, collect_trajectories, energy_pumping_policy, make_env, \
    random_policy
from .manager import Manager, ManagerConfig, load_pretrained, run_manager, transfer_state
from .worker import DQNConfig, FlatAgent

PHASES = ("pretrain", "compress", "sweep", "hrl", "transfer", "baseline", "aggregate", "render")


# --------------------------------------------------------------------------- configuration


@dataclass
class WorkerParams:
    arch: str = "conv:32:7:1,relu,fc:32,relu,fc:32,relu"
    lr: float = 0.001
    optimizer: str = "adam"
    eps_decay: float = 0.9998
    batch_size: int = 100
    polyak: float = 0.05
    gamma: float = 0.95
    buffer_size: int = 500_000
    per_alpha: float = 0.6
    per_beta: float = 0.1
    eps_start: float = 1.0
    priority_eps: float = 0.001
    train_every: int = 1


@dataclass
class ManagerParams:
    eps_decay: float = 0.995
    gamma: float = 0.95
    eps_start: float = 1.0
    explore_budget: int = 30
    vi_eps: float = 1e-6
    discounted_return: bool = False
    learn_options: bool = True
    relabel: bool = True
    shared_worker_epsilon: bool = True


@dataclass
class CompressionParams:
    arch: str = ("conv:16:1:1,bn,selu,conv:32:5:1,bn,selu,conv:32:3:1,bn,selu,fc:64,bn,selu")
    n_abstract: int = 9
    w_h: float = 0.2
    w_d: float = 0.1
    lr: float = 0.001
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    batch_size: int = 32
    iters: int = 4000
    reduction: str = "mean"


@dataclass
class ExperimentConfig:
    env: str = "NineRooms0"
    phase: str = "hrl"
    seeds: tuple = (0, 1, 2, 3, 4)
    budget: int = 100_000
    n_traj: int = 1000
    ep_len: int = 100
    policy: str = "auto"                # auto | random | energy
    labeler: str = "learned"            # learned | truth
    pretrain_env: str = ""              # no-task env used for transfer pre-training
    pretrain_budget: int = 0
    sweep_sizes: tuple = (50, 100, 200, 500, 1000)
    window: int = 100
    worker: WorkerParams = field(default_factory=WorkerParams)
    manager: ManagerParams = field(default_factory=ManagerParams)
    compression: CompressionParams = field(default_factory=CompressionParams)

    def validate(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.budget < 0 or self.n_traj < 0:
            raise ValueError("budget and n_traj must be non-negative")
        if self.policy not in ("auto", "random", "energy"):
            raise ValueError(f"unknown pre-training policy {self.policy!r}")
        if self.compression.n_abstract < 2:
            raise ValueError("n_abstract must be at least 2")
        return self

    def worker_config(self) -> DQNConfig:
        w = self.worker
        if w.optimizer != "adam":
            raise ValueError("workers use adam")
        return DQNConfig(lr=w.lr, gamma=w.gamma, batch_size=w.batch_size, tau=w.polyak, eps_start=w.eps_start,
                         eps_decay=w.eps_decay, buffer_size=w.buffer_size, alpha=w.per_alpha, beta=w.per_beta,
                         priority_eps=w.priority_eps, train_every=w.train_every, arch=_split(w.arch))

    def manager_config(self) -> ManagerConfig:
        m = self.manager
        return ManagerConfig(gamma=m.gamma, eps_start=m.eps_start, eps_decay=m.eps_decay,
                             explore_budget=m.explore_budget, vi_eps=m.vi_eps,
                             discounted_return=m.discounted_return, learn_options=m.learn_options,
                             relabel=m.relabel, shared_worker_epsilon=m.shared_worker_epsilon,
                             worker=self.worker_config())

    def to_dict(self) -> dict:
        return asdict(self)


def _split(arch: str) -> tuple:
    return tuple(a.strip() for a in arch.split(",") if a.strip())


PROFILES = {
    "full": {},
    "small": {"env": "FourRooms", "budget": 20_000, "seeds": (0, 1, 2), "pretrain_env": "FourRooms0",
              "pretrain_budget": 20_000, "compression.n_abstract": 4},
    "mountaincar": {"env": "MountainCar", "phase": "compress", "seeds": (0, 1, 2), "n_traj": 200, "ep_len": 200,
                    "compression.n_abstract": 20, "compression.w_h": 2.0, "compression.w_d": 0.1},
}

_SECTIONS = {"worker": WorkerParams, "manager": ManagerParams, "compression": CompressionParams}


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return type(default)(value.strip())


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Overrides keyed ``field`` or ``section.field`` (string values are coerced)."""
    for key, value in overrides.items():
        target = cfg
        if "." in key:
            sect, key = key.split(".", 1)
            target = getattr(cfg, sect)
        if not any(f.name == key for f in fields(target)):
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(target, key)
        setattr(target, key, _coerce(value, current) if isinstance(value, str) else value)
    return cfg


def make_config(profile: str = "full", **overrides) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    cfg = apply_overrides(ExperimentConfig(), dict(PROFILES[profile]))
    return apply_overrides(cfg, overrides).validate()


def config_to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    top = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            cp[f.name] = {k: _fmt(x) for k, x in asdict(v).items()}
        else:
            top[f.name] = _fmt(v)
    cp["experiment"] = top
    lines = []
    for sect in ["experiment", *_SECTIONS]:
        lines.append(f"[{sect}]")
        lines += [f"{k} = {v}" for k, v in cp[sect].items()]
        lines.append("")
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return str(v)


def config_from_ini(text: str, profile: str = "full") -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    overrides = {}
    for sect in cp.sections():
        for k, v in cp[sect].items():
            overrides[k if sect == "experiment" else f"{sect}.{k}"] = v
    return make_config(profile, **overrides)


def load_config(path: str | Path | None, profile: str = "full", **overrides) -> ExperimentConfig:
    cfg = config_from_ini(Path(path).read_text(), profile) if path else make_config(profile)
    return apply_overrides(cfg, overrides).validate()


# --------------------------------------------------------------------------- artifact writers


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


_BASE_PALETTE = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
                 (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
                 (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
                 (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128)]


def palette(z: int) -> tuple[int, int, int]:
    """Fixed color per abstract-state index (never black, which marks walls)."""
    if z < len(_BASE_PALETTE):
        return _BASE_PALETTE[z]
    h = (z * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.65, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def write_ppm(path: str | Path, rgb: np.ndarray):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit P6 file")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError("pixel data size does not match header")
    return pixels.reshape(h, w, 3)


def partition_map(env, label: Callable[[np.ndarray], int] | CompressionModel, has_key: bool = False) -> np.ndarray:
    """(H, W) array of labels per free cell, -1 on walls."""
    if not isinstance(env, GridWorld):
        raise ValueError("partition maps need an enumerable grid world; use mountaincar_partition_map")
    spec = env.spec
    out = np.full((spec.height, spec.width), -1, dtype=np.int64)
    cells = spec.free_cells
    obs = np.stack([env.render_state(x, y, has_key) for x, y in cells])
    if isinstance(label, CompressionModel):
        labels = label.labels(obs)
    else:
        labels = [label(o) for o in obs]
    for (x, y), z in zip(cells, labels):
        out[y, x] = z
    return out


def mountaincar_partition_map(model: CompressionModel, n: int = 100) -> np.ndarray:
    """(n, n) labels; rows are velocity (top = fastest), columns are position."""
    pts, _ = mountaincar_grid(n)
    labels = model.labels(pts).reshape(n, n)       # [position, velocity]
    return labels.T[::-1]


def labels_to_rgb(labels: np.ndarray) -> np.ndarray:
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for z in np.unique(labels):
        if z >= 0:
            rgb[labels == z] = palette(int(z))
    return rgb


def emit_partition_image(model, env, path: str | Path, has_key: bool = False) -> np.ndarray:
    if isinstance(env, MountainCar):
        labels = mountaincar_partition_map(model)
    else:
        labels = partition_map(env, model, has_key)
    write_ppm(path, labels_to_rgb(labels))
    return labels


# --------------------------------------------------------------------------- aggregation


def smooth(values: Sequence[float], window: int = 100) -> np.ndarray:
    """Trailing running mean; the first entries average over the available prefix."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class Curve:
    rows: list
    warnings: list

    header = ("episode", "mean", "std", "smoothed_mean", "smoothed_std", "n_seeds")


def aggregate_curves(per_seed: Sequence[Sequence[float]], window: int = 100) -> Curve:
    """Mean and population std across seeds, raw and after trailing smoothing."""
    if not per_seed:
        raise ValueError("need at least one seed")
    notes = []
    n = min(len(s) for s in per_seed)
    if any(len(s) != n for s in per_seed):
        notes.append(f"seed curves have lengths {[len(s) for s in per_seed]}; truncated to {n}")
        warnings.warn(notes[-1])
    raw = np.array([np.asarray(s[:n], dtype=np.float64) for s in per_seed])
    sm = np.array([smooth(r, window) for r in raw]) if n else raw
    rows = [(i, raw[:, i].mean(), raw[:, i].std(), sm[:, i].mean(), sm[:, i].std(), len(per_seed))
            for i in range(n)]
    return Curve(rows, notes)


def aggregate_files(paths: Sequence[str | Path], column: str = "reward", window: int = 100) -> Curve:
    series = []
    for p in paths:
        header, rows = read_csv(p)
        j = header.index(column)
        series.append([float(r[j]) for r in rows])
    return aggregate_curves(series, window)


# --------------------------------------------------------------------------- pipeline


EPISODE_HEADER = ("episode", "steps", "reward", "total_steps", "nodes", "edges")


def _episode_rows(records):
    return [(e.episode, e.steps, e.reward, e.total_steps, getattr(e, "nodes", 0), getattr(e, "edges", 0))
            for e in records]


def pretrain_memory(cfg: ExperimentConfig, seed: int) -> ReplayMemory:
    env = make_env(cfg.env, seed=seed)
    if cfg.n_traj < 1:
        raise ValueError("pre-training needs at least one trajectory")
    if isinstance(env, MountainCar):
        policy = random_policy(env.n_actions) if cfg.policy == "random" else energy_pumping_policy()
        return collect_trajectories(env, policy, cfg.n_traj, cfg.ep_len, seed, restart_on_done=True)
    if cfg.policy == "energy":
        raise ValueError("the energy-pumping policy only applies to MountainCar")
    return collect_trajectories(env, random_policy(env.n_actions), cfg.n_traj, cfg.ep_len, seed)


def fit_compression(cfg: ExperimentConfig, memory: ReplayMemory, seed: int):
    c = cfg.compression
    if c.optimizer != "adamw":
        raise ValueError("the compression function is trained with adamw")
    arch = _split(c.arch) if len(memory.obs_shape) == 3 else None
    return train_compression(memory, c.n_abstract, LossWeights(c.w_h, c.w_d), c.iters, c.batch_size, c.lr,
                             seed, arch=arch, weight_decay=c.weight_decay, reduction=c.reduction)


def evaluate_partition(model: CompressionModel, env) -> dict:
    if isinstance(env, MountainCar):
        pts, norm = mountaincar_grid(100)
        return locality_stats(model.labels(pts), norm)
    states, obs = grid_observations(env)
    return {"partition_error": partition_error(model.labels(obs), ground_truth_labels(env, states))}


def _labeler(cfg: ExperimentConfig, out: Path, seed: int, env):
    if cfg.labeler == "truth":
        return ground_truth_labeler(env)
    ckpt = out / f"compression_seed{seed}.ckpt"
    if not ckpt.exists():
        raise ValueError(f"phase {cfg.phase} needs a compression checkpoint at {ckpt}; run 'compress' first "
                         f"or set labeler = truth")
    return load_model(ckpt).labeler()


class Run:
    """Collects artifact paths and notes for the manifest of one invocation."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.notes: list[str] = []
        self.results: dict = {}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def manifest(self) -> Path:
        m = {"version": __version__, "phase": self.cfg.phase, "seeds": list(self.cfg.seeds),
             "config": self.cfg.to_dict(), "files": self.files, "warnings": self.notes, "results": self.results}
        p = self.out / f"manifest_{self.cfg.phase}.json"
        p.write_text(json.dumps(m, indent=2, default=_jsonable))
        return p


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return str(o)


def phase_pretrain(run: Run, seed: int):
    mem = pretrain_memory(run.cfg, seed)
    mem.save(run.path(f"replay_seed{seed}.hrlm"))
    run.results[f"seed{seed}"] = {"transitions": len(mem)}


def phase_compress(run: Run, seed: int):
    cfg = run.cfg
    replay = run.out / f"replay_seed{seed}.hrlm"
    mem = ReplayMemory.load(replay) if replay.exists() else pretrain_memory(cfg, seed)
    res = fit_compression(cfg, mem, seed)
    save_model(res.model, run.path(f"compression_seed{seed}.ckpt"))
    run.files.append(f"compression_seed{seed}.json")
    write_csv(run.path(f"loss_trace_seed{seed}.csv"), ("iteration", "L_Z", "L_H", "L_D", "total", "L_Z_mean"),
              [(i, t.l_z, t.l_h, t.l_d, t.total, t.l_z_mean) for i, t in enumerate(res.trace)])
    env = make_env(cfg.env, seed=seed)
    emit_partition_image(res.model, env, run.path(f"partition_seed{seed}.ppm"))
    if isinstance(env, GridWorld):
        states, obs = grid_observations(env)
        write_csv(run.path(f"partition_seed{seed}.csv"), ("x", "y", "has_key", "z"),
                  [(s.x, s.y, int(s.has_key), z) for s, z in zip(states, res.model.labels(obs))])
    run.results[f"seed{seed}"] = evaluate_partition(res.model, env)


def sweep_replay_size(cfg: ExperimentConfig, sizes: Sequence[int], seeds: Sequence[int]) -> list[tuple]:
    """(size, mean partition error, population std) per trajectory count."""
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if any(s < 1 for s in sizes):
        raise ValueError("every size needs at least one trajectory")
    rows = []
    for size in sizes:
        errs = []
        for seed in seeds:
            sub = replace(cfg, n_traj=size)
            res = fit_compression(sub, pretrain_memory(sub, seed), seed)
            errs.append(evaluate_partition(res.model, make_env(cfg.env, seed=seed))["partition_error"])
        rows.append((size, float(np.mean(errs)), float(np.std(errs))))
    return rows


def phase_hrl(run: Run, seed: int):
    cfg = run.cfg
    env = make_env(cfg.env, seed=seed)
    g = _labeler(cfg, run.out, seed, env)
    m = run_manager(env, g, cfg.budget, seed, cfg.manager_config())
    _emit_manager(run, m, f"hrl_seed{seed}")


def _emit_manager(run: Run, m: Manager, stem: str):
    write_csv(run.path(f"{stem}.csv"), EPISODE_HEADER, _episode_rows(m.episodes))
    m.graph.save(run.path(f"{stem}_graph.txt"))
    if m.workers:
        m.save(run.out / f"{stem}_options")
        run.files.append(f"{stem}_options/")


def phase_transfer(run: Run, seed: int):
    cfg = run.cfg
    if not cfg.pretrain_env:
        raise ValueError("transfer needs pretrain_env (a no-task layout)")
    env = make_env(cfg.env, seed=seed)
    g = _labeler(cfg, run.out, seed, env)
    opt_dir = run.out / f"pretrain_seed{seed}_options"
    if (opt_dir / "graph.txt").exists():
        graph, workers = load_pretrained(opt_dir, env, cfg.manager_config(), seed)
    else:
        pre = run_manager(make_env(cfg.pretrain_env, seed=seed), g, cfg.pretrain_budget, seed,
                          cfg.manager_config())
        _emit_manager(run, pre, f"pretrain_seed{seed}")
        graph, workers = pre.graph, pre.workers
    graph, workers = transfer_state(graph, workers)
    m = run_manager(env, g, cfg.budget, seed, cfg.manager_config(), graph, workers)
    _emit_manager(run, m, f"transfer_seed{seed}")


def phase_baseline(run: Run, seed: int):
    cfg = run.cfg
    env = make_env(cfg.env, seed=seed)
    records = FlatAgent(env, cfg.worker_config(), seed=seed).run(cfg.budget, seed)
    write_csv(run.path(f"baseline_seed{seed}.csv"), EPISODE_HEADER, _episode_rows(records))


def phase_render(run: Run, seed: int):
    cfg = run.cfg
    env = make_env(cfg.env, seed=seed)
    if cfg.labeler == "truth":
        labels = partition_map(env, ground_truth_labeler(env))
        write_ppm(run.path(f"truth_{cfg.env}.ppm"), labels_to_rgb(labels))
        return
    ckpt = run.out / f"compression_seed{seed}.ckpt"
    if not ckpt.exists():
        raise ValueError(f"render needs {ckpt}")
    emit_partition_image(load_model(ckpt), env, run.path(f"render_{cfg.env}_seed{seed}.ppm"))


def run_experiment(cfg: ExperimentConfig, out: str | Path, files: Sequence[str] = ()) -> Path:
    """Execute one phase for every seed; returns the manifest path."""
    cfg.validate()
    run = Run(cfg, out)
    if cfg.phase == "sweep":
        rows = sweep_replay_size(cfg, cfg.sweep_sizes, cfg.seeds)
        write_csv(run.path("sweep.csv"), ("size", "mean_error", "std_error"), rows)
        run.results["sweep"] = rows
    elif cfg.phase == "aggregate":
        if not files:
            raise ValueError("aggregate needs per-seed CSV files")
        curve = aggregate_files(files, window=cfg.window)
        write_csv(run.path("curve.csv"), Curve.header, curve.rows)
        run.notes += curve.warnings
    else:
        step = {"pretrain": phase_pretrain, "compress": phase_compress, "hrl": phase_hrl,
                "transfer": phase_transfer, "baseline": phase_baseline, "render": phase_render}[cfg.phase]
        for seed in cfg.seeds:
            step(run, seed)
    return run.manifest()


# --------------------------------------------------------------------------- CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partition-hrl", description=__doc__)
    sub = p.add_subparsers(dest="phase", required=True)
    for phase in PHASES:
        sp = sub.add_parser(phase, aliases=["hrl-transfer"] if phase == "transfer" else [])
        sp.add_argument("--config", help="INI file with [experiment]/[worker]/[manager]/[compression]")
        sp.add_argument("--profile", default="full", choices=sorted(PROFILES))
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--out", required=True)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. compression.iters=500")
        if phase == "aggregate":
            sp.add_argument("files", nargs="+")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = dict(kv.split("=", 1) for kv in args.set)
    overrides["phase"] = "transfer" if args.phase == "hrl-transfer" else args.phase
    if args.seeds:
        overrides["seeds"] = tuple(args.seeds)
    cfg = load_config(args.config, args.profile, **overrides)
    manifest = run_experiment(cfg, args.out, getattr(args, "files", ()))
    print(manifest)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
