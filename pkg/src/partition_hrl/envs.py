"""Gridworlds (KeyDoor, NineRooms, FourRooms), MountainCar, replay memory.

Grid coordinates are (x, y) with x the column and y the row; (0, 0) is the
top-left wall corner. Actions are 0=up, 1=down, 2=left, 3=right.

Grid observations are uint8 images of shape (5, H, W):

    0 wall, 1 agent, 2 key (until collected), 3 door / goal, 4 has-key plane
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np

UP, DOWN, LEFT, RIGHT = range(4)
MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

WALL, AGENT, KEY, GOAL, HAS_KEY = range(5)
N_CHANNELS = 5
TASK_CHANNELS = (GOAL,)


class EpisodeOver(RuntimeError):
    """Raised when stepping an environment whose episode has ended."""


# --------------------------------------------------------------------------- grid specs


@dataclass(frozen=True)
class GridSpec:
    name: str
    width: int
    height: int
    walls: frozenset  # of (x, y)
    start: tuple[int, int] | None = None     # None -> uniformly random free cell
    key: tuple[int, int] | None = None
    door: tuple[int, int] | None = None
    goal: tuple[int, int] | None = None
    max_steps: int = 100
    # room bookkeeping for room-structured layouts: wall column / row positions
    wall_xs: tuple[int, ...] = ()
    wall_ys: tuple[int, ...] = ()
    doorways: frozenset = frozenset()

    def __post_init__(self):
        if self.width < 3 or self.height < 3:
            raise ValueError("grid must be at least 3x3")
        for label, cell in (("start", self.start), ("key", self.key), ("door", self.door), ("goal", self.goal)):
            if cell is None:
                continue
            x, y = cell
            if not (0 <= x < self.width and 0 <= y < self.height) or cell in self.walls:
                raise ValueError(f"{self.name}: {label} {cell} is not a free cell")

    @property
    def free_cells(self) -> list[tuple[int, int]]:
        return [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in self.walls]

    @property
    def has_task(self) -> bool:
        return self.door is not None or self.goal is not None

    def without_task(self, name: str | None = None, **kw) -> "GridSpec":
        return replace(self, name=name or self.name + "-notask", door=None, goal=None, **kw)

    def room_of(self, x: int, y: int) -> int:
        """Index of the room containing (x, y), row-major. Doorway cells in a
        vertical wall belong to the room on their left, in a horizontal wall to
        the room above."""
        if not self.wall_xs:
            raise ValueError(f"{self.name} has no room structure")
        col = sum(1 for wx in self.wall_xs[1:-1] if x >= wx)
        row = sum(1 for wy in self.wall_ys[1:-1] if y >= wy)
        if x in self.wall_xs[1:-1]:
            col -= 1
        if y in self.wall_ys[1:-1]:
            row -= 1
        return row * (len(self.wall_xs) - 1) + col

    @property
    def n_rooms(self) -> int:
        return (len(self.wall_xs) - 1) * (len(self.wall_ys) - 1)


def _border(width, height):
    return {(x, y) for x in range(width) for y in range(height)
            if x in (0, width - 1) or y in (0, height - 1)}


def rooms_layout(name: str, wall_xs: tuple[int, ...], wall_ys: tuple[int, ...],
                 doorways: dict[tuple[str, int, int], int] | None = None, **kw) -> GridSpec:
    """Rectangular rooms separated by one-cell walls.

    ``wall_xs``/``wall_ys`` include the outer walls, e.g. (0, 6, 12, 18).
    Every shared wall segment gets a single doorway, centred unless
    ``doorways`` maps the segment ("x" or "y", wall coordinate, segment index)
    to a position along the wall.
    """
    width, height = wall_xs[-1] + 1, wall_ys[-1] + 1
    walls = _border(width, height)
    for wx in wall_xs[1:-1]:
        walls |= {(wx, y) for y in range(height)}
    for wy in wall_ys[1:-1]:
        walls |= {(x, wy) for x in range(width)}
    doorways = dict(doorways or {})
    holes = set()
    # doorways in vertical walls, one per row segment
    for wx in wall_xs[1:-1]:
        for i, (lo, hi) in enumerate(zip(wall_ys[:-1], wall_ys[1:])):
            y = doorways.get(("x", wx, i), (lo + hi) // 2)
            holes.add((wx, y))
    for wy in wall_ys[1:-1]:
        for i, (lo, hi) in enumerate(zip(wall_xs[:-1], wall_xs[1:])):
            x = doorways.get(("y", wy, i), (lo + hi) // 2)
            holes.add((x, wy))
    walls -= holes
    return GridSpec(name=name, width=width, height=height, walls=frozenset(walls),
                    wall_xs=tuple(wall_xs), wall_ys=tuple(wall_ys), doorways=frozenset(holes), **kw)


NINE_ROOMS_WALLS = (0, 6, 12, 18)
FOUR_ROOMS_WALLS = (0, 4, 8)


def _keydoor(name, door, max_steps, start=(1, 1)):
    walls = frozenset(_border(10, 10))
    return GridSpec(name=name, width=10, height=10, walls=walls, start=start, key=(4, 3),
                    door=door, max_steps=max_steps)


def _build_specs() -> dict[str, GridSpec]:
    nine = NINE_ROOMS_WALLS
    four = FOUR_ROOMS_WALLS
    specs = [
        _keydoor("KeyDoor0", None, 100),
        _keydoor("KeyDoor", (8, 1), 40),
        rooms_layout("NineRooms0", nine, nine, max_steps=100),
        rooms_layout("NineRooms1", nine, nine, start=(1, 1), goal=(9, 3), max_steps=200),
        rooms_layout("NineRooms2", nine, nine, start=(1, 1), goal=(9, 9), max_steps=200),
        rooms_layout("NineRooms3", nine, nine, start=(1, 1), goal=(17, 17), max_steps=200),
        # imbalanced geometries: interior walls moved off-centre
        rooms_layout("NineRooms0-wide", (0, 4, 12, 18), nine, max_steps=100),
        rooms_layout("NineRooms0-skew", (0, 4, 10, 18), (0, 8, 12, 18), max_steps=100),
        rooms_layout("NineRooms0-doors", nine, nine, max_steps=100,
                     doorways={("x", 6, 0): 1, ("x", 12, 2): 17, ("y", 6, 1): 11}),
        rooms_layout("FourRooms0", four, four, max_steps=100),
        rooms_layout("FourRooms", four, four, start=(1, 1), goal=(7, 7), max_steps=100),
    ]
    return {s.name: s for s in specs}


GRID_SPECS = _build_specs()


# --------------------------------------------------------------------------- grid env


class GridState(NamedTuple):
    x: int
    y: int
    has_key: bool


class GridWorld:
    """Deterministic gridworld. ``reset`` is a pure function of (spec, seed)."""

    n_actions = 4
    obs_dtype = np.uint8

    def __init__(self, spec: GridSpec | str, seed: int | None = None):
        self.spec = GRID_SPECS[spec] if isinstance(spec, str) else spec
        self.obs_shape = (N_CHANNELS, self.spec.height, self.spec.width)
        self._base = np.zeros(self.obs_shape, dtype=np.uint8)
        for x, y in self.spec.walls:
            self._base[WALL, y, x] = 1
        self._free = self.spec.free_cells
        self.rng = np.random.default_rng(seed)
        self.done = True
        self.terminal = False
        self.event: str | None = None
        self.steps = 0
        self.pos = (1, 1)
        self.has_key = False

    @property
    def state(self) -> GridState:
        return GridState(self.pos[0], self.pos[1], self.has_key)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if self.spec.start is not None:
            self.pos = self.spec.start
        else:
            self.pos = self._free[self.rng.integers(len(self._free))]
        self.has_key = False
        self.steps = 0
        self.done = False
        self.terminal = False
        self.event = None
        return self.observe()

    def set_state(self, state: GridState):
        """Place the agent directly; used for enumeration and rendering."""
        if (state.x, state.y) in self.spec.walls:
            raise ValueError(f"{(state.x, state.y)} is a wall")
        self.pos = (state.x, state.y)
        self.has_key = bool(state.has_key)
        self.done = False
        self.terminal = False
        self.steps = 0
        return self.observe()

    def render_state(self, x: int, y: int, has_key: bool = False) -> np.ndarray:
        obs = self._base.copy()
        obs[AGENT, y, x] = 1
        if self.spec.key is not None and not has_key:
            kx, ky = self.spec.key
            obs[KEY, ky, kx] = 1
        for cell in (self.spec.door, self.spec.goal):
            if cell is not None:
                obs[GOAL, cell[1], cell[0]] = 1
        if has_key:
            obs[HAS_KEY] = 1
        return obs

    def observe(self) -> np.ndarray:
        return self.render_state(self.pos[0], self.pos[1], self.has_key)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeOver("step() called on a finished episode; call reset()")
        if action not in MOVES:
            raise ValueError(f"invalid action {action}")
        dx, dy = MOVES[action]
        nxt = (self.pos[0] + dx, self.pos[1] + dy)
        if nxt not in self.spec.walls:
            self.pos = nxt
        self.steps += 1
        reward = 0.0
        spec = self.spec
        if spec.key is not None and not self.has_key and self.pos == spec.key:
            self.has_key = True
        if spec.door is not None and self.pos == spec.door and self.has_key:
            reward, self.terminal, self.event = 1.0, True, "door"
        elif spec.goal is not None and self.pos == spec.goal:
            reward, self.terminal, self.event = 1.0, True, "goal"
        self.done = self.terminal or self.steps >= spec.max_steps
        return self.observe(), reward, self.done


def enumerate_states(env: GridWorld) -> list[GridState]:
    """Every reachable (x, y, has_key) state of a gridworld."""
    key_flags = (False, True) if env.spec.key is not None else (False,)
    return [GridState(x, y, k) for k in key_flags for (x, y) in env.spec.free_cells]


def task_free_view(obs: np.ndarray) -> np.ndarray:
    """Copy of a grid observation with task-object channels cleared."""
    out = np.array(obs, copy=True)
    out[..., TASK_CHANNELS, :, :] = 0
    return out


# --------------------------------------------------------------------------- mountain car


class MountainCar:
    """Classic deterministic MountainCar: 3 actions, reward -1 per step."""

    n_actions = 3
    obs_dtype = np.float32
    obs_shape = (2,)
    min_position, max_position = -1.2, 0.6
    max_speed = 0.07
    goal_position = 0.5
    force, gravity = 0.001, 0.0025

    def __init__(self, max_steps: int = 200, seed: int | None = None):
        self.max_steps = max_steps
        self.rng = np.random.default_rng(seed)
        self.position, self.velocity = -0.5, 0.0
        self.steps = 0
        self.done = True
        self.terminal = False
        self.event: str | None = None

    @classmethod
    def dynamics(cls, position: float, velocity: float, action: int) -> tuple[float, float, float, bool]:
        """One deterministic transition; returns (position', velocity', reward, at_goal)."""
        if action not in (0, 1, 2):
            raise ValueError(f"invalid action {action}")
        velocity += (action - 1) * cls.force - math.cos(3 * position) * cls.gravity
        velocity = min(max(velocity, -cls.max_speed), cls.max_speed)
        position += velocity
        position = min(max(position, cls.min_position), cls.max_position)
        if position == cls.min_position and velocity < 0:
            velocity = 0.0
        return position, velocity, -1.0, position >= cls.goal_position

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.position = float(self.rng.uniform(-0.6, -0.4))
        self.velocity = 0.0
        self.steps = 0
        self.done = False
        self.terminal = False
        self.event = None
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.array([self.position, self.velocity], dtype=np.float32)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeOver("step() called on a finished episode; call reset()")
        self.position, self.velocity, reward, at_goal = self.dynamics(self.position, self.velocity, action)
        self.steps += 1
        if at_goal:
            self.terminal, self.event = True, "goal"
        self.done = at_goal or self.steps >= self.max_steps
        return self.observe(), reward, self.done


def mountaincar_step(state: tuple[float, float], action: int) -> tuple[tuple[float, float], float, bool]:
    position, velocity, reward, done = MountainCar.dynamics(state[0], state[1], action)
    return (position, velocity), reward, done


def make_env(name: str, seed: int | None = None, **overrides):
    if name == "MountainCar":
        return MountainCar(seed=seed, **overrides)
    if name not in GRID_SPECS:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(GRID_SPECS) + ['MountainCar']}")
    spec = GRID_SPECS[name]
    if overrides:
        spec = replace(spec, **overrides)
    return GridWorld(spec, seed=seed)


# --------------------------------------------------------------------------- policies


def random_policy(n_actions: int) -> Callable:
    def act(env, obs, rng):
        return int(rng.integers(n_actions))
    return act


def energy_pumping_policy(noise: float = 0.2) -> Callable:
    """Push in the direction of motion, with ``noise`` probability of a random action."""
    def act(env, obs, rng):
        if rng.random() < noise:
            return int(rng.integers(3))
        return 2 if obs[1] >= 0 else 0
    return act


# --------------------------------------------------------------------------- replay memory


class Transition(NamedTuple):
    s: np.ndarray
    a: int
    r: float
    s2: np.ndarray
    done: bool


@dataclass
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.a)

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield Transition(self.s[i], int(self.a[i]), float(self.r[i]), self.s2[i], bool(self.done[i]))


class ReplayMemory:
    """FIFO ring buffer of transitions with lazily grown storage."""

    def __init__(self, capacity: int, obs_shape: tuple[int, ...], obs_dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs_shape = tuple(obs_shape)
        self.obs_dtype = np.dtype(obs_dtype)
        self._alloc = 0
        self.s = self.s2 = None
        self.a = np.zeros(0, dtype=np.int64)
        self.r = np.zeros(0, dtype=np.float32)
        self.done = np.zeros(0, dtype=bool)
        self.stamp = np.zeros(0, dtype=np.int64)   # insertion counter of each slot
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def _grow(self, need):
        new = min(self.capacity, max(need, 2 * self._alloc, 1024))
        def grow(arr, shape, dtype):
            out = np.zeros((new,) + shape, dtype=dtype)
            if arr is not None and self._alloc:
                out[:self._alloc] = arr[:self._alloc]
            return out
        self.s = grow(self.s, self.obs_shape, self.obs_dtype)
        self.s2 = grow(self.s2, self.obs_shape, self.obs_dtype)
        self.a = grow(self.a, (), np.int64)
        self.r = grow(self.r, (), np.float32)
        self.done = grow(self.done, (), bool)
        self.stamp = grow(self.stamp, (), np.int64)
        self._alloc = new

    def add(self, s, a, r, s2, done) -> int:
        i = self.inserted % self.capacity
        if i >= self._alloc:
            self._grow(i + 1)
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = done
        self.stamp[i] = self.inserted
        self.inserted += 1
        return i

    def batch(self, idx: np.ndarray) -> TransitionBatch:
        idx = np.asarray(idx, dtype=np.int64)
        return TransitionBatch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx], idx)

    def all(self) -> TransitionBatch:
        return self.batch(np.arange(len(self)))

    def __iter__(self) -> Iterator[Transition]:
        return iter(self.all())

    # serialization ----------------------------------------------------------------------
    MAGIC = b"HRLM"
    VERSION = 1

    def save(self, path: str | Path):
        """Header: magic, u32 version, u64 count, u32 dtype code, u32 ndim, u32 dims.
        Records in insertion order: s, i32 action, f32 reward, s', u8 done."""
        order = np.argsort(self.stamp[:len(self)], kind="stable")
        code = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1}[self.obs_dtype]
        rec = np.dtype([("s", self.obs_dtype, self.obs_shape), ("a", "<i4"), ("r", "<f4"),
                        ("s2", self.obs_dtype, self.obs_shape), ("done", "u1")])
        data = np.zeros(len(order), dtype=rec)
        data["s"], data["a"], data["r"] = self.s[order], self.a[order], self.r[order]
        data["s2"], data["done"] = self.s2[order], self.done[order]
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<IQII", self.VERSION, len(order), code, len(self.obs_shape)))
            fh.write(struct.pack(f"<{len(self.obs_shape)}I", *self.obs_shape))
            fh.write(data.tobytes())

    @classmethod
    def load(cls, path: str | Path, capacity: int | None = None) -> "ReplayMemory":
        raw = Path(path).read_bytes()
        if raw[:4] != cls.MAGIC:
            raise ValueError(f"{path}: not a replay memory file")
        version, count, code, ndim = struct.unpack_from("<IQII", raw, 4)
        if version != cls.VERSION:
            raise ValueError(f"{path}: unsupported replay memory version {version}")
        off = 4 + struct.calcsize("<IQII")
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dtype = {0: np.dtype(np.uint8), 1: np.dtype(np.float32)}[code]
        rec = np.dtype([("s", dtype, shape), ("a", "<i4"), ("r", "<f4"), ("s2", dtype, shape), ("done", "u1")])
        data = np.frombuffer(raw, dtype=rec, count=count, offset=off)
        mem = cls(capacity or max(count, 1), shape, dtype)
        mem._grow(max(count, 1))
        n = count
        mem.s[:n], mem.a[:n], mem.r[:n] = data["s"], data["a"], data["r"]
        mem.s2[:n], mem.done[:n] = data["s2"], data["done"].astype(bool)
        mem.stamp[:n] = np.arange(n)
        mem.inserted = n
        return mem


def collect_trajectories(env, policy: Callable, n_traj: int, ep_len: int, seed: int,
                         capacity: int | None = None, restart_on_done: bool = False) -> ReplayMemory:
    """Roll out ``n_traj`` episodes of at most ``ep_len`` steps into a memory.

    The episode step cap is raised to ``ep_len`` for the duration of the
    collection. With ``restart_on_done`` an episode that terminates early is
    reset in place, so every trajectory contributes exactly ``ep_len`` steps.
    """
    if ep_len < 1:
        raise ValueError("ep_len must be >= 1")
    rng = np.random.default_rng(seed)
    mem = ReplayMemory(capacity or max(n_traj * ep_len, 1), env.obs_shape, env.obs_dtype)
    for _ in range(n_traj):
        with _step_cap(env, ep_len):
            obs = env.reset(seed=int(rng.integers(2**31)))
            for _t in range(ep_len):
                a = policy(env, obs, rng)
                obs2, r, done = env.step(a)
                mem.add(obs, a, r, obs2, done)
                obs = obs2
                if done:
                    if restart_on_done and env.terminal:
                        obs = env.reset(seed=int(rng.integers(2**31)))
                        continue
                    break
    return mem


class _step_cap:
    """Temporarily set an environment's episode step cap."""

    def __init__(self, env, cap):
        self.env, self.cap = env, cap

    def __enter__(self):
        if isinstance(self.env, GridWorld):
            self.old = self.env.spec
            self.env.spec = replace(self.env.spec, max_steps=self.cap)
        else:
            self.old = self.env.max_steps
            self.env.max_steps = self.cap

    def __exit__(self, *exc):
        if isinstance(self.env, GridWorld):
            self.env.spec = self.old
        else:
            self.env.max_steps = self.old


def sample_indices(memory: ReplayMemory, k: int, rng: np.random.Generator) -> np.ndarray:
    if len(memory) == 0:
        raise ValueError("cannot sample from an empty replay memory")
    return rng.integers(0, len(memory), size=k)


def sample_batch(memory: ReplayMemory, k: int, rng: np.random.Generator) -> TransitionBatch:
    """``k`` uniform draws with replacement."""
    return memory.batch(sample_indices(memory, k, rng))
