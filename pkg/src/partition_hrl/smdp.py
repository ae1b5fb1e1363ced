"""Abstract-state graph, option bookkeeping, SMDP model estimates and value iteration.

Nodes are integer abstract states or string terminal identifiers (``"terminal:goal"``).
Every non-terminal node owns one exploration option; every directed edge (z, z')
owns one transition option. Option ids are integers in creation order.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

Node = Hashable
EXPLORE = "explore"
TRANSITION = "transition"
CONTROL_HORIZON = 4


@dataclass
class Option:
    id: int
    kind: str
    source: Node
    target: Node | None = None
    n: int = 0
    reward_sum: float = 0.0
    successes: int = 0          # controllability evidence collected after this option succeeded
    attempts: int = 0

    @property
    def r_hat(self) -> float:
        return self.reward_sum / self.n if self.n else 0.0

    @property
    def rho(self) -> float:
        return controllability_ratio(self.successes, self.attempts)


def is_terminal(z: Node) -> bool:
    return isinstance(z, str) and z.startswith("terminal:")


def terminal_node(event: str) -> str:
    return f"terminal:{event}"


def controllability_ratio(successes: int, attempts: int) -> float:
    if attempts < 0 or not 0 <= successes <= attempts:
        raise ValueError("need 0 <= successes <= attempts")
    return successes / attempts if attempts else 1.0


def controllability(window: Sequence[bool], horizon: int = CONTROL_HORIZON) -> float:
    """N/M for the outcomes of the options executed after a success.

    Only the first ``horizon`` outcomes count; an empty window gives 1.
    """
    window = list(window)[:horizon]
    return controllability_ratio(sum(bool(w) for w in window), len(window))


def option_reward(env_reward: float, source: Node, landed: Node, target: Node, rho: float) -> float:
    """Worker reward for one primitive step taken under o_{source,target}."""
    if landed != source and landed == target:
        return env_reward + 1.0 + rho
    return env_reward


def discounted_return(rewards: Iterable[float], gamma: float) -> float:
    total, scale = 0.0, 1.0
    for r in rewards:
        total += scale * r
        scale *= gamma
    return total


@dataclass
class _Window:
    owner: int
    remaining: int


@dataclass
class AbstractGraph:
    nodes: list = field(default_factory=list)
    options: dict[int, Option] = field(default_factory=dict)
    by_node: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)          # (z, z') -> option id
    explore_of: dict = field(default_factory=dict)     # z -> option id
    horizon: int = CONTROL_HORIZON
    _windows: list = field(default_factory=list, repr=False)

    # -- growth ---------------------------------------------------------

    def _new_option(self, kind, source, target=None) -> Option:
        opt = Option(len(self.options), kind, source, target)
        self.options[opt.id] = opt
        self.by_node[source].append(opt.id)
        return opt

    def add_node(self, z: Node) -> bool:
        if z in self.by_node:
            return False
        self.nodes.append(z)
        self.by_node[z] = []
        if not is_terminal(z):
            self.explore_of[z] = self._new_option(EXPLORE, z).id
        return True

    def observe_transition(self, z: Node, z2: Node) -> list[int]:
        """Grow the graph with an observed abstract transition; returns new option ids."""
        if is_terminal(z):
            raise ValueError("terminal nodes have no outgoing transitions")
        before = len(self.options)
        self.add_node(z)
        self.add_node(z2)
        if z != z2 and (z, z2) not in self.edges:
            self.edges[(z, z2)] = self._new_option(TRANSITION, z, z2).id
        return list(range(before, len(self.options)))

    # -- queries --------------------------------------------------------

    def options_at(self, z: Node) -> list[int]:
        return list(self.by_node.get(z, ()))

    def option_for(self, z: Node, z2: Node) -> Option | None:
        oid = self.edges.get((z, z2))
        return None if oid is None else self.options[oid]

    def abstract_nodes(self) -> list:
        return [z for z in self.nodes if not is_terminal(z)]

    def edge_set(self) -> set:
        return set(self.edges)

    def rho(self, oid: int) -> float:
        return self.options[oid].rho

    # -- outcomes -------------------------------------------------------

    def record_option_outcome(self, oid: int, reward: float, landed: Node) -> bool:
        """Book an option's return and feed controllability windows.

        Returns whether the option succeeded (landed in its target). Exploration
        options update reward statistics only.
        """
        opt = self.options[oid]
        opt.n += 1
        opt.reward_sum += float(reward)
        if opt.kind != TRANSITION:
            return False
        success = landed == opt.target
        live = []
        for w in self._windows:
            owner = self.options[w.owner]
            owner.attempts += 1
            owner.successes += int(success)
            w.remaining -= 1
            if w.remaining > 0:
                live.append(w)
        self._windows = live
        if success:
            self._windows.append(_Window(oid, self.horizon))
        return success

    def end_episode(self):
        """Open controllability windows are cut short (their partial counts stay)."""
        self._windows = []

    # -- transfer -------------------------------------------------------

    def for_transfer(self) -> tuple["AbstractGraph", dict[int, int]]:
        """Same navigation structure with task-specific parts removed.

        Terminal nodes and the options reaching them are dropped and reward
        statistics are cleared; controllability evidence is kept. Also returns the
        mapping from old to new option ids.
        """
        g = AbstractGraph(horizon=self.horizon)
        remap = {}
        for z in self.nodes:
            if not is_terminal(z):
                g.add_node(z)
        for (z, z2), oid in sorted(self.edges.items(), key=lambda kv: kv[1]):
            if is_terminal(z2):
                continue
            g.observe_transition(z, z2)
            new = g.edges[(z, z2)]
            remap[oid] = new
            g.options[new].successes = self.options[oid].successes
            g.options[new].attempts = self.options[oid].attempts
        for z in g.explore_of:
            remap[self.explore_of[z]] = g.explore_of[z]
        return g, remap

    def copy(self) -> "AbstractGraph":
        return copy.deepcopy(self)

    def check(self):
        """Raise ValueError if the graph violates its structural invariants."""
        for (z, z2), oid in self.edges.items():
            opt = self.options[oid]
            if z == z2 or opt.kind != TRANSITION or (opt.source, opt.target) != (z, z2):
                raise ValueError(f"edge {(z, z2)} does not match option {oid}")
        for z in self.nodes:
            kinds = [self.options[o].kind for o in self.by_node[z]]
            if kinds.count(EXPLORE) != (0 if is_terminal(z) else 1):
                raise ValueError(f"node {z!r} has the wrong number of exploration options")
        if sum(o.kind == TRANSITION for o in self.options.values()) != len(self.edges):
            raise ValueError("transition options and edges are not one-to-one")

    # -- serialization --------------------------------------------------

    def dumps(self) -> str:
        lines = ["# abstract graph v1"]
        for z in self.nodes:
            lines.append(f"node {z} {'terminal' if is_terminal(z) else 'abstract'}")
        for o in self.options.values():
            lines.append(f"option {o.id} {o.kind} {o.source} {'-' if o.target is None else o.target} "
                         f"{o.n} {o.reward_sum!r} {o.successes} {o.attempts}")
        for (z, z2), oid in self.edges.items():
            o = self.options[oid]
            lines.append(f"edge {z} {z2} {o.n} {o.r_hat:.6g} {o.rho:.6g}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "AbstractGraph":
        g = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts or parts[0].startswith("#") or parts[0] == "edge":
                continue
            if parts[0] == "node":
                g.nodes.append(_parse_node(parts[1]))
                g.by_node[g.nodes[-1]] = []
            elif parts[0] == "option":
                oid, kind, src, dst = int(parts[1]), parts[2], _parse_node(parts[3]), parts[4]
                if oid != len(g.options) or src not in g.by_node:
                    raise ValueError(f"line {lineno}: option {oid} out of order or unknown source")
                opt = Option(oid, kind, src, None if dst == "-" else _parse_node(dst), int(parts[5]),
                             float(parts[6]), int(parts[7]), int(parts[8]))
                g.options[oid] = opt
                g.by_node[src].append(oid)
                if kind == EXPLORE:
                    g.explore_of[src] = oid
                else:
                    g.edges[(src, opt.target)] = oid
            else:
                raise ValueError(f"line {lineno}: unknown record {parts[0]!r}")
        g.check()
        return g

    @classmethod
    def load(cls, path: str | Path) -> "AbstractGraph":
        return cls.loads(Path(path).read_text())


def _parse_node(tok: str) -> Node:
    try:
        return int(tok)
    except ValueError:
        return tok


# --------------------------------------------------------------------------- planning


def value_iteration(graph: AbstractGraph, gamma: float, eps: float = 1e-6,
                    max_sweeps: int = 10_000) -> dict[int, float]:
    """Q(z, o) = r_hat(z, o) + gamma * max_o' Q(z', o') with P(z'|z, o_{z,z'}) = 1.

    Terminal nodes and nodes without options have value 0. Exploration options
    have no known successor and are valued by their mean return alone.
    Iterates from zero until the sup-norm change is small enough that Q is
    provably within ``eps`` of the fixed point: change * gamma / (1 - gamma) < eps.
    """
    if not 0 < gamma < 1 or eps <= 0:
        raise ValueError("need 0 < gamma < 1 and eps > 0")
    oids = list(graph.options)
    if not oids:
        return {}
    index = {z: i for i, z in enumerate(graph.nodes)}
    src = np.array([index[graph.options[o].source] for o in oids])
    r = np.array([graph.options[o].r_hat for o in oids])
    dst = np.array([index[graph.options[o].target] if graph.options[o].kind == TRANSITION else -1
                    for o in oids])
    has_succ = dst >= 0
    q = np.zeros(len(oids))
    tol = eps * (1 - gamma) / gamma
    for _ in range(max_sweeps):
        v = np.full(len(graph.nodes), -np.inf)
        np.maximum.at(v, src, q)
        v[~np.isfinite(v)] = 0.0
        new = r + gamma * np.where(has_succ, v[np.maximum(dst, 0)], 0.0)
        delta = np.max(np.abs(new - q))
        q = new
        if delta < tol:
            break
    return dict(zip(oids, q.tolist()))


def state_value(graph: AbstractGraph, q: dict[int, float], z: Node) -> float:
    vals = [q.get(o, 0.0) for o in graph.options_at(z)]
    return max(vals) if vals else 0.0


def best_option(q: dict[int, float], graph: AbstractGraph, z: Node, eps: float,
                rng: np.random.Generator) -> int:
    """epsilon-greedy over the options applicable in z; greedy ties go to the lowest id."""
    opts = graph.options_at(z)
    if not opts:
        raise ValueError(f"no options available in {z!r}")
    if rng.random() < eps:
        return opts[int(rng.integers(len(opts)))]
    vals = [q.get(o, 0.0) for o in opts]
    best = max(vals)
    return min(o for o, v in zip(opts, vals) if v == best)
