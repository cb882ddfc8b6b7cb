"""Network model: state spaces, graphs and conditional intensity matrices.

Conventions used throughout the package:

* Node ``n`` has local states ``0 .. cards[n]-1``.  Binary nodes double as
  spin variables with the mapping ``0 -> -1``, ``1 -> +1``.
* Parent configurations of a node are enumerated in C (row-major) order over
  the states of its parents sorted ascending by node index, i.e. the smallest
  parent index varies slowest.  ``config_index`` and ``config_weights`` are
  the single source of truth for this ordering.
* Joint states of the whole network are enumerated the same way over nodes
  ``0 .. N-1`` (node 0 varies slowest).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ROW_SUM_TOL = 1e-12
DEFAULT_JOINT_CAP = 4096


class ModelError(ValueError):
    """Raised for structurally unusable model inputs."""


@dataclass(frozen=True)
class StateSpace:
    """Per-node state cardinalities and labels."""

    cards: tuple
    labels: tuple = None

    def __post_init__(self):
        cards = tuple(int(c) for c in self.cards)
        object.__setattr__(self, "cards", cards)
        if self.labels is None:
            labels = tuple(f"X{i}" for i in range(len(cards)))
        else:
            labels = tuple(str(s) for s in self.labels)
        if len(labels) != len(cards):
            raise ModelError("labels and cards must have equal length")
        object.__setattr__(self, "labels", labels)

    @property
    def n_nodes(self) -> int:
        return len(self.cards)

    def joint_size(self) -> int:
        """Product of all cardinalities as an exact Python int (no overflow)."""
        return math.prod(self.cards)


@dataclass(frozen=True)
class Graph:
    """Directed graph over ``n_nodes`` nodes with derived parent/child sets."""

    n_nodes: int
    edges: tuple

    def __post_init__(self):
        edges = tuple(sorted((int(a), int(b)) for a, b in self.edges))
        if len(set(edges)) != len(edges):
            raise ModelError("duplicate edges")
        object.__setattr__(self, "edges", edges)
        parents = tuple(
            tuple(sorted(a for a, b in edges if b == n)) for n in range(self.n_nodes)
        )
        children = tuple(
            tuple(sorted(b for a, b in edges if a == n)) for n in range(self.n_nodes)
        )
        object.__setattr__(self, "_parents", parents)
        object.__setattr__(self, "_children", children)

    def parents(self, n: int) -> tuple:
        return self._parents[n]

    def children(self, n: int) -> tuple:
        return self._children[n]

    def with_parents(self, n: int, new_parents: Iterable[int]) -> "Graph":
        """Copy of the graph where node n's parent set is replaced."""
        kept = [(a, b) for a, b in self.edges if b != n]
        kept.extend((int(p), n) for p in new_parents)
        return Graph(self.n_nodes, tuple(kept))


def parent_cards(space: StateSpace, graph: Graph, n: int) -> tuple:
    return tuple(space.cards[p] for p in graph.parents(n))


def n_configs(space: StateSpace, graph: Graph, n: int) -> int:
    return math.prod(parent_cards(space, graph, n))


def config_index(space: StateSpace, graph: Graph, n: int, parent_states) -> int:
    """Canonical index of one parent configuration of node n.

    ``parent_states`` lists the states of ``graph.parents(n)`` in ascending
    parent order.
    """
    cards = parent_cards(space, graph, n)
    if not cards:
        return 0
    return int(np.ravel_multi_index(tuple(int(s) for s in parent_states), cards))


def config_weights(parent_marginals: Sequence[np.ndarray]) -> np.ndarray:
    """Product weights over parent configurations in canonical order.

    Each entry of ``parent_marginals`` is an array ``(..., K_p)`` of state
    probabilities of one parent; parents must be passed sorted ascending.
    Returns ``(..., U)`` with ``U`` the number of configurations.  With no
    parents the result is a single column of ones.
    """
    if not parent_marginals:
        return np.ones(1)
    w = None
    for pm in parent_marginals:
        pm = np.asarray(pm)
        if w is None:
            w = pm
        else:
            w = (w[..., :, None] * pm[..., None, :]).reshape(*w.shape[:-1], -1)
    return w


def joint_states(space: StateSpace) -> np.ndarray:
    """All joint states, shape (S, N), in canonical joint order."""
    s = space.joint_size()
    idx = np.unravel_index(np.arange(s), space.cards)
    return np.stack(idx, axis=1)


def joint_strides(space: StateSpace) -> np.ndarray:
    strides = np.ones(space.n_nodes, dtype=np.int64)
    for n in range(space.n_nodes - 2, -1, -1):
        strides[n] = strides[n + 1] * space.cards[n + 1]
    return strides


def cim_from_offdiag(off: np.ndarray) -> np.ndarray:
    """Fill the diagonal of an off-diagonal rate array so rows sum to zero."""
    r = np.array(off, dtype=float)
    if r.ndim == 2:
        r = r[None, :, :]
        squeeze = True
    else:
        squeeze = False
    k = r.shape[-1]
    ii = np.arange(k)
    r[..., ii, ii] = 0.0
    r[..., ii, ii] = -r.sum(axis=-1)
    return r[0] if squeeze else r


@dataclass(frozen=True)
class NetworkModel:
    """A full network: state space, graph and one CIM family per node.

    ``cims[n]`` has shape ``(U_n, K_n, K_n)`` with ``U_n`` the number of
    parent configurations of node n in canonical order.
    """

    space: StateSpace
    graph: Graph
    cims: tuple

    def __post_init__(self):
        arrays = []
        for a in self.cims:
            a = np.asarray(a, dtype=float)
            if a.ndim == 2:
                a = a[None, :, :]
            a = np.ascontiguousarray(a)
            a.flags.writeable = False
            arrays.append(a)
        object.__setattr__(self, "cims", tuple(arrays))

    @property
    def n_nodes(self) -> int:
        return self.space.n_nodes

    def cim(self, n: int) -> np.ndarray:
        return self.cims[n]


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple

    def __bool__(self):
        return self.ok


def validate_model(model: NetworkModel, row_sum_tol: float = ROW_SUM_TOL) -> ValidationReport:
    """Check every structural invariant; list all violations found."""
    v = []
    space, graph = model.space, model.graph
    if graph.n_nodes != space.n_nodes:
        v.append(f"graph has {graph.n_nodes} nodes, state space has {space.n_nodes}")
    for n, c in enumerate(space.cards):
        if c < 2:
            v.append(f"node {n}: cardinality {c} < 2")
    for a, b in graph.edges:
        if a == b:
            v.append(f"self-loop on node {a}")
        if not (0 <= a < space.n_nodes and 0 <= b < space.n_nodes):
            v.append(f"edge ({a},{b}) out of range")
    if len(model.cims) != space.n_nodes:
        v.append(f"{len(model.cims)} CIMs for {space.n_nodes} nodes")
    for n, cim in enumerate(model.cims):
        if n >= space.n_nodes:
            break
        k = space.cards[n]
        u = n_configs(space, graph, n)
        if cim.shape != (u, k, k):
            v.append(f"node {n}: CIM shape {cim.shape}, expected {(u, k, k)}")
            continue
        if not np.all(np.isfinite(cim)):
            v.append(f"node {n}: non-finite CIM entries")
            continue
        off = cim.copy()
        ii = np.arange(k)
        off[:, ii, ii] = 0.0
        if np.any(off < 0):
            v.append(f"node {n}: negative off-diagonal rate")
        rs = np.abs(cim.sum(axis=2)).max()
        if rs > row_sum_tol:
            v.append(f"node {n}: row sums deviate from 0 by {rs:.3g}")
    return ValidationReport(ok=not v, violations=tuple(v))


def glauber_cim(a: float, b: float, n_parents: int) -> np.ndarray:
    """Binary spin-flip CIM with additive-threshold parent coupling.

    Flip rate out of spin ``x`` is ``a/2 * (1 + x * tanh(b * sum of parent
    spins))`` where states {0,1} map to spins {-1,+1}.  Returns shape
    ``(2**n_parents, 2, 2)``.
    """
    if a <= 0:
        raise ModelError("rate scale a must be positive")
    if n_parents < 0:
        raise ModelError("n_parents must be >= 0")
    u_count = 2**n_parents
    cim = np.zeros((u_count, 2, 2))
    for u in range(u_count):
        bits = [(u >> (n_parents - 1 - i)) & 1 for i in range(n_parents)]
        s = sum(2 * bit - 1 for bit in bits)
        for x in (0, 1):
            spin = 2 * x - 1
            rate = 0.5 * a * (1.0 + spin * math.tanh(b * s))
            cim[u, x, 1 - x] = rate
            cim[u, x, x] = -rate
    return cim


def amalgamate(model: NetworkModel, cap: int = DEFAULT_JOINT_CAP) -> np.ndarray:
    """Joint generator of the amalgamated chain over the product state space.

    Off-diagonal entries are nonzero only between joint states differing in
    exactly one component.  The joint size is intentionally exponential;
    callers opt in via ``cap``.
    """
    space, graph = model.space, model.graph
    s = space.joint_size()
    if s > cap:
        raise ModelError(f"joint state space has {s} states, exceeding cap {cap}")
    states = joint_states(space)
    strides = joint_strides(space)
    joint = np.zeros((s, s))
    rows = np.arange(s)
    for n in range(space.n_nodes):
        pa = graph.parents(n)
        if pa:
            cards = parent_cards(space, graph, n)
            u_idx = np.ravel_multi_index(tuple(states[:, p] for p in pa), cards)
        else:
            u_idx = np.zeros(s, dtype=np.int64)
        x = states[:, n]
        for y in range(space.cards[n]):
            mask = x != y
            targets = rows[mask] + (y - x[mask]) * strides[n]
            joint[rows[mask], targets] += model.cims[n][u_idx[mask], x[mask], y]
    joint[rows, rows] -= joint.sum(axis=1)
    return joint


@dataclass(frozen=True)
class GammaPrior:
    """Independent Gamma(alpha, beta) priors on every transition rate.

    ``alpha[n]`` has shape ``(U_n, K_n, K_n)`` (off-diagonal entries used),
    ``beta[n]`` has shape ``(U_n, K_n)``.
    """

    alpha: tuple
    beta: tuple

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(np.asarray(a, dtype=float) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(np.asarray(b, dtype=float) for b in self.beta))

    @classmethod
    def uniform(cls, space: StateSpace, graph: Graph, alpha: float = 5.0, beta: float = 10.0):
        if alpha <= 0 or beta <= 0:
            raise ModelError("Gamma prior hyperparameters must be positive")
        al, be = [], []
        for n in range(space.n_nodes):
            u = n_configs(space, graph, n)
            k = space.cards[n]
            al.append(np.full((u, k, k), alpha))
            be.append(np.full((u, k), beta))
        return cls(tuple(al), tuple(be))

    def validate(self) -> ValidationReport:
        v = []
        for n, (a, b) in enumerate(zip(self.alpha, self.beta)):
            if np.any(a <= 0):
                v.append(f"node {n}: nonpositive alpha")
            if np.any(b <= 0):
                v.append(f"node {n}: nonpositive beta")
        return ValidationReport(ok=not v, violations=tuple(v))

    def mean_rates(self, space: StateSpace) -> tuple:
        """Prior-mean CIMs alpha/beta with row-sum diagonals."""
        out = []
        for n, (a, b) in enumerate(zip(self.alpha, self.beta)):
            r = a / b[:, :, None]
            out.append(cim_from_offdiag(r))
        return tuple(out)


# ---------------------------------------------------------------------------
# network specification files


def model_to_dict(model: NetworkModel) -> dict:
    return {
        "nodes": [
            {"label": lab, "card": c}
            for lab, c in zip(model.space.labels, model.space.cards)
        ],
        "edges": [list(e) for e in model.graph.edges],
        "cims": [c.tolist() for c in model.cims],
    }


def model_from_dict(d: dict) -> NetworkModel:
    cards = [n["card"] for n in d["nodes"]]
    labels = [n.get("label", f"X{i}") for i, n in enumerate(d["nodes"])]
    space = StateSpace(tuple(cards), tuple(labels))
    graph = Graph(len(cards), tuple((e[0], e[1]) for e in d["edges"]))
    return NetworkModel(space, graph, tuple(np.array(c) for c in d["cims"]))


def save_model(model: NetworkModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, indent=1)


def load_model(path) -> NetworkModel:
    with open(path) as f:
        return model_from_dict(json.load(f))
