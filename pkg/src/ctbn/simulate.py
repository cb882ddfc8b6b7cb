"""Trajectory simulation and observation models.

Sampling is exact (event-driven, node-local) and never materializes the
joint generator.  Observation models map latent states to real-valued
readouts; binary states are reported on the spin scale -1/+1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

from .model import Graph, ModelError, NetworkModel, StateSpace, parent_cards

LOG_LIK_FLOOR = -700.0  # stands in for log(0) of excluded states


def rng_from(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def substream(master_seed: int, index: int) -> np.random.Generator:
    """Independent reproducible stream for trajectory ``index``."""
    return np.random.default_rng(np.random.SeedSequence((int(master_seed), int(index))))


def state_value(card: int, x: int) -> float:
    """Observation-scale value of a local state (spin map for binary nodes)."""
    return float(2 * x - 1) if card == 2 else float(x)


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-constant sample path of the joint process."""

    initial_state: tuple
    times: np.ndarray  # event times, strictly increasing in (0, horizon)
    nodes: np.ndarray  # node index per event
    values: np.ndarray  # new local state per event
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.int64))
        object.__setattr__(self, "initial_state", tuple(int(x) for x in self.initial_state))

    @property
    def n_events(self) -> int:
        return len(self.times)

    def states_at(self, query_times: np.ndarray) -> np.ndarray:
        """Latent joint states at the query times, shape (len(t), N)."""
        q = np.atleast_1d(np.asarray(query_times, dtype=float))
        out = np.empty((len(q), len(self.initial_state)), dtype=np.int64)
        order = np.argsort(q, kind="stable")
        state = np.array(self.initial_state, dtype=np.int64)
        ev = 0
        for j in order:
            while ev < self.n_events and self.times[ev] <= q[j]:
                state[self.nodes[ev]] = self.values[ev]
                ev += 1
            out[j] = state
        return out


def gillespie_sample(model: NetworkModel, initial_state, horizon: float, rng) -> Trajectory:
    """Statistically exact sample path of the network over [0, horizon].

    Dwell times are exponential with the current total exit rate; the jumping
    node is chosen proportional to its local exit rate and the target state
    proportional to the local transition rates.  An absorbing state simply
    emits no further events.
    """
    if horizon <= 0:
        raise ModelError("horizon must be positive")
    rng = rng_from(rng)
    space, graph = model.space, model.graph
    n = space.n_nodes
    state = np.array([int(x) for x in initial_state], dtype=np.int64)
    if len(state) != n:
        raise ModelError("initial state has wrong length")

    def local_row(i):
        pa = graph.parents(i)
        if pa:
            u = int(np.ravel_multi_index(tuple(state[p] for p in pa), parent_cards(space, graph, i)))
        else:
            u = 0
        return model.cims[i][u, state[i]]

    times, nodes, values = [], [], []
    t = 0.0
    exit_rates = np.array([-local_row(i)[state[i]] for i in range(n)])
    while True:
        total = exit_rates.sum()
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t >= horizon:
            break
        i = rng.choice(n, p=exit_rates / total)
        row = local_row(i).copy()
        row[state[i]] = 0.0
        y = rng.choice(space.cards[i], p=row / row.sum())
        state[i] = y
        times.append(t)
        nodes.append(i)
        values.append(int(y))
        affected = {i, *graph.children(i)}
        for j in affected:
            exit_rates[j] = -local_row(j)[state[j]]
    return Trajectory(
        initial_state=tuple(int(x) for x in initial_state),
        times=np.array(times),
        nodes=np.array(nodes, dtype=np.int64),
        values=np.array(values, dtype=np.int64),
        horizon=float(horizon),
    )


# ---------------------------------------------------------------------------
# observation models


def gaussian_likelihood(y: float, x: int, sigma: float, card: int = 2) -> float:
    """Normal density of reading ``y`` given local state ``x``."""
    if sigma <= 0:
        raise ModelError("sigma must be positive")
    mu = state_value(card, x)
    return math.exp(-0.5 * ((y - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))


def expression_likelihood(y: float, mu_b: float, sigma_b: float) -> tuple:
    """(L(y | over-expressed), L(y | under-expressed)) for a concentration y.

    Over-expression means the reading exceeds the basal level, whose
    uncertainty is Gaussian(mu_b, sigma_b); the pair always sums to 1.
    """
    if sigma_b <= 0:
        raise ModelError("sigma_b must be positive")
    p_over = float(ndtr((y - mu_b) / sigma_b))
    return p_over, 1.0 - p_over


def estimate_basal(values) -> tuple:
    """Sample mean and (n-1)-normalized std of one gene's measurements."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ModelError("need at least 2 samples to estimate basal parameters")
    mu = float(v.mean())
    sd = float(v.std(ddof=1))
    if sd == 0:
        raise ModelError("zero variance: basal distribution is degenerate")
    return mu, sd


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float
    kind: str = "gaussian"

    def sample(self, rng, card: int, x: int) -> float:
        return state_value(card, x) + rng.normal(0.0, self.sigma)

    def log_likelihood(self, node: int, card: int, y: float) -> np.ndarray:
        mus = np.array([state_value(card, x) for x in range(card)])
        return -0.5 * ((y - mus) / self.sigma) ** 2 - math.log(self.sigma * math.sqrt(2 * math.pi))

    def params(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma}


@dataclass(frozen=True)
class Noiseless:
    kind: str = "noiseless"

    def sample(self, rng, card: int, x: int) -> float:
        return state_value(card, x)

    def log_likelihood(self, node: int, card: int, y: float) -> np.ndarray:
        mus = np.array([state_value(card, x) for x in range(card)])
        return np.where(np.isclose(mus, y), 0.0, -np.inf)

    def params(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class ExpressionNoise:
    """Two-state expression readout; one (mu_b, sigma_b) pair per node."""

    mu_b: tuple
    sigma_b: tuple
    kind: str = "expression"

    def __post_init__(self):
        object.__setattr__(self, "mu_b", tuple(float(m) for m in self.mu_b))
        object.__setattr__(self, "sigma_b", tuple(float(s) for s in self.sigma_b))

    def sample(self, rng, card: int, x: int) -> float:
        raise ModelError("expression model is for likelihood evaluation only")

    def log_likelihood(self, node: int, card: int, y: float) -> np.ndarray:
        if card != 2:
            raise ModelError("expression model requires binary nodes")
        over, under = expression_likelihood(y, self.mu_b[node], self.sigma_b[node])
        return np.log(np.maximum([under, over], math.exp(LOG_LIK_FLOOR)))

    def params(self) -> dict:
        return {"kind": self.kind, "mu_b": list(self.mu_b), "sigma_b": list(self.sigma_b)}


NoiseModel = Union[GaussianNoise, Noiseless, ExpressionNoise]


def noise_from_params(d: dict) -> NoiseModel:
    kind = d["kind"]
    if kind == "gaussian":
        return GaussianNoise(sigma=float(d["sigma"]))
    if kind == "noiseless":
        return Noiseless()
    if kind == "expression":
        return ExpressionNoise(tuple(d["mu_b"]), tuple(d["sigma_b"]))
    raise ModelError(f"unknown observation model {kind!r}")


@dataclass(frozen=True)
class ObservationSet:
    """Timestamped noisy readouts, one row per (time, node, value)."""

    times: np.ndarray
    nodes: np.ndarray
    values: np.ndarray
    horizon: float
    noise: NoiseModel

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        order = np.argsort(t, kind="stable")
        object.__setattr__(self, "times", t[order])
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.int64)[order])
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float)[order])

    @property
    def n_obs(self) -> int:
        return len(self.times)

    def unique_times(self) -> np.ndarray:
        return np.unique(self.times)


def make_observations(
    trajectory: Trajectory,
    space: StateSpace,
    noise: NoiseModel,
    times: Optional[Sequence[float]] = None,
    count: Optional[int] = None,
    rng=0,
    per_node_times: bool = False,
) -> ObservationSet:
    """Sample readouts of a trajectory at given or uniformly random times.

    By default every node is read at every time point; ``per_node_times``
    draws an independent random time per (node, observation) instead.
    """
    rng = rng_from(rng)
    n = space.n_nodes
    if times is None:
        if count is None:
            raise ModelError("pass either times or count")
        if per_node_times:
            t = np.sort(rng.uniform(0.0, trajectory.horizon, size=(count, n)), axis=0)
            obs_t = t.ravel()
            obs_n = np.tile(np.arange(n), count)
        else:
            t = np.sort(rng.uniform(0.0, trajectory.horizon, size=count))
            obs_t = np.repeat(t, n)
            obs_n = np.tile(np.arange(n), count)
    else:
        t = np.asarray(times, dtype=float)
        if np.any(t < 0) or np.any(t > trajectory.horizon):
            raise ModelError("observation times outside [0, horizon]")
        obs_t = np.repeat(np.sort(t), n)
        obs_n = np.tile(np.arange(n), len(t))
    states = trajectory.states_at(obs_t)
    vals = np.array(
        [noise.sample(rng, space.cards[m], states[i, m]) for i, m in enumerate(obs_n)]
    )
    return ObservationSet(obs_t, obs_n, vals, trajectory.horizon, noise)


# ---------------------------------------------------------------------------
# file formats


def save_trajectory(traj: Trajectory, path) -> None:
    header = {
        "T": traj.horizon,
        "initial_state": list(traj.initial_state),
        "n_nodes": len(traj.initial_state),
    }
    with open(path, "w") as f:
        f.write(f"# ctbn-trajectory {json.dumps(header)}\n")
        f.write("time,node,new_state\n")
        for t, n, v in zip(traj.times, traj.nodes, traj.values):
            f.write(f"{float(t)!r},{int(n)},{int(v)}\n")


def load_trajectory(path) -> Trajectory:
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# ctbn-trajectory "):
            raise ModelError(f"{path}: not a trajectory file")
        header = json.loads(first[len("# ctbn-trajectory ") :])
        f.readline()  # column header
        times, nodes, values = [], [], []
        for line in f:
            if not line.strip():
                continue
            t, n, v = line.strip().split(",")
            times.append(float(t))
            nodes.append(int(n))
            values.append(int(v))
    return Trajectory(
        initial_state=tuple(header["initial_state"]),
        times=np.array(times),
        nodes=np.array(nodes, dtype=np.int64),
        values=np.array(values, dtype=np.int64),
        horizon=float(header["T"]),
    )


def save_observations(obs: ObservationSet, path) -> None:
    header = {"T": obs.horizon, "model": obs.noise.params()}
    with open(path, "w") as f:
        f.write(f"# ctbn-observations {json.dumps(header)}\n")
        f.write("time,node,value\n")
        for t, n, v in zip(obs.times, obs.nodes, obs.values):
            f.write(f"{float(t)!r},{int(n)},{float(v)!r}\n")


def load_observations(path) -> ObservationSet:
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# ctbn-observations "):
            raise ModelError(f"{path}: not an observation file")
        header = json.loads(first[len("# ctbn-observations ") :])
        f.readline()
        times, nodes, values = [], [], []
        for line in f:
            if not line.strip():
                continue
            t, n, v = line.strip().split(",")
            times.append(float(t))
            nodes.append(int(n))
            values.append(float(v))
    return ObservationSet(
        np.array(times),
        np.array(nodes, dtype=np.int64),
        np.array(values),
        float(header["T"]),
        noise_from_params(header["model"]),
    )
