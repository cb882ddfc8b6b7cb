"""Ground-truth inference on the amalgamated joint chain.

Filtering/smoothing under noisy observations, exact evidence and exact
expected sufficient statistics.  Interval propagation uses precomputed matrix
exponentials of the joint generator, so stored grid values are exact to
solver precision; the grid only controls quadrature resolution.  Memory
scales as O(grid points x joint states).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .grid import make_grid, obs_grid_indices, trapezoid_weights
from .inference import SufficientStats
from .model import (
    DEFAULT_JOINT_CAP,
    ModelError,
    NetworkModel,
    amalgamate,
    joint_states,
    joint_strides,
    parent_cards,
)
from .simulate import LOG_LIK_FLOOR, ObservationSet


class OracleError(RuntimeError):
    """Raised when exact inference cannot produce a trustworthy answer."""


@dataclass(frozen=True)
class ExactConfig:
    grid_step: Optional[float] = None
    base_steps: int = 400
    joint_cap: int = DEFAULT_JOINT_CAP
    boundary_refine: int = 0


@dataclass
class JointPosterior:
    """Smoothing result on the joint chain, with two-slice info retained."""

    times: np.ndarray
    smoothed: np.ndarray  # (G, S)
    node_marginals: list  # per node (G, K)
    log_evidence: float
    f_pre: np.ndarray = field(repr=False)  # filtered, before the slice's obs factor
    f_post: np.ndarray = field(repr=False)  # filtered, after the obs factor
    b_post: np.ndarray = field(repr=False)  # backward, excluding the slice's obs factor
    log_lik: np.ndarray = field(repr=False)  # (G, S) joint log-likelihood factors


def _initial_joint(model: NetworkModel, initial_distribution) -> np.ndarray:
    space = model.space
    s = space.joint_size()
    if initial_distribution is None or (
        isinstance(initial_distribution, str) and initial_distribution == "uniform"
    ):
        return np.full(s, 1.0 / s)
    arr = np.asarray(initial_distribution, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == s:
        if arr.sum() <= 0:
            raise ModelError("initial distribution must have positive mass")
        return arr / arr.sum()
    # list of per-node distributions -> product over the joint space
    if len(initial_distribution) == space.n_nodes:
        p = np.ones(s)
        states = joint_states(space)
        for n, dist in enumerate(initial_distribution):
            d = np.asarray(dist, dtype=float)
            p *= d[states[:, n]]
        if p.sum() <= 0:
            raise ModelError("initial distribution must have positive mass")
        return p / p.sum()
    raise ModelError("initial distribution has unusable shape")


def _joint_log_lik(model: NetworkModel, obs: ObservationSet, grid: np.ndarray) -> np.ndarray:
    """Per-slice joint log-likelihood of the observations, zeros elsewhere.

    -inf entries mark truly excluded joint states (noiseless mismatch).
    """
    s = model.space.joint_size()
    states = joint_states(model.space)
    out = np.zeros((len(grid), s))
    if obs.n_obs == 0:
        return out
    idx = obs_grid_indices(grid, obs.times)
    for i in range(obs.n_obs):
        n = int(obs.nodes[i])
        ll = obs.noise.log_likelihood(n, model.space.cards[n], float(obs.values[i]))
        out[idx[i]] += np.asarray(ll)[states[:, n]]
    return out


def _propagators(rate: np.ndarray, grid: np.ndarray) -> list:
    """expm(R * h) per interval, computed once per distinct interval length."""
    h = np.diff(grid)
    keys = np.round(h, 14)
    cache = {}
    out = []
    for k in keys:
        if k not in cache:
            cache[k] = expm(rate * float(k))
        out.append(cache[k])
    return out


def exact_smoothing(
    model: NetworkModel,
    observations: ObservationSet,
    config: ExactConfig = ExactConfig(),
    initial_distribution="uniform",
) -> JointPosterior:
    """Forward-backward smoothing of the joint chain."""
    rate = amalgamate(model, cap=config.joint_cap)
    grid = make_grid(
        observations.horizon,
        observations.unique_times(),
        step=config.grid_step,
        base_steps=config.base_steps,
        boundary_refine=config.boundary_refine,
    )
    g = len(grid)
    lnl = _joint_log_lik(model, observations, grid)
    lik = np.exp(lnl)
    props = _propagators(rate, grid)

    p0 = _initial_joint(model, initial_distribution)
    f_pre = np.empty((g, len(p0)))
    f_post = np.empty_like(f_pre)
    log_ev = 0.0
    f_pre[0] = p0
    for k in range(g):
        if k > 0:
            q = f_post[k - 1] @ props[k - 1]
            q = np.maximum(q, 0.0)
            c = q.sum()
            if not np.isfinite(c) or c <= 0:
                raise OracleError("forward propagation lost all mass")
            log_ev += np.log(c)
            f_pre[k] = q / c
        q = f_pre[k] * lik[k]
        c = q.sum()
        if not np.isfinite(c) or c <= 0:
            raise OracleError(f"observation at t={grid[k]:.6g} excludes all states")
        log_ev += np.log(c)
        f_post[k] = q / c

    b_post = np.empty_like(f_pre)
    b_post[-1] = 1.0
    for k in range(g - 2, -1, -1):
        w = lik[k + 1] * b_post[k + 1]
        v = props[k] @ w
        m = v.max()
        if not np.isfinite(m) or m <= 0:
            raise OracleError("backward propagation lost all mass")
        b_post[k] = v / m

    smoothed = f_post * b_post
    smoothed /= smoothed.sum(axis=1, keepdims=True)

    space = model.space
    states = joint_states(space)
    marginals = []
    for n in range(space.n_nodes):
        onehot = np.eye(space.cards[n])[states[:, n]]
        marginals.append(smoothed @ onehot)

    return JointPosterior(
        times=grid,
        smoothed=smoothed,
        node_marginals=marginals,
        log_evidence=float(log_ev),
        f_pre=f_pre,
        f_post=f_post,
        b_post=b_post,
        log_lik=lnl,
    )


def exact_evidence(
    model: NetworkModel,
    observations: ObservationSet,
    config: ExactConfig = ExactConfig(),
    initial_distribution="uniform",
) -> float:
    """ln P(Y): forward pass normalization constants only."""
    post = exact_smoothing(model, observations, config, initial_distribution)
    return post.log_evidence


def exact_expected_stats(model: NetworkModel, post: JointPosterior) -> SufficientStats:
    """Expected dwelling times and transition counts under the smoothed law.

    Dwelling times integrate the smoothed occupancy; transition counts
    integrate the posterior flux f(x) R(x,y) b(y) / Z over single-node flips,
    both by the trapezoid rule on the smoothing grid.
    """
    space, graph = model.space, model.graph
    states = joint_states(space)
    strides = joint_strides(space)
    grid = post.times
    h = np.diff(grid)
    w = trapezoid_weights(grid)
    g = len(grid)

    lik = np.exp(post.log_lik)
    # left limits at each slice: filtered without the slice's obs factor,
    # backward including it
    f_left = post.f_pre
    b_left = lik * post.b_post
    bmax = b_left.max(axis=1, keepdims=True)
    b_left = b_left / np.where(bmax > 0, bmax, 1.0)

    dwell, trans = [], []
    time_w = post.smoothed * w[:, None]  # (G, S)
    for n in range(space.n_nodes):
        k = space.cards[n]
        pa = graph.parents(n)
        if pa:
            cards = parent_cards(space, graph, n)
            u_idx = np.ravel_multi_index(tuple(states[:, p] for p in pa), cards)
        else:
            u_idx = np.zeros(space.joint_size(), dtype=np.int64)
        u_count = model.cims[n].shape[0]
        x_loc = states[:, n]
        bucket = u_idx * k + x_loc
        d = np.bincount(bucket, weights=time_w.sum(axis=0), minlength=u_count * k)
        dwell.append(d.reshape(u_count, k))

        tr = np.zeros((u_count, k, k))
        z_right = (post.f_post * post.b_post).sum(axis=1)
        z_left = (f_left * b_left).sum(axis=1)
        for y in range(k):
            mask = x_loc != y
            src = np.nonzero(mask)[0]
            dst = src + (y - x_loc[src]) * strides[n]
            rloc = model.cims[n][u_idx[src], x_loc[src], y]
            flux_r = post.f_post[:, src] * rloc[None, :] * post.b_post[:, dst] / z_right[:, None]
            flux_l = f_left[:, src] * rloc[None, :] * b_left[:, dst] / z_left[:, None]
            # per-interval trapezoid with right limit at the left end and
            # left limit at the right end (reset slices are double-valued)
            seg = 0.5 * h[:, None] * (flux_r[:-1] + flux_l[1:])
            contrib = seg.sum(axis=0)
            tr_buck = np.bincount(u_idx[src] * k + x_loc[src], weights=contrib, minlength=u_count * k)
            tr[:, :, y] += tr_buck.reshape(u_count, k)
        ii = np.arange(k)
        tr[:, ii, ii] = 0.0
        trans.append(tr)
    return SufficientStats(tuple(dwell), tuple(trans), total_time=float(grid[-1] - grid[0]))
