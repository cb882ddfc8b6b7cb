"""Variational posterior dynamics in star approximation.

Each node carries a marginal trajectory m_n(x,t) and a positive multiplier
trajectory rho_n(x,t).  A fixed-point loop alternates, per node, a backward
sweep for rho (linear ODE with multiplicative jumps at observation times) and
a forward sweep for m (master equation with posterior-tilted rates).  The
naive mean-field variant runs through the same machinery with geometric-mean
effective rates and an untangled transition density.

Numerics:

* rho is propagated in the linear domain with per-step max renormalization
  and stored as per-slice-normalized logs; every downstream use is a
  same-slice ratio, so the slice scale is pure gauge.
* the forward sweep uses an exponential midpoint propagator (exact matrix
  exponential of the frozen-rate master equation per step).  This is
  unconditionally stable and positivity preserving, which a fixed-step RK4 is
  not once observation resets make the tilted rates stiff.
* all per-node state is batched over trajectories sharing one grid; the grid
  is the union of a uniform base grid and the exact observation times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .grid import make_grid, obs_grid_indices, trapezoid_weights
from .model import NetworkModel, config_weights
from .simulate import LOG_LIK_FLOOR, ObservationSet

TINY = 1e-300


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    """Numerical knobs for the fixed-point solver.

    ``grid_step`` fixes the base grid spacing (default horizon/base_steps).
    ``damping`` blends each node's new marginal trajectory with the previous
    one; 1.0 means no damping.  ``log_ratio_clip`` bounds stored log-rho
    ranges per time slice (and thus all rho ratios), ``psi_clip`` bounds the
    child feedback term against transient blowups in early sweeps.
    """

    grid_step: Optional[float] = None
    base_steps: int = 400
    max_sweeps: int = 100
    tol: float = 1e-6
    damping: float = 1.0
    schedule: str = "sequential"  # or "synchronous"
    cluster: str = "star"  # or "mean_field"
    m_floor: float = 1e-12
    log_ratio_clip: float = 25.0
    psi_clip: float = 500.0
    rate_floor: float = 1e-10
    track_energy: bool = True
    boundary_refine: int = 0


@dataclass
class SufficientStats:
    """Expected dwelling times and transition counts, additive across runs."""

    dwell: tuple  # per node (U, K)
    trans: tuple  # per node (U, K, K), zero diagonal
    total_time: float

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(
            tuple(a + b for a, b in zip(self.dwell, other.dwell)),
            tuple(a + b for a, b in zip(self.trans, other.trans)),
            self.total_time + other.total_time,
        )


@dataclass
class ConvergenceReport:
    converged: bool
    sweeps: int
    residuals: list
    energy_trace: list
    message: str = ""

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else math.inf

    def text(self) -> str:
        lines = [
            f"converged: {self.converged}",
            f"sweeps: {self.sweeps}",
            f"final residual: {self.final_residual:.3e}",
        ]
        if self.energy_trace:
            lines.append("energy trace: " + ", ".join(f"{e:.6g}" for e in self.energy_trace))
        if self.message:
            lines.append(f"warning: {self.message}")
        return "\n".join(lines)


@dataclass
class EnergyBreakdown:
    total: float
    entropy: np.ndarray  # per node
    energy: np.ndarray  # per node
    data_term: float


def _expm_generator(h_times_g: np.ndarray) -> np.ndarray:
    """Matrix exponential of batched generator matrices (rows sum to 0)."""
    k = h_times_g.shape[-1]
    if k == 2:
        p = h_times_g[..., 0, 1]
        q = h_times_g[..., 1, 0]
        s = p + q
        safe = np.where(s > 0, s, 1.0)
        e = np.exp(-s)
        out = np.empty_like(h_times_g)
        out[..., 0, 0] = np.where(s > 0, (q + p * e) / safe, 1.0)
        out[..., 0, 1] = np.where(s > 0, p * (1 - e) / safe, 0.0)
        out[..., 1, 0] = np.where(s > 0, q * (1 - e) / safe, 0.0)
        out[..., 1, 1] = np.where(s > 0, (p + q * e) / safe, 1.0)
        return out
    from scipy.linalg import expm

    flat = h_times_g.reshape(-1, k, k)
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = expm(flat[i])
    return out.reshape(h_times_g.shape)


class SweepEngine:
    """Batched fixed-point machinery over one shared time grid.

    All per-node arrays have shape (B, G, K_n): B trajectories, G grid
    points.  ``log_lik[n][b, g]`` holds the per-state log-likelihood reset at
    grid point g (zero rows where trajectory b has no observation of node n).
    """

    def __init__(
        self,
        model: NetworkModel,
        grid: np.ndarray,
        log_lik: Sequence[np.ndarray],
        m0: Sequence[np.ndarray],
        config: InferenceConfig,
        rates: Optional[Sequence[np.ndarray]] = None,
    ):
        self.model = model
        self.space = model.space
        self.graph = model.graph
        self.config = config
        self.grid = np.asarray(grid, dtype=float)
        self.h = np.diff(self.grid)
        if np.any(self.h <= 0):
            raise InferenceError("grid must be strictly increasing")
        self.n_nodes = model.n_nodes
        self.rates = [np.array(r, dtype=float) for r in (rates if rates is not None else model.cims)]
        self.log_lik = [np.asarray(a, dtype=float) for a in log_lik]
        self.batch = self.log_lik[0].shape[0]
        g = len(self.grid)
        clip = config.log_ratio_clip
        self.m = []
        self.lam = []
        self.m0 = []
        for n in range(self.n_nodes):
            k = self.space.cards[n]
            if self.log_lik[n].shape != (self.batch, g, k):
                raise InferenceError("log-likelihood array shape mismatch")
            base = np.asarray(m0[n], dtype=float)
            folded = base * np.exp(np.maximum(self.log_lik[n][:, 0], LOG_LIK_FLOOR))
            tot = folded.sum(axis=-1, keepdims=True)
            if np.any(tot <= 0):
                raise InferenceError(f"initial observation excludes all states of node {n}")
            folded = folded / tot
            self.m0.append(folded)
            traj = np.full((self.batch, g, k), 1.0 / k)
            traj[:, 0] = folded
            self.m.append(traj)
            self.lam.append(np.zeros((self.batch, g, k)))
        self._clip = clip

    # -- coefficient grids ----------------------------------------------

    def _parent_weights(self, n: int) -> np.ndarray:
        """m_n^u over the grid, shape (B, G, U)."""
        pa = self.graph.parents(n)
        if not pa:
            return np.ones((self.batch, len(self.grid), 1))
        return config_weights([self.m[p] for p in pa])

    def expected_rates(self, n: int) -> np.ndarray:
        """E_n[R_n^u] under the current parent marginals, (B, G, K, K)."""
        w = self._parent_weights(n)
        return np.einsum("bgu,uxy->bgxy", w, self.rates[n])

    def expected_log_rates(self, n: int) -> np.ndarray:
        lr = np.log(np.maximum(self.rates[n], self.config.rate_floor))
        w = self._parent_weights(n)
        return np.einsum("bgu,uxy->bgxy", w, lr)

    def lam_left(self, n: int) -> np.ndarray:
        """Left limits of log rho: stored right limits plus the slice reset."""
        ll = self.lam[n] + np.maximum(self.log_lik[n], LOG_LIK_FLOOR)
        ll = ll - ll.max(axis=-1, keepdims=True)
        return np.maximum(ll, -self._clip)

    def _ratio(self, lam: np.ndarray) -> np.ndarray:
        """exp(lam(y) - lam(x)) as [..., x, y]."""
        d = lam[..., None, :] - lam[..., :, None]
        return np.exp(np.clip(d, -self._clip, self._clip))

    def _child_feedback(self, n: int, left: bool) -> np.ndarray:
        """psi_n over the grid from the children's current trajectories."""
        kn = self.space.cards[n]
        psi = np.zeros((self.batch, len(self.grid), kn))
        mean_field = self.config.cluster == "mean_field"
        for j in self.graph.children(n):
            pa_j = self.graph.parents(j)
            lam_j = self.lam_left(j) if left else self.lam[j]
            ratio = self._ratio(lam_j)  # (B,G,Kj,Kj), diagonal 1
            if mean_field:
                eff = np.exp(self.expected_log_rates(j))
                ii = np.arange(self.space.cards[j])
                eff[..., ii, ii] = 0.0
            for xp in range(kn):
                ms = []
                for p in pa_j:
                    if p == n:
                        onehot = np.zeros((self.batch, len(self.grid), kn))
                        onehot[..., xp] = 1.0
                        ms.append(onehot)
                    else:
                        ms.append(self.m[p])
                w = config_weights(ms)
                econd = np.einsum("bgu,uxy->bgxy", w, self.rates[j])
                if mean_field:
                    lcond = np.einsum(
                        "bgu,uxy->bgxy",
                        w,
                        np.log(np.maximum(self.rates[j], self.config.rate_floor)),
                    )
                    ii = np.arange(self.space.cards[j])
                    inner = (ratio * eff * lcond).sum(axis=-1)
                    inner += econd[..., ii, ii]
                else:
                    inner = (ratio * econd).sum(axis=-1)  # diag ratio=1 adds E[R(x,x)]
                psi[..., xp] += np.einsum("bgx,bgx->bg", self.m[j], inner)
        return np.clip(psi, -self.config.psi_clip, self.config.psi_clip)

    def _drift_matrix(self, n: int) -> tuple:
        """A(t) with dr/dt = -A r, right/left variants, plus E[R] grid."""
        if self.config.cluster == "mean_field":
            er = self.expected_rates(n)
            eff = np.exp(self.expected_log_rates(n))
            k = self.space.cards[n]
            ii = np.arange(k)
            a = eff.copy()
            a[..., ii, ii] = er[..., ii, ii]
        else:
            er = self.expected_rates(n)
            a = er.copy()
        k = self.space.cards[n]
        ii = np.arange(k)
        a_r = a.copy()
        a_l = a.copy()
        if self.graph.children(n):
            a_r[..., ii, ii] += self._child_feedback(n, left=False)
            a_l[..., ii, ii] += self._child_feedback(n, left=True)
        return a_r, a_l, a

    # -- sweeps -----------------------------------------------------------

    def backward_sweep(self, n: int) -> np.ndarray:
        """Integrate rho_n from T to 0 (RK4 per interval, resets applied)."""
        a_r, a_l, a_plain = self._drift_matrix(n)
        k = self.space.cards[n]
        eye = np.eye(k)
        a_start = a_r[:, :-1]
        a_end = a_l[:, 1:]
        a_mid = 0.5 * (a_start + a_end)
        hh = self.h[None, :, None, None]
        k1 = a_end
        k2 = a_mid @ (eye + 0.5 * hh * k1)
        k3 = a_mid @ (eye + 0.5 * hh * k2)
        k4 = a_start @ (eye + hh * k3)
        step = eye + hh / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

        g = len(self.grid)
        lam = np.zeros((self.batch, g, k))
        lik = np.exp(np.maximum(self.log_lik[n], LOG_LIK_FLOOR))
        v = np.ones((self.batch, k))
        floor = math.exp(-self._clip)
        for idx in range(g - 2, -1, -1):
            w = v * lik[:, idx + 1]
            mx = w.max(axis=-1, keepdims=True)
            if not np.all(np.isfinite(mx)) or np.any(mx <= 0):
                raise InferenceError(
                    f"observation at t={self.grid[idx + 1]:.6g} excludes all states of node {n}"
                )
            w = w / mx
            v = np.einsum("bxy,by->bx", step[:, idx], w)
            mx = v.max(axis=-1, keepdims=True)
            if not np.all(np.isfinite(mx)) or np.any(mx <= 0):
                raise InferenceError(f"backward sweep of node {n} lost positivity")
            v = np.maximum(v / mx, floor)
            lam[:, idx] = np.log(v)
        self.lam[n] = lam
        return lam

    def forward_sweep(self, n: int) -> float:
        """Propagate m_n from 0 to T; returns the committed sup-norm change."""
        er = self._forward_rates(n)
        lam_r = self.lam[n][:, :-1]
        lam_l = self.lam_left(n)[:, 1:]
        lam_mid = 0.5 * (lam_r + lam_l)
        er_mid = 0.5 * (er[:, :-1] + er[:, 1:])
        diff = np.clip(
            lam_mid[..., None, :] - lam_mid[..., :, None], -self._clip, self._clip
        )
        k = self.space.cards[n]
        ii = np.arange(k)
        gen = er_mid * np.exp(diff)
        gen[..., ii, ii] = 0.0
        gen[..., ii, ii] = -gen.sum(axis=-1)
        prop = _expm_generator(self.h[None, :, None, None] * gen)

        g = len(self.grid)
        m_new = np.empty((self.batch, g, k))
        m_new[:, 0] = self.m0[n]
        floor = self.config.m_floor
        cur = m_new[:, 0]
        for idx in range(g - 1):
            cur = np.einsum("bx,bxy->by", cur, prop[:, idx])
            cur = np.clip(cur, floor, 1.0)
            cur = cur / cur.sum(axis=-1, keepdims=True)
            m_new[:, idx + 1] = cur
        if not np.all(np.isfinite(m_new)):
            raise InferenceError(f"forward sweep of node {n} produced non-finite marginals")
        gamma = self.config.damping
        blended = (1.0 - gamma) * self.m[n] + gamma * m_new
        change = float(np.max(np.abs(blended - self.m[n])))
        self.m[n] = blended
        return change

    def _forward_rates(self, n: int) -> np.ndarray:
        if self.config.cluster == "mean_field":
            eff = np.exp(self.expected_log_rates(n))
            k = self.space.cards[n]
            ii = np.arange(k)
            eff[..., ii, ii] = 0.0
            return eff
        return self.expected_rates(n)

    def sweep(self, nodes=None) -> float:
        nodes = list(nodes) if nodes is not None else list(range(self.n_nodes))
        if self.config.schedule == "synchronous":
            # every node update reads the sweep-start snapshot of its peers
            snap_m = list(self.m)
            snap_lam = list(self.lam)
            updates = {}
            residual = 0.0
            for n in nodes:
                self.m = list(snap_m)
                self.lam = list(snap_lam)
                self.backward_sweep(n)
                change = self.forward_sweep(n)
                updates[n] = (self.m[n], self.lam[n])
                residual = max(residual, change)
            self.m = list(snap_m)
            self.lam = list(snap_lam)
            for n, (m_n, lam_n) in updates.items():
                self.m[n] = m_n
                self.lam[n] = lam_n
            return residual
        residual = 0.0
        for n in nodes:
            self.backward_sweep(n)
            residual = max(residual, self.forward_sweep(n))
        return residual

    def run(self, nodes=None) -> ConvergenceReport:
        cfg = self.config
        residuals, energies = [], []
        converged = False
        sweeps = 0
        for sweeps in range(1, cfg.max_sweeps + 1):
            residual = self.sweep(nodes)
            residuals.append(residual)
            if cfg.track_energy:
                energies.append(float(np.sum(self.energy().total)))
            if residual < cfg.tol:
                converged = True
                break
        message = "" if converged else (
            f"fixed point not converged after {sweeps} sweeps "
            f"(residual {residuals[-1]:.3e} > tol {cfg.tol:.3e})"
        )
        return ConvergenceReport(converged, sweeps, residuals, energies, message)

    # -- derived quantities ------------------------------------------------

    def tau_grid(self, n: int, side: str = "right") -> np.ndarray:
        """Transition density over the grid, (B, G, U, K, K), diag filled."""
        lam = self.lam[n] if side == "right" else self.lam_left(n)
        ratio = self._ratio(lam)
        k = self.space.cards[n]
        ii = np.arange(k)
        if self.config.cluster == "mean_field":
            eff = np.exp(self.expected_log_rates(n))
            eff[..., ii, ii] = 0.0
            tau_xy = self.m[n][..., :, None] * eff * ratio  # (B,G,K,K)
            w = self._parent_weights(n)
            tau = tau_xy[:, :, None] * w[..., None, None]
        else:
            w = self._parent_weights(n)
            r_off = self.rates[n].copy()
            r_off[:, ii, ii] = 0.0
            tau = np.einsum("bgx,bgu,uxy,bgxy->bguxy", self.m[n], w, r_off, ratio)
        tau[..., ii, ii] = 0.0
        tau[..., ii, ii] = -tau.sum(axis=-1)
        return tau

    def _entropy_energy_slice(self, n: int, side: str) -> tuple:
        """Per-slice H and E integrands, each (B, G)."""
        k = self.space.cards[n]
        ii = np.arange(k)
        w = self._parent_weights(n)
        m = self.m[n]
        tau = self.tau_grid(n, side)
        log_mw = np.log(np.maximum(m, TINY))[:, :, None, :, None] + np.log(
            np.maximum(w, TINY)
        )[:, :, :, None, None]
        if self.config.cluster == "mean_field":
            # the mean-field cluster carries no parent factor in its entropy
            tau_xy = tau.sum(axis=2)
            log_m = np.log(np.maximum(m, TINY))[..., :, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                h_terms = tau_xy * (1.0 - np.log(np.maximum(tau_xy, TINY)) + log_m)
            h_terms[..., ii, ii] = 0.0
            h_slice = np.where(tau_xy > 0, h_terms, 0.0)[..., ~np.eye(k, dtype=bool)].sum(axis=-1)
            elr = self.expected_log_rates(n)
            e_rate = (tau_xy * elr)
            e_rate[..., ii, ii] = 0.0
            er = self.expected_rates(n)
            e_slice = np.einsum("bgx,bgx->bg", m, er[..., ii, ii]) + np.where(
                tau_xy > 0, e_rate, 0.0
            ).sum(axis=(-1, -2))
            return h_slice, e_slice
        with np.errstate(divide="ignore", invalid="ignore"):
            h_terms = tau * (1.0 - np.log(np.maximum(tau, TINY)) + log_mw)
        h_terms[..., ii, ii] = 0.0
        h_slice = np.where(tau > 0, h_terms, 0.0).sum(axis=(-1, -2, -3))
        log_r = np.log(np.maximum(self.rates[n], TINY))
        bad = (self.rates[n] <= 0) & (tau > 1e-12)
        bad[..., ii, ii] = False
        if np.any(bad):
            raise InferenceError(f"node {n}: positive flux through a zero rate")
        e_rate = tau * log_r
        e_rate[..., ii, ii] = 0.0
        er = self.expected_rates(n)
        e_slice = np.einsum("bgx,bgx->bg", self.m[n], er[..., ii, ii]) + np.where(
            tau > 0, e_rate, 0.0
        ).sum(axis=(-1, -2, -3))
        return h_slice, e_slice

    def energy(self) -> EnergyBreakdown:
        """Variational energy with per-node entropy/energy breakdown.

        Quadrature is per-interval trapezoid using right limits at interval
        starts and left limits at interval ends, so reset jumps never
        straddle an interval.
        """
        h = self.h
        ent = np.zeros((self.n_nodes, self.batch))
        ene = np.zeros((self.n_nodes, self.batch))
        for n in range(self.n_nodes):
            h_r, e_r = self._entropy_energy_slice(n, "right")
            h_l, e_l = self._entropy_energy_slice(n, "left")
            ent[n] = 0.5 * (h[None, :] * (h_r[:, :-1] + h_l[:, 1:])).sum(axis=1)
            ene[n] = 0.5 * (h[None, :] * (e_r[:, :-1] + e_l[:, 1:])).sum(axis=1)
        f0 = np.zeros(self.batch)
        for n in range(self.n_nodes):
            lnl = np.maximum(self.log_lik[n], LOG_LIK_FLOOR)
            f0 += np.einsum("bgx,bgx->b", self.m[n], lnl)
        total = ent.sum(axis=0) + ene.sum(axis=0) + f0
        return EnergyBreakdown(total=total, entropy=ent, energy=ene, data_term=f0)

    def stats(self, pooled: bool = True):
        """Expected sufficient statistics; pooled sums over the batch."""
        w_t = trapezoid_weights(self.grid)
        h = self.h
        dwell_all, trans_all = [], []
        for n in range(self.n_nodes):
            w = self._parent_weights(n)
            d = np.einsum("g,bgx,bgu->bux", w_t, self.m[n], w)
            tau_r = self.tau_grid(n, "right")
            tau_l = self.tau_grid(n, "left")
            tr = 0.5 * np.einsum("g,bguxy->buxy", h, tau_r[:, :-1] + tau_l[:, 1:])
            k = self.space.cards[n]
            ii = np.arange(k)
            tr[..., ii, ii] = 0.0
            dwell_all.append(d)
            trans_all.append(tr)
        horizon = float(self.grid[-1] - self.grid[0])
        if pooled:
            return SufficientStats(
                tuple(d.sum(axis=0) for d in dwell_all),
                tuple(t.sum(axis=0) for t in trans_all),
                total_time=horizon * self.batch,
            )
        return [
            SufficientStats(
                tuple(d[b] for d in dwell_all),
                tuple(t[b] for t in trans_all),
                total_time=horizon,
            )
            for b in range(self.batch)
        ]

    def drift_from_rates(self, n: int) -> np.ndarray:
        """Forward drift from the tilted-rate form, right limits, (B,G,K)."""
        er = self._forward_rates(n)
        ratio = self._ratio(self.lam[n])
        k = self.space.cards[n]
        ii = np.arange(k)
        flow = self.m[n][..., :, None] * er * ratio  # [x,y] = m(x) E[R(x,y)] r(y)/r(x)
        flow[..., ii, ii] = 0.0
        return flow.sum(axis=-2) - flow.sum(axis=-1)

    def drift_from_tau(self, n: int) -> np.ndarray:
        """Forward drift from the transition density (continuity form)."""
        tau = self.tau_grid(n, "right")
        k = self.space.cards[n]
        ii = np.arange(k)
        tau = tau.copy()
        tau[..., ii, ii] = 0.0
        return tau.sum(axis=(2, 3)) - tau.sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# public API


@dataclass
class MarginalTrajectories:
    """Converged per-node marginals, multipliers and reset factors (B=1)."""

    times: np.ndarray
    m: list  # per node (G, K)
    log_rho: list  # per node (G, K), slice-normalized right limits
    log_reset: list  # per node (G, K)
    model: NetworkModel
    config: InferenceConfig
    report: ConvergenceReport
    engine: SweepEngine = field(repr=False, default=None)

    def rho(self, n: int) -> np.ndarray:
        return np.exp(self.log_rho[n])

    def tau(self, n: int, side: str = "right") -> np.ndarray:
        return self.engine.tau_grid(n, side)[0]


def _log_lik_arrays(model: NetworkModel, obs_list, grid) -> list:
    b = len(obs_list)
    g = len(grid)
    out = [np.zeros((b, g, model.space.cards[n])) for n in range(model.n_nodes)]
    for bi, obs in enumerate(obs_list):
        if obs is None or obs.n_obs == 0:
            continue
        idx = obs_grid_indices(grid, obs.times)
        for i in range(obs.n_obs):
            n = int(obs.nodes[i])
            ll = obs.noise.log_likelihood(n, model.space.cards[n], float(obs.values[i]))
            out[n][bi, idx[i]] += np.asarray(ll, dtype=float)
    for n, arr in enumerate(out):
        excluded = np.isneginf(arr).all(axis=-1)
        if np.any(excluded):
            b_bad, g_bad = np.argwhere(excluded)[0]
            raise InferenceError(
                f"observation at t={grid[g_bad]:.6g} excludes all states of node {n}"
            )
    return [np.maximum(a, LOG_LIK_FLOOR) for a in out]


def build_engine(
    model: NetworkModel,
    obs_list: Sequence[Optional[ObservationSet]],
    horizon: float,
    config: InferenceConfig = InferenceConfig(),
    rates=None,
    initial_m=None,
) -> SweepEngine:
    """Assemble a batched engine for trajectories sharing one horizon."""
    all_times = [o.unique_times() for o in obs_list if o is not None and o.n_obs]
    union = np.unique(np.concatenate(all_times)) if all_times else ()
    grid = make_grid(
        horizon,
        union,
        step=config.grid_step,
        base_steps=config.base_steps,
        boundary_refine=config.boundary_refine,
    )
    lnl = _log_lik_arrays(model, obs_list, grid)
    b = len(obs_list)
    m0 = []
    for n in range(model.n_nodes):
        k = model.space.cards[n]
        if initial_m is None:
            m0.append(np.full((b, k), 1.0 / k))
        else:
            base = np.asarray(initial_m[n], dtype=float)
            m0.append(np.broadcast_to(base / base.sum(), (b, k)).copy())
    return SweepEngine(model, grid, lnl, m0, config, rates=rates)


def fixed_point(
    model: NetworkModel,
    observations: Optional[ObservationSet],
    config: InferenceConfig = InferenceConfig(),
    horizon: Optional[float] = None,
    rates=None,
    initial_m=None,
) -> MarginalTrajectories:
    """Solve the coupled sweeps to a fixed point for one observation set.

    Non-convergence within ``config.max_sweeps`` is flagged on the returned
    report, never silent.
    """
    if horizon is None:
        if observations is None:
            raise InferenceError("pass horizon when there are no observations")
        horizon = observations.horizon
    engine = build_engine(model, [observations], horizon, config, rates, initial_m)
    report = engine.run()
    return MarginalTrajectories(
        times=engine.grid,
        m=[engine.m[n][0] for n in range(model.n_nodes)],
        log_rho=[engine.lam[n][0] for n in range(model.n_nodes)],
        log_reset=[engine.log_lik[n][0] for n in range(model.n_nodes)],
        model=model,
        config=config,
        report=report,
        engine=engine,
    )


def mean_field_fixed_point(
    model: NetworkModel,
    observations: Optional[ObservationSet],
    config: InferenceConfig = InferenceConfig(),
    horizon: Optional[float] = None,
    rates=None,
    initial_m=None,
) -> MarginalTrajectories:
    """Naive mean-field variant of :func:`fixed_point`."""
    import dataclasses

    cfg = dataclasses.replace(config, cluster="mean_field")
    return fixed_point(model, observations, cfg, horizon, rates, initial_m)


def variational_energy(trajectories: MarginalTrajectories) -> EnergyBreakdown:
    eb = trajectories.engine.energy()
    return EnergyBreakdown(
        total=float(eb.total[0]),
        entropy=eb.entropy[:, 0],
        energy=eb.energy[:, 0],
        data_term=float(eb.data_term[0]),
    )


def expected_stats(trajectories: MarginalTrajectories) -> SufficientStats:
    return trajectories.engine.stats(pooled=False)[0]


# ---------------------------------------------------------------------------
# reference (pointwise) implementations, used as readable definitions and by
# the vectorized engine's tests


def compute_psi(model: NetworkModel, n: int, m_at_t, log_rho_at_t, rates=None) -> np.ndarray:
    """Child-feedback vector psi_n(x') at one instant.

    psi_n(x') sums, over children j and their state pairs, the rho-weighted
    conditional rate expectations with node n's slot in the parent
    configuration pinned to x'.
    """
    rates = rates if rates is not None else model.cims
    space, graph = model.space, model.graph
    kn = space.cards[n]
    psi = np.zeros(kn)
    for j in graph.children(n):
        pa = graph.parents(j)
        kj = space.cards[j]
        rho = np.exp(np.asarray(log_rho_at_t[j]) - np.max(log_rho_at_t[j]))
        m_j = np.asarray(m_at_t[j])
        for xp in range(kn):
            er = np.zeros((kj, kj))
            for u in range(rates[j].shape[0]):
                w = 1.0
                rest = np.unravel_index(u, tuple(space.cards[p] for p in pa))
                skip = False
                for p, s in zip(pa, rest):
                    if p == n:
                        if s != xp:
                            skip = True
                            break
                    else:
                        w *= m_at_t[p][s]
                if not skip:
                    er += w * rates[j][u]
            for x in range(kj):
                acc = er[x, x]
                for y in range(kj):
                    if y != x:
                        acc += rho[y] / rho[x] * er[x, y]
                psi[xp] += m_j[x] * acc
    return psi


def compute_tau(m_n, log_rho_n, parent_marginals, cim) -> np.ndarray:
    """tau_n^u(x,y) = m_n(x) m_n^u R_n^u(x,y) rho(y)/rho(x), diagonal filled."""
    m_n = np.asarray(m_n, dtype=float)
    lam = np.asarray(log_rho_n, dtype=float)
    w = config_weights([np.asarray(p, dtype=float) for p in parent_marginals])
    u_count, k, _ = cim.shape
    tau = np.zeros((u_count, k, k))
    for u in range(u_count):
        for x in range(k):
            for y in range(k):
                if x != y:
                    tau[u, x, y] = m_n[x] * w[u] * cim[u, x, y] * math.exp(lam[y] - lam[x])
            tau[u, x, x] = -(tau[u, x].sum() - tau[u, x, x])
    return tau


# ---------------------------------------------------------------------------
# export


def save_marginals(trajectories: MarginalTrajectories, path) -> None:
    """CSV export (time, node, state, m, rho) for plotting."""
    import json as _json

    cfg = {k: v for k, v in trajectories.config.__dict__.items()}
    with open(path, "w") as f:
        f.write(f"# ctbn-marginals {_json.dumps(cfg)}\n")
        f.write("time,node,state,m,rho\n")
        for n in range(trajectories.model.n_nodes):
            rho = trajectories.rho(n)
            for gi, t in enumerate(trajectories.times):
                for x in range(trajectories.model.space.cards[n]):
                    f.write(f"{t!r},{n},{x},{trajectories.m[n][gi, x]!r},{rho[gi, x]!r}\n")
