"""Kernel processes, stochastic exponentials and local-time estimators.

A deflator is ``Z_nu = E(-int (theta + nu) dW)`` for a kernel process ``nu``
with ``sigma nu = 0``. Exponentials are accumulated in log space, so ``Z`` is
positive by construction. All per-step quantities live on the phase
resolution of the market (one or two sub-steps per grid step), and node
values are read off every ``n_phases``-th boundary.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError
from .market import AssetPaths, MarketState
from .paths import BrownianBatch, BrownianPath, PassageBatch, PassageResult
from .stats import DEFAULT_LEVEL, STRICT_Z, EstimateCI, mc_estimate, z_value

KERNEL_TOL = 1e-10
L2_CEILING = 1e3


def compensated_cumsum(x: np.ndarray, block: int = 64) -> np.ndarray:
    """Running sum along the last axis with Kahan-compensated block offsets.

    Sums inside short blocks are exact to a few ulps; the carries between
    blocks are accumulated with a compensation term, so the error does not
    grow with the number of steps.
    """
    x = np.asarray(x, dtype=float)
    lead, M = x.shape[:-1], x.shape[-1]
    if M == 0:
        return x.copy()
    flat = x.reshape(-1, M)
    nb = -(-M // block)
    padded = np.zeros((flat.shape[0], nb * block))
    padded[:, :M] = flat
    inner = np.cumsum(padded.reshape(-1, nb, block), axis=2)
    totals = inner[:, :, -1]
    offsets = np.zeros((flat.shape[0], nb))
    s = np.zeros(flat.shape[0])
    c = np.zeros(flat.shape[0])
    for b in range(1, nb):
        y = totals[:, b - 1] - c
        t = s + y
        c = (t - s) - y
        s = t
        offsets[:, b] = s
    out = (inner + offsets[:, :, None]).reshape(-1, nb * block)[:, :M]
    return out.reshape(lead + (M,))


# ------------------------------------------------------------------ kernel specs


@dataclass(frozen=True)
class DeflatorSpec:
    """Kernel rule ``nu(state) -> (P, m, d)`` evaluated at phase starts."""

    nu: Callable[[MarketState], np.ndarray]
    label: str
    tag: str | None = None
    n: float | None = None


def zero_kernel(d: int = 1) -> DeflatorSpec:
    return DeflatorSpec(lambda s: np.zeros(s.t.shape + (d,)), "zero", "zero", 0.0)


def make_nu_n(n: float, passage: PassageResult | PassageBatch | None = None) -> DeflatorSpec:
    """``nu_n = n 1_{(0, tau]}``; zero from the passage time on.

    The rule reads the passage time from the market state, so ``passage`` is
    accepted only for symmetry with the closed-form helpers.
    """
    n = float(n)
    if not (n >= 0 and math.isfinite(n)):
        raise InvalidArgumentError("n must be a non-negative finite number")
    if n == 0:
        return zero_kernel()

    def rule(state: MarketState) -> np.ndarray:
        return np.where(np.isinf(state.tau_seen), n, 0.0)[..., None]

    return DeflatorSpec(rule, f"nu_n({n:g})", f"nu_n:{n:g}", n)


_TAG = re.compile(r"^nu_n:([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)$")


def parse_tag(tag: str) -> DeflatorSpec:
    """Resolve ``"zero"`` or ``"nu_n:<float>"``."""
    tag = tag.strip()
    if tag == "zero":
        return zero_kernel()
    m = _TAG.match(tag)
    if not m:
        raise InvalidArgumentError(f"unknown kernel tag {tag!r}; use 'zero' or 'nu_n:<float>'")
    return make_nu_n(float(m.group(1)))


def nu_n_stopped_value(n: float, passage) -> np.ndarray:
    """``E(-int nu_n dW)`` at ``tau``: ``exp(-n W(tau) - n^2 tau / 2)``."""
    return np.exp(-n * np.asarray(passage.w_tau) - 0.5 * n * n * np.asarray(passage.tau))


@dataclass(frozen=True)
class KernelCheck:
    max_residual: float
    l2_integral_max: float
    tol: float
    ceiling: float

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tol and self.l2_integral_max <= self.ceiling


def kernel_check(spec: DeflatorSpec, assets: AssetPaths, tol: float = KERNEL_TOL,
                 ceiling: float = L2_CEILING) -> KernelCheck:
    """Grid check of ``sigma nu = 0`` and of a finite ``int |nu|^2 dt``.

    The residual is ``|sigma nu| / (1 + |sigma| |nu|)`` with Frobenius norms.
    """
    T = assets.grid.horizon
    worst = 0.0
    l2 = np.zeros(assets.n_paths)
    for ph in assets.phases:
        nu = np.asarray(spec.nu(ph.state(T)), dtype=float)
        live = ph.dt > 0
        sn = np.einsum("pmkd,pmd->pmk", ph.sigma, nu)
        num = np.sqrt(np.einsum("pmk,pmk->pm", sn, sn))
        den = 1.0 + np.sqrt(np.einsum("pmkd,pmkd->pm", ph.sigma, ph.sigma)) * np.sqrt(
            np.einsum("pmd,pmd->pm", nu, nu))
        res = np.where(live, num / den, 0.0)
        worst = max(worst, float(res.max(initial=0.0)))
        l2 += (np.einsum("pmd,pmd->pm", nu, nu) * ph.dt).sum(axis=1)
    return KernelCheck(worst, float(l2.max()), tol, ceiling)


# --------------------------------------------------------- stochastic exponential


@dataclass(frozen=True, eq=False)
class DeflatorPath:
    """Log of ``Z`` at every sub-step boundary, shape ``(P, m * n_phases + 1)``."""

    log_z: np.ndarray
    integrand: np.ndarray
    n_phases: int = 1
    grid: object | None = None
    label: str = ""

    @property
    def z(self) -> np.ndarray:
        return np.exp(self.log_z)

    @property
    def log_nodes(self) -> np.ndarray:
        return self.log_z[:, :: self.n_phases]

    @property
    def nodes(self) -> np.ndarray:
        """``Z`` at the grid nodes, shape ``(P, m + 1)``."""
        return np.exp(self.log_nodes)

    @property
    def terminal(self) -> np.ndarray:
        return np.exp(self.log_z[:, -1])

    def log_phase_start(self, phase: int) -> np.ndarray:
        """``log Z`` at the start of the given phase of each step, shape ``(P, m)``."""
        return self.log_z[:, phase:-1:self.n_phases]

    def compatible(self, other: "DeflatorPath") -> bool:
        same_grid = (self.grid is None and other.grid is None) or (
            self.grid is not None and other.grid is not None and self.grid.same_as(other.grid))
        return self.log_z.shape == other.log_z.shape and self.n_phases == other.n_phases and same_grid


def stochastic_exponential(integrand, w, dt=None, n_phases: int = 1, label: str = "") -> DeflatorPath:
    """``E(-int q dW)`` on a grid for a per-step integrand ``q``.

    ``w`` is a :class:`BrownianPath`, a :class:`BrownianBatch` or a raw array of
    increments (then ``dt`` is required). Integrands may omit the trailing
    dimension when ``d = 1``. ``log Z`` is the running sum of
    ``-q.dW - |q|^2 dt / 2``.
    """
    grid = None
    if isinstance(w, (BrownianPath, BrownianBatch)):
        grid = w.grid
        dw = w.increments
        dt = grid.dt
    else:
        if dt is None:
            raise InvalidArgumentError("dt is required with raw increments")
        dw = np.asarray(w, dtype=float)
    dw = np.asarray(dw, dtype=float)
    q = np.asarray(integrand, dtype=float)
    if q.ndim == dw.ndim - 1:
        q = q[..., None]
    if dw.ndim == 2:
        dw, q = dw[None], q[None]
    if q.shape != dw.shape:
        try:
            q = np.broadcast_to(q, dw.shape)
        except ValueError as exc:
            raise InvalidArgumentError(f"integrand shape {q.shape} does not match increments {dw.shape}") from exc
    dt = np.broadcast_to(np.asarray(dt, dtype=float), dw.shape[:-1])
    bad = ~np.isfinite(q).all(axis=-1)
    if bad.any():
        j = int(np.argmax(bad.any(axis=0)))
        raise NumericFailureError(f"non-finite integrand at node {j // n_phases}", j // n_phases)
    if q.shape[-1] == 1:
        q1 = q[..., 0]
        step = -q1 * (dw[..., 0] + 0.5 * q1 * dt)
    else:
        step = -np.einsum("pmd,pmd->pm", q, dw) - 0.5 * np.einsum("pmd,pmd->pm", q, q) * dt
    log_z = np.zeros((dw.shape[0], dw.shape[1] + 1))
    log_z[:, 1:] = compensated_cumsum(step)
    return DeflatorPath(log_z, q, n_phases, grid, label)


def _interleave(arrays):
    """Stack per-phase ``(P, m, ...)`` arrays into ``(P, m * n_phases, ...)``."""
    stacked = np.stack(arrays, axis=2)
    P, m, nph = stacked.shape[:3]
    return stacked.reshape((P, m * nph) + stacked.shape[3:])


def deflator_path(spec: DeflatorSpec, assets: AssetPaths, include_theta: bool = True,
                  stop_at_passage: bool = False) -> DeflatorPath:
    """``Z_nu`` along a simulated market.

    With ``stop_at_passage`` the integrand is switched off from the passage
    time on, which gives ``Z_nu(t ^ tau)``; in the counterexample the market
    price of risk vanishes before ``tau``, so this is the pure kernel part.
    """
    T = assets.grid.horizon
    qs, dws, dts = [], [], []
    for ph in assets.phases:
        state = ph.state(T)
        q = np.asarray(spec.nu(state), dtype=float)
        if include_theta:
            q = q + ph.theta
        if stop_at_passage:
            q = np.where(np.isinf(state.tau_seen)[..., None], q, 0.0)
        qs.append(q)
        dws.append(ph.dw)
        dts.append(ph.dt)
    return stochastic_exponential(_interleave(qs), _interleave(dws), _interleave(dts),
                                  n_phases=assets.n_phases, label=spec.label)


def switch_process(nu1: DeflatorSpec, nu2: DeflatorSpec, z1: DeflatorPath, z2: DeflatorPath
                   ) -> DeflatorSpec:
    """``nu_3 = nu_1 1_chi + nu_2 1_{chi^c}`` with ``chi = {Z_1 >= Z_2}``; ties pick ``nu_1``."""
    if not z1.compatible(z2):
        raise InvalidArgumentError("z1 and z2 must live on the same grid and driving paths")

    def rule(state: MarketState) -> np.ndarray:
        chi = z1.log_phase_start(state.phase) >= z2.log_phase_start(state.phase)
        return np.where(chi[..., None], nu1.nu(state), nu2.nu(state))

    return DeflatorSpec(rule, f"switch({nu1.label},{nu2.label})")


# ------------------------------------------------------------------- local time


@dataclass(frozen=True, eq=False)
class LocalTimePath:
    """Local time at zero of ``Z_2 - Z_1`` on sub-step boundaries."""

    L: np.ndarray
    N: np.ndarray
    estimator: str
    n_phases: int = 1

    @property
    def nodes(self) -> np.ndarray:
        return self.L[:, :: self.n_phases]

    @property
    def terminal(self) -> np.ndarray:
        return self.L[:, -1]


@dataclass(frozen=True, eq=False)
class LocalTimePair:
    skorokhod: LocalTimePath
    tanaka: LocalTimePath

    def discrepancy(self) -> np.ndarray:
        """Pathwise ``|L_skorokhod(T) - L_tanaka(T)|``."""
        return np.abs(self.skorokhod.terminal - self.tanaka.terminal)


def tanaka_local_time(z1: DeflatorPath, z2: DeflatorPath) -> LocalTimePair:
    """Both grid estimators of the local time at zero of ``X = Z_2 - Z_1``.

    ``N = sum sign(X) dX`` with ``sign(0) = 0``. The Skorokhod estimator is the
    running maximum of ``-N`` floored at zero. The Tanaka residual is
    ``2 (X^+ - sum 1_{X > 0} dX)``, whose increments are non-negative on
    any grid and whose mean matches the drift of ``Z_1 v Z_2`` exactly in
    discrete time.
    """
    if not z1.compatible(z2):
        raise InvalidArgumentError("z1 and z2 must live on the same grid and driving paths")
    X = z2.z - z1.z
    dX = np.diff(X, axis=1)
    left = X[:, :-1]
    N = np.zeros_like(X)
    N[:, 1:] = compensated_cumsum(np.sign(left) * dX)
    L_sk = np.maximum(np.maximum.accumulate(-N, axis=1), 0.0)
    pos = np.zeros_like(X)
    pos[:, 1:] = compensated_cumsum(np.where(left > 0, dX, 0.0))
    L_tan = 2.0 * (np.maximum(X, 0.0) - pos)
    L_tan[:, 0] = 0.0
    # the residual's increments are non-negative up to rounding
    L_tan = np.maximum.accumulate(np.maximum(L_tan, 0.0), axis=1)
    return LocalTimePair(LocalTimePath(L_sk, N, "skorokhod", z1.n_phases),
                         LocalTimePath(L_tan, N, "tanaka-residual", z1.n_phases))


# ------------------------------------------------------------------ gap report


@dataclass(frozen=True)
class GapReport:
    checkpoint: float
    gap: EstimateCI
    half_local_time: EstimateCI
    difference: EstimateCI
    z_gap: float
    z_identity: float
    identity_ok: bool
    gap_positive: bool

    def to_dict(self) -> dict:
        return {"checkpoint": self.checkpoint, "gap": self.gap.to_dict(),
                "half_local_time": self.half_local_time.to_dict(),
                "difference": self.difference.to_dict(), "z_gap": self.z_gap,
                "z_identity": self.z_identity, "identity_ok": self.identity_ok,
                "gap_positive": self.gap_positive}


def _z(est: EstimateCI, ref: float = 0.0) -> float:
    d = est.mean - ref
    if est.stderr > 0:
        return d / est.stderr
    return 0.0 if d == 0 else math.copysign(math.inf, d)


def gap_report(max_values, half_local_time, checkpoint: float = math.nan,
               level: float = DEFAULT_LEVEL) -> GapReport:
    """Both sides of ``E[Z_1 v Z_2](t) - 1 = E[L(t)] / 2`` from per-path samples.

    The identity is judged on the paired difference, so the correlation
    between the two sides enters the joint interval.
    """
    mx = np.asarray(max_values, dtype=float) - 1.0
    hl = np.asarray(half_local_time, dtype=float)
    gap = mc_estimate(mx, level)
    half = mc_estimate(hl, level)
    diff = mc_estimate(mx - hl, level)
    zg, zi = _z(gap), _z(diff)
    return GapReport(float(checkpoint), gap, half, diff, zg, zi,
                     abs(zi) <= z_value(level), zg >= STRICT_Z)


def max_closure_gap(z1: DeflatorPath, z2: DeflatorPath, local_time: LocalTimePair | None = None,
                    checkpoint: int = -1, level: float = DEFAULT_LEVEL) -> GapReport:
    """Gap report at a grid node, using the Tanaka-residual local time."""
    if local_time is None:
        local_time = tanaka_local_time(z1, z2)
    n1, n2 = z1.nodes, z2.nodes
    t = z1.grid.nodes[checkpoint] if z1.grid is not None else float(checkpoint)
    mx = np.maximum(n1[:, checkpoint], n2[:, checkpoint])
    return gap_report(mx, 0.5 * local_time.tanaka.nodes[:, checkpoint], t, level)
