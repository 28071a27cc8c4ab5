"""Ito-process market simulation, wealth processes and admissibility checks.

Two model variants are supported. ``GeneralIto`` is the usual savings account
plus ``k`` log-normal-type assets driven by ``d`` Brownian motions, with
coefficients given as rules of ``(t, prices)``. ``CounterexampleBessel`` is the
single-asset market that stays at 1 until ``W`` first reaches ``a`` and then
follows a three-dimensional Bessel process.

A simulated market exposes each grid step as one or more *phases*: the
general market has a single phase per step, while the counterexample cuts
each step at the passage time so that coefficients switch exactly at ``tau``.
Strategies and kernel processes are evaluated on a :class:`MarketState`,
which only carries information available at the phase start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError, SingularVolatilityError, StabilityError
from .paths import (
    BrownianBatch, PassageBatch, Stream, first_passage_batch, split_at_passage, stream_block,
)

RANK_TOL = 1e-10
EULER_FLOOR = 1e-8
EULER_MAX_DRIFT = 1.0
EULER_MAX_UNSTABLE = 1e-3
QV_CEILING = 1e3


# ------------------------------------------------------------------ model specs


@dataclass(frozen=True)
class GeneralIto:
    pass


@dataclass(frozen=True)
class CounterexampleBessel:
    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise InvalidArgumentError("passage level a must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of the price SDE ``dX_i = X_i mu_i dt + X_i sigma_i . dW``.

    Rules are vectorised: ``r(t, x) -> (P,)``, ``mu(t, x) -> (P, k)`` and
    ``sigma(t, x) -> (P, k, d)`` for ``t`` of shape ``(P,)`` and prices ``x`` of
    shape ``(P, k)``. They are unused by the counterexample variant, whose
    coefficients are fixed in closed form.
    """

    k: int
    d: int
    x0: tuple
    variant: GeneralIto | CounterexampleBessel = GeneralIto()
    r: Callable | None = None
    mu: Callable | None = None
    sigma: Callable | None = None

    def __post_init__(self):
        if self.k < 1 or self.d < 1 or self.k > self.d:
            raise InvalidArgumentError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if len(self.x0) != self.k or not all(x > 0 for x in self.x0):
            raise InvalidArgumentError("initial prices must be k positive numbers")
        if isinstance(self.variant, GeneralIto) and None in (self.r, self.mu, self.sigma):
            raise InvalidArgumentError("a general Ito model needs r, mu and sigma rules")
        if isinstance(self.variant, CounterexampleBessel) and (self.k, self.d) != (1, 1):
            raise InvalidArgumentError("the counterexample market has k = d = 1")


def constant_model(r: float, mu, sigma, x0) -> ModelSpec:
    """General Ito market with constant coefficients."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    k, d = sigma.shape
    if mu.shape != (k,):
        raise InvalidArgumentError("mu must have one entry per asset")

    def r_rule(t, x):
        return np.full(np.shape(t), float(r))

    def mu_rule(t, x):
        return np.broadcast_to(mu, np.shape(t) + (k,))

    def sigma_rule(t, x):
        return np.broadcast_to(sigma, np.shape(t) + (k, d))

    return ModelSpec(k, d, tuple(float(v) for v in np.atleast_1d(x0)), GeneralIto(),
                     r_rule, mu_rule, sigma_rule)


def counterexample_model(a: float) -> ModelSpec:
    return ModelSpec(1, 1, (1.0,), CounterexampleBessel(float(a)))


# ------------------------------------------------------------ market price of risk


def _rank_ok(sigma):
    sv = np.linalg.svd(sigma, compute_uv=False)
    return sv[..., -1] >= RANK_TOL * sv[..., 0]


def market_price_of_risk(mu_t, r_t, sigma_t, node=None):
    """Minimal-norm solution ``theta`` of ``sigma theta = mu - r 1``.

    Works on one node (``mu`` of shape ``(k,)``) or on stacked nodes with
    leading batch dimensions. Raises :class:`SingularVolatilityError` when the
    smallest singular value of ``sigma`` falls below ``1e-10`` times the largest.
    """
    mu_t = np.asarray(mu_t, dtype=float)
    sigma_t = np.asarray(sigma_t, dtype=float)
    if sigma_t.ndim == 0:
        sigma_t = sigma_t.reshape(1, 1)
    elif sigma_t.ndim == 1:
        sigma_t = sigma_t[None, :]
    if mu_t.ndim == 0:
        mu_t = mu_t[None]
    r_t = np.asarray(r_t, dtype=float)
    ok = _rank_ok(sigma_t)
    if not np.all(ok):
        where = node if node is not None else "given node"
        raise SingularVolatilityError(f"volatility matrix is rank deficient at {where}", node)
    excess = mu_t - r_t[..., None]
    gram = sigma_t @ np.swapaxes(sigma_t, -1, -2)
    y = np.linalg.solve(gram, excess[..., None])
    return (np.swapaxes(sigma_t, -1, -2) @ y)[..., 0]


# ----------------------------------------------------------------- asset paths


@dataclass(frozen=True, eq=False)
class MarketState:
    """What a trading or kernel rule may look at: time-``t`` information only.

    ``tau_seen`` is the passage time where it has already occurred and ``inf``
    otherwise. ``phase`` identifies which part of the step is being evaluated.
    """

    t: np.ndarray
    x: np.ndarray
    x0: np.ndarray
    tau_seen: np.ndarray
    phase: int
    horizon: float


@dataclass(frozen=True, eq=False)
class Phase:
    start: np.ndarray   # (P, m)
    dt: np.ndarray      # (P, m)
    dw: np.ndarray      # (P, m, d)
    x: np.ndarray       # (P, m, k) prices at phase start
    x0: np.ndarray      # (P, m)
    r: np.ndarray       # (P, m)
    mu: np.ndarray      # (P, m, k)
    sigma: np.ndarray   # (P, m, k, d)
    theta: np.ndarray   # (P, m, d)
    tau_seen: np.ndarray
    index: int

    def state(self, horizon: float) -> MarketState:
        return MarketState(self.start, self.x, self.x0, self.tau_seen, self.index, horizon)


@dataclass(frozen=True, eq=False)
class AssetPaths:
    grid: object
    brownian: BrownianBatch
    X0: np.ndarray          # (P, m+1)
    X: np.ndarray           # (P, m+1, k)
    phases: list
    variant: object
    passage: PassageBatch | None = None
    scheme: str = "log-euler"
    floored: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n_phases(self) -> int:
        return len(self.phases)


def _simulate_general(spec: ModelSpec, w: BrownianBatch) -> AssetPaths:
    grid = w.grid
    P, m, d = w.increments.shape
    k = spec.k
    if d != spec.d:
        raise InvalidArgumentError(f"model has d={spec.d} but paths have dim {d}")
    log_x = np.empty((P, m + 1, k))
    log_x[:, 0] = np.log(np.asarray(spec.x0))
    log_x0 = np.zeros((P, m + 1))
    r_all = np.empty((P, m))
    mu_all = np.empty((P, m, k))
    sig_all = np.empty((P, m, k, d))
    theta = np.empty((P, m, d))
    dt = grid.dt
    for j in range(m):
        t = np.full(P, grid.nodes[j])
        x = np.exp(log_x[:, j])
        r_j = np.asarray(spec.r(t, x), dtype=float)
        mu_j = np.asarray(spec.mu(t, x), dtype=float)
        s_j = np.asarray(spec.sigma(t, x), dtype=float)
        if not (np.isfinite(r_j).all() and np.isfinite(mu_j).all() and np.isfinite(s_j).all()):
            raise NumericFailureError(f"non-finite coefficient at node {j}", j)
        try:
            theta[:, j] = market_price_of_risk(mu_j, r_j, s_j, node=j)
        except SingularVolatilityError:
            raise
        r_all[:, j], mu_all[:, j], sig_all[:, j] = r_j, mu_j, s_j
        half_var = 0.5 * np.einsum("pkd,pkd->pk", s_j, s_j)
        log_x[:, j + 1] = (log_x[:, j] + (mu_j - half_var) * dt[j]
                           + np.einsum("pkd,pd->pk", s_j, w.increments[:, j]))
        log_x0[:, j + 1] = log_x0[:, j] + r_j * dt[j]
    X = np.exp(log_x)
    X0 = np.exp(log_x0)
    start = np.broadcast_to(grid.nodes[None, :-1], (P, m))
    phase = Phase(start, np.broadcast_to(dt[None, :], (P, m)), w.increments, X[:, :-1],
                  X0[:, :-1], r_all, mu_all, sig_all, theta, np.full((P, m), np.inf), 0)
    return AssetPaths(grid, w, X0, X, [phase], spec.variant, None, "log-euler")


def sample_bessel3(x0: float, u: float, master_seed: int, indices) -> np.ndarray:
    """Exact draws of a 3-d Bessel process at time ``u`` from ``x0``, one per path index.

    Uses the norm of a three-dimensional Brownian motion started at ``(x0, 0, 0)``.
    """
    if not (x0 > 0 and u > 0):
        raise InvalidArgumentError("x0 and u must be positive")
    g = stream_block(master_seed, Stream.BESSEL, indices, 3)
    g *= math.sqrt(u)
    g[:, 0] += x0
    return np.sqrt(np.einsum("pi,pi->p", g, g))


def counterexample_terminal(w: BrownianBatch, passage: PassageBatch, scheme: str = "exact",
                            floor: float = EULER_FLOOR) -> np.ndarray:
    """``S(T)`` for every path of the counterexample market.

    The exact scheme reuses ``W(T) - W(tau)`` as the first coordinate of the
    3-d Brownian motion and draws the other two coordinates over ``T - tau``.
    """
    T = w.grid.horizon
    if scheme == "exact":
        g = stream_block(w.master_seed, Stream.BESSEL, w.indices, 2)
        rem = np.where(passage.hit, T - passage.tau, 0.0)
        first = 1.0 + w.values[:, -1, 0] - passage.w_tau
        side = rem * (g[:, 0] ** 2 + g[:, 1] ** 2)
        return np.where(passage.hit, np.sqrt(first * first + side), 1.0)
    if scheme == "euler":
        split = split_at_passage(w, passage)
        return _euler_bessel(split, floor)[0][:, -1]
    raise InvalidArgumentError(f"unknown scheme {scheme!r}; use 'exact' or 'euler'")


def _euler_bessel(split, floor):
    P, m = split.post_dt.shape
    S = np.ones((P, m + 1))
    floored = np.zeros(P, dtype=bool)
    unstable = np.zeros(P, dtype=bool)
    for j in range(m):
        s = S[:, j]
        dt = split.post_dt[:, j]
        drift = dt / s
        unstable |= drift > EULER_MAX_DRIFT
        # isolated near-origin visits are absorbed by the reflection; a grid
        # on which they are common is too coarse for the 1/S drift
        if unstable.sum() > EULER_MAX_UNSTABLE * P:
            raise StabilityError(
                f"Euler drift dt/S exceeds {EULER_MAX_DRIFT} on {int(unstable.sum())} of {P} paths "
                f"by step {j}; refine the time grid or use the exact scheme")
        nxt = np.abs(s + drift + split.post_dw[:, j])
        low = nxt < floor
        floored |= low
        S[:, j + 1] = np.where(low, floor, nxt)
    return S, floored


def _simulate_counterexample(spec: ModelSpec, w: BrownianBatch, scheme: str, bridge: bool,
                             passage: PassageBatch | None) -> AssetPaths:
    grid = w.grid
    a = spec.variant.a
    if w.dim != 1:
        raise InvalidArgumentError("the counterexample market is driven by one Brownian motion")
    if passage is None:
        passage = first_passage_batch(w, a, bridge=bridge)
    split = split_at_passage(w, passage)
    P, m = split.post_dt.shape
    floored = None
    if scheme == "euler":
        S, floored = _euler_bessel(split, EULER_FLOOR)
    elif scheme == "exact":
        g = stream_block(w.master_seed, Stream.BESSEL_PATH, w.indices, 2 * m).reshape(P, m, 2)
        g *= np.sqrt(split.post_dt)[:, :, None]
        c1 = np.ones((P, m + 1))
        np.cumsum(split.post_dw, axis=1, out=c1[:, 1:])
        c1[:, 1:] += 1.0
        side = np.zeros((P, m + 1, 2))
        np.cumsum(g, axis=1, out=side[:, 1:])
        S = np.sqrt(c1 * c1 + np.einsum("pmi,pmi->pm", side, side))
    else:
        raise InvalidArgumentError(f"unknown scheme {scheme!r}; use 'exact' or 'euler'")

    nodes = grid.nodes
    tau = passage.tau[:, None]
    hit = passage.hit[:, None]
    zeros = np.zeros((P, m))
    ones = np.ones((P, m))
    s_left = S[:, :-1]
    pre_start = np.broadcast_to(nodes[None, :-1], (P, m))
    pre = Phase(pre_start, split.pre_dt, split.pre_dw[:, :, None], s_left[:, :, None], ones,
                zeros, zeros[:, :, None], zeros[:, :, None, None], zeros[:, :, None],
                np.where(hit & (tau <= pre_start), tau, np.inf), 0)
    active = split.post_dt > 0
    inv = np.where(active, 1.0 / s_left, 0.0)
    post = Phase(split.post_start, split.post_dt, split.post_dw[:, :, None], s_left[:, :, None],
                 ones, zeros, (inv * inv)[:, :, None], inv[:, :, None, None], inv[:, :, None],
                 np.where(hit & (tau <= split.post_start), tau, np.inf), 1)
    return AssetPaths(grid, w, np.ones((P, m + 1)), S[:, :, None], [pre, post], spec.variant,
                      passage, scheme, floored)


def simulate_market(spec: ModelSpec, w: BrownianBatch, scheme: str = "exact", bridge: bool = True,
                    passage: PassageBatch | None = None) -> AssetPaths:
    """Simulate prices on the grid of ``w``.

    General markets use a log-Euler step, which keeps prices positive. The
    counterexample uses ``scheme="exact"`` (3-d Brownian norm, right law at
    every node) or ``scheme="euler"`` (explicit Euler on the Bessel SDE with a
    reflecting floor, pathwise coupled to ``W``). The exact scheme adds two
    independent coordinates, so its prices are not driven by ``W`` alone;
    anything that integrates against ``W`` after ``tau`` (wealth, full
    deflators) needs the Euler scheme.
    """
    if isinstance(spec.variant, CounterexampleBessel):
        return _simulate_counterexample(spec, w, scheme, bridge, passage)
    return _simulate_general(spec, w)


def counterexample_theta(assets: AssetPaths) -> np.ndarray:
    """Market price of risk at the grid nodes: ``1_{t > tau} / S(t)``."""
    S = assets.X[:, :, 0]
    t = assets.grid.nodes[None, :]
    return np.where(assets.passage.hit[:, None] & (t > assets.passage.tau[:, None]), 1.0 / S, 0.0)


# ---------------------------------------------------------------------- wealth


@dataclass(frozen=True)
class StrategySpec:
    """A trading rule ``pi(state) -> amounts per asset`` and an initial endowment.

    ``correction``, when given, maps ``(state, dt, dW)`` to higher-order
    Ito-Taylor terms of the discounted gains over each phase, for example the
    Milstein term ``c/2 (dW^2 - dt)`` (scalar noise only).
    """

    pi: Callable[[MarketState], np.ndarray]
    x: float = 0.0
    correction: Callable[[MarketState, np.ndarray, np.ndarray], np.ndarray] | None = None
    lower_bound: float = -1.0
    label: str = "strategy"

    def __post_init__(self):
        if self.x < 0:
            raise InvalidArgumentError("initial endowment must be non-negative")


def zero_strategy(k: int = 1, x: float = 0.0) -> StrategySpec:
    return StrategySpec(lambda s: np.zeros(s.t.shape + (k,)), x, label="zero")


@dataclass(frozen=True, eq=False)
class WealthPath:
    discounted: np.ndarray    # (P, m+1)
    undiscounted: np.ndarray  # (P, m+1)
    gains_min: np.ndarray     # (P,)
    drift_integral: np.ndarray
    qv_integral: np.ndarray
    x: float


def simulate_wealth(strategy: StrategySpec, assets: AssetPaths) -> WealthPath:
    """Discounted self-financing wealth, advanced phase by phase.

    Discounted wealth gains ``pi.(mu - r) dt / X0 + pi' sigma dW / X0`` per
    phase, with the rule evaluated at the phase start.
    """
    P, m = assets.X0.shape[0], assets.X0.shape[1] - 1
    T = assets.grid.horizon
    step_gain = np.zeros((P, m))
    drift_abs = np.zeros((P, m))
    qv = np.zeros((P, m))
    for ph in assets.phases:
        state = ph.state(T)
        pi = np.asarray(strategy.pi(state), dtype=float)
        if pi.shape != ph.x.shape:
            raise InvalidArgumentError(f"strategy returned shape {pi.shape}, expected {ph.x.shape}")
        excess = ph.mu - ph.r[..., None]
        drift = np.einsum("pmk,pmk->pm", pi, excess)
        vol = np.einsum("pmk,pmkd->pmd", pi, ph.sigma)
        with np.errstate(invalid="ignore", over="ignore"):
            gain = (drift * ph.dt + np.einsum("pmd,pmd->pm", vol, ph.dw)) / ph.x0
            if strategy.correction is not None:
                if ph.dw.shape[-1] != 1:
                    raise InvalidArgumentError("gain corrections need a single driving noise")
                extra = np.asarray(strategy.correction(state, ph.dt, ph.dw[..., 0]), dtype=float)
                gain = gain + extra / ph.x0
        step_gain += gain
        drift_abs += np.abs(drift) * ph.dt
        qv += np.einsum("pmd,pmd->pm", vol, vol) * ph.dt
    bad = ~np.isfinite(step_gain)
    if bad.any():
        j = int(np.argmax(bad.any(axis=0)))
        raise NumericFailureError(f"non-finite wealth increment at node {j}", j)
    gains = np.zeros((P, m + 1))
    np.cumsum(step_gain, axis=1, out=gains[:, 1:])
    discounted = strategy.x + gains
    return WealthPath(discounted, discounted * assets.X0, gains.min(axis=1),
                      drift_abs.sum(axis=1), qv.sum(axis=1), strategy.x)


@dataclass(frozen=True)
class AdmissibilityReport:
    drift_integral: float
    qv_integral: float
    running_min: float
    lower_bound: float
    ceiling: float
    drift_ok: bool
    qv_ok: bool
    bound_ok: bool
    note: str = "the lower bound is verified at grid nodes only; excursions between nodes are not checked"

    @property
    def passed(self) -> bool:
        return self.drift_ok and self.qv_ok and self.bound_ok

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "drift_integral", "qv_integral", "running_min", "lower_bound", "ceiling",
            "drift_ok", "qv_ok", "bound_ok", "note")}
        out["passed"] = self.passed
        return out


def check_admissibility(strategy: StrategySpec, assets: AssetPaths, wealth: WealthPath | None = None,
                        ceiling: float = QV_CEILING) -> AdmissibilityReport:
    """Grid versions of the two integrability conditions and the lower bound on gains."""
    if wealth is None:
        wealth = simulate_wealth(strategy, assets)
    drift = float(wealth.drift_integral.max())
    qv = float(wealth.qv_integral.max())
    low = float(wealth.gains_min.min())
    return AdmissibilityReport(drift, qv, low, strategy.lower_bound, ceiling,
                               drift <= ceiling, qv <= ceiling, low >= strategy.lower_bound)
