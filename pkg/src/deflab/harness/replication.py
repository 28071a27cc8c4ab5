"""Replication of the unit payoff in the post-passage Bessel market."""

from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidArgumentError
from ..market import MarketState, StrategySpec
from ..oracles import std_normal_cdf, std_normal_pdf, std_normal_ppf


def _check(t, x, T):
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(t >= T) or np.any(t < 0):
        raise InvalidArgumentError("replication needs 0 <= t < T")
    if np.any(x <= 0):
        raise InvalidArgumentError("asset price must be positive")
    return t, x


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def bond_replication_value(t, x, T: float):
    """``v(t, x) = 2 Phi(x / sqrt(T - t)) - 1``: the cost at ``t`` of delivering 1 at ``T``."""
    t, x = _check(t, x, T)
    return _out(2.0 * std_normal_cdf(x / np.sqrt(T - t)) - 1.0)


def hedge_ratio(t, x, T: float):
    """``dv/dx = 2 phi(x / sqrt(T - t)) / sqrt(T - t)``, in units of the asset."""
    t, x = _check(t, x, T)
    s = np.sqrt(T - t)
    return _out(2.0 * std_normal_pdf(x / s) / s)


def hedge_gamma(t, x, T: float):
    """``d^2 v / dx^2 = -2 z phi(z) / (T - t)`` with ``z = x / sqrt(T - t)``."""
    return hedge_derivative(t, x, T, 1)


def hedge_derivative(t, x, T: float, k: int):
    """``k``-th ``x``-derivative of the hedge ratio.

    With ``z = x / sqrt(u)`` and ``u = T - t`` this is
    ``2 (-1)^k He_k(z) phi(z) / u^((k + 1) / 2)``, where ``He_k`` is the
    probabilists' Hermite polynomial.
    """
    t, x = _check(t, x, T)
    u = T - t
    z = x / np.sqrt(u)
    coef = np.zeros(k + 1)
    coef[k] = 1.0
    he = np.polynomial.hermite_e.hermeval(z, coef)
    return _out(2.0 * (-1.0) ** k * he * std_normal_pdf(z) / u ** ((k + 1) / 2.0))


def _active(state: MarketState):
    """Positions are held only once the passage has occurred and before ``T``."""
    return np.isfinite(state.tau_seen) & (state.t < state.horizon)


HEDGE_SCHEMES = ("euler", "milstein", "taylor2")


def _taylor_terms(t, x, T, dt, dw, order):
    """Ito-Taylor terms of ``dv`` beyond ``h dS`` along ``dS = dt / x + dW``.

    Time derivatives are eliminated with ``v_t = -v_xx / 2``. ``order=1`` is
    the Milstein term; ``order=2`` adds the ``dt^(3/2)`` and ``dt^2`` terms.
    """
    h1 = hedge_derivative(t, x, T, 1)
    out = 0.5 * h1 * (dw * dw - dt)
    if order < 2:
        return out
    h2 = hedge_derivative(t, x, T, 2)
    h3 = hedge_derivative(t, x, T, 3)
    w2 = dw * dw
    out = out + dw * (h2 * w2 / 6.0 + dt * (h1 / x - 0.5 * h2))
    out = out + (h3 * w2 * w2 + 12.0 * w2 * dt * (h2 / x - 0.5 * h3)
                 + 3.0 * dt * dt * (h3 - 4.0 * h2 / x + 4.0 * h1 / (x * x))) / 24.0
    return out


def arbitrage_strategy(T: float, scheme: str = "taylor2") -> StrategySpec:
    """Zero-endowment strategy: do nothing before ``tau``, then hedge the unit bond.

    At ``tau`` the cost ``v(tau, 1) < 1`` is borrowed and the replicating
    position ``h S`` is held in the asset, so terminal wealth is
    ``1 - v(tau, 1)`` on ``{tau < T}`` and zero otherwise. The lower bound is
    ``-v(tau, 1) > -1``. ``scheme`` picks how the gains integral is
    discretised: plain Euler, Milstein, or the second-order Ito-Taylor scheme.
    """
    if not T > 0:
        raise InvalidArgumentError("T must be positive")
    if scheme not in HEDGE_SCHEMES:
        raise InvalidArgumentError(f"hedge scheme must be one of {HEDGE_SCHEMES}")

    order = 1 if scheme == "milstein" else 2

    def active_values(state):
        on = _active(state)
        return on, state.t[on], state.x[..., 0][on]

    def pi(state):
        on, t, x = active_values(state)
        out = np.zeros(on.shape)
        out[on] = hedge_ratio(t, x, T) * x
        return out[..., None]

    def correction(state, dt, dw):
        on, t, x = active_values(state)
        out = np.zeros(on.shape)
        out[on] = _taylor_terms(t, x, T, dt[on], dw[on], order)
        return out

    return StrategySpec(pi, 0.0, None if scheme == "euler" else correction, -1.0,
                        f"bond-arbitrage/{scheme}")


def replication_target(passage, T: float) -> np.ndarray:
    """``2 (1 - Phi(1 / sqrt(T - tau)))`` on ``{tau < T}`` and 0 elsewhere."""
    rem = np.where(passage.hit, T - passage.tau, 1.0)
    return np.where(passage.hit, 2.0 * std_normal_cdf(-1.0 / np.sqrt(rem)), 0.0)


def initial_cost(passage, T: float) -> np.ndarray:
    """``v(tau ^ T, S(tau ^ T))``: ``v(tau, 1)`` after a passage, the payoff 1 otherwise."""
    rem = np.where(passage.hit, T - passage.tau, 1.0)
    return np.where(passage.hit, 2.0 * std_normal_cdf(1.0 / np.sqrt(rem)) - 1.0, 1.0)


def threshold_horizon(threshold: float) -> float:
    """``delta`` with ``2 (1 - Phi(1 / sqrt(delta))) = threshold``.

    The terminal wealth exceeds ``threshold`` exactly when ``tau < T - delta``.
    """
    if not 0 < threshold < 1:
        raise InvalidArgumentError("threshold must lie in (0, 1)")
    q = std_normal_ppf(1.0 - threshold / 2.0)
    return 1.0 / (q * q)


def threshold_mass(a: float, T: float, threshold: float) -> float:
    """``P(tau < T - delta) = 2 (1 - Phi(a / sqrt(T - delta)))``, zero if ``delta >= T``."""
    delta = threshold_horizon(threshold)
    if delta >= T:
        return 0.0
    return math.erfc(a / math.sqrt(2.0 * (T - delta)))


def pde_residual(t, x, T: float, rel_step: float = 1e-4):
    """``|v_t + v_xx / 2|`` by central differences with steps ``rel_step * (T - t)`` and ``rel_step * x``.

    An independent check of the closed form: it uses only ``v`` itself.
    """
    t, x = _check(t, x, T)
    ht = rel_step * (T - t)
    hx = rel_step * x
    v = lambda tt, xx: 2.0 * std_normal_cdf(xx / np.sqrt(T - tt)) - 1.0
    v_t = (v(t + ht, x) - v(t - ht, x)) / (2.0 * ht)
    v_xx = (v(t, x + hx) - 2.0 * v(t, x) + v(t, x - hx)) / (hx * hx)
    return _out(np.abs(v_t + 0.5 * v_xx))
