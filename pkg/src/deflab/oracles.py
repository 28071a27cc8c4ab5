"""Closed-form and quadrature oracles for the Bessel counterexample.

Everything here is deterministic and independent of the simulation code, so
Monte-Carlo estimates can be checked against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import InvalidArgumentError

SQRT_PI = math.sqrt(math.pi)
TAIL_BUDGET = 1e-10


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    error: float
    evaluations: int
    converged: bool


@dataclass(frozen=True)
class FirstPassageLaw:
    density: float
    survival: float


def _check_finite(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if np.isnan(arr).any():
        raise InvalidArgumentError(f"{name} must not be NaN")
    return arr


def _check_positive(value, name):
    if not (value > 0 and math.isfinite(value)):
        raise InvalidArgumentError(f"{name} must be a positive finite number, got {value!r}")


def std_normal_cdf(x):
    """Standard Gaussian distribution function.

    Accepts scalars or arrays. The lower tail is evaluated through ``erfc``,
    so relative accuracy in the tails is preserved.
    """
    arr = _check_finite(x)
    out = special.ndtr(arr)
    return float(out) if out.ndim == 0 else out


def std_normal_sf(x):
    """Upper tail ``1 - Phi(x)`` without cancellation."""
    arr = _check_finite(x)
    out = special.ndtr(-arr)
    return float(out) if out.ndim == 0 else out


def std_normal_pdf(x):
    arr = _check_finite(x)
    out = np.exp(-0.5 * arr * arr) / math.sqrt(2.0 * math.pi)
    return float(out) if out.ndim == 0 else out


def std_normal_ppf(p):
    """Gaussian quantile, used for inverse-CDF sampling and CI multipliers."""
    arr = _check_finite(p, "p")
    if ((arr <= 0) | (arr >= 1)).any():
        raise InvalidArgumentError("quantile level must lie strictly inside (0, 1)")
    out = special.ndtri(arr)
    return float(out) if out.ndim == 0 else out


def bessel3_inverse_moment(x0: float, u: float) -> float:
    """``E[1/R(u)]`` for a three-dimensional Bessel process started at ``x0``.

    Equals ``(2 Phi(x0/sqrt(u)) - 1) / x0``; with ``x0 = 1`` this is the
    conditional expectation of ``1/S(T)`` given the passage time.
    """
    _check_positive(x0, "x0")
    _check_positive(u, "u")
    return math.erf(x0 / math.sqrt(2.0 * u)) / x0


def first_passage_law(a: float, t: float) -> FirstPassageLaw:
    """Density and survival function of the first hitting time of level ``a``."""
    _check_positive(a, "a")
    _check_positive(t, "t")
    density = a / math.sqrt(2.0 * math.pi * t**3) * math.exp(-a * a / (2.0 * t))
    survival = math.erf(a / math.sqrt(2.0 * t))
    return FirstPassageLaw(density=density, survival=survival)


def passage_probability(a: float, T: float) -> float:
    """``P(tau < T) = 2 (1 - Phi(a / sqrt(T)))`` by the reflection principle."""
    _check_positive(a, "a")
    _check_positive(T, "T")
    return math.erfc(a / math.sqrt(2.0 * T))


def passage_truncation_time(a: float, budget: float = TAIL_BUDGET) -> float:
    """Smallest horizon ``t`` at which ``P(tau > t)`` drops below ``budget``.

    The survival function is ``erf(a / sqrt(2t))``; inverting it gives the
    cutoff used to truncate improper integrals over the passage density.
    """
    _check_positive(a, "a")
    _check_positive(budget, "budget")
    z = special.erfinv(budget)
    return a * a / (2.0 * z * z)


def adaptive_quadrature(f, lo: float, hi: float, tol: float = 1e-9, limit: int = 200,
                        rel_tol: float = 0.0, points=None) -> QuadratureResult:
    """Adaptive Gauss-Kronrod integration of ``f`` over ``[lo, hi]``.

    Infinite bounds are allowed. Integrable endpoint singularities are handled
    by the extrapolation of the underlying QUADPACK routine.
    """
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")
    kwargs = {}
    if points is not None and math.isfinite(lo) and math.isfinite(hi):
        kwargs["points"] = points
    value, err, info, *rest = integrate.quad(
        f, lo, hi, epsabs=tol, epsrel=rel_tol, limit=limit, full_output=1, **kwargs
    )
    # quad appends a warning message only when QUADPACK reports a failure
    converged = not rest and err <= max(tol, rel_tol * abs(value))
    return QuadratureResult(float(value), float(err), int(info["neval"]), bool(converged))


def z_nu_n_deficit(n: float, a: float, T: float, tol: float = 1e-9) -> QuadratureResult:
    """``1 - E[Z_{nu_n}(T)]`` computed by quadrature over the passage time.

    The deficit is ``2 E[exp(-n a - n^2 tau / 2) (1 - Phi(1/sqrt(T - tau))); tau < T]``.
    Substituting ``t = a^2 / (2y)`` turns the passage density into
    ``exp(-y) / sqrt(pi y)`` and moves the ``t -> 0`` essential zero to a
    decaying tail, which is truncated once its bound is below budget.
    """
    if not (n >= 0 and math.isfinite(n)):
        raise InvalidArgumentError("n must be a non-negative finite number")
    _check_positive(a, "a")
    _check_positive(T, "T")
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")

    y_lo = a * a / (2.0 * T)
    prefactor = 2.0 * math.exp(-n * a)
    budget = min(TAIL_BUDGET, tol / 10.0)
    # neglected mass <= prefactor * (1 - Phi(1/sqrt(T))) * erfc(sqrt(Y))
    scale = prefactor * float(special.ndtr(-1.0 / math.sqrt(T)))
    if scale <= budget:
        y_hi = y_lo + 1.0
    else:
        y_hi = max(special.erfcinv(budget / scale) ** 2, y_lo + 1.0)

    def integrand(y):
        t = a * a / (2.0 * y)
        rem = T - t
        if rem <= 0.0:
            return 0.0
        tail = special.ndtr(-1.0 / math.sqrt(rem))
        return math.exp(-n * n * t / 2.0 - y) * tail / (SQRT_PI * math.sqrt(y))

    res = adaptive_quadrature(integrand, y_lo, y_hi, tol=(tol - budget) / prefactor, limit=400)
    return QuadratureResult(
        value=prefactor * res.value,
        error=prefactor * res.error + budget,
        evaluations=res.evaluations,
        converged=res.converged and prefactor * res.error + budget <= tol,
    )


def expected_Z_nu_n(n: float, a: float, T: float, tol: float = 1e-9) -> QuadratureResult:
    """``E[Z_{nu_n}(T)]`` for the kernel ``nu_n = n 1_{(0, tau]}``; ``n = 0`` gives ``E[Z_0(T)]``."""
    d = z_nu_n_deficit(n, a, T, tol)
    return QuadratureResult(1.0 - d.value, d.error, d.evaluations, d.converged)


def z_nu_n_tail_bound(n: float, a: float, T: float) -> float:
    """Upper bound on ``1 - E[Z_{nu_n}(T)]`` from maximising each integrand factor."""
    if not (n >= 0 and math.isfinite(n)):
        raise InvalidArgumentError("n must be a non-negative finite number")
    return (2.0 * math.exp(-n * a) * float(special.ndtr(-1.0 / math.sqrt(T)))
            * passage_probability(a, T))
