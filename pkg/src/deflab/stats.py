"""Monte-Carlo estimates, drift tests and deterministic block reduction."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .oracles import std_normal_ppf

DEFAULT_LEVEL = 0.99
STRICT_Z = 3.0
THREADS_ENV = "DEFLAB_THREADS"


def z_value(level: float, two_sided: bool = True) -> float:
    if not 0 < level < 1:
        raise InvalidArgumentError(f"confidence level must be in (0, 1), got {level}")
    alpha = 1.0 - level
    return std_normal_ppf(1.0 - alpha / 2.0) if two_sided else std_normal_ppf(level)


@dataclass(frozen=True)
class EstimateCI:
    n: int
    mean: float
    stderr: float
    level: float
    low: float
    high: float

    @property
    def half_width(self) -> float:
        return 0.5 * (self.high - self.low)

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "stderr": self.stderr,
                "ci": [self.low, self.high]}


def mc_estimate(samples, level: float = DEFAULT_LEVEL) -> EstimateCI:
    """Sample mean with a normal-theory confidence interval.

    Both passes use ``math.fsum`` in index order, so the result depends only
    on the sequence of samples and never on how they were produced.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise InvalidArgumentError("mc_estimate needs at least two samples")
    if not np.isfinite(x).all():
        raise InvalidArgumentError("samples must be finite")
    mean = math.fsum(x.tolist()) / n
    dev = x - mean
    var = math.fsum((dev * dev).tolist()) / (n - 1)
    stderr = math.sqrt(var / n)
    z = z_value(level)
    return EstimateCI(n, mean, stderr, level, mean - z * stderr, mean + z * stderr)


@dataclass(frozen=True)
class OracleVerdict:
    passed: bool
    z: float
    discrepancy: float


def compare_to_oracle(estimate: EstimateCI, oracle: float) -> OracleVerdict:
    """Pass iff ``|mean - oracle| <= z(level) * stderr``."""
    diff = estimate.mean - oracle
    if estimate.stderr > 0:
        z = diff / estimate.stderr
    else:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return OracleVerdict(abs(z) <= z_value(estimate.level), z, diff)


def one_sided_z(estimate: EstimateCI, reference: float, direction: str = "below") -> float:
    """Standardised distance of the mean from ``reference`` in the given direction."""
    gap = reference - estimate.mean if direction == "below" else estimate.mean - reference
    if estimate.stderr > 0:
        return gap / estimate.stderr
    return 0.0 if gap == 0 else math.copysign(math.inf, gap)


@dataclass
class DriftTestReport:
    checkpoints: list[float]
    means: list[float]
    stderrs: list[float]
    z_scores: list[float]
    threshold: float
    verdicts: list[bool]
    degenerate: list[bool]
    alternative: str
    passed: bool
    note: str = ("a checkpoint z-test detects drift only; it cannot certify the "
                 "local martingale property between checkpoints")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "checkpoints", "means", "stderrs", "z_scores", "threshold", "verdicts",
            "degenerate", "alternative", "passed", "note")}


def martingale_drift_test(values, reference, checkpoints: Sequence[float] | None = None,
                          level: float = DEFAULT_LEVEL, alternative: str = "two-sided",
                          ) -> DriftTestReport:
    """Test ``E[M(t)] = reference`` at every checkpoint with Bonferroni correction.

    ``values`` has shape ``(paths, checkpoints)``; ``reference`` is the initial
    value, or one value per checkpoint when the mean is known to move. With ``alternative="greater"``
    the test is one-sided and a failure means upward drift was detected, which
    is how a strict submartingale shows up.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise InvalidArgumentError("values must have shape (paths, checkpoints)")
    n_paths, n_cp = v.shape
    if n_cp < 2:
        raise InvalidArgumentError("drift test needs at least two checkpoints")
    if n_paths < 100:
        raise InvalidArgumentError("drift test needs an ensemble of at least 100 paths")
    if alternative not in ("two-sided", "greater", "less"):
        raise InvalidArgumentError(f"unknown alternative {alternative!r}")
    checkpoints = list(range(n_cp)) if checkpoints is None else [float(c) for c in checkpoints]
    refs = np.broadcast_to(np.asarray(reference, dtype=float), (n_cp,))

    alpha = (1.0 - level) / n_cp
    if alternative == "two-sided":
        threshold = std_normal_ppf(1.0 - alpha / 2.0)
    else:
        threshold = std_normal_ppf(1.0 - alpha)

    means, ses, zs, oks, degen = [], [], [], [], []
    for c in range(n_cp):
        est = mc_estimate(v[:, c], level)
        diff = est.mean - float(refs[c])
        if est.stderr == 0.0:
            z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
            degen.append(diff != 0)
        else:
            z = diff / est.stderr
            degen.append(False)
        if alternative == "two-sided":
            ok = abs(z) <= threshold
        elif alternative == "greater":
            ok = z <= threshold
        else:
            ok = z >= -threshold
        means.append(est.mean)
        ses.append(est.stderr)
        zs.append(z)
        oks.append(bool(ok) and not degen[-1])
    return DriftTestReport(checkpoints, means, ses, zs, float(threshold), oks, degen,
                           alternative, all(oks))


def joint_agreement(first: EstimateCI, second: EstimateCI, level: float = DEFAULT_LEVEL
                    ) -> OracleVerdict:
    """Do two independent estimates of one quantity agree within their joint interval?"""
    diff = first.mean - second.mean
    se = math.hypot(first.stderr, second.stderr)
    if se > 0:
        z = diff / se
    else:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return OracleVerdict(abs(z) <= z_value(level), z, diff)


def worker_count() -> int | None:
    """Worker cap from ``DEFLAB_THREADS``; ``None`` means choose automatically."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InvalidArgumentError(f"{THREADS_ENV} must be at least 1")
    return n


@dataclass
class BlockPlan:
    n_paths: int
    block_size: int = 1024
    blocks: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        starts = range(0, self.n_paths, self.block_size)
        self.blocks = [np.arange(s, min(s + self.block_size, self.n_paths)) for s in starts]


def map_blocks(fn: Callable[[np.ndarray], dict], n_paths: int, block_size: int = 1024,
               workers: int | None = None) -> dict[str, np.ndarray]:
    """Run ``fn`` on fixed path-index blocks and concatenate results in index order.

    ``fn`` maps an index array to a dict of per-path arrays. Block boundaries
    do not depend on the worker count, so the output is identical for any
    number of threads.
    """
    plan = BlockPlan(n_paths, block_size)
    if workers is None:
        workers = worker_count() or min(len(plan.blocks), os.cpu_count() or 1)
    workers = max(1, min(workers, len(plan.blocks)))
    if workers == 1:
        parts = [fn(idx) for idx in plan.blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, plan.blocks))
    keys = parts[0].keys()
    return {k: np.concatenate([p[k] for p in parts]) for k in keys}
