"""Time grids, reproducible Brownian paths and first-passage detection.

Randomness comes from counter-based Philox streams keyed by
``(master_seed, stream purpose)`` with the path index in the counter, so a
path is a pure function of ``(grid, dim, master_seed, path_index)`` and can be
generated in any order, by any worker.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .oracles import std_normal_ppf

UINT64_MAX = 2**64 - 1
_TWO_POW_M53 = 2.0**-53


# --------------------------------------------------------------------------- grids


@dataclass(frozen=True)
class Refinement:
    """Subdivide every step that intersects ``[start, stop]`` into ``factor`` pieces."""

    start: float
    stop: float
    factor: int = 4

    def __post_init__(self):
        if not self.stop > self.start:
            raise InvalidArgumentError("refinement window must have stop > start")
        if int(self.factor) != self.factor or self.factor < 2:
            raise InvalidArgumentError("refinement factor must be an integer >= 2")


@dataclass(frozen=True, eq=False)
class TimeGrid:
    nodes: np.ndarray
    max_step: float
    kind: str = "uniform"

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise InvalidArgumentError("a grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise InvalidArgumentError("first node must be 0")
        steps = np.diff(nodes)
        if not (steps > 0).all():
            raise InvalidArgumentError("grid nodes must be strictly increasing")
        if steps.max() > self.max_step * (1 + 1e-12):
            raise InvalidArgumentError("a grid step exceeds the declared maximum")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    def index_of(self, t: float) -> int:
        """Index of the node closest to ``t``."""
        if not 0 <= t <= self.horizon * (1 + 1e-12):
            raise InvalidArgumentError(f"time {t} outside [0, {self.horizon}]")
        return int(np.argmin(np.abs(self.nodes - t)))

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.steps % factor:
            raise InvalidArgumentError(f"{self.steps} steps are not divisible by {factor}")
        return TimeGrid(self.nodes[::factor].copy(), self.max_step * factor, self.kind)

    def same_as(self, other: "TimeGrid") -> bool:
        return self is other or (self.nodes.shape == other.nodes.shape
                                 and bool(np.array_equal(self.nodes, other.nodes)))


def make_time_grid(T: float, steps: int, refinement: Refinement | None = None) -> TimeGrid:
    """Uniform grid on ``[0, T]`` with ``steps`` steps, optionally refined in a window."""
    if not (isinstance(T, (int, float)) and T > 0 and math.isfinite(T)):
        raise InvalidArgumentError(f"T must be positive, got {T!r}")
    if int(steps) != steps or steps < 1:
        raise InvalidArgumentError(f"steps must be a positive integer, got {steps!r}")
    steps = int(steps)
    nodes = np.linspace(0.0, float(T), steps + 1)
    nodes[-1] = float(T)
    if refinement is None:
        return TimeGrid(nodes, T / steps, "uniform")
    pieces = [nodes[:1]]
    for lo, hi in zip(nodes[:-1], nodes[1:]):
        if hi >= refinement.start and lo <= refinement.stop:
            pieces.append(np.linspace(lo, hi, int(refinement.factor) + 1)[1:])
        else:
            pieces.append(np.array([hi]))
    return TimeGrid(np.concatenate(pieces), T / steps, "refined")


def grid_tolerance(grid: TimeGrid) -> float:
    """Pathwise tolerance scale of the grid: one Brownian step, ``sqrt(max step)``."""
    return math.sqrt(grid.max_step)


# ----------------------------------------------------------------------- streams


class Stream(enum.IntEnum):
    INCREMENTS = 1
    BRIDGE = 2
    CROSSING = 3
    BESSEL = 4
    BESSEL_PATH = 5


def _check_seed(master_seed: int, path_index: int):
    if int(master_seed) != master_seed or not 0 <= master_seed <= UINT64_MAX:
        raise InvalidArgumentError("master_seed must be an unsigned 64-bit integer")
    if int(path_index) != path_index or path_index < 0:
        raise InvalidArgumentError("path_index must be a non-negative integer")


def uniforms(master_seed: int, stream: Stream, path_index: int, size: int) -> np.ndarray:
    """``size`` uniforms in the open interval (0, 1) for one path and purpose.

    Each 64-bit Philox output keeps its top 53 bits and is shifted by half a
    unit, so neither 0 nor 1 can occur.
    """
    _check_seed(master_seed, path_index)
    bitgen = np.random.Philox(key=[int(master_seed), int(stream)],
                              counter=[0, 0, 0, int(path_index)])
    raw = bitgen.random_raw(size)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_POW_M53


def normals(master_seed: int, stream: Stream, path_index: int, size: int) -> np.ndarray:
    """Standard Gaussians by inverse-CDF transform of :func:`uniforms`."""
    return std_normal_ppf(uniforms(master_seed, stream, path_index, size))


def stream_block(master_seed: int, stream: Stream, indices, size: int, gaussian: bool = True):
    """Stack per-path draws for a block of path indices into shape ``(len(indices), size)``."""
    draw = normals if gaussian else uniforms
    out = np.empty((len(indices), size))
    for row, i in enumerate(indices):
        out[row] = draw(master_seed, stream, int(i), size)
    return out


# ----------------------------------------------------------------------- paths


@dataclass(frozen=True, eq=False)
class BrownianPath:
    grid: TimeGrid
    dim: int
    increments: np.ndarray  # (steps, dim)
    master_seed: int
    path_index: int
    coarsened: int = 1

    @property
    def values(self) -> np.ndarray:
        """``W`` at every node, shape ``(steps + 1, dim)``, with ``W(0) = 0``."""
        out = np.zeros((self.grid.steps + 1, self.dim))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


@dataclass(frozen=True, eq=False)
class BrownianBatch:
    """A block of paths sharing one grid; ``increments`` has shape ``(paths, steps, dim)``."""

    grid: TimeGrid
    dim: int
    increments: np.ndarray
    master_seed: int
    indices: np.ndarray
    coarsened: int = 1
    _values: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            p, m, d = self.increments.shape
            out = np.zeros((p, m + 1, d))
            np.cumsum(self.increments, axis=1, out=out[:, 1:])
            object.__setattr__(self, "_values", out)
        return self._values

    def path(self, row: int) -> BrownianPath:
        return BrownianPath(self.grid, self.dim, self.increments[row], self.master_seed,
                            int(self.indices[row]), self.coarsened)

    def coarsen(self, factor: int) -> "BrownianBatch":
        """The same trajectories observed on every ``factor``-th node."""
        grid = self.grid.coarsen(factor)
        p, m, d = self.increments.shape
        inc = self.increments.reshape(p, m // factor, factor, d).sum(axis=2)
        return BrownianBatch(grid, self.dim, inc, self.master_seed, self.indices,
                             self.coarsened * factor)


def _validate_dim(dim):
    if int(dim) != dim or dim < 1:
        raise InvalidArgumentError(f"dim must be a positive integer, got {dim!r}")
    return int(dim)


def sample_brownian(grid: TimeGrid, dim: int, master_seed: int, path_index: int) -> BrownianPath:
    """One ``dim``-dimensional Brownian trajectory on ``grid``."""
    dim = _validate_dim(dim)
    z = normals(master_seed, Stream.INCREMENTS, path_index, grid.steps * dim)
    inc = z.reshape(grid.steps, dim) * np.sqrt(grid.dt)[:, None]
    return BrownianPath(grid, dim, inc, int(master_seed), int(path_index))


def sample_brownian_batch(grid: TimeGrid, dim: int, master_seed: int, indices) -> BrownianBatch:
    """Paths for every index in ``indices``; row ``r`` equals ``sample_brownian(..., indices[r])``."""
    dim = _validate_dim(dim)
    indices = np.asarray(indices, dtype=np.int64)
    z = stream_block(master_seed, Stream.INCREMENTS, indices, grid.steps * dim)
    inc = z.reshape(len(indices), grid.steps, dim) * np.sqrt(grid.dt)[None, :, None]
    return BrownianBatch(grid, dim, inc, int(master_seed), indices)


# -------------------------------------------------------------- first passage


@dataclass(frozen=True)
class PassageResult:
    hit: bool
    tau: float
    node: int  # first node at or after tau (steps when not hit)
    w_tau: float
    level: float
    method: str


@dataclass(frozen=True, eq=False)
class PassageBatch:
    hit: np.ndarray
    tau: np.ndarray
    node: np.ndarray
    w_tau: np.ndarray
    level: float
    method: str

    def result(self, row: int) -> PassageResult:
        return PassageResult(bool(self.hit[row]), float(self.tau[row]), int(self.node[row]),
                             float(self.w_tau[row]), self.level, self.method)


def bridge_crossing_probability(w0, w1, a, dt):
    """Probability that a Brownian bridge from ``w0`` to ``w1`` over ``dt`` reaches ``a``."""
    w0 = np.asarray(w0, dtype=float)
    w1 = np.asarray(w1, dtype=float)
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * (a - w0) * (a - w1) / dt)
    return np.where((w0 >= a) | (w1 >= a), 1.0, p)


def bridge_crossing_time(alpha, beta, dt, u_normal, u_accept):
    """Exact first-hitting time inside a step, given that the bridge crosses.

    ``alpha = a - W(t_j) > 0`` and ``beta = a - W(t_{j+1})``. Writing the
    hitting time as ``s = dt * x / (1 + x)``, ``x`` is inverse Gaussian with
    mean ``alpha/|beta|`` and shape ``alpha^2/dt`` (Levy when ``beta = 0``);
    it is drawn with the Michael-Schucany-Haas transform from two uniforms.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.abs(np.asarray(beta, dtype=float))
    lam = alpha * alpha / dt
    nu = std_normal_ppf(u_normal)
    y = nu * nu
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        mu = np.where(beta > 0, alpha / beta, np.inf)
        q = mu * y
        root = np.sqrt(q * q + 4.0 * lam * q)
        x_small = 4.0 * mu * lam * q / (root + q) ** 2
        x = np.where(np.isinf(mu), lam / y, x_small)
        accept = u_accept <= mu / (mu + x)
        x = np.where(np.isinf(mu) | accept, x, mu * mu / x)
        s = dt / (1.0 + 1.0 / x)
    return np.clip(s, 0.0, dt)


def _passage_arrays(W, grid: TimeGrid, a: float, bridge: bool, master_seed: int, indices):
    p, m1 = W.shape
    m = m1 - 1
    nodes = grid.nodes
    T = grid.horizon
    if bridge:
        u = stream_block(master_seed, Stream.BRIDGE, indices, m, gaussian=False)
        prob = bridge_crossing_probability(W[:, :-1], W[:, 1:], a, grid.dt[None, :])
        crossed = u < prob
    else:
        crossed = W[:, 1:] >= a
    hit = crossed.any(axis=1)
    step = np.where(hit, crossed.argmax(axis=1), m - 1)
    node = np.where(hit, step + 1, m)
    rows = np.arange(p)
    if bridge:
        draws = stream_block(master_seed, Stream.CROSSING, indices, 2, gaussian=False)
        dt = grid.dt[step]
        s = bridge_crossing_time(a - W[rows, step], a - W[rows, step + 1], dt,
                                 draws[:, 0], draws[:, 1])
        tau = np.where(hit, np.minimum(nodes[step] + s, nodes[step + 1]), T)
        w_tau = np.where(hit, a, W[:, -1])
    else:
        tau = np.where(hit, nodes[node], T)
        w_tau = W[rows, node]
    return hit, tau, node.astype(np.int64), w_tau


def first_passage(path: BrownianPath, a: float, bridge: bool = True) -> PassageResult:
    """First time ``W >= a`` on ``[0, T]``, capped at ``T`` when the level is never reached."""
    if path.dim != 1:
        raise InvalidArgumentError("first passage needs a one-dimensional path")
    if not a > 0:
        raise InvalidArgumentError("passage level must be positive")
    W = path.values[:, 0][None, :]
    hit, tau, node, w_tau = _passage_arrays(W, path.grid, a, bridge, path.master_seed,
                                            [path.path_index])
    method = "bridge-corrected" if bridge else "grid-crossing"
    return PassageResult(bool(hit[0]), float(tau[0]), int(node[0]), float(w_tau[0]), a, method)


def first_passage_batch(batch: BrownianBatch, a: float, bridge: bool = True) -> PassageBatch:
    if batch.dim != 1:
        raise InvalidArgumentError("first passage needs one-dimensional paths")
    if not a > 0:
        raise InvalidArgumentError("passage level must be positive")
    hit, tau, node, w_tau = _passage_arrays(batch.values[:, :, 0], batch.grid, a, bridge,
                                            batch.master_seed, batch.indices)
    method = "bridge-corrected" if bridge else "grid-crossing"
    return PassageBatch(hit, tau, node, w_tau, a, method)


@dataclass(frozen=True, eq=False)
class SplitSteps:
    """Each grid step cut at the passage time into a part before and after ``tau``.

    All arrays have shape ``(paths, steps)``. ``post_start`` is the left end of
    the post-passage part, ``max(t_j, tau)``.
    """

    pre_dt: np.ndarray
    pre_dw: np.ndarray
    post_dt: np.ndarray
    post_dw: np.ndarray
    post_start: np.ndarray


def split_at_passage(batch: BrownianBatch, passage: PassageBatch) -> SplitSteps:
    if batch.dim != 1:
        raise InvalidArgumentError("splitting requires one-dimensional paths")
    nodes = batch.grid.nodes
    lo, hi = nodes[None, :-1], nodes[None, 1:]
    dt = batch.grid.dt[None, :]
    dw = batch.increments[:, :, 0]
    W = batch.values[:, :, 0]
    tau = passage.tau[:, None]
    full = tau >= hi
    partial = (tau > lo) & (tau < hi)
    pre_dt = np.where(full, dt, np.where(partial, tau - lo, 0.0))
    pre_dw = np.where(full, dw, np.where(partial, passage.w_tau[:, None] - W[:, :-1], 0.0))
    post_dt = np.where(full, 0.0, np.where(partial, hi - tau, dt))
    post_dw = dw - pre_dw
    post_start = np.maximum(lo, tau)
    return SplitSteps(pre_dt, pre_dw, post_dt, post_dw, post_start)
