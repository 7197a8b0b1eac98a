"""Discretized weighted inner-product spaces of finite trajectories.

A :class:`TrajectorySpace` is a finite time grid together with strictly
positive quadrature weights ``w``.  It stands in for the function space the
models live in: every inner product is ``x . y = sum_k w_k x_k y_k``, so an
infinite-horizon discounted space is represented by truncating the horizon
and folding the discount into the weights (``w_k = exp(-rho t_k) dt``).

Gradient convention used throughout the library: the gradient of a scalar
functional ``f`` on a space is its Riesz representer in that space, i.e. the
trajectory ``g`` with ``f(x + h) - f(x) ~ g . h``.  In coordinates that is
the ordinary partial derivative divided by the quadrature weight, and
:func:`fd_gradient` computes exactly that.
"""

from __future__ import annotations

import configparser
import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionMismatchError, UsageError

__all__ = [
    "TrajectorySpace",
    "Trajectory",
    "inner",
    "norm",
    "mean_of",
    "exponential_space",
    "unit_space",
    "fd_gradient",
    "space_to_config",
    "space_from_config",
    "trajectories_to_csv",
    "trajectories_from_csv",
]

FLOAT_FMT = "%.17g"


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TrajectorySpace:
    """Finite grid with positive quadrature weights defining an inner product.

    Parameters
    ----------
    weights : array of shape (T,)
        Strictly positive quadrature weights (unitless).
    grid : array of shape (T,)
        Time stamps in seconds; informational only, never enters the math.
    """

    weights: np.ndarray
    grid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen_array(self.weights))
        object.__setattr__(self, "grid", _frozen_array(self.grid))
        if self.weights.ndim != 1 or self.weights.size < 1:
            raise UsageError("weights must be a non-empty 1-d vector")
        if self.grid.shape != self.weights.shape:
            raise DimensionMismatchError(
                f"grid length {self.grid.size} != weights length {self.weights.size}"
            )
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0.0):
            raise UsageError("all quadrature weights must be finite and strictly positive")

    @property
    def dim(self) -> int:
        return self.weights.size

    # Array-level helpers used by solvers that carry raw ndarrays around.
    def dot(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(self.weights * np.asarray(a), np.asarray(b)))

    def norm(self, a: np.ndarray) -> float:
        a = np.asarray(a)
        return float(np.sqrt(np.dot(self.weights * a, a)))

    def wrap(self, values) -> "Trajectory":
        return Trajectory(values=values, space=self)

    def zero(self) -> "Trajectory":
        return self.wrap(np.zeros(self.dim))

    def ones(self) -> "Trajectory":
        return self.wrap(np.ones(self.dim))


@dataclass(frozen=True)
class Trajectory:
    """An element of a :class:`TrajectorySpace`: a vector of T finite reals."""

    values: np.ndarray
    space: TrajectorySpace

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values))
        if self.values.ndim != 1 or self.values.size != self.space.dim:
            raise DimensionMismatchError(
                f"trajectory length {self.values.size} != space dim {self.space.dim}"
            )
        if not np.all(np.isfinite(self.values)):
            raise UsageError("trajectory entries must be finite (no NaN/Inf)")

    def __add__(self, other: "Trajectory") -> "Trajectory":
        _require_same_space(self, other)
        return Trajectory(self.values + other.values, self.space)

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        _require_same_space(self, other)
        return Trajectory(self.values - other.values, self.space)

    def __mul__(self, scalar: float) -> "Trajectory":
        return Trajectory(self.values * float(scalar), self.space)

    __rmul__ = __mul__

    def __neg__(self) -> "Trajectory":
        return Trajectory(-self.values, self.space)


def _require_same_space(x: Trajectory, y: Trajectory) -> None:
    if x.space is y.space:
        return
    # Distinct space objects are fine as long as they describe the same space.
    if (
        x.space.dim == y.space.dim
        and np.array_equal(x.space.weights, y.space.weights)
        and np.array_equal(x.space.grid, y.space.grid)
    ):
        return
    raise DimensionMismatchError("trajectories belong to different spaces")


def inner(x: Trajectory, y: Trajectory) -> float:
    """Weighted inner product ``sum_k w_k x_k y_k``."""
    _require_same_space(x, y)
    return float(np.dot(x.space.weights * x.values, y.values))


def norm(x: Trajectory) -> float:
    """Norm induced by :func:`inner`; zero exactly when x is the zero vector."""
    return float(np.sqrt(inner(x, x)))


def mean_of(trajs: Sequence[Trajectory], order: Sequence[int] | None = None) -> Trajectory:
    """Elementwise average of a non-empty list of trajectories.

    Summation runs in a fixed index order (the given order, or ``order`` when
    supplied) so results are bit-reproducible; callers that need permutation
    invariance pass the canonical ordering explicitly.
    """
    trajs = list(trajs)
    if not trajs:
        raise UsageError("mean_of requires at least one trajectory")
    first = trajs[0]
    for t in trajs[1:]:
        _require_same_space(first, t)
    if order is None:
        order = range(len(trajs))
    acc = np.zeros(first.space.dim)
    for idx in order:
        acc = acc + trajs[idx].values
    return Trajectory(acc / len(trajs), first.space)


def exponential_space(rho: float, dt: float, t_max: float | None = None) -> TrajectorySpace:
    """Truncated discounted space with weights ``w_k = exp(-rho t_k) dt``.

    When ``t_max`` is omitted it is chosen so the dropped tail weight
    ``exp(-rho t_max)`` falls below 1e-8.
    """
    if rho < 0 or dt <= 0:
        raise UsageError("exponential_space needs rho >= 0 and dt > 0")
    if t_max is None:
        if rho == 0:
            raise UsageError("t_max is required when rho == 0")
        t_max = -np.log(1e-8) / rho
    n = int(np.ceil(t_max / dt))
    if n < 1:
        raise UsageError("horizon shorter than one step")
    grid = np.arange(n) * dt
    weights = np.exp(-rho * grid) * dt
    return TrajectorySpace(weights=weights, grid=grid)


def unit_space(dim: int, dt: float = 1.0) -> TrajectorySpace:
    """Space with unit weights (plain dot product) on an evenly spaced grid."""
    if dim < 1:
        raise UsageError("dim must be >= 1")
    return TrajectorySpace(weights=np.ones(dim), grid=np.arange(dim) * dt)


def fd_gradient(
    f: Callable[[Trajectory], float],
    x: Trajectory,
    rel_step: float = 1e-5,
) -> Trajectory:
    """Central-difference gradient of a scalar functional, Riesz convention.

    Partial derivatives are divided by the quadrature weights so the result
    satisfies ``f(x + h) - f(x) ~ inner(fd_gradient(f, x), h)``.
    """
    base = x.values
    w = x.space.weights
    g = np.zeros_like(base)
    for k in range(base.size):
        h = rel_step * (1.0 + abs(base[k]))
        up = base.copy()
        up[k] += h
        down = base.copy()
        down[k] -= h
        g[k] = (f(x.space.wrap(up)) - f(x.space.wrap(down))) / (2.0 * h * w[k])
    return x.space.wrap(g)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def space_to_config(space: TrajectorySpace, section: str = "space") -> str:
    """Render a space as a bracketed key-value config block."""
    lines = [f"[{section}]"]
    lines.append(f"dim = {space.dim}")
    lines.append("weights = " + ",".join(FLOAT_FMT % w for w in space.weights))
    lines.append("grid = " + ",".join(FLOAT_FMT % t for t in space.grid))
    return "\n".join(lines) + "\n"


def space_from_config(text: str, section: str = "space") -> TrajectorySpace:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if section not in parser:
        raise UsageError(f"config block [{section}] not found")
    block = parser[section]
    dim = int(block["dim"])
    weights = np.array([float(v) for v in block["weights"].split(",")])
    grid = np.array([float(v) for v in block["grid"].split(",")])
    if weights.size != dim or grid.size != dim:
        raise UsageError("dim does not match weights/grid length")
    return TrajectorySpace(weights=weights, grid=grid)


def trajectories_to_csv(path, trajs: Iterable[Trajectory], labels: Sequence[str] | None = None) -> None:
    """Write trajectories one per row; the header row carries the grid."""
    trajs = list(trajs)
    if not trajs:
        raise UsageError("nothing to write")
    space = trajs[0].space
    for t in trajs[1:]:
        _require_same_space(trajs[0], t)
    if labels is None:
        labels = [f"traj{i}" for i in range(len(trajs))]
    if len(labels) != len(trajs):
        raise UsageError("labels length must match trajectory count")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label"] + [FLOAT_FMT % t for t in space.grid])
    for label, traj in zip(labels, trajs):
        writer.writerow([label] + [FLOAT_FMT % v for v in traj.values])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def trajectories_from_csv(path) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Read a trajectory CSV; returns (grid, labels, values array of shape (n, T))."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise UsageError("not a trajectory CSV (missing 'label' header)")
    grid = np.array([float(v) for v in rows[0][1:]])
    labels = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return grid, labels, values
