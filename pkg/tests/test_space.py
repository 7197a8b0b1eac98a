import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgsocial.errors import DimensionMismatchError, UsageError
from mfgsocial.space import (
    Trajectory,
    TrajectorySpace,
    exponential_space,
    fd_gradient,
    inner,
    mean_of,
    norm,
    space_from_config,
    space_to_config,
    trajectories_from_csv,
    trajectories_to_csv,
    unit_space,
)


def test_inner_unit_weights_dot_product():
    sp = unit_space(2)
    assert inner(sp.wrap([1, 2]), sp.wrap([3, 4])) == 11.0


def test_basis_vector_norm_squared_is_weight():
    sp = TrajectorySpace(weights=[0.7, 1.3, 2.2], grid=[0, 1, 2])
    e0 = sp.wrap([1, 0, 0])
    assert inner(e0, e0) == pytest.approx(0.7, rel=1e-15)


def test_exponential_weights_match_direct_quadrature_sum():
    rho, dt, T = 1.0, 0.1, 10
    sp = exponential_space(rho=rho, dt=dt, t_max=T * dt)
    ones = sp.wrap(np.ones(T))
    # Independent oracle: plain summation of the quadrature terms.
    expected = math.fsum(math.exp(-rho * k * dt) * dt for k in range(T))
    assert inner(ones, ones) == pytest.approx(expected, rel=1e-14)


def test_norm_zero_vector_and_pythagorean():
    sp = unit_space(2)
    assert norm(sp.zero()) == 0.0
    assert norm(sp.wrap([3, 4])) == pytest.approx(5.0, rel=1e-15)


def test_norm_absolute_homogeneity():
    rng = np.random.default_rng(0)
    sp = TrajectorySpace(weights=rng.uniform(0.1, 2, 6), grid=np.arange(6.0))
    x = sp.wrap(rng.standard_normal(6))
    assert norm(-2.0 * x) == pytest.approx(2.0 * norm(x), rel=1e-14)


def test_mean_of_single_and_symmetric_pair():
    sp = unit_space(3)
    x = sp.wrap([1.0, -2.0, 3.0])
    assert np.array_equal(mean_of([x]).values, x.values)
    assert np.array_equal(mean_of([x, -x]).values, np.zeros(3))


def _pairwise_tree_sum(rows):
    if len(rows) == 1:
        return rows[0]
    mid = len(rows) // 2
    return _pairwise_tree_sum(rows[:mid]) + _pairwise_tree_sum(rows[mid:])


def test_mean_of_matches_pairwise_tree_summation():
    rng = np.random.default_rng(42)
    sp = unit_space(7)
    trajs = [sp.wrap(rng.standard_normal(7)) for _ in range(100)]
    got = mean_of(trajs).values
    oracle = _pairwise_tree_sum([t.values for t in trajs]) / 100.0
    assert np.max(np.abs(got - oracle)) <= 1e-12


def test_mean_of_permutation_invariant_with_explicit_order():
    rng = np.random.default_rng(3)
    sp = unit_space(5)
    trajs = [sp.wrap(rng.standard_normal(5)) for _ in range(9)]
    base = mean_of(trajs).values
    perm = rng.permutation(9)
    shuffled = [trajs[p] for p in perm]
    restore = np.argsort(perm)
    assert np.array_equal(mean_of(shuffled, order=restore).values, base)


def test_mean_of_empty_is_usage_error():
    with pytest.raises(UsageError):
        mean_of([])


def test_dimension_mismatch_rejected():
    a = unit_space(3)
    b = unit_space(4)
    with pytest.raises(DimensionMismatchError):
        inner(a.wrap([1, 2, 3]), b.wrap([1, 2, 3, 4]))
    with pytest.raises(DimensionMismatchError):
        a.wrap([1.0, 2.0])


def test_nonfinite_and_nonpositive_weights_rejected():
    with pytest.raises(UsageError):
        TrajectorySpace(weights=[1.0, 0.0], grid=[0, 1])
    sp = unit_space(2)
    with pytest.raises(UsageError):
        sp.wrap([1.0, np.nan])


@settings(max_examples=60, deadline=None, derandomize=True)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**31))
def test_cauchy_schwarz(dim, seed):
    rng = np.random.default_rng(seed)
    sp = TrajectorySpace(weights=rng.uniform(0.05, 3.0, dim), grid=np.arange(float(dim)))
    x = sp.wrap(rng.standard_normal(dim))
    y = sp.wrap(rng.standard_normal(dim))
    assert abs(inner(x, y)) <= norm(x) * norm(y) + 1e-12


@settings(max_examples=60, deadline=None, derandomize=True)
@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**31))
def test_parallelogram_law(dim, seed):
    rng = np.random.default_rng(seed)
    sp = TrajectorySpace(weights=rng.uniform(0.05, 3.0, dim), grid=np.arange(float(dim)))
    x = sp.wrap(rng.standard_normal(dim))
    y = sp.wrap(rng.standard_normal(dim))
    lhs = norm(x + y) ** 2 + norm(x - y) ** 2
    rhs = 2.0 * (norm(x) ** 2 + norm(y) ** 2)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_fd_gradient_riesz_convention():
    sp = TrajectorySpace(weights=[0.5, 2.0, 1.5], grid=[0, 1, 2])
    target = sp.wrap([0.3, -0.7, 1.1])

    def f(x: Trajectory) -> float:
        return 0.5 * inner(x - target, x - target)

    x0 = sp.wrap([1.0, 0.5, -0.2])
    g = fd_gradient(f, x0)
    assert np.allclose(g.values, x0.values - target.values, atol=1e-7)


def test_space_config_roundtrip():
    sp = exponential_space(rho=0.5, dt=0.2, t_max=1.0)
    text = space_to_config(sp)
    back = space_from_config(text)
    assert back.dim == sp.dim
    assert np.array_equal(back.weights, sp.weights)
    assert np.array_equal(back.grid, sp.grid)


def test_trajectory_csv_roundtrip(tmp_path):
    sp = unit_space(4, dt=0.5)
    rng = np.random.default_rng(1)
    trajs = [sp.wrap(rng.standard_normal(4)) for _ in range(3)]
    path = tmp_path / "trajs.csv"
    trajectories_to_csv(path, trajs, labels=["a", "b", "c"])
    grid, labels, values = trajectories_from_csv(path)
    assert labels == ["a", "b", "c"]
    assert np.array_equal(grid, sp.grid)
    assert np.array_equal(values, np.stack([t.values for t in trajs]))
