import numpy as np
import pytest
from scipy.optimize import minimize

from diffproj.constraints import LinearConstraintSet, build_random_feasible
from diffproj.exceptions import CapacityError, DimensionMismatchError, InfeasibleSystemError
from diffproj.oracle import KKT_TOL, closest_point, kkt_residuals


def box():
    return LinearConstraintSet([[1, 0], [-1, 0], [0, 1], [0, -1]], [1, 0, 1, 0])


def test_box_corner():
    sol = closest_point(box(), np.array([2.0, 2.0]))
    np.testing.assert_allclose(sol.point, [1.0, 1.0], atol=1e-12)
    assert sol.active_set == (0, 2)
    np.testing.assert_allclose(sol.multipliers, [1.0, 0.0, 1.0, 0.0], atol=1e-12)


def test_box_matches_grid_search():
    # brute force over a 1e-3 grid of the unit square
    q = np.array([1.7, 0.35])
    g = np.linspace(0.0, 1.0, 1001)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    d = (xx - q[0]) ** 2 + (yy - q[1]) ** 2
    i, j = np.unravel_index(np.argmin(d), d.shape)
    sol = closest_point(box(), q)
    np.testing.assert_allclose(sol.point, [g[i], g[j]], atol=1e-3)


def test_interior_query_is_its_own_projection():
    sol = closest_point(box(), np.array([0.3, 0.6]))
    np.testing.assert_array_equal(sol.point, [0.3, 0.6])
    assert sol.active_set == ()
    assert np.all(sol.multipliers == 0.0)


@pytest.mark.parametrize("seed", range(15))
def test_matches_slsqp(seed):
    cs, anchor = build_random_feasible(6, 5, seed=seed, margin=0.1)
    q = anchor + np.random.default_rng(seed).standard_normal(6) * 3
    ref = minimize(
        lambda x: 0.5 * np.sum((x - q) ** 2),
        anchor,
        jac=lambda x: x - q,
        constraints=[{"type": "ineq", "fun": lambda x: cs.offsets - cs.normals @ x, "jac": lambda x: -cs.normals}],
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 500},
    )
    sol = closest_point(cs, q)
    np.testing.assert_allclose(sol.point, ref.x, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_kkt_residuals_small(seed):
    cs, anchor = build_random_feasible(8, 7, seed=seed, margin=0.1)
    q = anchor + np.random.default_rng(seed).standard_normal(8) * 2
    sol = closest_point(cs, q)
    res = kkt_residuals(cs, q, sol.point, sol.multipliers)
    assert max(res.values()) <= KKT_TOL


def test_mixed_equality_and_inequality():
    # x + y = 1 and x <= 0.2: closest to (1, 1) is (0.2, 0.8)
    cs = LinearConstraintSet([[1.0, 1.0], [1.0, 0.0]], [1.0, 0.2], kinds=["equality", "inequality"])
    sol = closest_point(cs, np.array([1.0, 1.0]))
    np.testing.assert_allclose(sol.point, [0.2, 0.8], atol=1e-12)
    assert sol.active_set == (0, 1)


def test_equality_only_matches_formula():
    rng = np.random.default_rng(0)
    A, b = rng.standard_normal((2, 5)), rng.standard_normal(2)
    cs = LinearConstraintSet(A, b, kinds=["equality"] * 2)
    q = rng.standard_normal(5)
    expected = q - A.T @ np.linalg.solve(A @ A.T, A @ q - b)
    np.testing.assert_allclose(closest_point(cs, q).point, expected, atol=1e-10)


def test_degenerate_duplicate_rows():
    cs = LinearConstraintSet([[1.0, 0.0], [1.0, 0.0]], [0.0, 0.0])
    sol = closest_point(cs, np.array([2.0, 3.0]))
    np.testing.assert_allclose(sol.point, [0.0, 3.0], atol=1e-12)
    assert max(kkt_residuals(cs, np.array([2.0, 3.0]), sol.point, sol.multipliers).values()) <= KKT_TOL


def test_empty_set_is_infeasible():
    cs = LinearConstraintSet([[1.0, 0.0], [-1.0, 0.0]], [0.0, -1.0])
    with pytest.raises(InfeasibleSystemError):
        closest_point(cs, np.array([0.5, 0.0]))


def test_capacity():
    cs = LinearConstraintSet(np.random.default_rng(0).standard_normal((21, 3)), np.ones(21))
    with pytest.raises(CapacityError):
        closest_point(cs, np.zeros(3))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        closest_point(box(), np.zeros(3))
