import numpy as np
import pytest

from imop.errors import NumericalError
from imop.qp import project_polyhedron, solve_qp


def test_inequality_constrained_minimum():
    res = solve_qp(np.eye(2), np.array([-1.0, -1.0]), [[1.0, 1.0]], [1.0], x0=np.zeros(2))
    np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-10)
    np.testing.assert_allclose(res.u, [0.5], atol=1e-10)
    assert res.active == (0,)


def test_equality_multiplier_sign():
    res = solve_qp(
        np.diag([1.0, 2.0]), np.array([-2.0, -2.0]), np.zeros((0, 2)), np.zeros(0),
        E=[[1.0, -1.0]], e=[0.0], x0=np.zeros(2),
    )
    np.testing.assert_allclose(res.x, [4 / 3, 4 / 3], atol=1e-10)
    np.testing.assert_allclose(res.nu, [2 / 3], atol=1e-10)


def test_inactive_constraint_keeps_zero_multiplier():
    res = solve_qp(np.eye(2), np.array([-0.1, -0.1]), [[1.0, 1.0]], [1.0], x0=np.zeros(2))
    np.testing.assert_allclose(res.x, [0.1, 0.1], atol=1e-10)
    assert res.u[0] == 0.0


def test_linear_cost_runs_to_a_vertex():
    G = np.vstack([np.eye(2), -np.eye(2)])
    h = np.array([1.0, 1.0, 0.0, 0.0])
    res = solve_qp(np.zeros((2, 2)), np.array([-1.0, -2.0]), G, h, x0=np.zeros(2))
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-10)
    np.testing.assert_allclose(res.u, [1.0, 2.0, 0.0, 0.0], atol=1e-10)


def test_infeasible_start_is_reported():
    with pytest.raises(NumericalError, match="infeasible"):
        solve_qp(np.eye(2), np.zeros(2), [[1.0, 1.0]], [1.0], x0=np.array([2.0, 2.0]))


def test_unbounded_direction_is_reported():
    with pytest.raises(NumericalError, match="unbounded"):
        solve_qp(np.zeros((2, 2)), np.array([-1.0, 0.0]), [[0.0, 1.0]], [1.0], x0=np.zeros(2))


def test_projection_onto_simplex():
    G = -np.eye(3)
    h = np.zeros(3)
    res = project_polyhedron(np.array([1.0, 0.5, -1.0]), G, h, np.ones((1, 3)), np.ones(1), np.full(3, 1 / 3))
    np.testing.assert_allclose(res.x, [0.75, 0.25, 0.0], atol=1e-10)
