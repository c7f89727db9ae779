import numpy as np
import pytest

from imop.dmp import apply_params
from imop.errors import ValidationError
from imop.fixtures import intro_vertices, load_fixture
from imop.solver import (
    FrontOracle,
    efficiency_gap,
    grid_weights,
    kkt_residuals,
    newton_step,
    pareto_filter,
    random_weights,
    sample_efficient_front,
    solve_weights,
    solve_wp,
)


def test_grid_weights_two_objectives():
    np.testing.assert_allclose(grid_weights(2, 3), [[0.0, 1.0], [0.5, 0.5], [1.0, 0.0]])


def test_grid_weights_three_objectives_use_the_simplex_lattice():
    W = grid_weights(3, 6)
    np.testing.assert_allclose(W, [
        [0.0, 0.0, 1.0], [0.0, 0.5, 0.5], [0.0, 1.0, 0.0],
        [0.5, 0.0, 0.5], [0.5, 0.5, 0.0], [1.0, 0.0, 0.0],
    ])
    W = grid_weights(3, 12, seed=4)
    assert W.shape == (12, 3)
    np.testing.assert_allclose(W.sum(axis=1), 1.0)
    np.testing.assert_allclose(W[:10], grid_weights(3, 10))


def test_random_weight_laws():
    W = random_weights(2, 500, "uniform-box", seed=1, lo=0.3, hi=0.7)
    assert W[:, 0].min() >= 0.3 and W[:, 0].max() <= 0.7
    np.testing.assert_allclose(W.sum(axis=1), 1.0)
    W = random_weights(2, 500, "truncated-normal", seed=1, mean=0.5, sd=0.1)
    assert 0.0 <= W[:, 0].min() and W[:, 0].max() <= 1.0
    assert abs(W[:, 0].mean() - 0.5) < 0.02
    W = random_weights(3, 50, seed=2)
    assert (W >= 0).all()
    np.testing.assert_allclose(W.sum(axis=1), 1.0)


def test_random_weight_laws_reject_bad_requests():
    with pytest.raises(ValidationError):
        random_weights(2, 5, "beta")
    with pytest.raises(ValidationError):
        random_weights(3, 5, "uniform-box")


@pytest.mark.parametrize("w1", [0.0, 0.1, 2 / 9, 0.3, 0.5, 2 / 3, 0.75, 5 / 6, 0.9, 1.0])
def test_example1_matches_closed_form(example1, example1_solution, w1):
    sol = solve_wp(example1.instance, example1.theta_true, [w1, 1 - w1])
    np.testing.assert_allclose(sol.x, example1_solution(w1), atol=1e-7)
    assert sol.status == "optimal"
    assert sol.residuals.max() <= 1e-6
    assert sol.backend == "active-set"


@pytest.mark.parametrize("w1", [0.0, 0.2, 0.5, 0.8])
def test_example2_is_a_reweighted_example1(example1_solution, w1):
    example2 = load_fixture("example2")
    sol = solve_wp(example2.instance, example2.theta_true, [1.2 * w1, 1 - 1.2 * w1])
    np.testing.assert_allclose(sol.x, example1_solution(w1), atol=1e-7)


def test_example1_spot_values(example1):
    dmp, theta = example1.instance, example1.theta_true
    np.testing.assert_allclose(solve_wp(dmp, theta, [0.5, 0.5]).x, [1.0, 4 / 3], atol=1e-8)
    np.testing.assert_allclose(solve_wp(dmp, theta, [1.0, 0.0]).x, [0.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(solve_wp(dmp, theta, [0.0, 1.0]).x, [3.0, 3.0], atol=1e-8)


def test_stationarity_residual_without_multipliers(example1):
    report = kkt_residuals(example1.instance, example1.theta_true, [0.0, 1.0], [0.0, 0.0])
    assert report.stationarity == pytest.approx(np.hypot(12.0, 10.0))
    assert report.complementarity == 0.0
    assert report.primal == 0.0


def test_negative_multipliers_are_clipped_and_flagged(example1):
    report = kkt_residuals(example1.instance, example1.theta_true, [0.5, 0.5], [1.0, 4 / 3], u=-1.0)
    assert report.clipped


def test_invalid_weight_is_rejected(example1):
    with pytest.raises(ValidationError):
        solve_wp(example1.instance, example1.theta_true, [0.7, 0.7])
    with pytest.raises(ValidationError):
        solve_wp(example1.instance, example1.theta_true, [1.0, 0.0, 0.0])


def test_intro_front_is_lexicographic_vertices(intro):
    front = sample_efficient_front(intro.instance, intro.theta_true, grid_weights(2, 3))
    O, A, B = intro_vertices()
    np.testing.assert_allclose(front.points, [B, O, A], atol=1e-12)
    assert front.boundary.tolist() == [True, False, True]
    assert all(s.backend == "lp-vertex" for s in front.solutions)


def test_efficiency_gap_on_the_triangle(intro):
    dmp, theta = intro.instance, intro.theta_true
    assert efficiency_gap(dmp, [0.5, 0.5], theta) == pytest.approx(1.0, abs=1e-9)
    assert efficiency_gap(dmp, [0.0, 0.0], theta) == pytest.approx(0.0, abs=1e-9)
    O, A, B = intro_vertices()
    assert efficiency_gap(dmp, 0.5 * (O + A), theta) == pytest.approx(0.0, abs=1e-9)


def test_efficiency_gap_needs_linear_objectives(example1):
    with pytest.raises(ValidationError):
        efficiency_gap(example1.instance, [0.0, 0.0], example1.theta_true)


def test_pareto_filter_drops_dominated_rows():
    assert pareto_filter([[1, 2], [2, 1], [2, 2]]).tolist() == [0, 1]
    assert pareto_filter([[1, 1], [1, 1]]).tolist() == [0, 1]


def test_triobjective_lp_front():
    fixture = load_fixture("mlp-triobj")
    front = sample_efficient_front(fixture.instance, fixture.theta_true, grid_weights(3, 6))
    for x in front.points:
        assert efficiency_gap(fixture.instance, x, fixture.theta_true) == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(front.points[-1], [5.0, 0.0, 0.0])


def test_portfolio_at_pure_return_weight_buys_best_asset():
    fixture = load_fixture("portfolio")
    sol = solve_wp(fixture.instance, fixture.theta_true, [1.0, 0.0])
    assert int(np.argmax(sol.x)) == 5
    assert sol.x.sum() == pytest.approx(1.0)


def test_traffic_solution_meets_demand():
    fixture = load_fixture("traffic")
    dmp = fixture.instance
    sol = solve_wp(dmp, fixture.theta_true, [0.5, 0.5])
    network = dmp.network
    routes = sol.x[: network.n_routes]
    od = network.route_od()
    np.testing.assert_allclose([routes[od == 0].sum(), routes[od == 1].sum()], [2500.0, 3500.0], rtol=1e-8)
    np.testing.assert_allclose(sol.x[network.n_routes:], network.incidence @ routes, rtol=1e-8, atol=1e-6)
    assert (sol.x >= -1e-9).all()


def test_traffic_stops_on_the_projected_newton_step():
    fixture = load_fixture("traffic")
    sol = solve_wp(fixture.instance, fixture.theta_true, [0.3, 0.7])
    assert sol.backend == "projected-newton"
    concrete = apply_params(fixture.instance, fixture.theta_true)
    _, d = newton_step(concrete, sol.w, sol.x, sol.active)
    assert np.linalg.norm(d) <= 1e-6 * (1.0 + np.linalg.norm(sol.x))


def test_solve_weights_reports_position(example1):
    sols = solve_weights(example1.instance, example1.theta_true, grid_weights(2, 5))
    assert [s.w[0] for s in sols] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_front_oracle_caches_per_theta(mqp_rhs):
    oracle = FrontOracle(mqp_rhs.instance, grid_weights(2, 4))
    first = oracle.points(mqp_rhs.theta_true)
    second = oracle.points(mqp_rhs.theta_true)
    assert first is second
    assert oracle.evaluations == 1
    oracle.points([-4.0, -6.0])
    assert oracle.evaluations == 2
