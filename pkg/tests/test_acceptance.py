"""Long-running replication checks against reference experiment values."""
import numpy as np
import pytest

from imop.dmp import ParamSpace, build_mqp
from imop.estimators import brute_force_oracle, estimate_admm, estimate_clustering
from imop.fixtures import load_fixture
from imop.identifiability import is_efficient_under, test_identifiability
from imop.loss import cluster_decomposition, empirical_risk, monte_carlo_risk
from imop.reform import check_feasible, write_lp
from imop.services import (
    ExperimentConfig,
    build_model,
    estimation_error,
    generate_observations,
    intro_demo,
    make_generator,
    prediction_error,
    run_experiment,
    weight_histogram,
)
from imop.solver import FrontOracle, grid_weights, solve_wp


def _draw(fixture, N, seed, noise=None, weight_law=None):
    gen = fixture.generation
    return generate_observations(fixture.instance, fixture.theta_true, weight_law or gen.get("weight_law"),
                                 noise or gen.get("noise"), N, seed, fixture.efficient_faces)


def test_forward_solver_on_a_fine_grid(example1, example1_solution):
    example2 = load_fixture("example2")
    for w1 in np.linspace(0.0, 1.0, 101):
        x = solve_wp(example1.instance, example1.theta_true, [w1, 1 - w1]).x
        np.testing.assert_allclose(x, example1_solution(w1), atol=1e-6)
        if w1 <= 5 / 6:
            w = 1.2 * w1
            other = solve_wp(example2.instance, example2.theta_true, [w, 1 - w]).x
            np.testing.assert_allclose(other, x, atol=1e-6)


def test_cluster_identity_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        N, K, n = rng.integers(1, 30), rng.integers(1, 8), rng.integers(1, 4)
        Y, X = rng.normal(size=(N, n)), rng.normal(size=(K, n))
        report = empirical_risk(Y, X)
        assert cluster_decomposition(Y, report.assignment, X) == pytest.approx(report.value, abs=1e-9)


@pytest.mark.slow
def test_clustering_descends_and_stabilizes(mqp_rhs):
    weights = grid_weights(2, 11)
    for seed in range(50):
        obs = _draw(mqp_rhs, 20, seed).without_truth()
        result = estimate_clustering(mqp_rhs.instance, obs, weights, restarts=5, seed=seed)
        objectives = [t["objective"] for t in result.trace]
        assert all(b <= a + 1e-9 for a, b in zip(objectives, objectives[1:]))
        changes = [t["changes"] for t in result.trace if t["step"] == "assign"]
        assert all(b <= a for a, b in zip(changes, changes[1:]))
        assert result.converged and changes[-1] == 0
        assert all(c > 0 for c in changes[:-1])
        assert max(t["iteration"] for t in result.trace) <= 5


@pytest.mark.slow
def test_rhs_error_shrinks_with_data(tmp_path):
    base = {"fixture": "mqp-rhs", "repetitions": 10, "seed": 0, "restarts": 10}
    small = run_experiment({**base, "name": "small", "N": [5], "K": [6]}, out_dir=tmp_path)
    large = run_experiment({**base, "name": "large", "N": [150], "K": [41]}, out_dir=tmp_path)
    small_err = small.aggregates[0]["estimation_error_mean"]
    large_err = large.aggregates[0]["estimation_error_mean"]
    assert large_err <= 0.25
    assert 3.0 * large_err <= small_err


@pytest.mark.slow
def test_true_parameter_risk(mqp_rhs):
    generator = make_generator(mqp_rhs.instance, mqp_rhs.theta_true, mqp_rhs.generation["weight_law"],
                               mqp_rhs.generation["noise"])
    risk = monte_carlo_risk(mqp_rhs.instance, mqp_rhs.theta_true, generator, M_samples=100_000, K_ref=10_000)
    assert risk.mean == pytest.approx(0.022742, rel=0.15)


@pytest.mark.slow
def test_prediction_error_decreases_with_grid_size(mqp_rhs):
    dmp = mqp_rhs.instance
    generator = make_generator(dmp, mqp_rhs.theta_true, mqp_rhs.generation["weight_law"],
                               mqp_rhs.generation["noise"])
    for N in (50, 250, 1000):
        obs = _draw(mqp_rhs, N, seed=N).without_truth()
        errors = []
        for K in (6, 11, 21, 41):
            result = estimate_clustering(dmp, obs, grid_weights(2, K), restarts=10, seed=N)
            errors.append(prediction_error(dmp, result.theta, generator, 20_000, seed=N, K_ref=2_000))
        assert all(b <= a + 2e-3 for a, b in zip(errors, errors[1:]))
        assert errors[-1] <= 0.030


@pytest.mark.slow
def test_portfolio_returns_and_preferences():
    fixture = load_fixture("portfolio")
    errors = []
    weights = grid_weights(2, 41)
    for seed in range(5):
        obs = _draw(fixture, 1000, seed).without_truth()
        result = estimate_admm(fixture.instance, obs, weights, rho=1.0, seed=seed)
        errors.append(estimation_error(result.theta, fixture.theta_true))
        hist = weight_histogram(result)
        assert 0.48 <= hist.mean <= 0.52
        assert 0.08 <= hist.sd <= 0.12
    assert np.mean(errors) <= 0.02


@pytest.mark.slow
def test_admm_residuals_converge(mqp_rhs):
    weights = grid_weights(2, 21)
    converged = 0
    for seed in range(20):
        obs = _draw(mqp_rhs, 20, seed).without_truth()
        result = estimate_admm(mqp_rhs.instance, obs, weights, rho=0.5, max_iter=100, seed=seed)
        state = result.admm
        for k in range(1, state.iteration + 1):
            primal, dual = state.residuals_at(k)
            assert primal == pytest.approx(result.trace[k - 1]["primal"], abs=1e-12)
            assert dual == pytest.approx(result.trace[k - 1]["dual"], abs=1e-12)
        last = result.trace[-1]
        converged += last["primal"] < 1e-3 and last["dual"] < 1e-3
    assert converged >= 16


@pytest.mark.slow
def test_identifiability_statistics(intro, example1):
    assert test_identifiability(intro.instance, intro.theta_true).z_test > 1e-3
    theta_ex2 = load_fixture("example2").theta_true
    report = test_identifiability(example1.instance, example1.theta_true)
    assert report.z_test >= np.abs(theta_ex2 - example1.theta_true).sum() - 0.05


@pytest.mark.slow
def test_triobjective_estimate_is_not_identifiable():
    triobj = load_fixture("mlp-triobj")
    dmp = triobj.instance
    theta_hat = dmp.space.project(triobj.document["theta_reported"])
    report = test_identifiability(dmp, theta_hat)
    assert report.z_test > 1e-3
    assert report.sizes["points"] > 3
    # face samples efficient under the estimate stay (nearly) efficient under the far parameter
    weights = grid_weights(3, 200, seed=1)
    oracle = FrontOracle(dmp, weights)
    rng = np.random.default_rng(0)
    for face in triobj.efficient_faces:
        for x in rng.dirichlet(np.ones(face.shape[0]), size=20) @ face:
            member, _ = is_efficient_under(dmp, theta_hat, x, weights, oracle=oracle)
            if member:
                _, slack = is_efficient_under(dmp, report.theta_far, x, weights, oracle=oracle)
                assert slack <= 1e-2 * (1.0 + np.linalg.norm(x))


@pytest.mark.slow
def test_clustering_matches_the_grid_oracle():
    # one free right-hand side
    dmp = build_mqp(
        [[[1, 0], [0, 2]], [[2, 0], [0, 1]]], [[3, 1], [-6, -5]], [[-3, 1], [0, -1]], [-3.0, -6.0],
        {"rhs": [True, False]}, ParamSpace.box([-8.0], [-1.0]), sense=">=", lb=0.0, name="one-slot",
    )
    obs = generate_observations(dmp, [-3.0], None, {"kind": "gaussian", "sigma": 0.1}, 30, seed=4).without_truth()
    weights = grid_weights(2, 11)
    result = estimate_clustering(dmp, obs, weights, seed=4)
    _, best = brute_force_oracle(dmp, obs, weights, resolution=0.01)
    assert result.value <= best + 2 * 0.01 ** 2


@pytest.mark.slow
def test_reform_exports_are_stable_and_certified():
    for request in ({"fixture": "mqp-rhs", "builder": "mqp-rhs", "N": 5, "K": 6},
                    {"fixture": "mlp-triobj", "builder": "mlp", "N": 3, "K": 6},
                    {"fixture": "mqp-rhs", "builder": "test", "K": 6, "N_prime": 5}):
        model, point = build_model(request)
        assert check_feasible(model, point).passed
        again, _ = build_model(request)
        assert write_lp(model) == write_lp(again)


@pytest.mark.slow
def test_intro_demo_renders_samples_efficient():
    report = intro_demo()
    np.testing.assert_allclose(report.mean, [0.375, 0.375], atol=1e-3)
    assert report.efficient_fraction >= 0.95


@pytest.mark.slow
def test_traffic_demand_error_trend(tmp_path):
    config = ExperimentConfig.from_dict({"fixture": "traffic", "name": "traffic", "K": [6, 41],
                                         "repetitions": 3, "restarts": 5})
    report = run_experiment(config, out_dir=tmp_path)
    by_k = {cell["K"]: cell["estimation_error_mean"] for cell in report.aggregates}
    assert by_k[41] <= 0.15
    assert by_k[41] <= by_k[6]
