import numpy as np
import pytest

from imop.errors import ValidationError
from imop.loss import (
    LossReport,
    ObservationSet,
    SideInfo,
    assign,
    attach_bound,
    cluster_decomposition,
    empirical_risk,
    generalization_bound,
    monte_carlo_risk,
)


def test_assignment_breaks_ties_toward_lowest_index():
    assignment = assign([[0.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    assert assignment.index.tolist() == [0]
    assert assignment.distance.tolist() == [1.0]


def test_empirical_risk_is_mean_squared_distance():
    report = empirical_risk([[1.0, 0.0], [3.0, 0.0]], [[0.0, 0.0]])
    assert report.value == pytest.approx(5.0)
    assert report.N == 2 and report.K == 1
    assert report.contributions == {0: pytest.approx(5.0)}


def test_side_information_reweights_and_restricts():
    side = SideInfo(admissible=[(0,)], lam=2.0)
    obs = ObservationSet([[1.0, 0.0], [3.0, 0.0]], side)
    assert empirical_risk(obs, [[0.0, 0.0]]).value == pytest.approx(5.5)

    # the first observation may only use the far point
    side = SideInfo(admissible=[(1,)], lam=1.0)
    report = empirical_risk(ObservationSet([[0.0, 0.0]], side), [[0.0, 0.0], [2.0, 0.0]])
    assert report.assignment.index.tolist() == [1]
    assert report.value == pytest.approx(4.0)


def test_side_information_validation():
    with pytest.raises(ValidationError):
        SideInfo(admissible=[(0,)], lam=0.5)
    with pytest.raises(ValidationError):
        SideInfo(admissible=[()])
    with pytest.raises(ValidationError):
        ObservationSet([[0.0, 0.0]], SideInfo(admissible=[(0,), (0,)]))
    with pytest.raises(ValidationError, match="admissible"):
        assign(ObservationSet([[0.0, 0.0]], SideInfo(admissible=[(3,)])), [[0.0, 0.0]])


def test_observations_must_be_finite():
    with pytest.raises(ValidationError):
        ObservationSet([[np.nan, 0.0]])


def test_dimension_mismatch_is_rejected():
    with pytest.raises(ValidationError):
        assign([[0.0, 0.0]], [[0.0, 0.0, 0.0]])
    with pytest.raises(ValidationError):
        assign([[0.0, 0.0]], np.zeros((0, 2)))


def test_cluster_decomposition_matches_the_loss(rng):
    Y = rng.normal(size=(60, 3))
    X = rng.normal(size=(7, 3))
    report = empirical_risk(Y, X)
    assert cluster_decomposition(Y, report.assignment, X) == pytest.approx(report.value, abs=1e-9)


def test_cluster_decomposition_with_side_information(rng):
    Y = rng.normal(size=(20, 2))
    X = rng.normal(size=(4, 2))
    obs = ObservationSet(Y, SideInfo(admissible=[(0, 1)] * 5, lam=3.0))
    report = empirical_risk(obs, X)
    assert cluster_decomposition(obs, report.assignment, X) == pytest.approx(report.value, abs=1e-9)


def test_block_keeps_side_information_prefix():
    obs = ObservationSet(np.arange(10.0).reshape(5, 2), SideInfo(admissible=[(0,), (1,), (2,)], lam=2.0))
    head = obs.block(1, 4)
    assert head.side.admissible == ((1,), (2,))
    assert head.sample_weights().tolist() == [2.0, 2.0, 1.0]
    assert obs.block(3, 5).side is None


def test_generalization_bound_value():
    assert generalization_bound(0.0, 100, 6, 2.0, 3.0, 0.05) == pytest.approx(22.260, abs=1e-3)
    assert generalization_bound(1.0, 1, 1, 0.0, 0.0) == pytest.approx(1.0)


def test_generalization_bound_validation():
    with pytest.raises(ValidationError):
        generalization_bound(0.0, 10, 2, 1.0, 1.0, delta=1.0)
    with pytest.raises(ValidationError):
        generalization_bound(0.0, 0, 2, 1.0, 1.0)
    with pytest.raises(ValidationError):
        generalization_bound(0.0, 10, 2, -1.0, 1.0)


def test_attach_bound_records_inputs():
    report = empirical_risk([[1.0, 0.0], [3.0, 0.0]], [[0.0, 0.0]])
    report = attach_bound(report, B=2.0, R=3.0)
    assert isinstance(report, LossReport)
    assert report.bound == pytest.approx(generalization_bound(5.0, 2, 1, 2.0, 3.0))
    assert report.to_dict()["bound_inputs"] == {"B": 2.0, "R": 3.0, "K": 1, "N": 2, "delta": 0.05}


def test_monte_carlo_risk_on_fixed_validation_set(mqp_rhs):
    estimate = monte_carlo_risk(mqp_rhs.instance, mqp_rhs.theta_true, [[3.0, 4.0], [0.0, 0.0]],
                                reference=[[0.0, 0.0]])
    assert estimate.mean == pytest.approx(12.5)
    assert estimate.samples == 2 and estimate.reference_size == 1


def test_monte_carlo_risk_with_generator(mqp_rhs):
    def generator(count, seed):
        return np.random.default_rng(seed).normal(size=(count, 2))

    first = monte_carlo_risk(mqp_rhs.instance, mqp_rhs.theta_true, generator, M_samples=200, K_ref=51)
    second = monte_carlo_risk(mqp_rhs.instance, mqp_rhs.theta_true, generator, M_samples=200, K_ref=51)
    assert first.mean == second.mean
    assert first.reference_size == 51
    assert first.stderr > 0
