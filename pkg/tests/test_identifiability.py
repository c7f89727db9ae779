import numpy as np
import pytest

from imop.dmp import ParamSpace, apply_params, build_mlp
from imop.errors import ValidationError
from imop.fixtures import intro_vertices
from imop.identifiability import SearchConfig, hausdorff_semi, is_efficient_under, test_identifiability
from imop.solver import grid_weights, optimal_faces, sample_optimal_faces

QUICK = SearchConfig(rounds=2, random_directions=4, bisection_steps=12)
SEGMENT_THETA = np.array([-1.0, 0.0, 0.0, -1.0])


@pytest.fixture
def segment():
    # max (x1, x2) over x1 + x2 <= 1: the whole hypotenuse is optimal at w = (1/2, 1/2)
    space = ParamSpace.box(-np.ones(4), np.zeros(4), [[1, 1, 0, 0], [0, 0, 1, 1]], [-1, -1])
    return build_mlp([[-1.0, 0.0], [0.0, -1.0]], [[1.0, 1.0]], [1.0], {"c": np.ones((2, 2), dtype=bool)}, space,
                     name="segment")


def test_hausdorff_semi_distance():
    assert hausdorff_semi([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)
    assert hausdorff_semi([[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0]]) == pytest.approx(1.0)
    assert hausdorff_semi([[0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]) == 0.0
    with pytest.raises(ValidationError):
        hausdorff_semi(np.zeros((0, 2)), [[0.0, 0.0]])


def test_membership_on_the_triangle(intro):
    O, A, B = intro_vertices()
    weights = grid_weights(2, 11)
    member, slack = is_efficient_under(intro.instance, intro.theta_true, O, weights)
    assert member and slack == pytest.approx(0.0, abs=1e-9)
    member, slack = is_efficient_under(intro.instance, intro.theta_true, A, weights)
    assert member
    member, slack = is_efficient_under(intro.instance, intro.theta_true, [0.5, 0.5], weights)
    assert not member
    assert slack == pytest.approx(0.5, abs=1e-9)


def test_swapped_objectives_keep_the_front(intro):
    O, A, B = intro_vertices()
    swapped = np.array([0.0, 1.0, 1.0, 0.0])
    weights = grid_weights(2, 11)
    for vertex in (O, A, B):
        member, _ = is_efficient_under(intro.instance, swapped, vertex, weights)
        assert member


def test_intro_instance_is_not_identifiable(intro):
    report = test_identifiability(intro.instance, intro.theta_true, K=3, N_prime=21, K_prime=21, config=QUICK)
    assert report.non_identifiable
    assert report.z_test > 0.1
    assert intro.instance.space.contains(report.theta_far)
    assert report.slack <= report.tau
    assert report.sizes["points"] == 3
    data = report.to_dict()
    assert set(data) >= {"z_test", "non_identifiable", "theta_far", "theta_hat", "slack", "tau", "sizes"}
    assert data["theta_hat"] == pytest.approx([1.0, 0.0, 0.0, 1.0])


def test_search_is_deterministic_for_a_seed(intro):
    first = test_identifiability(intro.instance, intro.theta_true, N_prime=11, K_prime=11, config=QUICK)
    second = test_identifiability(intro.instance, intro.theta_true, N_prime=11, K_prime=11, config=QUICK)
    assert first.z_test == second.z_test
    np.testing.assert_allclose(first.theta_far, second.theta_far)


def test_face_samples_cover_the_optimal_segment(segment):
    weights = grid_weights(2, 5)
    assert len(optimal_faces(apply_params(segment, SEGMENT_THETA), weights)) == 3
    points = sample_optimal_faces(segment, SEGMENT_THETA, weights, 11, seed=0)
    assert points.shape == (11, 2)
    np.testing.assert_allclose(points.sum(axis=1), 1.0, atol=1e-9)
    assert (points >= -1e-12).all()


def test_face_interior_is_not_a_member_when_only_vertices_survive(segment):
    weights = grid_weights(2, 5)
    tilted = [-0.8, -0.2, -0.1, -0.9]
    for vertex in ([1.0, 0.0], [0.0, 1.0]):
        assert is_efficient_under(segment, tilted, vertex, weights)[0]
    member, slack = is_efficient_under(segment, tilted, [0.3, 0.7], weights)
    assert not member
    assert slack == pytest.approx(0.03, abs=1e-9)


def test_far_parameter_keeps_whole_faces_efficient(segment):
    report = test_identifiability(segment, SEGMENT_THETA, N_prime=11, K_prime=5, config=QUICK)
    assert report.sizes["points"] == 11
    assert report.sizes["dropped"] == 0
    assert report.slack_measure == "optimality-gap"
    assert report.z_test == pytest.approx(4.0)
    weights = grid_weights(2, 5)
    for x in sample_optimal_faces(segment, SEGMENT_THETA, weights, 25, seed=3):
        assert is_efficient_under(segment, report.theta_far, x, weights)[0]
