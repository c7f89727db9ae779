import json

import numpy as np
import pytest

from imop.dmp import (
    LINEAR,
    POLYNOMIAL,
    ParamSpace,
    TrafficNetwork,
    apply_params,
    build_mlp,
    build_mqp,
    load_instance,
    read_params,
)
from imop.errors import ValidationError
from imop.fixtures import FIXTURE_NAMES, intro_instance, intro_vertices, load_fixture, read_document


def test_every_fixture_loads_with_its_true_parameter():
    for name in FIXTURE_NAMES:
        fixture = load_fixture(name)
        assert fixture.instance.n_free == fixture.theta_true.shape[0]
        assert fixture.instance.space.contains(fixture.theta_true)
        assert fixture.instance.radius > 0


def test_example1_slot_labels_follow_objective_order(example1):
    assert example1.instance.slot_labels() == [
        "c1_1", "c1_2", "q1_1", "q1_2", "c2_1", "c2_2", "q2_1", "q2_2",
    ]


def test_apply_then_read_returns_theta(example1):
    dmp = example1.instance
    theta = np.array([7, 1, 3, 5, -20, -11, 6, 3], dtype=float)
    concrete = apply_params(dmp, theta)
    np.testing.assert_allclose(read_params(dmp, concrete), theta)
    np.testing.assert_allclose(concrete.objectives[0].Q, np.diag([3.0, 5.0]))
    np.testing.assert_allclose(concrete.objectives[1].c, [-20.0, -11.0])


def test_rhs_slots_bind_through_the_row_sign(mqp_rhs):
    concrete = apply_params(mqp_rhs.instance, [-2.0, -5.0])
    # rows are stored as G x <= h, so a >= row flips its sign
    np.testing.assert_allclose(concrete.h, [2.0, 5.0])
    np.testing.assert_allclose(read_params(mqp_rhs.instance, concrete), [-2.0, -5.0])


def test_apply_rejects_theta_outside_space(mqp_rhs):
    with pytest.raises(ValidationError):
        apply_params(mqp_rhs.instance, [0.5, -3.0])
    with pytest.raises(ValidationError):
        apply_params(mqp_rhs.instance, [-3.0])


def test_space_projection_meets_normalizations(intro):
    space = intro.instance.space
    theta = space.project([2.0, 0.0, 0.3, 0.3])
    assert space.contains(theta)
    np.testing.assert_allclose(theta, [1.0, 0.0, 0.5, 0.5], atol=1e-9)


def test_null_basis_is_orthonormal_and_tangent(intro):
    space = intro.instance.space
    basis = space.null_basis()
    assert basis.shape == (4, 2)
    np.testing.assert_allclose(basis.T @ basis, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(space.norm_rows @ basis, 0.0, atol=1e-12)


def test_space_rejects_unbounded_or_inverted_boxes():
    with pytest.raises(ValidationError):
        ParamSpace.box([0.0], [np.inf])
    with pytest.raises(ValidationError):
        ParamSpace.box([1.0], [0.0])
    with pytest.raises(ValidationError):
        ParamSpace.box([0.0, 0.0], [1.0, 1.0], [[1.0, 1.0]], [5.0])


def test_unbounded_feasible_set_is_rejected():
    with pytest.raises(ValidationError, match="unbounded"):
        build_mlp([[1, 0], [0, 1]], None, None, lb=None)


def test_empty_feasible_set_is_rejected():
    with pytest.raises(ValidationError, match="empty"):
        build_mlp([[1, 0], [0, 1]], [[1, 0]], [-1.0], sense="<=", lb=0.0, ub=1.0)


def test_indefinite_quadratic_is_rejected():
    with pytest.raises(ValidationError, match="positive semidefinite"):
        build_mqp([[[1, 0], [0, -1]], None], [[0, 0], [1, 1]], [[1, 1]], [1.0], sense="<=", ub=1.0)


def test_single_objective_is_rejected():
    with pytest.raises(ValidationError):
        build_mlp([[1, 0]], [[1, 1]], [1.0], ub=1.0)


def test_free_slots_need_a_space():
    with pytest.raises(ValidationError):
        build_mlp([[1, 0], [0, 1]], [[1, 1]], [1.0], {"c": [[True, False], [False, False]]})


def test_traffic_network_routes_and_dimension():
    traffic = load_fixture("traffic").instance
    network = traffic.network
    assert traffic.family == POLYNOMIAL
    assert network.n_routes == 4
    assert traffic.n == 11
    assert network.route_links(0, 0) == [(1, 3)]
    assert network.route_links(0, 1) == [(1, 5), (5, 6), (6, 3)]
    assert traffic.slot_labels() == ["d1", "d2"]


def test_traffic_network_without_route_is_rejected():
    with pytest.raises(ValidationError, match=r"O-D pair \(3,1\) has no route"):
        TrafficNetwork.from_links([[1, 3]], [1.0], [10.0], [1.0], [[3, 1]], [5.0])


def test_bpr_travel_time():
    network = TrafficNetwork.from_links([[1, 2]], [2.0], [100.0], [1.0], [[1, 2]], [5.0])
    np.testing.assert_allclose(network.travel_time([100.0]), [2.0 * 1.15])


def test_load_instance_accepts_text_and_path(tmp_path):
    document = read_document("mqp-rhs")
    from_text, theta_text = load_instance(json.dumps(document))
    path = tmp_path / "instance.json"
    path.write_text(json.dumps(document))
    from_path, theta_path = load_instance(path)
    assert from_text.slot_labels() == from_path.slot_labels() == ["b1", "b2"]
    np.testing.assert_allclose(theta_text, theta_path)


def test_load_instance_rejects_unknown_family_and_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        load_instance({"family": "cubic"})
    with pytest.raises(ValidationError, match="not found"):
        load_instance(tmp_path / "missing.json")


def test_load_instance_rejects_inconsistent_objective_count():
    document = read_document("example1")
    document["p"] = 3
    with pytest.raises(ValidationError):
        load_instance(document)


def test_intro_instance_matches_vertices():
    dmp = intro_instance()
    assert dmp.family == LINEAR
    O, A, B = intro_vertices()
    np.testing.assert_allclose(A, [-0.2, 1.2])
    np.testing.assert_allclose(B, [1.2, -0.2])
    for vertex in (O, A, B):
        assert dmp.base.primal_violation(vertex) <= 1e-12
    with pytest.raises(ValidationError):
        intro_instance(a=1.0, b=2.0)
