from pathlib import Path

import numpy as np
import pytest

from imop.errors import NotFoundError, ValidationError
from imop.reform import (
    BigMConfig,
    MipModel,
    build_single_level_mlp,
    build_single_level_mqp_rhs,
    check_feasible,
    export_model,
    plug_in_single_level,
    read_lp,
    structurally_equal,
    write_lp,
)
from imop.services import build_model, run_export

GOLDEN = Path(__file__).parent / "golden" / "mqp-rhs_2_2.lp"
Y = np.array([[1.0, 1.0], [2.0, 0.0]])
W = np.array([[0.0, 1.0], [1.0, 0.0]])
GOLDEN_BIGM = BigMConfig(m1=10, m2=10, m_ik=20, primal_bound=20)


@pytest.fixture
def golden_model(mqp_rhs):
    return build_single_level_mqp_rhs(mqp_rhs.instance, Y, W, GOLDEN_BIGM)


def test_lp_text_matches_golden_file(golden_model):
    assert golden_model.name == "mqp-rhs_2_2"
    assert write_lp(golden_model) == GOLDEN.read_text()


def test_golden_model_counts(golden_model):
    counts = golden_model.counts()
    assert counts["theta"] == 2
    assert counts["x"] == 4
    assert counts["u"] == 8
    assert counts["t1"] == 4
    assert counts["t2"] == 4
    assert counts["z"] == 4
    assert counts["eta"] == 8
    assert counts["binary"] == 12


def test_lp_text_reads_back_to_the_same_model(golden_model):
    parsed = read_lp(GOLDEN.read_text())
    assert parsed.name == golden_model.name
    assert parsed.bigm["M2"] == (10.0, "explicit")
    assert structurally_equal(parsed, golden_model)
    assert write_lp(parsed) == write_lp(golden_model)


def test_structural_comparison_notices_changes(golden_model):
    parsed = read_lp(write_lp(golden_model))
    parsed.rows[0].rhs += 1.0
    assert not structurally_equal(parsed, golden_model)


def test_export_writes_named_file(golden_model, tmp_path):
    path = export_model(golden_model, out_dir=tmp_path)
    assert path == tmp_path / "mqp-rhs_2_2.lp"
    assert path.read_text() == GOLDEN.read_text()


def test_ground_truth_certifies_the_golden_model(mqp_rhs, golden_model):
    point = plug_in_single_level(golden_model, mqp_rhs.instance, mqp_rhs.theta_true, Y, W)
    report = check_feasible(golden_model, point)
    assert report.passed, report.worst()
    assert report.bigm_rows == []


def test_too_small_big_m_is_reported(mqp_rhs):
    model = build_single_level_mqp_rhs(mqp_rhs.instance, Y, W, BigMConfig(m1=10, m2=1e-3, m_ik=20,
                                                                           primal_bound=20))
    point = plug_in_single_level(model, mqp_rhs.instance, mqp_rhs.theta_true, Y, W)
    report = check_feasible(model, point)
    assert not report.passed
    assert "cu_1_1" in report.bigm_rows
    assert report.to_dict()["violated_bigm_rows"] == report.bigm_rows


def test_missing_point_entries_are_rejected(golden_model):
    with pytest.raises(ValidationError, match="unassigned"):
        check_feasible(golden_model, {})


def test_model_rejects_duplicates_and_unknown_variables():
    model = MipModel("m")
    model.add_variable("x_1")
    with pytest.raises(ValidationError):
        model.add_variable("x_1")
    with pytest.raises(ValidationError):
        model.add_row("r", [("y_1", 1.0)], "<=", 0.0)
    with pytest.raises(ValidationError):
        model.add_row("r", [("x_1", 1.0)], "<", 0.0)


def test_builders_check_the_family(example1, mqp_rhs):
    with pytest.raises(ValidationError):
        build_single_level_mlp(mqp_rhs.instance, Y, W)
    with pytest.raises(ValidationError):
        build_single_level_mqp_rhs(example1.instance, Y, W)
    with pytest.raises(ValidationError):
        build_single_level_mqp_rhs(mqp_rhs.instance, Y, [[1.0, 0.0, 0.0]])


def test_linear_objective_model_certifies_at_truth():
    model, point = build_model({"fixture": "mlp-triobj", "builder": "mlp", "N": 2, "K": 3})
    counts = model.counts()
    assert counts["z"] == 6
    report = check_feasible(model, point)
    assert report.passed, report.worst()


def test_test_problem_certifies_at_the_estimate():
    model, point = build_model({"fixture": "mqp-rhs", "builder": "test", "K": 4, "N_prime": 3})
    assert model.sense == "maximize"
    report = check_feasible(model, point)
    assert report.passed, report.worst()
    assert model.objective_value(point) == pytest.approx(0.0, abs=1e-9)


def test_build_model_errors():
    with pytest.raises(ValidationError):
        build_model({"fixture": "mqp-rhs", "builder": "cubic"})
    with pytest.raises(NotFoundError):
        build_model({"fixture": "nope"})
    with pytest.raises(ValidationError):
        build_model({})


def test_run_export_writes_lp_and_summary(tmp_path):
    payload, paths = run_export({"fixture": "mqp-rhs", "N": 2, "K": 2, "bigm": {"m1": 10, "m2": 10,
                                                                                 "m_ik": 20, "primal_bound": 20}},
                                out_dir=tmp_path)
    assert payload["name"] == "mqp-rhs_2_2"
    assert payload["certificate"]["passed"]
    assert payload["bigm"]["M2"] == {"value": 10.0, "origin": "explicit"}
    assert paths["lp"].exists()
    assert paths["json"].exists()
