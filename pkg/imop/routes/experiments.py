from io import BytesIO

from flask import Blueprint, current_app, jsonify, request, send_file

from imop.models import ExperimentRun
from imop.routes import json_body
from imop.services import (
    delete_experiment,
    experiment_csv,
    experiment_workbook,
    get_experiment,
    list_experiments,
    run_experiment,
    run_rows,
    save_experiment,
)

experiments_bp = Blueprint("experiments", __name__, url_prefix="/api/v1/experiments")


def run_to_dict(run: ExperimentRun, with_repetitions=False):
    out = {
        "id": run.id,
        "name": run.name,
        "fixture": run.fixture,
        "estimator": run.estimator,
        "status": run.status,
        "config": run.config,
        "summary": run.summary,
        "createdAt": run.createdAt.isoformat() if run.createdAt else None,
        "updatedAt": run.updatedAt.isoformat() if run.updatedAt else None,
    }
    if with_repetitions:
        out["repetitions"] = [repetition_to_dict(r) for r in run.repetitions]
    return out


def repetition_to_dict(rec):
    return {
        "id": rec.id,
        "repetition": rec.repetition,
        "seed": rec.seed,
        "N": rec.N,
        "K": rec.K,
        "thetaHat": rec.thetaHat,
        "estimationError": rec.estimationError,
        "predictionError": rec.predictionError,
        "objective": rec.objective,
        "status": rec.status,
        "message": rec.message,
    }


@experiments_bp.route("", methods=["POST"])
def create_experiment():
    data = json_body()
    report = run_experiment(data, out_dir=data.get("out_dir") or current_app.config["IMOP_OUT_DIR"])
    run = save_experiment(report)
    current_app.logger.info("experiment stored id=%s status=%s", run.id, run.status)
    return jsonify(run_to_dict(run, with_repetitions=True)), 201


@experiments_bp.route("", methods=["GET"])
def get_experiments():
    page = int(request.args.get("page", 1))
    page_size = int(request.args.get("pageSize", request.args.get("page_size", 20)))
    sort = request.args.get("sort", "-createdAt")
    pagination = list_experiments(page, page_size, sort, request.args.get("fixture"))
    return jsonify({
        "data": [run_to_dict(r) for r in pagination.items],
        "total": pagination.total,
        "page": page,
        "page_size": page_size,
        "totalPages": pagination.pages,
    }), 200


@experiments_bp.route("/<run_id>", methods=["GET"])
def get_experiment_by_id(run_id):
    return jsonify(run_to_dict(get_experiment(run_id), with_repetitions=True)), 200


@experiments_bp.route("/<run_id>", methods=["DELETE"])
def remove_experiment(run_id):
    delete_experiment(run_id)
    return jsonify({"message": "Experiment run deleted"}), 200


@experiments_bp.route("/<run_id>/download/csv", methods=["GET"])
def download_csv(run_id):
    run = get_experiment(run_id)
    return send_file(
        BytesIO(experiment_csv(run_rows(run)).encode()),
        mimetype="text/csv",
        download_name=f"{run.name}.csv",
        as_attachment=True,
    )


@experiments_bp.route("/<run_id>/download/excel", methods=["GET"])
def download_excel(run_id):
    run = get_experiment(run_id)
    aggregates = (run.summary or {}).get("aggregates", [])
    return send_file(
        experiment_workbook(run_rows(run), aggregates),
        mimetype="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
        download_name=f"{run.name}.xlsx",
        as_attachment=True,
    )
