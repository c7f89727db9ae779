from flask import Blueprint, jsonify

from imop.routes import json_body
from imop.services import run_estimate, run_identifiability

estimates_bp = Blueprint("estimates", __name__, url_prefix="/api/v1/estimates")


@estimates_bp.route("", methods=["POST"])
def create_estimate():
    payload, _ = run_estimate(json_body())
    return jsonify(payload), 200


@estimates_bp.route("/identifiability", methods=["POST"])
def identifiability():
    payload, _ = run_identifiability(json_body())
    return jsonify(payload), 200
