from flask import Blueprint, jsonify

from imop.routes import json_body
from imop.services import run_forward

forward_bp = Blueprint("forward", __name__, url_prefix="/api/v1/forward")


@forward_bp.route("", methods=["POST"])
def forward():
    payload, _ = run_forward(json_body())
    return jsonify(payload), 200
