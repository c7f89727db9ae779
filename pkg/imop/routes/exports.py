from io import BytesIO

from flask import Blueprint, send_file

from imop.reform import write_lp
from imop.routes import json_body
from imop.services import build_model

models_bp = Blueprint("models", __name__, url_prefix="/api/v1/models")


@models_bp.route("/export", methods=["POST"])
def export():
    model, _ = build_model(json_body())
    return send_file(
        BytesIO(write_lp(model).encode()),
        mimetype="text/plain",
        download_name=f"{model.name}.lp",
        as_attachment=True,
    )
