from flask import Flask

from imop.config import Config
from imop.errors import NotFoundError, NumericalError, ValidationError
from imop.models import db
from imop.routes import error_response
from imop.routes.estimates import estimates_bp
from imop.routes.experiments import experiments_bp
from imop.routes.exports import models_bp
from imop.routes.forward import forward_bp


def create_app(config_class=Config):
    app = Flask(__name__)
    app.config.from_object(config_class)

    db.init_app(app)
    with app.app_context():
        db.create_all()

    app.register_blueprint(forward_bp)
    app.register_blueprint(estimates_bp)
    app.register_blueprint(experiments_bp)
    app.register_blueprint(models_bp)

    @app.errorhandler(NotFoundError)
    def not_found(exc):
        return error_response("NOT_FOUND", str(exc), exc.details, 404)

    @app.errorhandler(ValidationError)
    def invalid(exc):
        return error_response("VALIDATION_ERROR", str(exc), exc.details, 400)

    @app.errorhandler(NumericalError)
    def numerical(exc):
        app.logger.error("numerical failure: %s", exc)
        details = dict(exc.details)
        if exc.weight_index is not None:
            details["weight_index"] = exc.weight_index
        return error_response("NUMERICAL_ERROR", str(exc), details, 422)

    return app
