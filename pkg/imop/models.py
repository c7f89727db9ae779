from flask_sqlalchemy import SQLAlchemy
from datetime import datetime, timezone
import uuid

db = SQLAlchemy()


def generate_uuid():
    return str(uuid.uuid4())


def utcnow():
    return datetime.now(timezone.utc)


class ExperimentRun(db.Model):
    __tablename__ = "experiment_runs"
    id = db.Column(db.String, primary_key=True, default=generate_uuid)
    name = db.Column(db.String, nullable=False)
    fixture = db.Column(db.String, nullable=False)
    estimator = db.Column(db.String, nullable=False)
    config = db.Column(db.JSON, nullable=False)
    status = db.Column(db.String, nullable=False, default="completed")
    summary = db.Column(db.JSON, nullable=True)
    createdAt = db.Column(db.DateTime(timezone=True), default=utcnow)
    updatedAt = db.Column(db.DateTime(timezone=True), default=utcnow, onupdate=utcnow)

    repetitions = db.relationship(
        "RepetitionRecord",
        back_populates="run",
        cascade="all, delete-orphan",
        order_by="(RepetitionRecord.N, RepetitionRecord.K, RepetitionRecord.repetition)",
        lazy=True,
    )


class RepetitionRecord(db.Model):
    __tablename__ = "repetitions"
    id = db.Column(db.String, primary_key=True, default=generate_uuid)
    runId = db.Column(db.String, db.ForeignKey("experiment_runs.id"), nullable=False)
    repetition = db.Column(db.Integer, nullable=False)
    seed = db.Column(db.Integer, nullable=False)
    N = db.Column(db.Integer, nullable=False)
    K = db.Column(db.Integer, nullable=False)
    thetaHat = db.Column(db.JSON, nullable=True)
    estimationError = db.Column(db.Float, nullable=True)
    predictionError = db.Column(db.Float, nullable=True)
    objective = db.Column(db.Float, nullable=True)
    status = db.Column(db.String, nullable=False)
    message = db.Column(db.String, nullable=True)

    run = db.relationship("ExperimentRun", back_populates="repetitions")
