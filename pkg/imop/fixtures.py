"""Built-in problem fixtures shipped as JSON documents under imop/data."""
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from imop.dmp import ParamSpace, build_mlp, load_instance
from imop.errors import ValidationError

logger = logging.getLogger(__name__)

FIXTURE_NAMES = (
    "example1",
    "example2",
    "intro-biobj",
    "mlp-triobj",
    "mqp-rhs",
    "mqp-obj",
    "portfolio",
    "traffic",
)


@dataclass(frozen=True, eq=False)
class Fixture:
    name: str
    instance: object
    theta_true: np.ndarray
    generation: dict = field(default_factory=dict)
    document: dict = field(default_factory=dict, repr=False)

    @property
    def efficient_faces(self):
        return [np.asarray(face, dtype=float) for face in self.document.get("efficient_faces", [])]

    def to_dict(self):
        return {
            "name": self.name,
            "family": self.instance.family,
            "n": self.instance.n,
            "p": self.instance.p,
            "slots": self.instance.slot_labels(),
            "theta_true": None if self.theta_true is None else self.theta_true.tolist(),
            "generation": self.generation,
        }


def read_document(name):
    if name not in FIXTURE_NAMES:
        raise ValidationError(f"Fixture {name} not found", {"known": list(FIXTURE_NAMES)})
    text = resources.files("imop.data").joinpath(f"{name}.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=None)
def load_fixture(name):
    """Instance, true parameters and data-generation defaults for a named fixture."""
    document = read_document(name)
    instance, theta_true = load_instance(document)
    logger.debug("load_fixture name=%s n=%d p=%d free=%d", name, instance.n, instance.p, instance.n_free)
    return Fixture(name, instance, theta_true, document.get("generation", {}), document)


def intro_instance(a=6.0, b=1.0, c=1.0):
    """min (x1, x2) s.t. a x1 + b x2 ≥ 0, b x1 + a x2 ≥ 0, x1 + x2 ≤ c; both objectives learnable."""
    if not (a > b > 0 and c > 0):
        raise ValidationError("intro instance needs a > b > 0 and c > 0", {"a": a, "b": b, "c": c})
    space = ParamSpace.box(np.zeros(4), np.ones(4), [[1, 1, 0, 0], [0, 0, 1, 1]], [1, 1])
    return build_mlp(
        [[1.0, 0.0], [0.0, 1.0]],
        [[a, b], [b, a], [1.0, 1.0]],
        [0.0, 0.0, c],
        {"c": np.ones((2, 2), dtype=bool)},
        space,
        sense=[">=", ">=", "<="],
        lb=None,
        name="intro-biobj",
    )


def intro_vertices(a=6.0, b=1.0, c=1.0):
    """O, A, B of the feasible triangle."""
    t = c / (a - b)
    return np.array([[0.0, 0.0], [-b * t, a * t], [a * t, -b * t]])
