import numpy as np
import pytest

from imop import create_app
from imop.config import TestConfig
from imop.fixtures import load_fixture
from imop.models import db


@pytest.fixture
def app(tmp_path):
    class _Config(TestConfig):
        IMOP_OUT_DIR = str(tmp_path / "out")

    app = create_app(_Config)
    yield app
    with app.app_context():
        db.session.remove()
        db.drop_all()


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def example1():
    return load_fixture("example1")


@pytest.fixture
def mqp_rhs():
    return load_fixture("mqp-rhs")


@pytest.fixture
def intro():
    return load_fixture("intro-biobj")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def example1_solution(w1):
    """Closed-form weighting solution of example1 at weight (w1, 1 - w1)."""
    x1 = (6 - 9 * w1) / (2 - w1) if w1 <= 2 / 3 else 0.0
    if w1 <= 2 / 9:
        x2 = 3.0
    elif w1 <= 5 / 6:
        x2 = (5 - 6 * w1) / (1 + w1)
    else:
        x2 = 0.0
    return np.array([x1, x2])


@pytest.fixture(name="example1_solution")
def example1_solution_fixture():
    return example1_solution
