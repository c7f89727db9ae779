import os


class Config:
    SQLALCHEMY_DATABASE_URI = os.environ.get("DATABASE_URL", "sqlite:///imop.db")
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    IMOP_OUT_DIR = os.environ.get("IMOP_OUT_DIR", "out")

    # ---- Numerical defaults ----
    # LP optimality and QP KKT tolerance; for the polynomial family the bound on
    # the relative projected Newton step ‖d‖ / (1 + ‖x‖) (solver.newton_step)
    SOLVER_TOL = 1e-8
    PARAM_TOL = 1e-9
    MEMBERSHIP_ZETA = 1e-3
    MAX_OUTER_ITER = 5
    KMEANS_RESTARTS = 50
    ADMM_MAX_ITER = 100
    ADMM_EPS = 1e-3
    REFERENCE_GRID = {2: 10_000, 3: 461}


class TestConfig(Config):
    TESTING = True
    SQLALCHEMY_DATABASE_URI = "sqlite:///:memory:"
