"""Synthetic data, estimation campaigns and their metrics.

Everything the CLI and the HTTP API do goes through the functions here:
observation generation, single estimates, identifiability runs, model
exports and replicated experiments with their CSV/JSON/plot-data outputs.
"""
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from io import BytesIO, StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from scipy.stats import truncnorm
from sqlalchemy import desc

from imop.config import Config
from imop.dmp import LINEAR, load_instance
from imop.errors import ImopError, NotFoundError, ValidationError
from imop.estimators import (
    INIT_MODES,
    EstimateResult,
    FitConfig,
    brute_force_oracle,
    estimate_admm,
    estimate_clustering,
)
from imop.fixtures import FIXTURE_NAMES, intro_instance, intro_vertices, load_fixture
from imop.identifiability import SearchConfig, is_efficient_under, test_identifiability
from imop.loss import GroundTruth, ObservationSet, SideInfo, attach_bound, empirical_risk, monte_carlo_risk
from imop.models import ExperimentRun, RepetitionRecord, db
from imop.reform import (
    BigMConfig,
    build_single_level_mlp,
    build_single_level_mqp_rhs,
    build_test_problem,
    check_feasible,
    export_model,
    plug_in_single_level,
    plug_in_test_problem,
)
from imop.solver import FrontOracle, efficiency_gap, grid_weights, random_weights, sample_efficient_front, solve_weights

logger = logging.getLogger(__name__)

NOISE_KINDS = ("none", "gaussian", "truncated-gaussian", "uniform", "rounding")
WEIGHT_LAW_KINDS = ("uniform-simplex", "truncated-normal", "uniform-box", "efficient-faces")
ESTIMATORS = ("clustering", "admm", "oracle")
BUILDERS = ("mlp", "mqp-rhs", "test")
VALIDATION_SEED_OFFSET = 1_000_003

CSV_COLUMNS = [
    "name",
    "fixture",
    "estimator",
    "N",
    "K",
    "repetition",
    "seed",
    "status",
    "estimation_error",
    "prediction_error",
    "objective",
    "iterations",
    "converged",
    "theta_hat",
    "message",
]


# -------------------------
# Data-generating laws
# -------------------------

@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    sigma: float = None
    lo: float = None
    hi: float = None
    a: float = None
    granularity: float = None
    seed: int = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValidationError(f"unknown noise model {self.kind!r}", {"allowed": list(NOISE_KINDS)})
        if self.kind in ("gaussian", "truncated-gaussian") and not (self.sigma or 0) > 0:
            raise ValidationError("noise sigma must be positive")
        if self.kind == "truncated-gaussian":
            lo, hi = self.interval
            if not lo <= 0.0 <= hi or lo == hi:
                raise ValidationError("truncation interval must contain 0", {"lo": lo, "hi": hi})
        if self.kind == "uniform" and not (self.a or 0) > 0:
            raise ValidationError("uniform noise half-width must be positive")
        if self.kind == "rounding" and not (self.granularity or 0) > 0:
            raise ValidationError("rounding granularity must be positive")

    @property
    def interval(self):
        lo = -np.inf if self.lo is None else float(self.lo)
        hi = np.inf if self.hi is None else float(self.hi)
        return lo, hi

    @classmethod
    def from_dict(cls, data):
        if isinstance(data, cls):
            return data
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    def apply(self, X, rng):
        X = np.asarray(X, dtype=float)
        if self.kind == "none":
            return X.copy()
        if self.kind == "gaussian":
            return X + rng.normal(0.0, self.sigma, size=X.shape)
        if self.kind == "truncated-gaussian":
            lo, hi = self.interval
            eps = truncnorm.rvs(lo / self.sigma, hi / self.sigma, loc=0.0, scale=self.sigma,
                                size=X.shape, random_state=rng)
            return X + eps
        if self.kind == "uniform":
            return X + rng.uniform(-self.a, self.a, size=X.shape)
        return np.round(X / self.granularity) * self.granularity


@dataclass(frozen=True)
class WeightLaw:
    kind: str = "uniform-simplex"
    params: dict = field(default_factory=dict)
    faces: tuple = ()

    def __post_init__(self):
        if self.kind not in WEIGHT_LAW_KINDS:
            raise ValidationError(f"unknown weight law {self.kind!r}", {"allowed": list(WEIGHT_LAW_KINDS)})
        if self.kind == "efficient-faces" and not self.faces:
            raise ValidationError("efficient-faces law needs the efficient faces of the true problem")

    @classmethod
    def from_dict(cls, data, faces=None):
        if isinstance(data, cls):
            return data
        data = dict(data or {})
        kind = data.pop("kind", "uniform-simplex")
        faces = data.pop("faces", None) or faces or ()
        return cls(kind, data, tuple(np.asarray(f, dtype=float) for f in faces))

    def to_dict(self):
        return {"kind": self.kind, **self.params}

    def draw(self, p, N, rng):
        return random_weights(p, N, self.kind, seed=rng, **self.params)


def _pieces(faces):
    """Fan-triangulate each face; segment faces are kept when no face has area."""
    triangles, segments = [], []
    for face in faces:
        V = np.atleast_2d(np.asarray(face, dtype=float))
        if V.shape[0] == 2:
            segments.append((V[0], V[1]))
        for j in range(1, V.shape[0] - 1):
            triangles.append((V[0], V[j], V[j + 1]))
    if triangles:
        sizes = []
        for a, b, c in triangles:
            u, v = b - a, c - a
            sizes.append(0.5 * math.sqrt(max(float(u @ u) * float(v @ v) - float(u @ v) ** 2, 0.0)))
        return triangles, np.array(sizes)
    return segments, np.array([np.linalg.norm(b - a) for a, b in segments])


def sample_faces(faces, N, rng):
    """Uniform draws on the union of the faces (area-proportional piece choice)."""
    pieces, sizes = _pieces(faces)
    if not pieces or sizes.sum() <= 0:
        raise ValidationError("efficient faces have no area to sample from")
    pick = rng.choice(len(pieces), size=N, p=sizes / sizes.sum())
    corners = [np.array([piece[i] for piece in pieces]) for i in range(len(pieces[0]))]
    if len(corners) == 2:
        t = rng.random(N)[:, None]
        return (1.0 - t) * corners[0][pick] + t * corners[1][pick]
    r1, r2 = rng.random(N), rng.random(N)
    s = np.sqrt(r1)[:, None]
    r2 = r2[:, None]
    return (1.0 - s) * corners[0][pick] + s * (1.0 - r2) * corners[1][pick] + s * r2 * corners[2][pick]


def generate_observations(dmp, theta_true, weight_law, noise, N, seed=0, faces=None):
    """y_i = x_i + ε_i with x_i = S(w_i, θ_true), or x_i drawn on the efficient faces."""
    if N < 1:
        raise ValidationError("observation count must be at least 1")
    theta = dmp.space.validate(theta_true) if dmp.n_free else np.zeros(0)
    law = WeightLaw.from_dict(weight_law, faces)
    noise = NoiseModel.from_dict(noise)
    weight_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    if noise.seed is not None:
        noise_seq = np.random.SeedSequence([noise.seed, seed])
    rng = np.random.default_rng(weight_seq)

    if law.kind == "efficient-faces":
        clean = sample_faces(law.faces, N, rng)
        W = np.full((N, dmp.p), np.nan)
    else:
        W = law.draw(dmp.p, N, rng)
        clean = np.array([s.x for s in solve_weights(dmp, theta if dmp.n_free else None, W)])

    Y = noise.apply(clean, np.random.default_rng(noise_seq))
    logger.debug("generate_observations N=%d law=%s noise=%s seed=%d", N, law.kind, noise.kind, seed)
    return ObservationSet(Y, truth=GroundTruth(theta, W, clean))


def make_generator(dmp, theta_true, weight_law, noise, faces=None):
    """`generator(count, seed)` producing fresh noisy observations from the same law."""

    def generator(count, seed):
        return generate_observations(dmp, theta_true, weight_law, noise, count, seed, faces).Y

    return generator


def side_info_from_truth(observations, weights, count, lam=1.0, radius=0):
    """Admissible sets for the first `count` observations: true weight's grid index ± radius."""
    truth = observations.truth
    if truth is None or np.isnan(truth.weights).any():
        raise ValidationError("side information needs recorded true weights")
    weights = np.atleast_2d(weights)
    count = min(int(count), observations.N)
    K = weights.shape[0]
    nearest = cdist(truth.weights[:count], weights).argmin(axis=1)
    sets = tuple(tuple(range(max(0, k - radius), min(K, k + radius + 1))) for k in nearest)
    return ObservationSet(observations.Y, SideInfo(sets, lam), truth)


# -------------------------
# Metrics
# -------------------------

def estimation_error(theta_hat, theta_true, relative=False, space=None):
    """‖θ̂ − θ_true‖₂ over free coordinates, optionally divided by ‖θ_true‖₂."""
    a = np.asarray(theta_hat, dtype=float).reshape(-1)
    b = np.asarray(theta_true, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValidationError("estimate and truth bind different slots", {"estimate": a.size, "truth": b.size})
    if space is not None:
        free = ~space.fixed_mask
        a, b = a[free], b[free]
    err = float(np.linalg.norm(a - b))
    if relative:
        scale = float(np.linalg.norm(b))
        if scale == 0.0:
            raise ValidationError("relative error needs a nonzero true parameter")
        err /= scale
    return err


@dataclass
class WeightHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    sd: float

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def total(self):
        return int(self.counts.sum())

    def to_dict(self):
        return {
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "mean": self.mean,
            "sd": self.sd,
            "total": self.total,
        }


def histogram_of(values, bins=20):
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValidationError("histogram needs at least one value")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return WeightHistogram(edges, counts, float(values.mean()), float(values.std()))


def assigned_first_weights(result):
    return np.atleast_2d(result.weights)[result.assignment.index, 0]


def weight_histogram(result, bins=20):
    """Histogram and moments of the first coordinate of each observation's assigned weight."""
    if np.atleast_2d(result.weights).shape[1] != 2:
        logger.warning("weight_histogram p=%d uses the first weight coordinate only", result.weights.shape[1])
    return histogram_of(assigned_first_weights(result), bins)


def front_coverage(dmp, theta_hat, theta_true, weights, tau=1e-6):
    """Cross-membership of the estimated and true fronts.

    Each estimated-front point is tested for efficiency under θ_true and each
    true-front point under θ̂; both fractions are 1 when the fronts coincide.
    """
    weights = np.atleast_2d(weights)
    estimated = sample_efficient_front(dmp, theta_hat, weights).points
    true = sample_efficient_front(dmp, theta_true, weights).points

    def slacks(points, theta):
        if dmp.family == LINEAR:
            return np.array([efficiency_gap(dmp, x, theta) for x in points])
        oracle = FrontOracle(dmp, weights)
        return np.array([is_efficient_under(dmp, theta, x, weights, tau, oracle)[1] for x in points])

    forward, backward = slacks(estimated, theta_true), slacks(true, theta_hat)
    out = {
        "estimated_in_true": float(np.mean(forward <= tau)),
        "true_in_estimated": float(np.mean(backward <= tau)),
        "max_slack": float(max(forward.max(initial=0.0), backward.max(initial=0.0))),
        "tau": tau,
    }
    out["covered"] = out["estimated_in_true"] == 1.0 and out["true_in_estimated"] == 1.0
    logger.info("front_coverage covered=%s max_slack=%.3g", out["covered"], out["max_slack"])
    return out


def prediction_error(dmp, theta_hat, generator, size, seed=0, K_ref=None):
    """Mean squared distance of fresh validation draws to the dense front of θ̂."""
    Y = generator(size, seed + VALIDATION_SEED_OFFSET)
    return monte_carlo_risk(dmp, theta_hat, Y, seed=seed, K_ref=K_ref).mean


# -------------------------
# Introductory example
# -------------------------

@dataclass
class IntroReport:
    mean: np.ndarray
    inside: bool
    theta_hat: np.ndarray
    efficient_fraction: float
    tau: float
    samples: np.ndarray = field(repr=False)
    vertices: np.ndarray = field(repr=False)
    labels: list = None

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "inside": self.inside,
            "theta_hat": self.theta_hat.tolist(),
            "labels": self.labels,
            "efficient_fraction": self.efficient_fraction,
            "tau": self.tau,
            "samples": int(self.samples.shape[0]),
            "vertices": {"O": self.vertices[0].tolist(), "A": self.vertices[1].tolist(),
                         "B": self.vertices[2].tolist()},
        }


def intro_points(a=6.0, b=1.0, c=1.0, samples=2000):
    """Evenly spaced points on AC and BD, where C and D bisect OA and OB."""
    O, A, B = intro_vertices(a, b, c)
    C, D = 0.5 * (O + A), 0.5 * (O + B)
    m1 = samples // 2
    m2 = samples - m1
    s1 = ((np.arange(m1) + 0.5) / m1)[:, None]
    s2 = ((np.arange(m2) + 0.5) / m2)[:, None]
    return np.vstack([A + s1 * (C - A), B + s2 * (D - B)])


def intro_demo(a=6.0, b=1.0, c=1.0, samples=2000, K=11, tau=1e-2, seed=0, restarts=10):
    """Sample mean versus the bi-objective estimate on the feasible triangle."""
    if samples < 2:
        raise ValidationError("intro demo needs at least two samples")
    dmp = intro_instance(a, b, c)
    Y = intro_points(a, b, c, samples)
    mean = Y.mean(axis=0)
    inside = bool(a * mean[0] + b * mean[1] > 0 and b * mean[0] + a * mean[1] > 0 and mean.sum() < c)

    result = estimate_clustering(dmp, Y, grid_weights(dmp.p, K), restarts=restarts, seed=seed)
    points = np.unique(np.round(Y, 12), axis=0)
    gaps = np.array([efficiency_gap(dmp, y, result.theta) for y in points])
    fraction = float(np.mean(gaps <= tau))
    logger.info("intro_demo mean=(%.6f, %.6f) efficient_fraction=%.4f", mean[0], mean[1], fraction)
    return IntroReport(mean, inside, result.theta, fraction, tau, Y, intro_vertices(a, b, c), dmp.slot_labels())


# -------------------------
# Configuration
# -------------------------

def _as_tuple(value, label):
    values = tuple(int(v) for v in np.atleast_1d(value))
    if not values or min(values) < 1:
        raise ValidationError(f"{label} values must be positive integers", {label: list(values)})
    return values


@dataclass
class ExperimentConfig:
    fixture: str
    name: str = None
    N: tuple = (50,)
    K: tuple = (21,)
    weight_law: dict = field(default_factory=lambda: {"kind": "uniform-simplex"})
    noise: dict = field(default_factory=lambda: {"kind": "none"})
    estimator: str = "clustering"
    repetitions: int = 1
    seed: int = 0
    out_dir: str = None
    init: str = "kmeans++"
    theta0: list = None
    restarts: int = Config.KMEANS_RESTARTS
    max_outer: int = Config.MAX_OUTER_ITER
    fit: dict = field(default_factory=dict)
    rho: float = 0.5
    groups: int = None
    admm_max_iter: int = Config.ADMM_MAX_ITER
    resolution: float = 0.01
    side_info: dict = None
    relative_error: bool = False
    validation_size: int = 0
    K_ref: int = None
    bins: int = 20
    threads: int = 1

    def __post_init__(self):
        if self.fixture not in FIXTURE_NAMES:
            raise NotFoundError(f"Fixture {self.fixture} not found", {"known": list(FIXTURE_NAMES)})
        self.name = self.name or self.fixture
        self.out_dir = self.out_dir or Config.IMOP_OUT_DIR
        self.N = _as_tuple(self.N, "N")
        self.K = _as_tuple(self.K, "K")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be at least 1")
        if self.estimator not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {self.estimator!r}", {"allowed": list(ESTIMATORS)})
        if self.init not in INIT_MODES:
            raise ValidationError(f"unknown initialization {self.init!r}", {"allowed": list(INIT_MODES)})
        if self.validation_size < 0 or self.bins < 1 or self.threads < 0:
            raise ValidationError("validation size, bins and threads must be nonnegative")
        # parse eagerly so a bad law fails before any output is written
        NoiseModel.from_dict(self.noise)
        law = (self.weight_law or {}).get("kind", "uniform-simplex")
        if law not in WEIGHT_LAW_KINDS:
            raise ValidationError(f"unknown weight law {law!r}", {"allowed": list(WEIGHT_LAW_KINDS)})
        FitConfig.from_dict(self.fit)

    @classmethod
    def from_dict(cls, data):
        """Fixture generation defaults, overridden by the keys of `data` (left untouched)."""
        data = dict(data or {})
        fixture = data.get("fixture")
        if not fixture:
            raise ValidationError("experiment config needs a fixture")
        if fixture not in FIXTURE_NAMES:
            raise NotFoundError(f"Fixture {fixture} not found", {"known": list(FIXTURE_NAMES)})
        known = {f.name for f in fields(cls)}
        merged = {k: v for k, v in load_fixture(fixture).generation.items() if k in known}
        merged.update({k: v for k, v in data.items() if k in known})
        return cls(**merged)

    def to_dict(self):
        out = asdict(self)
        out["N"], out["K"] = list(self.N), list(self.K)
        return out


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Config file {path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc


def resolve_threads(threads):
    if threads == 0:
        return os.cpu_count() or 1
    return max(1, int(threads or 1))


# -------------------------
# Output helpers
# -------------------------

def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return None if not math.isfinite(float(value)) else float(value)
    return value


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")
    return path


def output_paths(out_dir, name):
    out = Path(out_dir)
    return {
        "csv": out / f"{name}.csv",
        "summary": out / f"{name}_summary.json",
        "timing": out / f"{name}_timing.csv",
        "table": out / f"{name}_table.csv",
        "trace": out / f"{name}_trace.csv",
        "residuals": out / f"{name}_residuals.csv",
        "histogram": out / f"{name}_histogram.csv",
    }


class RowCollector:
    """Appends one CSV row per repetition in submission order."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = columns
        self.count = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(columns=columns).to_csv(self.path, index=False)

    def write(self, row):
        pd.DataFrame([row], columns=self.columns).to_csv(self.path, mode="a", header=False, index=False)
        self.count += 1


def rows_frame(rows):
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def aggregate_rows(rows):
    """Per (N, K) cell: mean and sd over successful repetitions."""
    df = rows_frame(rows)
    out = []
    for (N, K), group in df.groupby(["N", "K"], sort=False):
        ok = group[group["status"] == "ok"]
        entry = {"N": int(N), "K": int(K), "repetitions": int(len(group)),
                 "failed": int((group["status"] != "ok").sum())}
        for col in ("estimation_error", "prediction_error", "objective"):
            values = pd.to_numeric(ok[col], errors="coerce").dropna()
            entry[f"{col}_mean"] = float(values.mean()) if len(values) else None
            entry[f"{col}_sd"] = float(values.std(ddof=1)) if len(values) > 1 else (0.0 if len(values) else None)
        out.append(entry)
    return out


def pivot_table(aggregates, value="estimation_error_mean"):
    """K rows by N columns of a per-cell aggregate."""
    df = pd.DataFrame(aggregates)
    return df.pivot(index="K", columns="N", values=value)


def experiment_csv(rows):
    buffer = StringIO()
    rows_frame(rows).to_csv(buffer, index=False)
    return buffer.getvalue()


def experiment_workbook(rows, aggregates):
    """Workbook with a Repetitions sheet and a Summary sheet."""
    output = BytesIO()
    with pd.ExcelWriter(output, engine="openpyxl") as writer:
        rows_frame(rows).to_excel(writer, index=False, sheet_name="Repetitions")
        pd.DataFrame(aggregates).to_excel(writer, index=False, sheet_name="Summary")
    output.seek(0)
    return output


def _xy(path, x, y, **extra):
    frame = pd.DataFrame({"x": x, "y": y, **extra})
    frame.to_csv(path, index=False)
    return path


# -------------------------
# Estimation
# -------------------------

def oracle_estimate(dmp, observations, weights, resolution=0.01, seed=0):
    """Grid oracle wrapped as an estimate."""
    started = time.perf_counter()
    oracle = FrontOracle(dmp, weights)
    theta, _ = brute_force_oracle(dmp, observations, weights, resolution=resolution, oracle=oracle)
    points = oracle.points(theta)
    report = empirical_risk(observations, points)
    return EstimateResult(
        theta=theta,
        points=points,
        weights=oracle.weights,
        assignment=report.assignment,
        value=report.value,
        method="oracle",
        seed=seed,
        runtime=time.perf_counter() - started,
        labels=dmp.slot_labels(),
    )


def estimate(dmp, observations, weights, config, seed, threads=1):
    """Dispatch to the estimator named in the config."""
    fit = FitConfig.from_dict({**config.fit, "seed": seed})
    theta0 = None if config.theta0 is None else np.asarray(config.theta0, dtype=float)
    if config.estimator == "clustering":
        init = "provided" if theta0 is not None and config.init == "kmeans++" else config.init
        return estimate_clustering(dmp, observations, weights, config=fit, init=init, theta0=theta0,
                                   max_outer=config.max_outer, restarts=config.restarts, seed=seed)
    if config.estimator == "admm":
        return estimate_admm(dmp, observations, weights, rho=config.rho, groups=config.groups, theta0=theta0,
                             max_iter=config.admm_max_iter, config=fit, threads=threads, seed=seed)
    return oracle_estimate(dmp, observations, weights, config.resolution, seed)


def _observations_for(fixture, config, N, seed, weights):
    obs = generate_observations(fixture.instance, fixture.theta_true, config.weight_law, config.noise, N, seed,
                                fixture.efficient_faces)
    if config.side_info:
        side = config.side_info
        obs = side_info_from_truth(obs, weights, side.get("count", 0), side.get("lambda", 1.0),
                                   side.get("radius", 0))
    return obs


@dataclass
class RepetitionOutcome:
    row: dict
    runtime: float
    result: EstimateResult = None


def run_repetition(fixture, config, N, K, repetition):
    """One seeded draw-and-estimate; failures become a row with status 'failed'."""
    seed = config.seed + repetition
    dmp = fixture.instance
    row = {col: None for col in CSV_COLUMNS}
    row.update(name=config.name, fixture=config.fixture, estimator=config.estimator, N=N, K=K,
               repetition=repetition, seed=seed, status="ok", message="")
    started = time.perf_counter()
    result = None
    try:
        weights = grid_weights(dmp.p, K, seed=seed)
        obs = _observations_for(fixture, config, N, seed, weights)
        result = estimate(dmp, obs.without_truth(), weights, config, seed)
        row.update(
            estimation_error=estimation_error(result.theta, fixture.theta_true, config.relative_error, dmp.space),
            objective=result.value,
            iterations=len(result.trace),
            converged=bool(result.converged),
            theta_hat=json.dumps([float(v) for v in result.theta]),
        )
        if config.validation_size:
            generator = make_generator(dmp, fixture.theta_true, config.weight_law, config.noise,
                                       fixture.efficient_faces)
            row["prediction_error"] = prediction_error(dmp, result.theta, generator, config.validation_size,
                                                       seed, config.K_ref)
    except (ImopError, np.linalg.LinAlgError) as exc:
        row.update(status="failed", message=str(exc))
        result = None
        logger.warning("run_repetition N=%d K=%d repetition=%d failed: %s", N, K, repetition, exc)
    runtime = time.perf_counter() - started
    logger.info("run_repetition N=%d K=%d repetition=%d status=%s error=%s",
                N, K, repetition, row["status"], row["estimation_error"])
    return RepetitionOutcome(row, runtime, result)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list
    aggregates: list
    histogram: WeightHistogram = None
    trace: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)

    @property
    def failures(self):
        return sum(1 for r in self.rows if r["status"] != "ok")

    @property
    def status(self):
        if self.failures == 0:
            return "completed"
        return "failed" if self.failures == len(self.rows) else "partial"

    def summary(self):
        """Deterministic summary; runtimes live in the timing file only."""
        return {
            "config": self.config.to_dict(),
            "status": self.status,
            "failures": self.failures,
            "aggregates": self.aggregates,
            "histogram": None if self.histogram is None else self.histogram.to_dict(),
            "trace": self.trace,
            "files": {k: p.name for k, p in self.paths.items()},
        }


def _write_plot_data(report, paths):
    written = {}
    trace = report.trace
    if report.config.estimator == "admm" and trace:
        it = [t["iteration"] for t in trace]
        frame = pd.concat([
            pd.DataFrame({"x": it, "y": [t["primal"] for t in trace], "series": "primal"}),
            pd.DataFrame({"x": it, "y": [t["dual"] for t in trace], "series": "dual"}),
        ])
        frame.to_csv(paths["residuals"], index=False)
        written["residuals"] = paths["residuals"]
    elif trace:
        steps = [t for t in trace if t.get("step") == "assign"]
        written["trace"] = _xy(paths["trace"], [t["iteration"] for t in steps], [t["changes"] for t in steps],
                               objective=[t["objective"] for t in steps])
    if report.histogram is not None:
        written["histogram"] = _xy(paths["histogram"], report.histogram.centers, report.histogram.counts)
    return written


def run_experiment(config, out_dir=None, threads=None):
    """Run every (N, K, repetition) cell and write CSV, summary, table and plot data."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    fixture = load_fixture(config.fixture)
    if fixture.theta_true is None:
        raise ValidationError(f"fixture {config.fixture} has no true parameter")
    paths = output_paths(out_dir or config.out_dir, config.name)
    workers = resolve_threads(config.threads if threads is None else threads)
    tasks = [(N, K, r) for N in config.N for K in config.K for r in range(config.repetitions)]
    last_cell = (config.N[-1], config.K[-1])
    logger.info("run_experiment name=%s fixture=%s cells=%d repetitions=%d threads=%d",
                config.name, config.fixture, len(config.N) * len(config.K), config.repetitions, workers)

    collector = RowCollector(paths["csv"], CSV_COLUMNS)
    outcomes = []

    def task(args):
        outcome = run_repetition(fixture, config, *args)
        if args[:2] != last_cell:
            outcome.result = None
        return outcome

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        stream = pool.map(task, tasks) if pool is not None else map(task, tasks)
        for outcome in stream:
            collector.write(outcome.row)
            outcomes.append(outcome)
    finally:
        if pool is not None:
            pool.shutdown()

    rows = [o.row for o in outcomes]
    final = [o.result for o in outcomes if o.result is not None]
    histogram = None
    if fixture.instance.p == 2 and final:
        histogram = histogram_of(np.concatenate([assigned_first_weights(r) for r in final]), config.bins)
    report = ExperimentReport(
        config=config,
        rows=rows,
        aggregates=aggregate_rows(rows),
        histogram=histogram,
        trace=final[0].trace if final else [],
        timing=[{"N": o.row["N"], "K": o.row["K"], "repetition": o.row["repetition"], "seed": o.row["seed"],
                 "runtime": o.runtime} for o in outcomes],
    )

    written = {"csv": paths["csv"]}
    pd.DataFrame(report.timing).to_csv(paths["timing"], index=False)
    written["timing"] = paths["timing"]
    if len(config.N) > 1 or len(config.K) > 1:
        pivot_table(report.aggregates).to_csv(paths["table"])
        written["table"] = paths["table"]
    written.update(_write_plot_data(report, paths))
    written["summary"] = paths["summary"]
    report.paths = written
    write_json(paths["summary"], report.summary())
    logger.info("run_experiment name=%s status=%s failures=%d", config.name, report.status, report.failures)
    return report


# -------------------------
# Single operations
# -------------------------

def resolve_problem(data):
    """(instance, θ_true, name) from a fixture id or an inline instance document."""
    if data.get("instance") is not None:
        dmp, theta_true = load_instance(data["instance"])
        return dmp, theta_true, data.get("name") or dmp.name
    fixture_name = data.get("fixture")
    if not fixture_name:
        raise ValidationError("request needs a fixture or an instance")
    if fixture_name not in FIXTURE_NAMES:
        raise NotFoundError(f"Fixture {fixture_name} not found", {"known": list(FIXTURE_NAMES)})
    fixture = load_fixture(fixture_name)
    return fixture.instance, fixture.theta_true, data.get("name") or fixture_name


def _theta(dmp, data, key, default):
    if not dmp.n_free:
        return None
    value = data.get(key)
    theta = default if value is None else np.asarray(value, dtype=float)
    if theta is None:
        theta = dmp.space.center()
    return dmp.space.validate(theta)


def run_forward(data, out_dir=None):
    """Efficient front of one instance for a weight grid (or explicit weights)."""
    dmp, theta_true, name = resolve_problem(data)
    theta = _theta(dmp, data, "theta", theta_true)
    seed = int(data.get("seed", 0))
    weights = data.get("weights")
    weights = grid_weights(dmp.p, int(data.get("K", 21)), seed=seed) if weights is None else np.atleast_2d(weights)
    front = sample_efficient_front(dmp, theta, weights)
    payload = {
        "name": name,
        "theta": None if theta is None else theta.tolist(),
        "labels": dmp.slot_labels(),
        "front": front.to_dict(),
        "max_residual": max((s.residuals.max() for s in front.solutions), default=0.0),
    }
    paths = {}
    if out_dir is not None:
        out = Path(out_dir)
        frame = pd.DataFrame(np.hstack([front.weights, front.points, front.values]),
                             columns=[f"w{l + 1}" for l in range(dmp.p)] + [f"x{j + 1}" for j in range(dmp.n)]
                             + [f"f{l + 1}" for l in range(dmp.p)])
        frame["boundary"] = front.boundary
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / f"{name}_front.csv", index=False)
        paths = {"csv": out / f"{name}_front.csv", "json": write_json(out / f"{name}_front.json", payload)}
    return payload, paths


def _observations_from(data, n):
    source = data["observations"]
    if isinstance(source, str):
        path = Path(source)
        if not path.is_file():
            raise NotFoundError(f"Observation file {path} not found")
        Y = pd.read_csv(path).to_numpy(dtype=float)
    else:
        Y = np.atleast_2d(np.asarray(source, dtype=float))
    if Y.shape[1] != n:
        raise ValidationError(f"observations have dimension {Y.shape[1]}, instance has {n}")
    return ObservationSet(Y)


def run_estimate(data, out_dir=None):
    """One estimate from supplied observations or a seeded draw from the fixture's law."""
    config = ExperimentConfig.from_dict(data)
    fixture = load_fixture(config.fixture)
    dmp, theta_true, name, faces = fixture.instance, fixture.theta_true, config.name, fixture.efficient_faces
    N, K, seed = config.N[0], config.K[0], config.seed
    weights = grid_weights(dmp.p, K, seed=seed)

    if data.get("observations") is not None:
        obs = _observations_from(data, dmp.n)
    else:
        if theta_true is None:
            raise ValidationError("generating observations needs a true parameter")
        obs = generate_observations(dmp, theta_true, config.weight_law, config.noise, N, seed, faces)
        if config.side_info:
            side = config.side_info
            obs = side_info_from_truth(obs, weights, side.get("count", 0), side.get("lambda", 1.0),
                                       side.get("radius", 0))
        obs = obs.without_truth()

    result = estimate(dmp, obs, weights, config, seed, threads=resolve_threads(config.threads))
    loss = attach_bound(empirical_risk(obs, result.points), dmp.radius, obs.radius)
    payload = {
        "name": name,
        "estimator": config.estimator,
        "seed": seed,
        "N": obs.N,
        "K": K,
        "estimate": result.to_dict(),
        "loss": loss.to_dict(),
        "estimation_error": None if theta_true is None or data.get("observations") is not None
        else estimation_error(result.theta, theta_true, config.relative_error, dmp.space),
    }
    paths = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        X = result.points[result.assignment.index]
        frame = pd.DataFrame(obs.Y, columns=[f"y{j + 1}" for j in range(dmp.n)])
        frame["k"] = result.assignment.index
        for j in range(dmp.n):
            frame[f"x{j + 1}"] = X[:, j]
        frame["distance"] = result.assignment.distance
        frame.to_csv(out / f"{name}_estimate.csv", index=False)
        paths = {"csv": out / f"{name}_estimate.csv", "json": write_json(out / f"{name}_estimate.json", payload)}
        if result.admm is not None:
            trace = result.trace
            it = [t["iteration"] for t in trace]
            pd.concat([
                pd.DataFrame({"x": it, "y": [t["primal"] for t in trace], "series": "primal"}),
                pd.DataFrame({"x": it, "y": [t["dual"] for t in trace], "series": "dual"}),
            ]).to_csv(out / f"{name}_residuals.csv", index=False)
            paths["residuals"] = out / f"{name}_residuals.csv"
    logger.info("run_estimate name=%s estimator=%s value=%.8g", name, config.estimator, result.value)
    return payload, paths


def run_identifiability(data, out_dir=None):
    dmp, theta_true, name = resolve_problem(data)
    theta_hat = _theta(dmp, data, "theta_hat", theta_true)
    if theta_hat is None:
        raise ValidationError("identifiability needs at least one free slot")
    search = SearchConfig.from_dict({**(data.get("search") or {}), "seed": int(data.get("seed", 0))})
    report = test_identifiability(
        dmp,
        theta_hat,
        K=data.get("K"),
        N_prime=int(data.get("N_prime", 200)),
        K_prime=int(data.get("K_prime", 200)),
        tau=data.get("tau"),
        config=search,
        zeta=float(data.get("zeta", Config.MEMBERSHIP_ZETA)),
    )
    payload = {"name": name, "labels": dmp.slot_labels(), "search": search.to_dict(), **report.to_dict()}
    paths = {}
    if out_dir is not None:
        paths = {"json": write_json(Path(out_dir) / f"{name}_ident.json", payload)}
    return payload, paths


def build_model(data):
    """MIP model (and the matching ground-truth point) for one of the single-level builders."""
    builder = data.get("builder", "mqp-rhs")
    if builder not in BUILDERS:
        raise ValidationError(f"unknown builder {builder!r}", {"allowed": list(BUILDERS)})
    dmp, theta_true, name = resolve_problem(data)
    seed = int(data.get("seed", 0))
    bigm = BigMConfig.from_dict(data.get("bigm"))

    if builder == "test":
        theta_hat = _theta(dmp, data, "theta_hat", theta_true)
        K = int(data.get("K", 6))
        N_prime = int(data.get("N_prime", 5))
        weights = grid_weights(dmp.p, K, seed=seed)
        # points must come from the same weight grid for θ̂ itself to be feasible
        front = sample_efficient_front(dmp, theta_hat, weights).points
        pick = np.unique(np.linspace(0, front.shape[0] - 1, min(N_prime, front.shape[0])).round().astype(int))
        points = front[pick]
        model = build_test_problem(dmp, theta_hat, points, weights, bigm, name=f"{name}_test_{points.shape[0]}_{K}")
        point = plug_in_test_problem(model, dmp, theta_hat, theta_hat, points, weights)
        return model, point

    if theta_true is None:
        raise ValidationError("single-level models need a true parameter to draw observations")
    generation, faces = {}, ()
    if data.get("instance") is None:
        fixture = load_fixture(data["fixture"])
        generation, faces = fixture.generation, fixture.efficient_faces
    N = int(data.get("N", 5))
    K = int(data.get("K", 6))
    weights = grid_weights(dmp.p, K, seed=seed)
    obs = generate_observations(dmp, theta_true, data.get("weight_law", generation.get("weight_law")),
                                data.get("noise", generation.get("noise")), N, seed, faces)
    build = build_single_level_mlp if builder == "mlp" else build_single_level_mqp_rhs
    model = build(dmp, obs.without_truth(), weights, bigm, name=f"{name}_{N}_{K}")
    point = plug_in_single_level(model, dmp, theta_true, obs.without_truth(), weights)
    return model, point


def run_export(data, out_dir=None):
    model, point = build_model(data)
    payload = {"name": model.name, "counts": model.counts(),
               "bigm": {k: {"value": v, "origin": o} for k, (v, o) in model.bigm.items()}}
    if data.get("certify", True):
        payload["certificate"] = check_feasible(model, point).to_dict()
    paths = {}
    if out_dir is not None:
        paths = {"lp": export_model(model, out_dir=out_dir)}
        paths["json"] = write_json(Path(out_dir) / f"{model.name}_model.json", payload)
    return payload, paths


# -------------------------
# Persistence
# -------------------------

def save_experiment(report):
    run = ExperimentRun(
        name=report.config.name,
        fixture=report.config.fixture,
        estimator=report.config.estimator,
        config=_clean(report.config.to_dict()),
        status=report.status,
        summary=_clean(report.summary()),
    )
    for row in report.rows:
        run.repetitions.append(RepetitionRecord(
            repetition=row["repetition"],
            seed=row["seed"],
            N=row["N"],
            K=row["K"],
            thetaHat=json.loads(row["theta_hat"]) if row["theta_hat"] else None,
            estimationError=_clean(row["estimation_error"]),
            predictionError=_clean(row["prediction_error"]),
            objective=_clean(row["objective"]),
            status=row["status"],
            message=row["message"] or None,
        ))
    db.session.add(run)
    db.session.commit()
    return run


def get_experiment(run_id):
    run = db.session.get(ExperimentRun, run_id)
    if not run:
        raise NotFoundError("Experiment run not found", {"id": run_id})
    return run


def list_experiments(page=1, page_size=20, sort="-createdAt", fixture=None):
    query = ExperimentRun.query
    if fixture:
        query = query.filter(ExperimentRun.fixture == fixture)
    column = getattr(ExperimentRun, sort.lstrip("-"), ExperimentRun.createdAt)
    query = query.order_by(desc(column) if sort.startswith("-") else column)
    return query.paginate(page=page, per_page=page_size, error_out=False)


def delete_experiment(run_id):
    run = get_experiment(run_id)
    db.session.delete(run)
    db.session.commit()


def run_rows(run):
    """Stored repetitions as harness CSV rows."""
    rows = []
    for rec in run.repetitions:
        rows.append({
            "name": run.name,
            "fixture": run.fixture,
            "estimator": run.estimator,
            "N": rec.N,
            "K": rec.K,
            "repetition": rec.repetition,
            "seed": rec.seed,
            "status": rec.status,
            "estimation_error": rec.estimationError,
            "prediction_error": rec.predictionError,
            "objective": rec.objective,
            "iterations": None,
            "converged": None,
            "theta_hat": None if rec.thetaHat is None else json.dumps(rec.thetaHat),
            "message": rec.message or "",
        })
    return rows
