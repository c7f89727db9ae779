"""Sampling loss, empirical risk and the risk bound."""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from imop.config import Config
from imop.errors import ValidationError
from imop.solver import FrontOracle, grid_weights

logger = logging.getLogger(__name__)

CDIST_BLOCK = 4_000_000


@dataclass(frozen=True)
class SideInfo:
    """Admissible weight indices for the first len(admissible) observations."""

    admissible: tuple
    lam: float = 1.0

    def __post_init__(self):
        sets = tuple(tuple(sorted(set(int(k) for k in s))) for s in self.admissible)
        object.__setattr__(self, "admissible", sets)
        if any(len(s) == 0 for s in sets):
            raise ValidationError("side information sets must be nonempty")
        if self.lam < 1.0:
            raise ValidationError("side information weight lambda must be at least 1")

    @property
    def count(self):
        return len(self.admissible)

    def to_dict(self):
        return {"admissible": [list(s) for s in self.admissible], "lambda": self.lam}


@dataclass(frozen=True)
class GroundTruth:
    theta: np.ndarray
    weights: np.ndarray
    clean: np.ndarray


@dataclass(frozen=True)
class ObservationSet:
    Y: np.ndarray
    side: SideInfo = None
    truth: GroundTruth = field(default=None, repr=False)

    def __post_init__(self):
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if not np.all(np.isfinite(Y)):
            raise ValidationError("observations must be finite")
        object.__setattr__(self, "Y", Y)
        if self.side is not None and self.side.count > Y.shape[0]:
            raise ValidationError("more side information sets than observations")

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def n(self):
        return self.Y.shape[1]

    @property
    def radius(self):
        return float(np.linalg.norm(self.Y, axis=1).max(initial=0.0))

    def without_truth(self):
        return ObservationSet(self.Y, self.side)

    def sample_weights(self, lam=None):
        """Per-observation multiplicity: lambda on the side-informed prefix, 1 elsewhere."""
        out = np.ones(self.N)
        if self.side is not None:
            out[: self.side.count] = self.side.lam if lam is None else lam
        return out

    def block(self, start, stop):
        """Contiguous slice; side information keeps its prefix layout."""
        side = None
        if self.side is not None and start < self.side.count:
            side = SideInfo(self.side.admissible[start:min(stop, self.side.count)], self.side.lam)
        return ObservationSet(self.Y[start:stop], side)


@dataclass
class Assignment:
    index: np.ndarray
    distance: np.ndarray

    @property
    def N(self):
        return self.index.shape[0]

    def key(self):
        return self.index.astype(np.int64).tobytes()

    def changes(self, other):
        return int(np.sum(self.index != other.index))


@dataclass
class ClusterStats:
    clusters: np.ndarray
    counts: np.ndarray
    centroids: np.ndarray
    scatter: np.ndarray


@dataclass
class LossReport:
    value: float
    contributions: dict
    assignment: Assignment
    N: int
    K: int
    bound: float = None
    bound_inputs: dict = None

    def to_dict(self):
        return {
            "value": self.value,
            "N": self.N,
            "K": self.K,
            "contributions": {str(k): v for k, v in self.contributions.items()},
            "bound": self.bound,
            "bound_inputs": self.bound_inputs,
        }


@dataclass
class RiskEstimate:
    mean: float
    stderr: float
    samples: int
    reference_size: int

    def to_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "samples": self.samples, "K_ref": self.reference_size}


def _as_observations(observations):
    if isinstance(observations, ObservationSet):
        return observations
    return ObservationSet(observations)


def assign(observations, front_points, side_info=None):
    """Nearest admissible front point per observation, lowest index on ties."""
    obs = _as_observations(observations)
    X = np.atleast_2d(np.asarray(front_points, dtype=float))
    if X.shape[0] == 0:
        raise ValidationError("front is empty")
    if X.shape[1] != obs.n:
        raise ValidationError(f"front points have dimension {X.shape[1]}, observations {obs.n}")
    side = side_info if side_info is not None else obs.side
    K = X.shape[0]

    index = np.empty(obs.N, dtype=int)
    distance = np.empty(obs.N)
    block = max(1, CDIST_BLOCK // K)
    for start in range(0, obs.N, block):
        D = cdist(obs.Y[start:start + block], X, "sqeuclidean")
        if side is not None:
            for i in range(start, min(start + block, side.count)):
                allowed = np.array(side.admissible[i])
                if allowed.max() >= K or allowed.min() < 0:
                    raise ValidationError(f"observation {i} has no admissible front point", {"admissible": allowed.tolist()})
                row = np.full(K, np.inf)
                row[allowed] = D[i - start, allowed]
                D[i - start] = row
        k = np.argmin(D, axis=1)
        index[start:start + block] = k
        distance[start:start + block] = D[np.arange(k.shape[0]), k]
    return Assignment(index, distance)


def empirical_risk(observations, front_points, side_info=None, lam=None):
    """M^N_K: weighted mean squared distance to the assigned front points."""
    obs = _as_observations(observations)
    if side_info is not None:
        obs = ObservationSet(obs.Y, side_info)
    assignment = assign(obs, front_points)
    weight = obs.sample_weights(lam)
    terms = weight * assignment.distance
    K = np.atleast_2d(front_points).shape[0]
    contributions = {int(k): float(terms[assignment.index == k].sum() / obs.N) for k in np.unique(assignment.index)}
    return LossReport(
        value=float(terms.sum() / obs.N),
        contributions=contributions,
        assignment=assignment,
        N=obs.N,
        K=K,
    )


def cluster_stats(Y, assignment, sample_weight=None):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    weight = np.ones(Y.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    clusters = np.unique(assignment.index)
    counts, centroids, scatter = [], [], []
    for k in clusters:
        members = assignment.index == k
        wk = weight[members]
        total = wk.sum()
        centroid = (wk[:, None] * Y[members]).sum(axis=0) / total
        counts.append(total)
        centroids.append(centroid)
        scatter.append(float((wk * np.sum((Y[members] - centroid) ** 2, axis=1)).sum() / total))
    n = Y.shape[1]
    return ClusterStats(
        clusters=clusters,
        counts=np.array(counts, dtype=float),
        centroids=np.array(centroids, dtype=float).reshape(-1, n),
        scatter=np.array(scatter, dtype=float),
    )


def cluster_decomposition(observations, assignment, front_points, lam=None):
    """(1/N) Σ_k |C_k| (‖ȳ_k − x_k‖² + Var(C_k)), over nonempty clusters."""
    obs = _as_observations(observations)
    if assignment.N != obs.N:
        raise ValidationError("assignment and observations differ in length")
    X = np.atleast_2d(np.asarray(front_points, dtype=float))
    stats = cluster_stats(obs.Y, assignment, obs.sample_weights(lam))
    gap = np.sum((stats.centroids - X[stats.clusters]) ** 2, axis=1)
    return float(np.sum(stats.counts * (gap + stats.scatter)) / obs.N)


def monte_carlo_risk(dmp, theta, generator, M_samples=100_000, seed=0, K_ref=None, reference=None):
    """Risk of θ on fresh draws from `generator` against a dense reference front.

    `generator(count, seed)` returns a (count, n) array; an array may be
    passed instead to evaluate a fixed validation set.
    """
    if reference is None:
        K_ref = K_ref or Config.REFERENCE_GRID.get(dmp.p, 10_000)
        oracle = FrontOracle(dmp, grid_weights(dmp.p, K_ref, seed=seed))
        reference = oracle.points(theta)
    reference = np.atleast_2d(reference)
    if callable(generator):
        Y = np.asarray(generator(M_samples, seed), dtype=float)
    else:
        Y = np.atleast_2d(np.asarray(generator, dtype=float))
    d, _ = cKDTree(reference).query(Y)
    sq = d ** 2
    stderr = float(sq.std(ddof=1) / np.sqrt(sq.size)) if sq.size > 1 else 0.0
    logger.debug("monte_carlo_risk samples=%d K_ref=%d mean=%.6g", sq.size, reference.shape[0], sq.mean())
    return RiskEstimate(float(sq.mean()), stderr, int(sq.size), int(reference.shape[0]))


def generalization_bound(value, N, K, B, R, delta=0.05):
    """value + (1/√N)(2K(B² + 2BR) + (B+R)²√(log(1/δ)/2))."""
    if not 0.0 < delta < 1.0:
        raise ValidationError("delta must lie in (0, 1)")
    if N < 1 or K < 1:
        raise ValidationError("N and K must be at least 1")
    if B < 0 or R < 0:
        raise ValidationError("radii must be nonnegative")
    slack = 2.0 * K * (B ** 2 + 2.0 * B * R) + (B + R) ** 2 * np.sqrt(np.log(1.0 / delta) / 2.0)
    return float(value + slack / np.sqrt(N))


def attach_bound(report, B, R, delta=0.05):
    report.bound = generalization_bound(report.value, report.N, report.K, B, R, delta)
    report.bound_inputs = {"B": B, "R": R, "K": report.K, "N": report.N, "delta": delta}
    return report
