import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import product

import numpy as np
from scipy.linalg import qr
from scipy.optimize import minimize, minimize_scalar, nnls
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans

from imop.config import Config
from imop.dmp import apply_params
from imop.errors import NumericalError, ValidationError
from imop.loss import Assignment, ObservationSet, assign, cluster_stats, empirical_risk
from imop.solver import FrontOracle

logger = logging.getLogger(__name__)

FIT_METHODS = ("pattern", "nelder-mead", "coordinate")
INIT_MODES = ("kmeans++", "kkt", "provided")


# -------------------------
# Configuration and results
# -------------------------

@dataclass
class FitConfig:
    method: str = "pattern"
    n_starts: int = 5
    max_iter: int = 200
    step: float = 0.1
    min_step: float = 1e-4
    tol: float = 1e-10
    seed: int = 0
    use_kkt: bool = True

    def __post_init__(self):
        if self.method not in FIT_METHODS:
            raise ValidationError(f"unknown search method {self.method!r}", {"allowed": list(FIT_METHODS)})
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValidationError("start and iteration counts must be at least 1")
        if not 0 < self.min_step <= self.step or self.tol <= 0:
            raise ValidationError("steps and tolerance must be positive with min_step <= step")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in (data or {}).items() if k in known})

    def to_dict(self):
        return asdict(self)


@dataclass
class FitResult:
    theta: np.ndarray
    value: float
    evaluations: int
    converged: bool
    start: int = 0


@dataclass
class AdmmState:
    theta: np.ndarray
    local: np.ndarray
    duals: np.ndarray
    rho: float
    groups: list
    iteration: int = 0
    history: list = field(default_factory=list)
    theta_history: list = field(default_factory=list)
    local_history: list = field(default_factory=list)

    @property
    def T(self):
        return len(self.groups)

    def residuals_at(self, k):
        """(‖r_pri‖, ‖r_dual‖) recomputed from the stored iterates of iteration k (1-based)."""
        theta_k, theta_prev = self.theta_history[k], self.theta_history[k - 1]
        r_pri = np.sqrt(np.sum((self.local_history[k - 1] - theta_k) ** 2))
        r_dual = np.sqrt(self.T * self.rho ** 2 * np.sum((theta_k - theta_prev) ** 2))
        return float(r_pri), float(r_dual)

    def to_dict(self):
        return {
            "theta": self.theta.tolist(),
            "rho": self.rho,
            "groups": [list(g) for g in self.groups],
            "iteration": self.iteration,
            "residuals": [{"iteration": k + 1, "primal": p, "dual": d} for k, (p, d) in enumerate(self.history)],
        }


@dataclass
class EstimateResult:
    theta: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    assignment: Assignment
    value: float
    method: str
    trace: list = field(default_factory=list)
    seed: int = 0
    runtime: float = 0.0
    converged: bool = True
    labels: list = None
    admm: AdmmState = None

    def to_dict(self):
        out = {
            "theta": self.theta.tolist(),
            "labels": self.labels,
            "value": self.value,
            "method": self.method,
            "seed": self.seed,
            "converged": self.converged,
            "assignment": self.assignment.index.tolist(),
            "weights": self.weights.tolist(),
            "points": self.points.tolist(),
            "trace": self.trace,
        }
        if self.admm is not None:
            out["admm"] = self.admm.to_dict()
        return out


# -------------------------
# Local search over Θ
# -------------------------

def _directions(space):
    basis = space.null_basis()
    scales = np.linalg.norm(basis * space.width[:, None], axis=0)
    keep = scales > 0
    return basis[:, keep], scales[keep]


def compass_search(F, theta, space, step=0.1, min_step=1e-4, max_iter=200, tol=1e-10):
    """Poll ±step along the feasible directions of Θ; halve the step when nothing improves."""
    basis, scales = _directions(space)
    best = F(theta)
    evals = 1
    if basis.shape[1] == 0:
        return theta, best, evals, True
    delta = step
    for _ in range(max_iter):
        if delta < min_step:
            return theta, best, evals, True
        move, move_value = None, best
        for j in range(basis.shape[1]):
            for sign in (1.0, -1.0):
                cand = space.project(theta + sign * delta * scales[j] * basis[:, j])
                if np.array_equal(cand, theta):
                    continue
                value = F(cand)
                evals += 1
                if value < move_value - tol:
                    move, move_value = cand, value
        if move is None:
            delta *= 0.5
        else:
            theta, best = move, move_value
    return theta, best, evals, False


def _nelder_mead(F, theta, space, config):
    basis, scales = _directions(space)
    f0 = F(theta)
    if basis.shape[1] == 0:
        return theta, f0, 1, True
    r = basis.shape[1]

    def lift(z):
        return space.project(theta + basis @ (z * scales))

    res = minimize(
        lambda z: F(lift(z)), np.zeros(r), method="Nelder-Mead",
        options={
            "initial_simplex": np.vstack([np.zeros(r), config.step * np.eye(r)]),
            "xatol": config.min_step,
            "fatol": config.tol,
            "maxiter": config.max_iter * r,
        },
    )
    cand = lift(res.x)
    value = F(cand)
    if value < f0 - config.tol:
        return cand, value, res.nfev + 2, bool(res.success)
    return theta, f0, res.nfev + 2, bool(res.success)


def _line_bounds(theta, direction, space):
    lo, hi = -np.inf, np.inf
    for t, d, l, u in zip(theta, direction, space.lower, space.upper):
        if abs(d) > 1e-15:
            a, b = (l - t) / d, (u - t) / d
            lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    return lo, hi


def _coordinate(F, theta, space, config):
    basis, scales = _directions(space)
    best = F(theta)
    evals = 1
    for _ in range(config.max_iter):
        improved = False
        for j in range(basis.shape[1]):
            direction = basis[:, j] * scales[j]
            lo, hi = _line_bounds(theta, direction, space)
            if not lo < hi:
                continue
            base = theta
            res = minimize_scalar(lambda t: F(space.project(base + t * direction)), bounds=(lo, hi),
                                  method="bounded", options={"xatol": config.min_step})
            evals += res.nfev
            cand = space.project(base + res.x * direction)
            value = F(cand)
            evals += 1
            if value < best - config.tol:
                theta, best, improved = cand, value, True
        if not improved:
            return theta, best, evals, True
    return theta, best, evals, False


class _FitObjective:
    """F(θ) = (1/normalizer) Σ_k counts_k min_k' ‖target_k − S(w_k', θ)‖² + proximal term."""

    def __init__(self, oracle, targets, counts, normalizer, admissible=None, proximal=None):
        self.oracle = oracle
        self.targets = np.atleast_2d(targets)
        self.counts = np.asarray(counts, dtype=float)
        self.normalizer = normalizer
        self.proximal = proximal
        self.mask = None
        if admissible is not None and any(a is not None for a in admissible):
            self.mask = np.ones((self.targets.shape[0], oracle.K), dtype=bool)
            for i, allowed in enumerate(admissible):
                if allowed is not None:
                    self.mask[i] = False
                    self.mask[i, list(allowed)] = True

    def __call__(self, theta):
        D = cdist(self.targets, self.oracle.points(theta), "sqeuclidean")
        if self.mask is not None:
            D = np.where(self.mask, D, np.inf)
        value = float(self.counts @ D.min(axis=1)) / self.normalizer
        if self.proximal is not None:
            rho, center = self.proximal
            value += 0.5 * rho * float(np.sum((np.asarray(theta) - center) ** 2))
        return value


def inner_fit(dmp, weights, targets, counts=None, space=None, theta_init=None, proximal=None, config=None, *,
              oracle=None, admissible=None, normalizer=None, extra_starts=()):
    """Derivative-free multi-start fit of θ to weighted targets."""
    config = config or FitConfig()
    space = space or dmp.space
    oracle = oracle or FrontOracle(dmp, weights)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    counts = np.ones(targets.shape[0]) if counts is None else np.asarray(counts, dtype=float)
    if counts.shape != (targets.shape[0],):
        raise ValidationError("one count per target is required")
    normalizer = normalizer or float(counts.sum())
    F = _FitObjective(oracle, targets, counts, normalizer, admissible, proximal)

    starts = [space.project(theta_init if theta_init is not None else space.center())]
    starts += [space.project(s) for s in extra_starts]
    if len(starts) < config.n_starts:
        rng = np.random.default_rng(config.seed)
        starts += list(space.sample(rng, config.n_starts - len(starts)))
    starts = starts[: max(config.n_starts, 1)]

    best = None
    for k, start in enumerate(starts):
        if config.method == "pattern":
            theta, value, evals, ok = compass_search(
                F, start, space, config.step, config.min_step, config.max_iter, config.tol
            )
        elif config.method == "nelder-mead":
            theta, value, evals, ok = _nelder_mead(F, start, space, config)
        else:
            theta, value, evals, ok = _coordinate(F, start, space, config)
        if best is None or value < best.value - config.tol:
            best = FitResult(theta, value, (best.evaluations if best else 0) + evals, ok, k)
        else:
            best.evaluations += evals
    if not best.converged:
        logger.warning("inner_fit flagged=iteration-cap method=%s value=%.6g", config.method, best.value)
    logger.debug("inner_fit method=%s starts=%d evals=%d value=%.8g", config.method, len(starts), best.evaluations, best.value)
    return best


# -------------------------
# KKT-residual initializer
# -------------------------

def _kkt_pick(concrete, y, weights):
    Ghat, hhat, _ = concrete.inequalities()
    E = concrete.E
    g = Ghat @ y - hhat
    J = concrete.jacobian(y)
    m, me = Ghat.shape[0], E.shape[0]
    M = np.vstack([
        np.hstack([Ghat.T, E.T, -E.T]),
        np.hstack([np.diag(g), np.zeros((m, 2 * me))]),
    ])
    best = None
    for k, w in enumerate(weights):
        grad = w @ J
        sol, _ = nnls(M, np.concatenate([-grad, np.zeros(m)]), maxiter=50 * M.shape[1])
        u, nu = sol[:m], sol[m:m + me] - sol[m + me:]
        r = np.linalg.norm(grad + Ghat.T @ u + E.T @ nu) + abs(u @ g)
        if best is None or r < best[0]:
            best = (r, k, u, nu)
    return best


def _kkt_residual(concrete, Y, weights, picks):
    Ghat, hhat, _ = concrete.inequalities()
    E = concrete.E
    total = 0.0
    for y, (_, k, u, nu) in zip(Y, picks):
        g = Ghat @ y - hhat
        grad = weights[k] @ concrete.jacobian(y)
        total += np.linalg.norm(grad + Ghat.T @ u + E.T @ nu) + abs(u @ g)
        total += np.linalg.norm(np.maximum(g, 0.0))
        if E.shape[0]:
            total += np.linalg.norm(E @ y - concrete.e)
    return float(total)


def kkt_objective(dmp, theta, observations, weights):
    """Σ_i min_k min_{u≥0} residual of the KKT system at y_i under θ."""
    Y = observations.Y if isinstance(observations, ObservationSet) else np.atleast_2d(observations)
    weights = np.atleast_2d(weights)
    concrete = apply_params(dmp, theta) if dmp.n_free else dmp.base
    picks = [_kkt_pick(concrete, y, weights) for y in Y]
    return _kkt_residual(concrete, Y, weights, picks)


def kkt_init(dmp, observations, weights, rounds=10, theta0=None, max_points=100, config=None):
    """Alternate multiplier picks per observation with a compass descent on θ."""
    config = config or FitConfig()
    Y = observations.Y if isinstance(observations, ObservationSet) else np.atleast_2d(observations)
    if Y.shape[0] > max_points:
        Y = Y[np.unique(np.linspace(0, Y.shape[0] - 1, max_points).round().astype(int))]
    weights = np.atleast_2d(weights)
    space = dmp.space
    theta = space.project(theta0 if theta0 is not None else space.center())
    if dmp.n_free == 0:
        return theta

    for r in range(rounds):
        concrete = apply_params(dmp, theta)
        picks = [_kkt_pick(concrete, y, weights) for y in Y]

        def R(t, picks=picks):
            return _kkt_residual(apply_params(dmp, t), Y, weights, picks)

        new, value, _, _ = compass_search(R, theta, space, config.step, 1e-3, 50, config.tol)
        logger.debug("kkt_init round=%d residual=%.6g", r, value)
        if np.array_equal(new, theta):
            break
        theta = new
    return theta


# -------------------------
# Clustering estimator
# -------------------------

def _update_targets(obs, assignment):
    s = obs.side.count if obs.side is not None else 0
    rest = Assignment(assignment.index[s:], assignment.distance[s:])
    stats = cluster_stats(obs.Y[s:], rest)
    targets = np.vstack([obs.Y[:s], stats.centroids])
    counts = np.concatenate([obs.sample_weights()[:s], stats.counts])
    admissible = [obs.side.admissible[i] for i in range(s)] + [None] * stats.clusters.shape[0]
    scatter = float(np.sum(stats.counts * stats.scatter))
    return targets, counts, admissible, scatter


def _kmeans_start(obs, K, seed, restarts):
    Y = obs.Y
    k = min(K, np.unique(Y, axis=0).shape[0])
    km = KMeans(n_clusters=k, init="k-means++", n_init=restarts, random_state=seed).fit(Y)
    counts = np.bincount(km.labels_, minlength=k).astype(float)
    keep = counts > 0
    return km.cluster_centers_[keep], counts[keep]


def _result(dmp, oracle, theta, obs, method, trace, seed, started, converged=True, admm=None):
    points = oracle.points(theta)
    report = empirical_risk(obs, points)
    return EstimateResult(
        theta=theta,
        points=points,
        weights=oracle.weights,
        assignment=report.assignment,
        value=report.value,
        method=method,
        trace=trace,
        seed=seed,
        runtime=time.perf_counter() - started,
        converged=converged,
        labels=dmp.slot_labels(),
        admm=admm,
    )


def estimate_clustering(dmp, observations, weights, config=None, init="kmeans++", theta0=None, *,
                        max_outer=Config.MAX_OUTER_ITER, restarts=Config.KMEANS_RESTARTS, seed=0, oracle=None):
    """K-means style alternation between assignments and the parametric update."""
    if init not in INIT_MODES:
        raise ValidationError(f"unknown initialization {init!r}", {"allowed": list(INIT_MODES)})
    if init == "provided" and theta0 is None:
        raise ValidationError("provided initialization needs theta0")
    config = config or FitConfig(seed=seed)
    started = time.perf_counter()
    obs = observations if isinstance(observations, ObservationSet) else ObservationSet(observations)
    oracle = oracle or FrontOracle(dmp, weights)
    N = obs.N

    kkt_start = []
    if config.use_kkt and dmp.n_free and init != "kkt":
        kkt_start = [kkt_init(dmp, obs, oracle.weights, config=config)]

    if init == "provided":
        theta = dmp.space.validate(dmp.space.project(theta0))
    elif init == "kkt":
        theta = kkt_init(dmp, obs, oracle.weights, theta0=theta0, config=config)
    else:
        centroids, counts = _kmeans_start(obs, oracle.K, seed, restarts)
        fit = inner_fit(dmp, oracle.weights, centroids, counts, config=config, oracle=oracle,
                        normalizer=N, extra_starts=kkt_start)
        theta = fit.theta

    trace = []
    seen = set()
    previous = None
    value = None
    converged = False
    for it in range(1, max_outer + 1):
        assignment = assign(obs, oracle.points(theta))
        value = float(obs.sample_weights() @ assignment.distance) / N
        changes = N if previous is None else assignment.changes(previous)
        trace.append({"iteration": it, "step": "assign", "objective": value, "changes": changes})
        key = assignment.key()
        if previous is not None and changes == 0:
            converged = True
            break
        if key in seen:
            logger.warning("estimate_clustering assignment cycle at iteration=%d", it)
            break
        seen.add(key)
        previous = assignment

        targets, counts, admissible, scatter = _update_targets(obs, assignment)
        fit = inner_fit(dmp, oracle.weights, targets, counts, theta_init=theta, config=config, oracle=oracle,
                        admissible=admissible, normalizer=N, extra_starts=kkt_start if it == 1 else ())
        theta = fit.theta
        value = fit.value + scatter / N
        trace.append({"iteration": it, "step": "update", "objective": value, "changes": 0})
        logger.info("estimate_clustering iteration=%d objective=%.8g changes=%d", it, value, changes)

    return _result(dmp, oracle, theta, obs, "clustering", trace, seed, started, converged)


# -------------------------
# Consensus ADMM
# -------------------------

def partition_groups(N, T):
    """Contiguous equal blocks; the remainder goes to the last block."""
    if T < 1 or T > N:
        raise ValidationError(f"group count must lie in [1, {N}]")
    size = N // T
    bounds = [(t * size, (t + 1) * size) for t in range(T)]
    bounds[-1] = (bounds[-1][0], N)
    return bounds


def estimate_admm(dmp, observations, weights, rho=0.5, groups=None, eps_pri=Config.ADMM_EPS,
                  eps_dual=Config.ADMM_EPS, theta0=None, max_iter=Config.ADMM_MAX_ITER, config=None,
                  threads=None, seed=0, oracle=None):
    """Scaled-form consensus ADMM over contiguous observation groups."""
    if rho <= 0:
        raise ValidationError("penalty rho must be positive")
    started = time.perf_counter()
    obs = observations if isinstance(observations, ObservationSet) else ObservationSet(observations)
    oracle = oracle or FrontOracle(dmp, weights)
    space = dmp.space
    if groups is None or isinstance(groups, int):
        groups = partition_groups(obs.N, groups or max(1, obs.N // 2))
    blocks = [obs.block(a, b) for a, b in groups]
    T = len(blocks)
    base = config or FitConfig(seed=seed)
    d = space.dim

    theta = space.project(np.zeros(d) if theta0 is None else theta0)
    local = np.tile(theta, (T, 1))
    duals = np.zeros((T, d))
    state = AdmmState(theta=theta, local=local, duals=duals, rho=rho, groups=list(groups))
    state.theta_history.append(theta.copy())
    moves = np.full(T, base.step)

    def local_update(t):
        block = blocks[t]
        s = block.side.count if block.side is not None else 0
        admissible = [block.side.admissible[i] for i in range(s)] + [None] * (block.N - s)
        cfg = FitConfig(method=base.method, n_starts=1, max_iter=base.max_iter,
                        step=max(moves[t], base.min_step * 10), min_step=base.min_step * 0.1,
                        tol=base.tol, seed=base.seed, use_kkt=False)
        return inner_fit(dmp, oracle.weights, block.Y, block.sample_weights(), theta_init=local[t],
                         proximal=(rho, theta - duals[t]), config=cfg, oracle=oracle,
                         admissible=admissible, normalizer=1.0).theta

    pool = ThreadPoolExecutor(max_workers=threads) if threads and threads > 1 else None
    converged = False
    try:
        for k in range(1, max_iter + 1):
            if pool is not None:
                updated = list(pool.map(local_update, range(T)))
            else:
                updated = [local_update(t) for t in range(T)]
            new_local = np.array(updated)
            widths = np.where(space.width > 0, space.width, 1.0)
            moves = np.clip(2.0 * np.max(np.abs(new_local - local) / widths, axis=1), 0.0, base.step)
            local = new_local

            total = np.zeros(d)
            for t in range(T):
                total = total + (local[t] + duals[t])
            new_theta = space.project(total / T)
            duals = duals + local - new_theta

            r_pri = float(np.sqrt(np.sum((local - new_theta) ** 2)))
            r_dual = float(np.sqrt(T * rho ** 2 * np.sum((new_theta - theta) ** 2)))
            theta = new_theta
            state.history.append((r_pri, r_dual))
            state.theta_history.append(theta.copy())
            state.local_history.append(local.copy())
            state.iteration = k
            logger.debug("estimate_admm iteration=%d r_pri=%.3g r_dual=%.3g", k, r_pri, r_dual)

            if k > 20:
                earlier = state.history[k - 21][0]
                if r_pri > 10.0 * max(earlier, eps_pri):
                    raise NumericalError(
                        "ADMM primal residual grew tenfold over 20 iterations",
                        details={"iteration": k, "r_pri": r_pri, "r_pri_earlier": earlier},
                    )
            if r_pri < eps_pri and r_dual < eps_dual:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    state.theta, state.local, state.duals = theta, local, duals
    trace = [{"iteration": i + 1, "primal": p, "dual": q} for i, (p, q) in enumerate(state.history)]
    return _result(dmp, oracle, theta, obs, "admm", trace, seed, started, converged, admm=state)


# -------------------------
# Grid oracle
# -------------------------

def _grid_axes(space, resolution):
    free = np.flatnonzero(~space.fixed_mask)
    if space.has_normalization and free.size:
        rows = space.norm_rows[:, free]
        _, _, piv = qr(rows, pivoting=True)
        rank = np.linalg.matrix_rank(rows)
        dependent, independent = free[piv[:rank]], free[piv[rank:]]
    else:
        dependent, independent = free[:0], free
    axes = [np.linspace(space.lower[j], space.upper[j], int(round(space.width[j] / resolution)) + 1)
            for j in independent]
    return independent, dependent, axes


def brute_force_oracle(dmp, observations, weights, resolution=0.01, max_candidates=1_000_000, oracle=None):
    """Exhaustive grid search of the empirical risk over Θ."""
    space = dmp.space
    independent, dependent, axes = _grid_axes(space, resolution)
    if independent.size + dependent.size > 3:
        raise ValidationError("grid oracle supports at most 3 free coordinates")
    count = int(np.prod([a.size for a in axes])) if axes else 1
    if count > max_candidates:
        raise ValidationError(f"grid has {count} candidates, budget is {max_candidates}")
    oracle = oracle or FrontOracle(dmp, weights)
    obs = observations if isinstance(observations, ObservationSet) else ObservationSet(observations)

    base = space.project(space.center())
    best_theta, best_value, evaluated = None, np.inf, 0
    for values in product(*axes):
        theta = base.copy()
        theta[independent] = values
        if dependent.size:
            rhs = space.norm_rhs - space.norm_rows[:, independent] @ np.asarray(values) \
                - space.norm_rows[:, space.fixed_mask] @ space.lower[space.fixed_mask]
            theta[dependent] = np.linalg.lstsq(space.norm_rows[:, dependent], rhs, rcond=None)[0]
        if not space.contains(theta):
            continue
        value = empirical_risk(obs, oracle.points(theta)).value
        evaluated += 1
        if value < best_value:
            best_theta, best_value = theta, value
    if best_theta is None:
        raise ValidationError("no grid point satisfies the parameter normalizations")
    logger.info("brute_force_oracle candidates=%d evaluated=%d value=%.8g", count, evaluated, best_value)
    return best_theta, float(best_value)
