import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np
from scipy.optimize import linprog, nnls
from scipy.stats import truncnorm

from imop.config import Config
from imop.dmp import LINEAR, POLYNOMIAL, ConcreteDmp, DmpInstance, apply_params
from imop.errors import NumericalError, ValidationError
from imop.qp import solve_qp

logger = logging.getLogger(__name__)

WEIGHT_LAWS = ("uniform-simplex", "truncated-normal", "uniform-box")
MAX_VERTEX_COMBINATIONS = 20_000
ARMIJO = 1e-4


@dataclass
class ResidualReport:
    stationarity: float
    complementarity: float
    primal: float
    clipped: bool = False

    def max(self):
        return max(self.stationarity, self.complementarity, self.primal)

    def to_dict(self):
        return {
            "stationarity": self.stationarity,
            "complementarity": self.complementarity,
            "primal": self.primal,
            "clipped": self.clipped,
        }


@dataclass
class ForwardSolution:
    x: np.ndarray
    u: np.ndarray
    nu: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    value: float
    residuals: ResidualReport
    status: str = "optimal"
    backend: str = ""
    iterations: int = 0
    active: tuple = ()

    def to_dict(self):
        return {
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "w": self.w.tolist(),
            "value": self.value,
            "status": self.status,
            "backend": self.backend,
            "residuals": self.residuals.to_dict(),
        }


@dataclass
class EfficientFront:
    weights: np.ndarray
    points: np.ndarray
    values: np.ndarray
    indices: np.ndarray
    boundary: np.ndarray
    tol: float
    solutions: list = field(default_factory=list, repr=False)

    def __len__(self):
        return self.points.shape[0]

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "points": self.points.tolist(),
            "values": self.values.tolist(),
            "indices": self.indices.tolist(),
            "boundary": self.boundary.tolist(),
            "tol": self.tol,
        }


# -------------------------
# Weight samplers
# -------------------------

def _simplex_lattice(p, H):
    if p == 1:
        return [(H,)]
    return [(i,) + rest for i in range(H + 1) for rest in _simplex_lattice(p - 1, H - i)]


def grid_weights(p, K, seed=0):
    """Evenly spread weights: equal spacing for p=2, simplex lattice for p=3."""
    if K < 1:
        raise ValidationError("weight count must be at least 1")
    if p < 2:
        raise ValidationError("weights need p >= 2")
    if K == 1:
        w = np.zeros((1, p))
        w[0, 0] = 1.0
        return w
    if p == 2:
        w1 = np.arange(K) / (K - 1)
        return np.column_stack([w1, 1.0 - w1])
    rng = np.random.default_rng(seed)
    if p == 3:
        H = 0
        while (H + 2) * (H + 3) // 2 <= K:
            H += 1
        lattice = np.array(_simplex_lattice(3, H), dtype=float) / H if H else np.array([[0.0, 0.0, 1.0]])
        extra = K - lattice.shape[0]
        if extra > 0:
            lattice = np.vstack([lattice, rng.dirichlet(np.ones(3), size=extra)])
        return lattice
    return rng.dirichlet(np.ones(p), size=K)


def random_weights(p, N, dist="uniform-simplex", seed=None, **params):
    """Draw N weight vectors from one of the data-generating laws."""
    rng = np.random.default_rng(seed)
    if dist == "uniform-simplex":
        return rng.dirichlet(np.ones(p), size=N)
    if dist not in WEIGHT_LAWS:
        raise ValidationError(f"unknown weight law {dist!r}")
    if p != 2:
        raise ValidationError(f"{dist} weights are defined for two objectives only")
    if dist == "truncated-normal":
        mean, sd = params.get("mean", 0.5), params.get("sd", 0.1)
        lo, hi = params.get("lo", 0.0), params.get("hi", 1.0)
        w1 = truncnorm.rvs((lo - mean) / sd, (hi - mean) / sd, loc=mean, scale=sd, size=N, random_state=rng)
    else:
        w1 = rng.uniform(params.get("lo", 0.3), params.get("hi", 0.7), size=N)
    return np.column_stack([w1, 1.0 - w1])


def _check_weight(w, p):
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape != (p,):
        raise ValidationError(f"weight has {w.shape[0]} components, expected {p}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError("weight must be nonnegative and sum to one", {"w": w.tolist()})
    return w


def concrete_of(dmp, theta=None):
    if isinstance(dmp, ConcreteDmp):
        return dmp
    if isinstance(dmp, DmpInstance):
        if theta is None:
            return dmp.base
        return apply_params(dmp, theta)
    raise ValidationError(f"expected a DMP, got {type(dmp).__name__}")


# -------------------------
# Certificates
# -------------------------

def multipliers_at(concrete, w, x, act_tol=1e-7):
    """Nonnegative inequality and free equality multipliers that best certify x (NNLS)."""
    Ghat, hhat, _ = concrete.inequalities()
    grad = concrete.weighted_gradient(w, x)
    slack = hhat - Ghat @ x
    act = np.flatnonzero(slack <= act_tol * (1.0 + np.abs(hhat)))
    E = concrete.E
    M = np.hstack([Ghat[act].T, E.T, -E.T])
    u = np.zeros(Ghat.shape[0])
    nu = np.zeros(E.shape[0])
    if M.shape[1]:
        sol, _ = nnls(M, -grad, maxiter=50 * M.shape[1])
        u[act] = sol[: act.size]
        nu = sol[act.size: act.size + E.shape[0]] - sol[act.size + E.shape[0]:]
    return u, nu


def kkt_residuals(dmp, theta, w, x, u=None, nu=None):
    """Stationarity, complementarity and primal-feasibility residuals at (x, u)."""
    concrete = concrete_of(dmp, theta)
    w = _check_weight(w, concrete.p)
    x = np.asarray(x, dtype=float)
    Ghat, hhat, _ = concrete.inequalities()
    u = np.zeros(Ghat.shape[0]) if u is None else np.broadcast_to(np.asarray(u, dtype=float), (Ghat.shape[0],))
    clipped = bool(np.any(u < 0))
    u = np.maximum(u, 0.0)
    r = concrete.weighted_gradient(w, x) + Ghat.T @ u
    if concrete.E.shape[0]:
        if nu is None:
            nu = np.linalg.lstsq(concrete.E.T, -r, rcond=None)[0]
        r = r + concrete.E.T @ np.asarray(nu, dtype=float)
    return ResidualReport(
        stationarity=float(np.linalg.norm(r)),
        complementarity=float(abs(u @ (Ghat @ x - hhat))),
        primal=float(concrete.primal_violation(x)),
        clipped=clipped,
    )


# -------------------------
# Linear backend
# -------------------------

def enumerate_vertices(concrete):
    """All vertices of a small polytope, or None when enumeration is too large."""
    if "vertices" in concrete._cache:
        return concrete._cache["vertices"]
    Ghat, hhat, _ = concrete.inequalities()
    E, e, n = concrete.E, concrete.e, concrete.n
    rank_e = np.linalg.matrix_rank(E) if E.shape[0] else 0
    need = n - rank_e
    m = Ghat.shape[0]
    vertices = None
    if 0 <= need <= m and comb(m, need) <= MAX_VERTEX_COMBINATIONS:
        found = []
        scale = 1.0 + np.abs(hhat)
        for combo in combinations(range(m), need):
            A = np.vstack([E, Ghat[list(combo)]])
            if np.linalg.matrix_rank(A) < n:
                continue
            x = np.linalg.lstsq(A, np.concatenate([e, hhat[list(combo)]]), rcond=None)[0]
            if np.all(Ghat @ x - hhat <= 1e-9 * scale) and (
                not E.shape[0] or np.max(np.abs(E @ x - e)) <= 1e-9 * (1 + np.abs(e).max())
            ):
                found.append(np.round(x, 12) + 0.0)
        if found:
            vertices = np.unique(np.array(found), axis=0)
    concrete._cache["vertices"] = vertices
    return vertices


def _lexmin(points):
    order = np.lexsort(points.T[::-1])
    return points[order[0]]


def _solve_linear(concrete, w, tol):
    d = sum(wl * f.c for wl, f in zip(w, concrete.objectives))
    V = enumerate_vertices(concrete)
    if V is not None:
        vals = V @ d
        best = vals.min()
        x = _lexmin(V[vals <= best + tol * (1.0 + abs(best))])
        return x, "lp-vertex", 0

    # dense dual simplex, then lexicographic refinement over the optimal face
    res = _simplex(concrete, d, None, None)
    if res.status != 0:
        raise NumericalError(f"linear program failed: {res.message}")
    z = res.fun
    A_extra, b_extra = [d], [z + tol * (1.0 + abs(z))]
    x = res.x
    for j in range(concrete.n):
        cost = np.zeros(concrete.n)
        cost[j] = 1.0
        sub = _simplex(concrete, cost, np.array(A_extra), np.array(b_extra))
        if sub.status != 0:
            break
        x = sub.x
        A_extra.append(cost)
        b_extra.append(sub.x[j] + tol * (1.0 + abs(sub.x[j])))
    return np.asarray(x, dtype=float), "lp-simplex", concrete.n + 1


def _simplex(concrete, cost, A_extra, b_extra):
    A_ub, b_ub = concrete.G, concrete.h
    if A_extra is not None:
        A_ub = np.vstack([A_ub, A_extra])
        b_ub = np.concatenate([b_ub, b_extra])
    return linprog(
        cost,
        A_ub=A_ub if A_ub.shape[0] else None,
        b_ub=b_ub if A_ub.shape[0] else None,
        A_eq=concrete.E if concrete.E.shape[0] else None,
        b_eq=concrete.e if concrete.E.shape[0] else None,
        bounds=concrete.linprog_bounds(),
        method="highs-ds",
    )


def optimal_values(concrete, weights):
    """min_x wᵀf(x) per weight row for linear problems (vertex oracle or simplex)."""
    weights = np.atleast_2d(weights)
    C = np.array([f.c for f in concrete.objectives])
    V = enumerate_vertices(concrete)
    if V is not None:
        return (V @ C.T @ weights.T).min(axis=0)
    return np.array([_simplex(concrete, w @ C, None, None).fun for w in weights])


def efficiency_gap(dmp, x, theta=None):
    """Benson test: max Σs s.t. C x' + s = C x, x' feasible, s ≥ 0. Zero iff x is efficient."""
    concrete = concrete_of(dmp, theta)
    if concrete.family != LINEAR:
        raise ValidationError("efficiency gap is defined for linear objectives")
    C = np.array([f.c for f in concrete.objectives])
    n, p = concrete.n, concrete.p
    cost = np.concatenate([np.zeros(n), -np.ones(p)])
    A_eq = np.hstack([C, np.eye(p)])
    b_eq = C @ np.asarray(x, dtype=float)
    if concrete.E.shape[0]:
        A_eq = np.vstack([A_eq, np.hstack([concrete.E, np.zeros((concrete.E.shape[0], p))])])
        b_eq = np.concatenate([b_eq, concrete.e])
    A_ub = np.hstack([concrete.G, np.zeros((concrete.G.shape[0], p))]) if concrete.G.shape[0] else None
    res = linprog(cost, A_ub=A_ub, b_ub=concrete.h if A_ub is not None else None, A_eq=A_eq, b_eq=b_eq,
                  bounds=concrete.linprog_bounds() + [(0, None)] * p, method="highs")
    if res.status != 0:
        raise NumericalError(f"efficiency test failed: {res.message}")
    return float(-res.fun)


def _face_extremes(concrete, d, tol):
    """Extreme points of argmin dᵀx found along ± coordinate directions over the optimal face."""
    res = _simplex(concrete, d, None, None)
    if res.status != 0:
        raise NumericalError(f"linear program failed: {res.message}")
    cap = np.array([res.fun + tol * (1.0 + abs(res.fun))])
    found = [res.x]
    for j in range(concrete.n):
        for sign in (1.0, -1.0):
            cost = np.zeros(concrete.n)
            cost[j] = sign
            sub = _simplex(concrete, cost, d[None, :], cap)
            if sub.status == 0:
                found.append(sub.x)
    return np.unique(np.round(np.array(found), 12), axis=0)


def optimal_faces(concrete, weights, tol=Config.SOLVER_TOL):
    """Optimal faces S(w_k, θ) of a linear problem as vertex arrays, one per distinct face."""
    if concrete.family != LINEAR:
        raise ValidationError("optimal faces are defined for linear objectives")
    C = np.array([f.c for f in concrete.objectives])
    V = enumerate_vertices(concrete)
    faces = {}
    for w in np.atleast_2d(weights):
        d = w @ C
        if V is not None:
            vals = V @ d
            face = V[vals <= vals.min() + tol * (1.0 + abs(vals.min()))]
        else:
            face = _face_extremes(concrete, d, tol)
        faces.setdefault(face.tobytes(), face)
    return list(faces.values())


def sample_optimal_faces(dmp, theta, weights, count, seed=0, tol=Config.SOLVER_TOL):
    """Points of ⋃_k S(w_k, θ) for linear objectives.

    Every face vertex is returned, then Dirichlet mixtures are spread round-robin
    over the faces of dimension ≥ 1 until `count` points are reached.
    """
    faces = optimal_faces(concrete_of(dmp, theta), weights, tol)
    vertices = np.unique(np.vstack(faces), axis=0)
    wide = [F for F in faces if F.shape[0] > 1]
    extra = count - vertices.shape[0]
    if extra <= 0 or not wide:
        return vertices
    rng = np.random.default_rng(seed)
    mixes = [rng.dirichlet(np.ones(wide[i % len(wide)].shape[0])) @ wide[i % len(wide)] for i in range(extra)]
    logger.debug("sample_optimal_faces faces=%d wide=%d vertices=%d", len(faces), len(wide), vertices.shape[0])
    return np.vstack([vertices, np.array(mixes)])


# -------------------------
# Smooth backends
# -------------------------

def _warm_point(concrete, warm):
    if warm is not None and warm.x.shape == (concrete.n,):
        scale = 1e-9 * (1.0 + np.abs(concrete.h).max(initial=0.0) + np.abs(concrete.e).max(initial=0.0))
        if concrete.primal_violation(warm.x) <= scale:
            return warm.x, warm.active
    return concrete.feasible_point(), ()


def _solve_quadratic(concrete, w, warm, tol):
    H, g = concrete.weighted_quadratic(w)
    Ghat, hhat, _ = concrete.inequalities()
    x0, working = _warm_point(concrete, warm)
    res = solve_qp(H, g, Ghat, hhat, concrete.E, concrete.e, x0=x0, working=working, tol=tol)
    return res.x, res.u, res.nu, res.active, res.iterations


def newton_step(concrete, w, x, active=()):
    """Scaled gradient map at x: d = P_H(x − H⁻¹∇) − x, with P_H the projection onto X in the Hessian metric.

    d = 0 exactly at a KKT point of the weighted problem, so ‖d‖ is the stationarity
    measure the polynomial backend stops on.
    """
    Ghat, hhat, _ = concrete.inequalities()
    grad = concrete.weighted_gradient(w, x)
    H = concrete.weighted_hessian(w, x)
    H = H + 1e-9 * max(1.0, np.abs(H).max()) * np.eye(concrete.n)
    sub = solve_qp(H, grad - H @ x, Ghat, hhat, concrete.E, concrete.e, x0=x, working=active, tol=1e-12)
    return sub, sub.x - x


def _solve_polynomial(concrete, w, warm, tol, max_iter=200):
    """Projected gradient in the Hessian metric; stops when ‖d‖ ≤ tol·(1 + ‖x‖)."""
    x, active = _warm_point(concrete, warm)
    for it in range(max_iter):
        sub, d = newton_step(concrete, w, x, active)
        active = sub.active
        if np.linalg.norm(d) <= tol * (1.0 + np.linalg.norm(x)):
            return sub.x, sub.u, sub.nu, sub.active, it
        f0 = concrete.weighted_value(w, x)
        slope = float(concrete.weighted_gradient(w, x) @ d)
        t = 1.0
        while concrete.weighted_value(w, x + t * d) > f0 + ARMIJO * t * slope and t > 1e-12:
            t *= 0.5
        x = x + t * d
    raise NumericalError("projected Newton iteration limit reached", details={"iterations": max_iter})


# -------------------------
# Weighting problem
# -------------------------

def solve_wp(dmp, theta=None, w=None, *, warm=None, tol=Config.SOLVER_TOL):
    """Solve min wᵀf(x, θ) over X(θ) and certify the result."""
    concrete = concrete_of(dmp, theta)
    w = _check_weight(w, concrete.p)
    theta_arr = np.zeros(0) if theta is None else np.asarray(theta, dtype=float)

    if concrete.family == LINEAR:
        x, backend, iterations = _solve_linear(concrete, w, tol)
        u, nu = multipliers_at(concrete, w, x)
        active = ()
    elif concrete.family == POLYNOMIAL:
        x, u, nu, active, iterations = _solve_polynomial(concrete, w, warm, tol)
        backend = "projected-newton"
    else:
        x, u, nu, active, iterations = _solve_quadratic(concrete, w, warm, 1e-10)
        backend = "active-set"

    residuals = kkt_residuals(concrete, None, w, x, u, nu)
    scale = 1.0 + np.linalg.norm(concrete.weighted_gradient(w, x)) + np.linalg.norm(x)
    status = "optimal" if residuals.max() <= 1e-6 * scale else "inaccurate"
    if status != "optimal":
        logger.warning("solve_wp status=%s backend=%s residual=%.3g", status, backend, residuals.max())
    logger.debug("solve_wp backend=%s iters=%d value=%.10g", backend, iterations, concrete.weighted_value(w, x))
    return ForwardSolution(
        x=x, u=u, nu=nu, w=w, theta=theta_arr, value=concrete.weighted_value(w, x),
        residuals=residuals, status=status, backend=backend, iterations=iterations, active=tuple(active),
    )


def solve_weights(dmp, theta, weights):
    """Solve WP for every weight row in order, warm-starting along the sweep."""
    concrete = concrete_of(dmp, theta)
    out, warm = [], None
    for k, w in enumerate(np.atleast_2d(weights)):
        try:
            warm = solve_wp(concrete, theta, w, warm=warm)
        except NumericalError as exc:
            raise NumericalError(f"weight {k}: {exc}", weight_index=k, details=exc.details) from exc
        out.append(warm)
    return out


def pareto_filter(values, tol=1e-9):
    """Indices of the rows of `values` not dominated by another row beyond tol."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    P, p = values.shape
    dominated = np.zeros(P, dtype=bool)
    chunk = max(1, 2_000_000 // max(1, P * p))
    for start in range(0, P, chunk):
        block = values[start:start + chunk][:, None, :]
        weakly = np.all(values[None, :, :] <= block + tol, axis=2)
        strictly = np.any(values[None, :, :] < block - tol, axis=2)
        dominated[start:start + chunk] = np.any(weakly & strictly, axis=1)
    return np.flatnonzero(~dominated)


def sample_efficient_front(dmp, theta=None, weights=None, tol=1e-9):
    """Weighted-sum sample of X_E(θ) with dominated points removed."""
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    if weights.shape[0] == 0:
        raise ValidationError("at least one weight is required")
    concrete = concrete_of(dmp, theta)
    solutions = solve_weights(concrete, theta, weights)
    points = np.array([s.x for s in solutions])
    values = np.array([concrete.values(x) for x in points])
    keep = pareto_filter(values, tol)
    return EfficientFront(
        weights=weights[keep],
        points=points[keep],
        values=values[keep],
        indices=keep,
        boundary=np.any(weights[keep] == 0.0, axis=1),
        tol=tol,
        solutions=[solutions[k] for k in keep],
    )


class FrontOracle:
    """Weighted-sum solutions S(w_k, θ) for a fixed instance and weight set, cached per θ."""

    def __init__(self, instance, weights, max_entries=50_000):
        self.instance = instance
        self.weights = np.atleast_2d(np.asarray(weights, dtype=float))
        self.max_entries = max_entries
        self.evaluations = 0
        self._cache = OrderedDict()
        self._lock = threading.Lock()

    @property
    def K(self):
        return self.weights.shape[0]

    def concrete(self, theta):
        if self.instance.n_free == 0:
            return self.instance.base
        return apply_params(self.instance, self.instance.space.project(theta))

    def solutions(self, theta):
        return solve_weights(self.concrete(theta), None, self.weights)

    def points(self, theta):
        key = np.asarray(theta, dtype=float).tobytes()
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        concrete = self.concrete(theta)
        if concrete.family == LINEAR:
            pts = np.array([_solve_linear(concrete, w, Config.SOLVER_TOL)[0] for w in self.weights])
        else:
            pts = np.array([s.x for s in solve_weights(concrete, None, self.weights)])
        with self._lock:
            self.evaluations += 1
            self._cache[key] = pts
            if len(self._cache) > self.max_entries:
                self._cache.popitem(last=False)
        return pts
