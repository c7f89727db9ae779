import json
import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog

from imop.config import Config
from imop.errors import ValidationError

logger = logging.getLogger(__name__)

LINEAR = "linear-objectives"
QUADRATIC = "quadratic-objectives"
POLYNOMIAL = "smooth-convex-polynomial"
FAMILIES = (LINEAR, QUADRATIC, POLYNOMIAL)

SLOT_KINDS = ("c", "q", "rhs", "eq")
CONSTRAINT_SLOTS = ("rhs", "eq")

PSD_FLOOR = -1e-10
STRONG_CONVEXITY_FLOOR = 1e-8
MAX_CORNERS = 64


def _array(values):
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


# -------------------------
# Parameter space
# -------------------------

@dataclass(frozen=True, eq=False)
class ParamSpace:
    """Box bounds on the free parameter coordinates plus affine normalizations."""

    lower: np.ndarray
    upper: np.ndarray
    norm_rows: np.ndarray = None
    norm_rhs: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        lower = _array(np.atleast_1d(self.lower))
        upper = _array(np.atleast_1d(self.upper))
        d = lower.shape[0]
        rows = np.zeros((0, d))
        if self.norm_rows is not None and np.size(self.norm_rows):
            rows = np.array(self.norm_rows, dtype=float).reshape(-1, d)
        rhs = np.zeros(0)
        if self.norm_rhs is not None and np.size(self.norm_rhs):
            rhs = np.atleast_1d(np.array(self.norm_rhs, dtype=float))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "norm_rows", _array(rows))
        object.__setattr__(self, "norm_rhs", _array(rhs))

        if upper.shape != lower.shape:
            raise ValidationError("lower and upper bounds differ in length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValidationError("parameter box must be bounded")
        if np.any(lower > upper):
            raise ValidationError("lower bound exceeds upper bound", {"lower": lower.tolist(), "upper": upper.tolist()})
        if rows.shape[0] != rhs.shape[0]:
            raise ValidationError("normalization rows and right-hand sides differ in count")
        if rows.shape[0] and np.any(np.abs(rows[:, self.fixed_mask]) > 0):
            raise ValidationError("normalization rows may only touch free coordinates")
        if rows.shape[0] and d:
            res = linprog(np.zeros(d), A_eq=rows, b_eq=rhs, bounds=list(zip(lower, upper)), method="highs")
            if res.status != 0:
                raise ValidationError("normalizations do not meet the parameter box")
            self._cache["feasible"] = np.clip(res.x, lower, upper)

    @classmethod
    def box(cls, lower, upper, norm_rows=None, norm_rhs=None):
        return cls(lower, upper, norm_rows, norm_rhs)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0))

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def fixed_mask(self):
        return self.lower == self.upper

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def has_normalization(self):
        return self.norm_rows.shape[0] > 0

    def contains(self, theta, tol=Config.PARAM_TOL):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            return False
        if np.any(theta < self.lower - tol) or np.any(theta > self.upper + tol):
            return False
        if self.has_normalization:
            return bool(np.all(np.abs(self.norm_rows @ theta - self.norm_rhs) <= tol * (1 + np.abs(self.norm_rhs))))
        return True

    def validate(self, theta, tol=Config.PARAM_TOL):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape != (self.dim,):
            raise ValidationError(
                f"parameter vector has length {theta.shape[0]}, expected {self.dim}"
            )
        if not self.contains(theta, tol):
            raise ValidationError("parameter vector violates its box or normalizations", {"theta": theta.tolist()})
        return theta

    def center(self):
        return self.project(0.5 * (self.lower + self.upper))

    def project(self, theta):
        """Euclidean projection onto box ∩ normalizations."""
        theta = np.asarray(theta, dtype=float).reshape(-1)
        clipped = np.clip(theta, self.lower, self.upper)
        if not self.has_normalization:
            return clipped
        if self.contains(clipped):
            return clipped
        from imop.qp import project_polyhedron

        free = ~self.fixed_mask
        out = self.lower.copy()
        zf = theta[free]
        rows = self.norm_rows[:, free]
        rhs = self.norm_rhs - self.norm_rows[:, ~free] @ self.lower[~free]
        k = int(free.sum())
        G = np.vstack([np.eye(k), -np.eye(k)])
        h = np.concatenate([self.upper[free], -self.lower[free]])
        start = self._cache["feasible"][free]
        out[free] = project_polyhedron(zf, G, h, rows, rhs, start).x
        return np.clip(out, self.lower, self.upper)

    def null_basis(self):
        """Orthonormal directions that keep the normalizations satisfied."""
        if "null" not in self._cache:
            free = np.flatnonzero(~self.fixed_mask)
            basis = np.zeros((self.dim, 0))
            if free.size:
                if self.has_normalization:
                    local = null_space(self.norm_rows[:, free])
                else:
                    local = np.eye(free.size)
                basis = np.zeros((self.dim, local.shape[1]))
                basis[free] = local
            self._cache["null"] = basis
        return self._cache["null"]

    def sample(self, rng, count):
        draws = rng.uniform(self.lower, self.upper, size=(count, self.dim))
        return np.array([self.project(t) for t in draws]).reshape(count, self.dim)

    def to_dict(self):
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "norm_rows": self.norm_rows.tolist(),
            "norm_rhs": self.norm_rhs.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["lower"], data["upper"], data.get("norm_rows"), data.get("norm_rhs"))


@dataclass(frozen=True)
class Slot:
    kind: str
    index: tuple
    scale: float = 1.0
    label: str = ""


# -------------------------
# Concrete problems
# -------------------------

@dataclass(frozen=True, eq=False)
class Objective:
    """f(x) = ½xᵀQx + cᵀx + Σ_t Σ_j a_tj x_j^p_t."""

    c: np.ndarray
    Q: np.ndarray = None
    powers: tuple = ()

    def value(self, x):
        out = float(self.c @ x)
        if self.Q is not None:
            out += 0.5 * float(x @ self.Q @ x)
        for coef, power in self.powers:
            out += float(coef @ np.power(x, power))
        return out

    def gradient(self, x):
        out = np.array(self.c, dtype=float)
        if self.Q is not None:
            out = out + self.Q @ x
        for coef, power in self.powers:
            out = out + power * coef * np.power(x, power - 1)
        return out

    def hessian(self, x):
        n = self.c.shape[0]
        out = np.zeros((n, n)) if self.Q is None else np.array(self.Q, dtype=float)
        for coef, power in self.powers:
            out[np.diag_indices(n)] += power * (power - 1) * coef * np.power(x, power - 2)
        return out


@dataclass(frozen=True, eq=False)
class ConcreteDmp:
    """Fully numeric DMP: min f_1..f_p over {G x ≤ h, E x = e, lb ≤ x ≤ ub}."""

    family: str
    objectives: tuple
    G: np.ndarray
    h: np.ndarray
    E: np.ndarray
    e: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.lb.shape[0]

    @property
    def p(self):
        return len(self.objectives)

    def values(self, x):
        return np.array([f.value(x) for f in self.objectives])

    def jacobian(self, x):
        return np.array([f.gradient(x) for f in self.objectives])

    def weighted_value(self, w, x):
        return float(np.dot(w, self.values(x)))

    def weighted_gradient(self, w, x):
        return np.asarray(w) @ self.jacobian(x)

    def weighted_hessian(self, w, x):
        return sum(wl * f.hessian(x) for wl, f in zip(w, self.objectives))

    def weighted_quadratic(self, w):
        """(H, g) of wᵀf for objectives without power terms."""
        H = np.zeros((self.n, self.n))
        g = np.zeros(self.n)
        for wl, f in zip(w, self.objectives):
            g += wl * f.c
            if f.Q is not None:
                H += wl * f.Q
        return H, g

    def inequalities(self):
        """Stacked rows Ĝ x ≤ ĥ: G rows, then finite lower bounds, then finite upper bounds."""
        if "ineq" not in self._cache:
            lo = np.flatnonzero(np.isfinite(self.lb))
            hi = np.flatnonzero(np.isfinite(self.ub))
            eye = np.eye(self.n)
            Ghat = np.vstack([self.G, -eye[lo], eye[hi]])
            labels = [("row", i) for i in range(self.G.shape[0])]
            labels += [("lb", int(j)) for j in lo] + [("ub", int(j)) for j in hi]
            self._cache["ineq"] = (Ghat, labels)
        Ghat, labels = self._cache["ineq"]
        lo = self.lb[np.isfinite(self.lb)]
        hi = self.ub[np.isfinite(self.ub)]
        return Ghat, np.concatenate([self.h, -lo, hi]), labels

    def g(self, x):
        Ghat, hhat, _ = self.inequalities()
        return Ghat @ x - hhat

    def primal_violation(self, x):
        viol = np.max(self.g(x), initial=0.0)
        if self.E.shape[0]:
            viol = max(viol, float(np.max(np.abs(self.E @ x - self.e))))
        return max(viol, 0.0)

    def linprog_bounds(self):
        return [(None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
                for lo, hi in zip(self.lb, self.ub)]

    def _linprog(self, cost):
        A_ub = self.G if self.G.shape[0] else None
        b_ub = self.h if self.G.shape[0] else None
        A_eq = self.E if self.E.shape[0] else None
        b_eq = self.e if self.E.shape[0] else None
        return linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                       bounds=self.linprog_bounds(), method="highs")

    def feasible_point(self):
        if "feasible" not in self._cache:
            res = self._linprog(np.zeros(self.n))
            if res.status != 0:
                raise ValidationError(f"feasible set of {self.name or 'instance'} is empty")
            self._cache["feasible"] = np.asarray(res.x, dtype=float)
        return self._cache["feasible"]

    def coordinate_bounds(self):
        """(min_j, max_j) of every coordinate over the feasible set, by LP."""
        if "bounds" not in self._cache:
            mins, maxs = np.zeros(self.n), np.zeros(self.n)
            for j in range(self.n):
                for sign, store in ((1.0, mins), (-1.0, maxs)):
                    cost = np.zeros(self.n)
                    cost[j] = sign
                    res = self._linprog(cost)
                    if res.status == 2:
                        raise ValidationError(f"feasible set of {self.name or 'instance'} is empty")
                    if res.status == 3:
                        raise ValidationError(
                            f"feasible set of {self.name or 'instance'} is unbounded in coordinate {j}"
                        )
                    store[j] = res.x[j]
            self._cache["bounds"] = (mins, maxs)
        return self._cache["bounds"]

    def radius(self):
        mins, maxs = self.coordinate_bounds()
        return float(np.sqrt(self.n) * max(np.max(np.abs(mins), initial=0.0), np.max(np.abs(maxs), initial=0.0)))


# -------------------------
# Traffic networks
# -------------------------

@dataclass(frozen=True, eq=False)
class TrafficNetwork:
    links: tuple
    free_flow: np.ndarray
    capacity: np.ndarray
    emission: np.ndarray
    od_pairs: tuple
    demand: np.ndarray
    routes: tuple
    incidence: np.ndarray

    @classmethod
    def from_links(cls, links, free_flow, capacity, emission, od_pairs, demand):
        links = tuple((int(a), int(b)) for a, b in links)
        od_pairs = tuple((int(o), int(d)) for o, d in od_pairs)
        if len(set(links)) != len(links):
            raise ValidationError("duplicate link in network")
        graph = nx.DiGraph()
        graph.add_edges_from(links)
        index = {link: a for a, link in enumerate(links)}

        routes = []
        for o, d in od_pairs:
            if o not in graph or d not in graph:
                raise ValidationError(f"O-D pair ({o},{d}) has no route")
            paths = [tuple(index[edge] for edge in path) for path in nx.all_simple_edge_paths(graph, o, d)]
            if not paths:
                raise ValidationError(f"O-D pair ({o},{d}) has no route")
            routes.append(tuple(sorted(paths, key=lambda r: (len(r), r))))

        n_routes = sum(len(r) for r in routes)
        incidence = np.zeros((len(links), n_routes))
        col = 0
        for od_routes in routes:
            for route in od_routes:
                incidence[list(route), col] = 1.0
                col += 1

        network = cls(
            links=links,
            free_flow=_array(free_flow),
            capacity=_array(capacity),
            emission=_array(emission),
            od_pairs=od_pairs,
            demand=_array(demand),
            routes=tuple(routes),
            incidence=_array(incidence),
        )
        network.validate()
        return network

    @property
    def n_links(self):
        return len(self.links)

    @property
    def n_routes(self):
        return self.incidence.shape[1]

    def route_od(self):
        return np.concatenate([np.full(len(r), w) for w, r in enumerate(self.routes)]).astype(int)

    def route_links(self, od, route):
        return [self.links[a] for a in self.routes[od][route]]

    def travel_time(self, v):
        """BPR link time t0(1 + 0.15 (v/C)^4)."""
        return self.free_flow * (1.0 + 0.15 * (np.asarray(v) / self.capacity) ** 4)

    def validate(self):
        A = self.n_links
        for name, arr in (("free_flow", self.free_flow), ("capacity", self.capacity), ("emission", self.emission)):
            if arr.shape != (A,):
                raise ValidationError(f"{name} must have one entry per link")
        if np.any(self.capacity <= 0):
            raise ValidationError("link capacities must be positive")
        if self.demand.shape != (len(self.od_pairs),):
            raise ValidationError("demand must have one entry per O-D pair")
        if np.any(self.demand <= 0):
            raise ValidationError("demands must be positive")
        for (o, d), od_routes in zip(self.od_pairs, self.routes):
            for route in od_routes:
                nodes = [self.links[route[0]][0]] + [self.links[a][1] for a in route]
                chained = all(self.links[a][1] == self.links[b][0] for a, b in zip(route, route[1:]))
                if nodes[0] != o or nodes[-1] != d or not chained or len(set(nodes)) != len(nodes):
                    raise ValidationError(f"route {route} is not a simple path from {o} to {d}")

    def to_dict(self):
        return {
            "links": [list(l) for l in self.links],
            "free_flow": self.free_flow.tolist(),
            "capacity": self.capacity.tolist(),
            "emission": self.emission.tolist(),
            "od_pairs": [list(w) for w in self.od_pairs],
            "demand": self.demand.tolist(),
        }


# -------------------------
# Parameterized instances
# -------------------------

@dataclass(frozen=True, eq=False)
class DmpInstance:
    base: ConcreteDmp
    slots: tuple
    space: ParamSpace
    radius: float
    strongly_convex: bool
    network: TrafficNetwork = None
    name: str = ""

    @property
    def family(self):
        return self.base.family

    @property
    def n(self):
        return self.base.n

    @property
    def p(self):
        return self.base.p

    @property
    def n_free(self):
        return len(self.slots)

    @property
    def varies_constraints(self):
        return any(s.kind in CONSTRAINT_SLOTS for s in self.slots)

    def slot_labels(self):
        return [s.label for s in self.slots]

    def nominal(self):
        return read_params(self, self.base)

    def apply(self, theta):
        return apply_params(self, theta)


def _slot_value(concrete, slot):
    if slot.kind == "c":
        l, j = slot.index
        return concrete.objectives[l].c[j]
    if slot.kind == "q":
        l, j = slot.index
        return concrete.objectives[l].Q[j, j]
    if slot.kind == "rhs":
        return concrete.h[slot.index[0]]
    return concrete.e[slot.index[0]]


def read_params(instance, concrete):
    """Read the free slot values back out of a concrete problem."""
    return np.array([_slot_value(concrete, s) / s.scale for s in instance.slots], dtype=float)


def apply_params(instance, theta):
    """Bind θ into the instance's free slots and return the concrete problem."""
    if instance.n_free == 0:
        if np.asarray(theta if theta is not None else []).size:
            raise ValidationError("instance has no free parameters")
        return instance.base
    theta = instance.space.validate(theta)
    return _bind(instance, theta)


def _bind(instance, theta):
    base = instance.base
    cs = [np.array(f.c, dtype=float) for f in base.objectives]
    Qs = [None if f.Q is None else np.array(f.Q, dtype=float) for f in base.objectives]
    h = np.array(base.h, dtype=float)
    e = np.array(base.e, dtype=float)
    for value, slot in zip(theta, instance.slots):
        value = slot.scale * value
        if slot.kind == "c":
            cs[slot.index[0]][slot.index[1]] = value
        elif slot.kind == "q":
            l, j = slot.index
            Qs[l][j, j] = value
        elif slot.kind == "rhs":
            h[slot.index[0]] = value
        else:
            e[slot.index[0]] = value
    objectives = tuple(
        Objective(_array(c), None if Q is None else _array(Q), f.powers)
        for c, Q, f in zip(cs, Qs, base.objectives)
    )
    # constraint-derived caches are shared while the feasible set is unchanged
    cache = base._cache if not instance.varies_constraints else {}
    return ConcreteDmp(
        family=base.family,
        objectives=objectives,
        G=base.G,
        h=_array(h),
        E=base.E,
        e=_array(e),
        lb=base.lb,
        ub=base.ub,
        name=base.name,
        _cache=cache,
    )


def _certify(base, slots, space):
    """Certify nonempty bounded feasible sets over Θ and return the radius B."""
    draft = DmpInstance(base=base, slots=slots, space=space, radius=0.0, strongly_convex=False)
    constraint_idx = [i for i, s in enumerate(slots) if s.kind in CONSTRAINT_SLOTS]
    thetas = []
    if not slots:
        concretes = [base]
    else:
        nominal = space.project(read_params(draft, base))
        if constraint_idx:
            lo, hi = space.lower[constraint_idx], space.upper[constraint_idx]
            corners = list(product(*zip(lo, hi)))
            if len(corners) > MAX_CORNERS:
                rng = np.random.default_rng(0)
                corners = [tuple(rng.uniform(lo, hi)) for _ in range(MAX_CORNERS)]
            for corner in corners:
                theta = nominal.copy()
                theta[constraint_idx] = corner
                thetas.append(space.project(theta))
        else:
            thetas.append(nominal)
        concretes = [_bind(draft, t) for t in thetas]
    radius = max(c.radius() for c in concretes)
    logger.debug("certified %s corners=%d radius=%.6g", base.name, len(concretes), radius)
    return radius


def _min_eig(Q):
    return float(np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T)))) if Q is not None and Q.size else 0.0


def _constraint_block(n, A, b, sense, lb, ub, A_eq, b_eq):
    A = np.zeros((0, n)) if A is None else np.array(A, dtype=float).reshape(-1, n)
    b = np.zeros(0) if b is None else np.atleast_1d(np.array(b, dtype=float))
    if A.shape[0] != b.shape[0]:
        raise ValidationError("constraint matrix and right-hand side are not conformable")
    senses = [sense] * A.shape[0] if isinstance(sense, str) else list(sense)
    if len(senses) != A.shape[0] or any(s not in ("<=", ">=") for s in senses):
        raise ValidationError("sense must be '<=' or '>=' per row")
    signs = np.array([1.0 if s == "<=" else -1.0 for s in senses])
    G, h = A * signs[:, None], b * signs

    E = np.zeros((0, n)) if A_eq is None else np.array(A_eq, dtype=float).reshape(-1, n)
    e = np.zeros(0) if b_eq is None else np.atleast_1d(np.array(b_eq, dtype=float))
    if E.shape[0] != e.shape[0]:
        raise ValidationError("equality matrix and right-hand side are not conformable")

    def _bound(value, default):
        if value is None:
            return np.full(n, default)
        arr = np.broadcast_to(np.array(value, dtype=float), (n,)).copy()
        return arr

    return G, h, signs, E, e, _bound(lb, -np.inf), _bound(ub, np.inf)


def _mask(mask, key, shape):
    if mask is None:
        return np.zeros(shape, dtype=bool)
    if isinstance(mask, dict):
        value = mask.get(key)
        if value is None:
            return np.zeros(shape, dtype=bool)
        return np.broadcast_to(np.array(value, dtype=bool), shape)
    if key == "c":
        return np.broadcast_to(np.array(mask, dtype=bool), shape)
    return np.zeros(shape, dtype=bool)


def _build(family, objectives, G, h, signs, E, e, lb, ub, mask, space, name, network=None):
    p, n = len(objectives), lb.shape[0]
    if p < 2:
        raise ValidationError("a DMP needs at least two objectives")

    c_mask = _mask(mask, "c", (p, n))
    q_mask = _mask(mask, "q", (p, n))
    rhs_mask = _mask(mask, "rhs", (G.shape[0],))
    eq_mask = _mask(mask, "eq", (E.shape[0],))

    slots = []
    for l in range(p):
        for j in range(n):
            if c_mask[l, j]:
                slots.append(Slot("c", (l, j), 1.0, f"c{l + 1}_{j + 1}"))
        for j in range(n):
            if q_mask[l, j]:
                if objectives[l].Q is None:
                    raise ValidationError(f"objective {l + 1} has no quadratic term to parameterize")
                slots.append(Slot("q", (l, j), 1.0, f"q{l + 1}_{j + 1}"))
    for i in np.flatnonzero(rhs_mask):
        slots.append(Slot("rhs", (int(i),), float(signs[i]), f"b{i + 1}"))
    for i in np.flatnonzero(eq_mask):
        slots.append(Slot("eq", (int(i),), 1.0, f"e{i + 1}"))
    slots = tuple(slots)

    if space is None:
        if slots:
            raise ValidationError("a parameter space is required when slots are free")
        space = ParamSpace.empty()
    if space.dim != len(slots):
        raise ValidationError(f"parameter space has {space.dim} coordinates, instance has {len(slots)} free slots")
    for k, slot in enumerate(slots):
        if slot.kind == "q" and space.lower[k] < 0:
            raise ValidationError("quadratic diagonal slots need a nonnegative lower bound")

    strongly = family == QUADRATIC
    for l, f in enumerate(objectives):
        if f.Q is not None:
            if f.Q.shape != (n, n) or not np.allclose(f.Q, f.Q.T, atol=1e-12):
                raise ValidationError(f"Q{l + 1} must be a symmetric {n}x{n} matrix")
            eig = _min_eig(f.Q)
            if eig < PSD_FLOOR:
                raise ValidationError(f"Q{l + 1} is not positive semidefinite (min eigenvalue {eig:.3g})")
            strongly = strongly and eig >= STRONG_CONVEXITY_FLOOR
        else:
            strongly = False

    base = ConcreteDmp(
        family=family,
        objectives=tuple(objectives),
        G=_array(G.reshape(-1, n)),
        h=_array(h),
        E=_array(E.reshape(-1, n)),
        e=_array(e),
        lb=_array(lb),
        ub=_array(ub),
        name=name,
    )
    radius = _certify(base, slots, space)
    return DmpInstance(
        base=base,
        slots=slots,
        space=space,
        radius=radius,
        strongly_convex=strongly,
        network=network,
        name=name,
    )


def build_mlp(c_list, A, b, mask=None, space=None, *, sense="<=", lb=0.0, ub=None,
              A_eq=None, b_eq=None, name="mlp"):
    """Multiobjective LP min (c_1ᵀx, …, c_pᵀx) s.t. A x (sense) b, bounds."""
    c_list = [np.array(c, dtype=float).reshape(-1) for c in c_list]
    n = c_list[0].shape[0] if c_list else 0
    if any(c.shape != (n,) for c in c_list):
        raise ValidationError("objective vectors differ in dimension")
    G, h, signs, E, e, lo, hi = _constraint_block(n, A, b, sense, lb, ub, A_eq, b_eq)
    objectives = [Objective(_array(c)) for c in c_list]
    return _build(LINEAR, objectives, G, h, signs, E, e, lo, hi, mask, space, name)


def build_mqp(Q_list, c_list, A, b, mask=None, space=None, *, sense=">=", lb=0.0, ub=None,
              A_eq=None, b_eq=None, name="mqp"):
    """Multiobjective QP with objectives ½xᵀQ_l x + c_lᵀx; Q_l may be None."""
    c_list = [np.array(c, dtype=float).reshape(-1) for c in c_list]
    n = c_list[0].shape[0] if c_list else 0
    if len(Q_list) != len(c_list) or any(c.shape != (n,) for c in c_list):
        raise ValidationError("objective data differ in count or dimension")
    G, h, signs, E, e, lo, hi = _constraint_block(n, A, b, sense, lb, ub, A_eq, b_eq)
    objectives = []
    for Q, c in zip(Q_list, c_list):
        Q = None if Q is None else np.array(Q, dtype=float)
        if Q is not None and Q.shape != (n, n):
            raise ValidationError(f"quadratic matrix must be {n}x{n}")
        objectives.append(Objective(_array(c), None if Q is None else _array(Q)))
    return _build(QUADRATIC, objectives, G, h, signs, E, e, lo, hi, mask, space, name)


def build_traffic(network, mask=None, space=None, *, name="traffic"):
    """Bi-criteria system-optimal assignment over x = (route flows f, link flows v).

    f_1 = Σ_a t_a(v_a) v_a with BPR times, f_2 = Σ_a h_a v_a².
    """
    R, A = network.n_routes, network.n_links
    n = R + A
    zeros_f = np.zeros(R)

    c1 = np.concatenate([zeros_f, network.free_flow])
    coef = np.concatenate([zeros_f, 0.15 * network.free_flow / network.capacity ** 4])
    Q2 = np.diag(np.concatenate([zeros_f, 2.0 * network.emission]))
    objectives = [
        Objective(_array(c1), None, ((_array(coef), 5.0),)),
        Objective(_array(np.zeros(n)), _array(Q2)),
    ]

    # link flow definition v = Δ f, then one demand row per O-D pair
    E_link = np.hstack([-network.incidence, np.eye(A)])
    E_od = np.zeros((len(network.od_pairs), n))
    for r, w in enumerate(network.route_od()):
        E_od[w, r] = 1.0
    E = np.vstack([E_link, E_od])
    e = np.concatenate([np.zeros(A), network.demand])

    demand_mask = None
    if mask is not None:
        demand_mask = mask.get("demand") if isinstance(mask, dict) else mask
    eq_mask = np.zeros(E.shape[0], dtype=bool)
    if demand_mask is not None:
        eq_mask[A:] = np.broadcast_to(np.array(demand_mask, dtype=bool), (len(network.od_pairs),))
    if space is None and eq_mask.any():
        d = network.demand[eq_mask[A:]]
        space = ParamSpace.box(0.25 * d, 4.0 * d)

    G = np.zeros((0, n))
    instance = _build(
        POLYNOMIAL, objectives, G, np.zeros(0), np.zeros(0), E, e,
        np.zeros(n), np.full(n, np.inf), {"eq": eq_mask}, space, name, network=network,
    )
    labels = [f"d{w + 1}" for w in np.flatnonzero(eq_mask[A:])]
    slots = tuple(Slot(s.kind, s.index, s.scale, lab) for s, lab in zip(instance.slots, labels))
    return DmpInstance(
        base=instance.base, slots=slots, space=instance.space, radius=instance.radius,
        strongly_convex=False, network=network, name=name,
    )


# -------------------------
# JSON documents
# -------------------------

def load_instance(source):
    """Build an instance from a JSON document (path, JSON text or dict).

    Returns (instance, theta_true) where theta_true may be None.
    """
    if isinstance(source, dict):
        data = source
    else:
        text = str(source)
        path = Path(text)
        if text.lstrip().startswith("{"):
            data = json.loads(text)
        elif path.exists():
            data = json.loads(path.read_text())
        else:
            raise ValidationError(f"instance document not found: {source}")

    family = data.get("family")
    if family not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}")
    space = ParamSpace.from_dict(data["space"]) if data.get("space") else None
    mask = data.get("mask")
    name = data.get("name", family)

    if family == POLYNOMIAL:
        net = data.get("network")
        if not net:
            raise ValidationError("polynomial family documents need a network")
        network = TrafficNetwork.from_links(
            net["links"], net["free_flow"], net["capacity"], net["emission"], net["od_pairs"], net["demand"],
        )
        instance = build_traffic(network, mask, space, name=name)
    else:
        objectives = data.get("objectives") or []
        if "p" in data and data["p"] != len(objectives):
            raise ValidationError(f"document declares p={data['p']} but lists {len(objectives)} objectives")
        cons = data.get("constraints", {})
        kwargs = dict(
            sense=cons.get("sense", "<=" if family == LINEAR else ">="),
            lb=cons.get("lb", 0.0),
            ub=cons.get("ub"),
            A_eq=cons.get("A_eq"),
            b_eq=cons.get("b_eq"),
            name=name,
        )
        c_list = [o["c"] for o in objectives]
        if family == LINEAR:
            instance = build_mlp(c_list, cons.get("A"), cons.get("b"), mask, space, **kwargs)
        else:
            Q_list = [o.get("Q") for o in objectives]
            instance = build_mqp(Q_list, c_list, cons.get("A"), cons.get("b"), mask, space, **kwargs)

    theta_true = data.get("theta_true")
    if theta_true is not None:
        theta_true = instance.space.validate(theta_true) if instance.n_free else np.zeros(0)
    return instance, theta_true
