"""Single-level KKT big-M models, LP-format export and certificate checks.

Models are built for export to external MIP solvers and for checking
candidate solutions; nothing here solves a MIP. Conventions:

* inequalities are stacked as Ĝ x ≤ ĥ(θ) (constraint rows, then finite
  lower bounds, then finite upper bounds) with multipliers u ≥ 0;
* stationarity reads ∇(wᵀf) + Ĝᵀu + Eᵀν = 0;
* the right-hand-side template writes stationarity at x_k for every weight
  k (the x_i in the printed template is read as x_k).
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from imop.dmp import LINEAR, POLYNOMIAL, QUADRATIC, apply_params
from imop.errors import ValidationError
from imop.loss import ObservationSet, assign
from imop.solver import concrete_of, multipliers_at, solve_weights

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"
MAX_LINE = 240
FEASIBILITY_TOL = 1e-6


@dataclass
class Variable:
    name: str
    kind: str = CONTINUOUS
    lower: float = 0.0
    upper: float = np.inf


@dataclass
class Row:
    name: str
    coefs: dict
    sense: str
    rhs: float
    bigm: str = None


@dataclass
class MipModel:
    name: str
    sense: str = "minimize"
    variables: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    objective: dict = field(default_factory=dict)
    quadratic: dict = field(default_factory=dict)
    bigm: dict = field(default_factory=dict)

    def add_variable(self, name, kind=CONTINUOUS, lower=0.0, upper=np.inf):
        if name in self.variables:
            raise ValidationError(f"duplicate variable {name}")
        if kind == BINARY:
            lower, upper = 0.0, 1.0
        self.variables[name] = Variable(name, kind, float(lower), float(upper))
        return name

    def add_row(self, name, coefs, sense, rhs, bigm=None):
        if sense not in ("<=", ">=", "="):
            raise ValidationError(f"row {name} has unknown sense {sense!r}")
        terms = {}
        for var, coef in coefs:
            if var not in self.variables:
                raise ValidationError(f"row {name} references unknown variable {var}")
            if coef != 0.0:
                terms[var] = terms.get(var, 0.0) + float(coef)
        self.rows.append(Row(name, terms, sense, float(rhs), bigm))
        return name

    def add_objective(self, var, coef):
        if coef != 0.0:
            self.objective[var] = self.objective.get(var, 0.0) + float(coef)

    def add_quadratic(self, a, b, coef):
        if coef != 0.0:
            self.quadratic[(a, b)] = self.quadratic.get((a, b), 0.0) + float(coef)

    def binaries(self):
        return [v.name for v in self.variables.values() if v.kind == BINARY]

    def counts(self):
        out = {}
        for name, var in self.variables.items():
            prefix = name.split("_")[0]
            out[prefix] = out.get(prefix, 0) + 1
        out["rows"] = len(self.rows)
        out["binary"] = len(self.binaries())
        return out

    def validate(self):
        names = [r.name for r in self.rows]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate row names")
        tagged = set()
        for row in self.rows:
            if row.bigm is not None:
                tagged.update(v for v in row.coefs if self.variables[v].kind == BINARY)
        loose = [b for b in self.binaries() if b not in tagged]
        if loose:
            raise ValidationError("binaries without a big-M row", {"binaries": loose})
        for row in self.rows:
            if row.name.startswith("as_"):
                if row.sense != "=" or row.rhs != 1.0 or any(c != 1.0 for c in row.coefs.values()):
                    raise ValidationError(f"assignment row {row.name} must sum binaries to one")
        return self

    def objective_value(self, point):
        value = sum(c * point[v] for v, c in self.objective.items())
        value += sum(c * point[a] * point[b] for (a, b), c in self.quadratic.items())
        return float(value)


@dataclass
class BigMConfig:
    m1: float = None
    m2: float = None
    m_ik: float = None
    primal_bound: float = None

    @classmethod
    def from_dict(cls, data):
        data = data or {}
        return cls(data.get("m1"), data.get("m2"), data.get("m_ik"), data.get("primal_bound"))


@dataclass
class FeasibilityReport:
    violations: dict
    max_violation: float
    passed: bool
    bigm_rows: list
    tol: float

    def worst(self, count=5):
        return sorted(self.violations.items(), key=lambda kv: -kv[1])[:count]

    def to_dict(self):
        return {
            "max_violation": self.max_violation,
            "passed": self.passed,
            "tol": self.tol,
            "violated_bigm_rows": self.bigm_rows,
            "worst": self.worst(),
        }


# -------------------------
# Shared pieces
# -------------------------

def _stacked(concrete):
    """Inequality rows with labels '1'.., 'lb{j}', 'ub{j}'."""
    Ghat, hhat, labels = concrete.inequalities()
    names = []
    for kind, idx in labels:
        names.append(str(idx + 1) if kind == "row" else f"{kind}{idx + 1}")
    return Ghat, hhat, labels, names


def _rhs_slots(dmp):
    """Map constraint-row index -> (theta variable, scale) for rhs slots."""
    return {s.index[0]: (f"theta_{j + 1}", s.scale) for j, s in enumerate(dmp.slots) if s.kind == "rhs"}


def _eq_slots(dmp):
    return {s.index[0]: (f"theta_{j + 1}", s.scale) for j, s in enumerate(dmp.slots) if s.kind == "eq"}


def _add_theta(model, dmp):
    space = dmp.space
    for j in range(dmp.n_free):
        model.add_variable(f"theta_{j + 1}", CONTINUOUS, space.lower[j], space.upper[j])
    for q, (row, rhs) in enumerate(zip(space.norm_rows, space.norm_rhs)):
        model.add_row(f"nm_{q + 1}", [(f"theta_{j + 1}", a) for j, a in enumerate(row)], "=", rhs)


def _observations(observations):
    if observations is None:
        return np.zeros((0, 0))
    if isinstance(observations, ObservationSet):
        return observations.Y
    return np.asarray(observations, dtype=float)


def _side(observations):
    return observations.side if isinstance(observations, ObservationSet) else None


def _reference_solutions(dmp, weights):
    thetas = [None]
    if dmp.n_free:
        thetas = [dmp.space.project(dmp.nominal()), dmp.space.center()]
    out = []
    for theta in thetas:
        out.extend(solve_weights(dmp, theta, weights))
    return out


def _resolve_bigm(dmp, weights, config):
    """Fill missing big-M values from the certified radius and reference certificates."""
    config = config or BigMConfig()
    B = dmp.radius
    registry = {}
    primal = config.primal_bound if config.primal_bound is not None else B
    registry["primal_bound"] = (primal, "explicit" if config.primal_bound is not None else "radius B")

    if config.m1 is None or config.m2 is None:
        Ghat, hhat, _ = dmp.base.inequalities()
        h_max = np.abs(hhat)
        if dmp.n_free:
            for s, (lo, hi) in zip(dmp.slots, zip(dmp.space.lower, dmp.space.upper)):
                if s.kind == "rhs":
                    h_max[s.index[0]] = max(abs(lo), abs(hi))
        slack_bound = float(np.max(h_max + np.abs(Ghat).sum(axis=1) * B, initial=B))
        dual = 0.0
        for sol in _reference_solutions(dmp, weights):
            # lower-bound multipliers are the reduced costs of the linear family
            dual = max(dual, float(np.max(np.abs(sol.u), initial=0.0)))
        derived = 2.0 * max(slack_bound, dual, B)
    m1 = config.m1 if config.m1 is not None else derived
    m2 = config.m2 if config.m2 is not None else derived
    m_ik = config.m_ik if config.m_ik is not None else 2.0 * B
    provenance = "2*max(slack bound, reference multipliers, B)"
    registry["M1"] = (m1, "explicit" if config.m1 is not None else provenance)
    registry["M2"] = (m2, "explicit" if config.m2 is not None else provenance)
    registry["M_ik"] = (m_ik, "explicit" if config.m_ik is not None else "2*B")
    return m1, m2, m_ik, primal, registry


def _x_bounds(concrete, primal):
    lo = np.where(np.isfinite(concrete.lb), concrete.lb, -primal)
    hi = np.where(np.isfinite(concrete.ub), concrete.ub, primal)
    return lo, hi


def _assignment_block(model, Y, K, n, m_ik, side=None):
    N = Y.shape[0]
    weight = ObservationSet(Y, side).sample_weights() if N else np.ones(0)
    for i in range(1, N + 1):
        for k in range(1, K + 1):
            z = model.add_variable(f"z_{i}_{k}", BINARY)
            if side is not None and i <= side.count and k - 1 not in side.admissible[i - 1]:
                model.variables[z].upper = 0.0
            for j in range(1, n + 1):
                eta = model.add_variable(f"eta_{i}_{k}_{j}", CONTINUOUS, -np.inf, np.inf)
                x = f"x_{k}_{j}"
                model.add_row(f"eu_{i}_{k}_{j}", [(eta, 1.0), (z, -m_ik)], "<=", 0.0, "M_ik")
                model.add_row(f"el_{i}_{k}_{j}", [(eta, 1.0), (z, m_ik)], ">=", 0.0, "M_ik")
                model.add_row(f"ex_{i}_{k}_{j}", [(eta, 1.0), (x, -1.0), (z, m_ik)], "<=", m_ik, "M_ik")
                model.add_row(f"ey_{i}_{k}_{j}", [(eta, 1.0), (x, -1.0), (z, -m_ik)], ">=", -m_ik, "M_ik")
        model.add_row(f"as_{i}", [(f"z_{i}_{k}", 1.0) for k in range(1, K + 1)], "=", 1.0)

    # (1/N) Σ_i λ_i ‖y_i − Σ_k η_ik‖²
    if N:
        constant = float(np.sum(weight[:, None] * Y ** 2)) / N
        if constant:
            model.add_variable("obj_constant", CONTINUOUS, 1.0, 1.0)
            model.add_objective("obj_constant", constant)
        for i in range(1, N + 1):
            for k in range(1, K + 1):
                for j in range(1, n + 1):
                    model.add_objective(f"eta_{i}_{k}_{j}", -2.0 * weight[i - 1] * Y[i - 1, j - 1] / N)
        for i in range(1, N + 1):
            for j in range(1, n + 1):
                for k in range(1, K + 1):
                    for k2 in range(k, K + 1):
                        coef = (1.0 if k == k2 else 2.0) * weight[i - 1] / N
                        model.add_quadratic(f"eta_{i}_{k}_{j}", f"eta_{i}_{k2}_{j}", coef)


def _check_inputs(dmp, observations, weights):
    Y = _observations(observations)
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    if weights.shape[1] != dmp.p:
        raise ValidationError("weights do not match the objective count")
    if Y.size == 0:
        return np.zeros((0, dmp.n)), weights
    if Y.ndim != 2 or Y.shape[1] != dmp.n:
        raise ValidationError("observations do not match the decision dimension")
    return Y, weights


# -------------------------
# Builders
# -------------------------

def build_single_level_mlp(dmp, observations, weights, bigm=None, name=None):
    """Objective-learning model for multiobjective LPs with x ≥ 0."""
    if dmp.family != LINEAR:
        raise ValidationError("single-level LP model needs the linear family")
    if any(s.kind != "c" for s in dmp.slots):
        raise ValidationError("single-level LP model learns objective coefficients only")
    if not dmp.space.has_normalization:
        raise ValidationError("objective learning needs normalization rows to exclude the zero objective")
    base = dmp.base
    if np.any(base.lb != 0.0):
        raise ValidationError("single-level LP model assumes x >= 0")
    Y, weights = _check_inputs(dmp, observations, weights)
    N, K, n = Y.shape[0], weights.shape[0], dmp.n
    m1, m2, m_ik, primal, registry = _resolve_bigm(dmp, weights, bigm)

    model = MipModel(name or f"{dmp.name}_{N}_{K}", bigm=registry)
    _add_theta(model, dmp)
    slot_of = {s.index: f"theta_{j + 1}" for j, s in enumerate(dmp.slots)}

    Ghat, hhat, labels, names = _stacked(base)
    rows = [r for r, (kind, _) in enumerate(labels) if kind != "lb"]
    lo, hi = _x_bounds(base, primal)
    for k in range(1, K + 1):
        w = weights[k - 1]
        xs = [model.add_variable(f"x_{k}_{j}", CONTINUOUS, lo[j - 1], hi[j - 1]) for j in range(1, n + 1)]
        us = [model.add_variable(f"u_{k}_{names[r]}") for r in rows]
        nus = [model.add_variable(f"nu_{k}_{e + 1}", CONTINUOUS, -np.inf, np.inf) for e in range(base.E.shape[0])]
        t1 = [model.add_variable(f"t1_{k}_{j}", BINARY) for j in range(1, n + 1)]
        t2 = [model.add_variable(f"t2_{k}_{names[r]}", BINARY) for r in rows]

        for r, u in zip(rows, us):
            model.add_row(f"pf_{k}_{names[r]}", [(x, Ghat[r, j]) for j, x in enumerate(xs)], "<=", hhat[r])
        for e in range(base.E.shape[0]):
            model.add_row(f"pe_{k}_{e + 1}", [(x, base.E[e, j]) for j, x in enumerate(xs)], "=", base.e[e])

        # reduced cost v_j = Σ_l w_l c_lj + (Ĝᵀu)_j + (Eᵀν)_j ≥ 0, complementary to x_j
        for j in range(n):
            terms, const = [], 0.0
            for l in range(dmp.p):
                if (l, j) in slot_of:
                    terms.append((slot_of[(l, j)], w[l]))
                else:
                    const += w[l] * base.objectives[l].c[j]
            terms += [(u, Ghat[r, j]) for r, u in zip(rows, us)]
            terms += [(nu, base.E[e, j]) for e, nu in enumerate(nus)]
            model.add_row(f"df_{k}_{j + 1}", terms, ">=", -const)
            model.add_row(f"cx_{k}_{j + 1}", [(xs[j], 1.0), (t1[j], -m1)], "<=", 0.0, "M1")
            model.add_row(f"cd_{k}_{j + 1}", terms + [(t1[j], m1)], "<=", m1 - const, "M1")
        for r, u, t in zip(rows, us, t2):
            model.add_row(f"cu_{k}_{names[r]}", [(u, 1.0), (t, -m2)], "<=", 0.0, "M2")
            model.add_row(f"cs_{k}_{names[r]}", [(x, -Ghat[r, j]) for j, x in enumerate(xs)] + [(t, m2)],
                          "<=", m2 - hhat[r], "M2")

    _assignment_block(model, Y, K, n, m_ik, _side(observations))
    logger.info("build_single_level_mlp name=%s counts=%s", model.name, model.counts())
    return model.validate()


def build_single_level_mqp_rhs(dmp, observations, weights, bigm=None, name=None):
    """Right-hand-side learning model for multiobjective QPs."""
    if dmp.family != QUADRATIC:
        raise ValidationError("single-level QP model needs the quadratic family")
    if any(s.kind != "rhs" for s in dmp.slots):
        raise ValidationError("single-level QP model learns right-hand sides only")
    base = dmp.base
    Y, weights = _check_inputs(dmp, observations, weights)
    N, K, n = Y.shape[0], weights.shape[0], dmp.n
    m1, m2, m_ik, primal, registry = _resolve_bigm(dmp, weights, bigm)

    model = MipModel(name or f"{dmp.name}_{N}_{K}", bigm=registry)
    _add_theta(model, dmp)
    rhs_theta = _rhs_slots(dmp)

    Ghat, hhat, labels, names = _stacked(base)
    m_rows = base.G.shape[0]
    lo, hi = _x_bounds(base, primal)
    for k in range(1, K + 1):
        w = weights[k - 1]
        H, g = base.weighted_quadratic(w)
        xs = [model.add_variable(f"x_{k}_{j}", CONTINUOUS, lo[j - 1], hi[j - 1]) for j in range(1, n + 1)]
        us = [model.add_variable(f"u_{k}_{nm}") for nm in names]
        nus = [model.add_variable(f"nu_{k}_{e + 1}", CONTINUOUS, -np.inf, np.inf) for e in range(base.E.shape[0])]
        ts = []
        for r, (kind, idx) in enumerate(labels):
            if kind == "row":
                ts.append(model.add_variable(f"t2_{k}_{idx + 1}", BINARY))
            else:
                ts.append(model.add_variable(f"t1{'u' if kind == 'ub' else ''}_{k}_{idx + 1}", BINARY))

        for r in range(m_rows):
            terms = [(x, Ghat[r, j]) for j, x in enumerate(xs)]
            if r in rhs_theta:
                var, scale = rhs_theta[r]
                model.add_row(f"pf_{k}_{names[r]}", terms + [(var, -scale)], "<=", 0.0)
            else:
                model.add_row(f"pf_{k}_{names[r]}", terms, "<=", hhat[r])
        for e in range(base.E.shape[0]):
            model.add_row(f"pe_{k}_{e + 1}", [(x, base.E[e, j]) for j, x in enumerate(xs)], "=", base.e[e])
        for j in range(n):
            terms = [(x, H[j, jj]) for jj, x in enumerate(xs)]
            terms += [(u, Ghat[r, j]) for r, u in enumerate(us)]
            terms += [(nu, base.E[e, j]) for e, nu in enumerate(nus)]
            model.add_row(f"st_{k}_{j + 1}", terms, "=", -g[j])
        for r, (u, t) in enumerate(zip(us, ts)):
            tag = "M2" if labels[r][0] == "row" else "M1"
            M = m2 if tag == "M2" else m1
            model.add_row(f"cu_{k}_{names[r]}", [(u, 1.0), (t, -M)], "<=", 0.0, tag)
            terms = [(x, -Ghat[r, j]) for j, x in enumerate(xs)]
            if r in rhs_theta:
                var, scale = rhs_theta[r]
                model.add_row(f"cs_{k}_{names[r]}", terms + [(var, scale), (t, M)], "<=", M, tag)
            else:
                model.add_row(f"cs_{k}_{names[r]}", terms + [(t, M)], "<=", M - hhat[r], tag)

    _assignment_block(model, Y, K, n, m_ik, _side(observations))
    logger.info("build_single_level_mqp_rhs name=%s counts=%s", model.name, model.counts())
    return model.validate()


def build_test_problem(dmp, theta_hat, efficient_points, weights, bigm=None, name=None):
    """max ‖θ − θ̂‖₁ subject to KKT membership of every efficient point.

    The stationarity norm is linearized componentwise (∞-norm).
    """
    if dmp.family not in (LINEAR, QUADRATIC, POLYNOMIAL):
        raise ValidationError(f"unsupported family {dmp.family}")
    if any(s.kind == "q" for s in dmp.slots) and dmp.family == POLYNOMIAL:
        raise ValidationError("quadratic slots are not available for the polynomial family")
    X = np.atleast_2d(np.asarray(efficient_points, dtype=float))
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    theta_hat = np.asarray(theta_hat, dtype=float)
    Np, K, n = X.shape[0], weights.shape[0], dmp.n
    m1, m2, m_ik, primal, registry = _resolve_bigm(dmp, weights, bigm)

    model = MipModel(name or f"{dmp.name}_test_{Np}_{K}", sense="maximize", bigm=registry)
    _add_theta(model, dmp)
    space = dmp.space
    for j in range(dmp.n_free):
        width = space.width[j]
        th, dp, dn = f"theta_{j + 1}", f"dpos_{j + 1}", f"dneg_{j + 1}"
        model.add_variable(dp, CONTINUOUS, 0.0, width)
        model.add_variable(dn, CONTINUOUS, 0.0, width)
        sg = model.add_variable(f"sgn_{j + 1}", BINARY)
        model.add_row(f"l1_{j + 1}", [(th, 1.0), (dp, -1.0), (dn, 1.0)], "=", theta_hat[j])
        model.add_row(f"sp_{j + 1}", [(dp, 1.0), (sg, -width)], "<=", 0.0, "width")
        model.add_row(f"sn_{j + 1}", [(dn, 1.0), (sg, width)], "<=", width, "width")
        model.add_objective(dp, 1.0)
        model.add_objective(dn, 1.0)
    registry["width"] = (float(space.width.max(initial=0.0)), "parameter box widths")

    base = dmp.base
    Ghat, hhat, labels, names = _stacked(base)
    rhs_theta = _rhs_slots(dmp)
    eq_theta = _eq_slots(dmp)
    hat = apply_params(dmp, theta_hat) if dmp.n_free else base
    slot_terms = {}
    for j, s in enumerate(dmp.slots):
        if s.kind in ("c", "q"):
            slot_terms.setdefault(s.index[0], []).append((j, s))

    for i in range(1, Np + 1):
        x = X[i - 1]
        us = []
        for r, nm in enumerate(names):
            slack = hhat[r] - Ghat[r] @ x
            if r in rhs_theta:
                u = model.add_variable(f"u_{i}_{nm}")
                b = model.add_variable(f"b_{i}_{nm}", BINARY)
                var, scale = rhs_theta[r]
                const = float(Ghat[r] @ x)
                model.add_row(f"pf_{i}_{nm}", [(var, -scale)], "<=", -const)
                model.add_row(f"cu_{i}_{nm}", [(u, 1.0), (b, -m2)], "<=", 0.0, "M2")
                model.add_row(f"cs_{i}_{nm}", [(var, scale), (b, m2)], "<=", m2 + const, "M2")
            else:
                active = abs(slack) <= 1e-9 * (1.0 + abs(hhat[r]))
                u = model.add_variable(f"u_{i}_{nm}", CONTINUOUS, 0.0, np.inf if active else 0.0)
            us.append(u)
        nus = [model.add_variable(f"nu_{i}_{e + 1}", CONTINUOUS, -np.inf, np.inf) for e in range(base.E.shape[0])]
        for e in range(base.E.shape[0]):
            if e in eq_theta:
                var, scale = eq_theta[e]
                model.add_row(f"pe_{i}_{e + 1}", [(var, scale)], "=", float(base.E[e] @ x))

        zs = [model.add_variable(f"z_{i}_{k}", BINARY) for k in range(1, K + 1)]
        model.add_row(f"as_{i}", [(z, 1.0) for z in zs], "=", 1.0)
        for k in range(1, K + 1):
            w = weights[k - 1]
            for j in range(n):
                const = 0.0
                terms = []
                for l, f in enumerate(hat.objectives):
                    grad = f.gradient(x)[j]
                    for jj, s in slot_terms.get(l, []):
                        if s.kind == "c" and s.index[1] == j:
                            terms.append((f"theta_{jj + 1}", w[l] * s.scale))
                            grad -= f.c[j]
                        elif s.kind == "q" and s.index[1] == j:
                            terms.append((f"theta_{jj + 1}", w[l] * s.scale * x[j]))
                            grad -= f.Q[j, j] * x[j]
                    const += w[l] * grad
                terms += [(u, Ghat[r, j]) for r, u in enumerate(us)]
                terms += [(nu, base.E[e, j]) for e, nu in enumerate(nus)]
                z = zs[k - 1]
                model.add_row(f"sr_{i}_{k}_{j + 1}", terms + [(z, m1)], "<=", m1 - const, "M1")
                model.add_row(f"sl_{i}_{k}_{j + 1}", terms + [(z, -m1)], ">=", -m1 - const, "M1")

    logger.info("build_test_problem name=%s counts=%s", model.name, model.counts())
    return model.validate()


# -------------------------
# Certificates
# -------------------------

def _comp_binary(u, slack):
    return 1.0 if u > slack else 0.0


def plug_in_single_level(model, dmp, theta, observations, weights):
    """Point map from forward certificates at θ: x_k, multipliers, binaries, z and η."""
    Y, weights = _check_inputs(dmp, observations, weights)
    theta = np.asarray(theta, dtype=float)
    concrete = concrete_of(dmp, theta if dmp.n_free else None)
    solutions = solve_weights(concrete, None, weights)
    Ghat, hhat, labels, names = _stacked(concrete)
    point = {f"theta_{j + 1}": float(v) for j, v in enumerate(theta)}
    if "obj_constant" in model.variables:
        point["obj_constant"] = 1.0

    for k, sol in enumerate(solutions, start=1):
        x, u, nu = sol.x, sol.u, sol.nu
        if dmp.family == LINEAR:
            u, nu = multipliers_at(concrete, sol.w, x)
        slack = hhat - Ghat @ x
        for j, v in enumerate(x, start=1):
            point[f"x_{k}_{j}"] = float(v)
        for e, v in enumerate(nu, start=1):
            point[f"nu_{k}_{e}"] = float(v)
        for r, (kind, idx) in enumerate(labels):
            if dmp.family == LINEAR and kind == "lb":
                continue
            point[f"u_{k}_{names[r]}"] = float(u[r])
            if kind == "row" or dmp.family == LINEAR:
                point[f"t2_{k}_{names[r]}"] = _comp_binary(u[r], slack[r])
            else:
                prefix = "t1u" if kind == "ub" else "t1"
                point[f"{prefix}_{k}_{idx + 1}"] = _comp_binary(u[r], slack[r])
        if dmp.family == LINEAR:
            reduced = concrete.weighted_gradient(sol.w, x) + Ghat.T @ np.where(
                [kind != "lb" for kind, _ in labels], u, 0.0) + concrete.E.T @ nu
            for j in range(dmp.n):
                point[f"t1_{k}_{j + 1}"] = 1.0 if x[j] > reduced[j] else 0.0

    X = np.array([s.x for s in solutions])
    if Y.shape[0]:
        assignment = assign(ObservationSet(Y, _side(observations)), X)
        for i, ki in enumerate(assignment.index, start=1):
            for k in range(1, weights.shape[0] + 1):
                chosen = k - 1 == ki
                point[f"z_{i}_{k}"] = 1.0 if chosen else 0.0
                for j in range(1, dmp.n + 1):
                    point[f"eta_{i}_{k}_{j}"] = float(X[k - 1, j - 1]) if chosen else 0.0
    return point


def plug_in_test_problem(model, dmp, theta, theta_hat, efficient_points, weights):
    """Point map placing each efficient point on its best-fitting weight under θ."""
    X = np.atleast_2d(np.asarray(efficient_points, dtype=float))
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    theta = np.asarray(theta, dtype=float)
    concrete = concrete_of(dmp, theta if dmp.n_free else None)
    Ghat, hhat, _, names = _stacked(concrete)
    point = {}
    for j, (t, th) in enumerate(zip(theta, theta_hat), start=1):
        point[f"theta_{j}"] = float(t)
        point[f"dpos_{j}"] = float(max(t - th, 0.0))
        point[f"dneg_{j}"] = float(max(th - t, 0.0))
        point[f"sgn_{j}"] = 1.0 if t > th else 0.0

    for i, x in enumerate(X, start=1):
        best = None
        for k, w in enumerate(weights, start=1):
            u, nu = multipliers_at(concrete, w, x)
            r = concrete.weighted_gradient(w, x) + Ghat.T @ u + concrete.E.T @ nu
            score = float(np.abs(r).max(initial=0.0))
            if best is None or score < best[0] - 1e-12:
                best = (score, k, u, nu)
        _, k_best, u, nu = best
        slack = hhat - Ghat @ x
        for r, nm in enumerate(names):
            point[f"u_{i}_{nm}"] = float(u[r])
            if f"b_{i}_{nm}" in model.variables:
                point[f"b_{i}_{nm}"] = _comp_binary(u[r], slack[r])
        for e, v in enumerate(nu, start=1):
            point[f"nu_{i}_{e}"] = float(v)
        for k in range(1, weights.shape[0] + 1):
            point[f"z_{i}_{k}"] = 1.0 if k == k_best else 0.0
    return point


def check_feasible(model, point, tol=FEASIBILITY_TOL):
    """Signed violation per row, bound and integrality (positive means violated)."""
    missing = [v for v in model.variables if v not in point]
    if missing:
        raise ValidationError("point map leaves variables unassigned", {"missing": missing[:10]})
    violations = {}
    for row in model.rows:
        lhs = sum(c * point[v] for v, c in row.coefs.items())
        if row.sense == "<=":
            violations[row.name] = lhs - row.rhs
        elif row.sense == ">=":
            violations[row.name] = row.rhs - lhs
        else:
            violations[row.name] = abs(lhs - row.rhs)
    for name, var in model.variables.items():
        value = point[name]
        violations[f"bound:{name}"] = max(var.lower - value, value - var.upper)
        if var.kind == BINARY:
            violations[f"int:{name}"] = abs(value - round(value))
    worst = max(violations.values(), default=0.0)
    bigm_rows = [r.name for r in model.rows if r.bigm is not None and violations[r.name] > tol]
    return FeasibilityReport(violations, float(worst), bool(worst <= tol), bigm_rows, tol)


def evaluate_objective(model, point):
    return model.objective_value(point)


# -------------------------
# LP format
# -------------------------

def _fmt(value):
    value = float(value)
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return format(value, ".12g")


def _bound(value):
    if value == np.inf:
        return "+inf"
    if value == -np.inf:
        return "-inf"
    return _fmt(value)


def _terms(items):
    parts = []
    for var, coef in items:
        if not parts:
            parts.append(f"{'-' if coef < 0 else ''}{_fmt(abs(coef))} {var}")
        else:
            parts.append(f"{'-' if coef < 0 else '+'} {_fmt(abs(coef))} {var}")
    return parts


def _wrap(head, parts, tail=""):
    lines, line = [], head
    for part in parts:
        if len(line) + 1 + len(part) > MAX_LINE and line.strip():
            lines.append(line)
            line = "  "
        line = f"{line} {part}"
    if tail:
        line = f"{line} {tail}"
    lines.append(line)
    return lines


def write_lp(model):
    """Render the model in LP format with deterministic row and column order."""
    out = [f"\\ model: {model.name}"]
    for key, (value, origin) in model.bigm.items():
        out.append(f"\\ bigM {key} = {_fmt(value)} ({origin})")
    out.append("Maximize" if model.sense == "maximize" else "Minimize")
    out.extend(_wrap(" obj:", _terms(model.objective.items())))
    if model.quadratic:
        quad = []
        for (a, b), coef in model.quadratic.items():
            term = f"{a} ^ 2" if a == b else f"{a} * {b}"
            quad.append((term, 2.0 * coef))
        first, *rest = quad
        out.append(f"   + [ {'-' if first[1] < 0 else ''}{_fmt(abs(first[1]))} {first[0]}")
        for term, coef in rest:
            out.append(f"   {'-' if coef < 0 else '+'} {_fmt(abs(coef))} {term}")
        out.append("   ] / 2")
    out.append("Subject To")
    for row in model.rows:
        out.extend(_wrap(f" {row.name}:", _terms(row.coefs.items()), f"{row.sense} {_fmt(row.rhs)}"))
    out.append("Bounds")
    for var in model.variables.values():
        if var.kind == BINARY and (var.lower, var.upper) == (0.0, 1.0):
            continue
        lo, hi = var.lower, var.upper
        if lo == hi:
            out.append(f" {var.name} = {_fmt(lo)}")
        elif lo == -np.inf and hi == np.inf:
            out.append(f" {var.name} free")
        elif hi == np.inf:
            out.append(f" {var.name} >= {_fmt(lo)}")
        else:
            out.append(f" {_bound(lo)} <= {var.name} <= {_fmt(hi)}")
    binaries = model.binaries()
    if binaries:
        out.append("Binaries")
        out.extend(f" {b}" for b in binaries)
    out.append("End")
    return "\n".join(out) + "\n"


def export_model(model, path=None, out_dir="."):
    """Write `<name>.lp` (or `path`) and return the path written."""
    path = Path(path) if path is not None else Path(out_dir) / f"{model.name}.lp"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(write_lp(model))
    logger.info("export_model path=%s rows=%d vars=%d", path, len(model.rows), len(model.variables))
    return path


_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def _parse_terms(tokens):
    """[sign] coef name ... -> [(name, coef)] for linear token streams."""
    terms, sign, coef = [], 1.0, None
    for tok in tokens:
        if tok in ("+", "-"):
            sign = 1.0 if tok == "+" else -1.0
        elif _NUMBER.match(tok):
            coef = float(tok)
        else:
            terms.append((tok, sign * (1.0 if coef is None else coef)))
            sign, coef = 1.0, None
    return terms


def _parse_quadratic(tokens):
    quad, sign, coef, i = [], 1.0, None, 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in ("+", "-"):
            sign = 1.0 if tok == "+" else -1.0
        elif _NUMBER.match(tok):
            coef = float(tok)
        else:
            value = sign * (1.0 if coef is None else coef) / 2.0
            other = tok if tokens[i + 1] == "^" else tokens[i + 2]
            quad.append(((tok, other), value))
            i += 2
            sign, coef = 1.0, None
        i += 1
    return quad


def read_lp(text):
    """Parse LP text produced by write_lp back into a MipModel."""
    model = MipModel("")
    section, objective_tokens, row_lines, bounds, binaries = None, [], [], [], []
    for raw in text.splitlines():
        if raw.startswith("\\"):
            match = re.match(r"\\ model: (.*)$", raw)
            if match:
                model.name = match.group(1)
            match = re.match(r"\\ bigM (\S+) = (\S+) \((.*)\)$", raw)
            if match:
                model.bigm[match.group(1)] = (float(match.group(2)), match.group(3))
            continue
        line = raw.strip()
        if line in ("Minimize", "Maximize"):
            model.sense = line.lower()
            section = "objective"
        elif line in ("Subject To", "Bounds", "Binaries", "End"):
            section = line
        elif section == "objective":
            objective_tokens.extend(line.split())
        elif section == "Subject To":
            if raw.startswith("   ") and row_lines:
                row_lines[-1] += " " + line
            else:
                row_lines.append(line)
        elif section == "Bounds":
            bounds.append(line)
        elif section == "Binaries":
            binaries.extend(line.split())

    names_in_order = []
    if objective_tokens and objective_tokens[0] == "obj:":
        objective_tokens = objective_tokens[1:]
    linear_tokens, quad_tokens = objective_tokens, []
    if "[" in objective_tokens:
        start = objective_tokens.index("[")
        end = objective_tokens.index("]")
        linear_tokens = objective_tokens[:start]
        if linear_tokens and linear_tokens[-1] == "+":
            linear_tokens = linear_tokens[:-1]
        quad_tokens = objective_tokens[start + 1:end]
    objective = _parse_terms(linear_tokens)
    quadratic = _parse_quadratic(quad_tokens)

    rows = []
    for line in row_lines:
        name, body = line.split(":", 1)
        tokens = body.split()
        sense, rhs = tokens[-2], float(tokens[-1])
        rows.append((name.strip(), _parse_terms(tokens[:-2]), sense, rhs))
        for var, _ in rows[-1][1]:
            names_in_order.append(var)

    declared = {}
    for line in bounds:
        tokens = line.split()
        if tokens[-1] == "free":
            declared[tokens[0]] = (-np.inf, np.inf)
        elif tokens[1] == "=":
            declared[tokens[0]] = (float(tokens[2]),) * 2
        elif tokens[1] == ">=":
            declared[tokens[0]] = (float(tokens[2]), np.inf)
        else:
            declared[tokens[2]] = (float(tokens[0]), float(tokens[4]))
    for name, (lo, hi) in declared.items():
        model.add_variable(name, CONTINUOUS, lo, hi)
    for name in binaries:
        if name in model.variables:
            model.variables[name].kind = BINARY
        else:
            model.add_variable(name, BINARY)
    for var, _ in objective:
        if var not in model.variables:
            model.add_variable(var)
    for var in names_in_order:
        if var not in model.variables:
            model.add_variable(var)

    for var, coef in objective:
        model.add_objective(var, coef)
    for pair, coef in quadratic:
        model.add_quadratic(pair[0], pair[1], coef)
    bigm_tags = {"eu": "M_ik", "el": "M_ik", "ex": "M_ik", "ey": "M_ik", "cx": "M1", "cd": "M1",
                 "sr": "M1", "sl": "M1", "sp": "width", "sn": "width"}
    for name, terms, sense, rhs in rows:
        prefix = name.split("_")[0]
        tag = bigm_tags.get(prefix)
        if prefix in ("cu", "cs"):
            tag = "M1" if ("_lb" in name or "_ub" in name) else "M2"
        model.add_row(name, terms, sense, rhs, tag)
    return model


def structurally_equal(a, b, tol=1e-9):
    """Same variables, bounds, kinds, rows and objective (values within tol)."""
    if set(a.variables) != set(b.variables):
        return False
    for name, var in a.variables.items():
        other = b.variables.get(name)
        if other is None or other.kind != var.kind:
            return False
        if not (np.isclose(var.lower, other.lower, atol=tol) and np.isclose(var.upper, other.upper, atol=tol)):
            return False
    if [r.name for r in a.rows] != [r.name for r in b.rows]:
        return False
    for ra, rb in zip(a.rows, b.rows):
        if ra.sense != rb.sense or abs(ra.rhs - rb.rhs) > tol or ra.coefs.keys() != rb.coefs.keys():
            return False
        if any(abs(ra.coefs[v] - rb.coefs[v]) > tol for v in ra.coefs):
            return False
    if a.objective.keys() != b.objective.keys() or a.quadratic.keys() != b.quadratic.keys():
        return False
    return all(abs(a.objective[v] - b.objective[v]) <= tol for v in a.objective) and \
        all(abs(a.quadratic[q] - b.quadratic[q]) <= tol for q in a.quadratic)
