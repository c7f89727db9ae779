"""Primal active-set method for small dense convex QPs.

    min ½xᵀHx + gᵀx  s.t.  G x ≤ h,  E x = e

H may be singular (linear costs, portfolio at a zero weight). Steps are taken
in the null space of the working constraints; directions of zero curvature
with descent run to the nearest blocking constraint.
"""
import logging
from dataclasses import dataclass

import numpy as np

from imop.errors import NumericalError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass
class QPResult:
    x: np.ndarray
    u: np.ndarray
    nu: np.ndarray
    active: tuple
    iterations: int
    status: str = "optimal"


def _independent(rows, candidate):
    if rows.shape[0] == 0:
        return np.linalg.norm(candidate) > RANK_TOL
    stacked = np.vstack([rows, candidate])
    return np.linalg.matrix_rank(stacked, tol=RANK_TOL * max(1.0, np.abs(stacked).max())) > \
        np.linalg.matrix_rank(rows, tol=RANK_TOL * max(1.0, np.abs(rows).max()))


def _working_matrix(G, E, working):
    return np.vstack([E, G[list(working)]]) if working else E


def solve_qp(H, g, G, h, E=None, e=None, x0=None, working=(), tol=1e-9, max_iter=None):
    """Solve the QP from a feasible start x0; `working` seeds the active set."""
    n = g.shape[0]
    G = np.asarray(G, dtype=float).reshape(-1, n)
    h = np.asarray(h, dtype=float).reshape(-1)
    E = np.zeros((0, n)) if E is None else np.asarray(E, dtype=float).reshape(-1, n)
    e = np.zeros(0) if e is None else np.asarray(e, dtype=float).reshape(-1)
    m, me = G.shape[0], E.shape[0]
    max_iter = max_iter or 50 * (n + m + 1)

    x = np.array(x0, dtype=float)
    h_scale = 1.0 + np.abs(h)
    slack = h - G @ x
    if m and np.any(slack < -1e-7 * h_scale):
        raise NumericalError("active-set start is infeasible", details={"violation": float(-slack.min())})

    W = []
    active = [i for i in range(m) if slack[i] <= tol * h_scale[i]]
    for i in [i for i in working if i in active] + active:
        if i in W:
            continue
        if _independent(_working_matrix(G, E, W), G[i]):
            W.append(i)

    degenerate = False
    for it in range(max_iter):
        grad = H @ x + g
        gscale = 1.0 + np.linalg.norm(grad) + np.linalg.norm(g)
        A = _working_matrix(G, E, W)

        if A.shape[0]:
            _, S, Vt = np.linalg.svd(A)
            rank = int(np.sum(S > RANK_TOL * max(1.0, S[0])))
            Z = Vt[rank:].T
        else:
            Z = np.eye(n)

        unbounded = False
        p = np.zeros(n)
        if Z.shape[1]:
            Hz = Z.T @ H @ Z
            gz = Z.T @ grad
            evals, evecs = np.linalg.eigh(0.5 * (Hz + Hz.T))
            curv_tol = 1e-10 * max(1.0, np.abs(evals).max(initial=0.0))
            pos = evals > curv_tol
            flat = evecs[:, ~pos]
            g_flat = flat @ (flat.T @ gz)
            if np.linalg.norm(g_flat) > tol * gscale:
                p = -Z @ g_flat
                unbounded = True
            elif pos.any():
                coef = (evecs[:, pos].T @ gz) / evals[pos]
                p = -Z @ (evecs[:, pos] @ coef)

        if np.linalg.norm(p) <= tol * (1.0 + np.linalg.norm(x)):
            lam = np.zeros(A.shape[0])
            if A.shape[0]:
                lam = np.linalg.lstsq(A.T, -grad, rcond=None)[0]
            u_w = lam[me:]
            if not W or u_w.min() >= -tol * gscale:
                u = np.zeros(m)
                u[W] = np.maximum(u_w, 0.0)
                return QPResult(x, u, lam[:me], tuple(sorted(W)), it)
            negative = np.flatnonzero(u_w < -tol * gscale)
            if degenerate:
                drop = min(negative, key=lambda k: W[k])
            else:
                drop = negative[np.argmin(u_w[negative])]
            W.pop(int(drop))
            degenerate = False
            continue

        Gp = G @ p
        alpha_max, blocking = np.inf, None
        if m:
            candidate = Gp > 1e-14 * (1.0 + np.abs(G).sum(axis=1)) * np.linalg.norm(p)
            candidate[W] = False
            if candidate.any():
                idx = np.flatnonzero(candidate)
                ratios = np.maximum((h[idx] - G[idx] @ x) / Gp[idx], 0.0)
                k = int(np.argmin(ratios))
                alpha_max, blocking = float(ratios[k]), int(idx[k])

        if unbounded:
            if blocking is None:
                raise NumericalError("QP is unbounded below along a zero-curvature direction")
            alpha = alpha_max
        else:
            alpha = min(1.0, alpha_max)

        x = x + alpha * p
        degenerate = alpha == 0.0
        if blocking is not None and alpha == alpha_max:
            W.append(blocking)

    raise NumericalError("active-set iteration limit reached", details={"iterations": max_iter})


def project_polyhedron(z, G, h, E, e, x0, tol=1e-10):
    """Euclidean projection of z onto {G x ≤ h, E x = e} from a feasible x0."""
    n = z.shape[0]
    return solve_qp(np.eye(n), -np.asarray(z, dtype=float), G, h, E, e, x0=x0, tol=tol)
