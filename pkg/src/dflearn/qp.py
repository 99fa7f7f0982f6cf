"""Differentiable decision layer for LP-representable problems.

Forward pass: maximize ``theta . x - gamma * ||x||^2`` over the polytope
``{x : Ax = b, Gx <= h}`` with a primal-dual interior-point method
(Mehrotra predictor-corrector steps).  The quadratic penalty makes the
maximizer unique and differentiable almost everywhere, so the backward pass
can recover ``d loss / d theta`` by solving the transposed differentiated
KKT system.  At test time ``solve_integral`` drops the penalty and returns
an exact integral optimum for the supported combinatorial structures.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.optimize

from .kkt import solve_checked

__all__ = [
    "QpProblem",
    "LayerSolution",
    "IntegralStructure",
    "Infeasible",
    "InfeasibleRows",
    "NoConvergence",
    "UnsupportedStructure",
    "reduce_rows",
    "solve_qp",
    "backward_qp",
    "solve_integral",
    "kkt_residuals",
    "max_weight_assignment",
    "format_problem",
    "parse_problem",
    "save_problem",
    "load_problem",
]


class InfeasibleRows(ValueError):
    """Linearly dependent equality rows with inconsistent right-hand sides."""


class Infeasible(RuntimeError):
    """The feasible region {Ax = b, Gx <= h} is empty."""


class NoConvergence(RuntimeError):
    """The interior-point iteration cap was hit before reaching tolerance."""


class UnsupportedStructure(ValueError):
    """The problem does not encode the requested integral structure."""


class IntegralStructure(Enum):
    BIPARTITE_MATCHING = "bipartite_matching"
    TOP_K = "top_k"
    GENERIC_LP = "generic_lp"


@dataclass
class QpProblem:
    """Regularized linear decision problem: max theta.x - gamma ||x||^2.

    theta : objective vector, length n
    A, b  : equality system (p x n, length p)
    G, h  : inequality system (m x n, length m), rows Gx <= h
    gamma : quadratic regularization weight, >= 0
    """

    theta: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    gamma: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        n = self.theta.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.asarray(self.h, dtype=float).ravel()
        self.gamma = float(self.gamma)
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b disagree on the number of equality rows")
        if self.G.shape[0] != self.h.size:
            raise ValueError("G and h disagree on the number of inequality rows")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    @property
    def n(self):
        return self.theta.size


@dataclass
class LayerSolution:
    """Primal-dual optimum of the regularized problem.

    x         : primal maximizer
    lam       : inequality duals, lam >= 0
    nu        : equality duals (zero entries for dropped dependent rows)
    objective : theta.x - gamma ||x||^2 at x
    """

    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    objective: float


def reduce_rows(A, b, tol=None):
    """Drop linearly dependent equality rows, keeping the feasible set intact.

    Returns a maximal linearly independent subset of the original rows (in
    their original order).  Raises InfeasibleRows when a dependent row has an
    inconsistent right-hand side, which certifies an empty feasible set.
    """
    A2, b2, kept = _reduce_rows_indices(A, b, tol)
    return A2, b2


def _reduce_rows_indices(A, b, tol=None):
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if A.ndim != 2:
        A = A.reshape(b.size, -1)
    p, n = A.shape
    if p != b.size:
        raise ValueError("A and b disagree on the number of rows")
    if p == 0:
        return A.copy(), b.copy(), []
    if tol is None:
        tol = max(p, n) * np.finfo(float).eps

    # Scan rows in order, keeping the first maximal independent subset; a
    # dependent row must have a consistent rhs or the system is infeasible.
    kept = []
    basis = []  # orthonormal span of the kept rows
    btol = 1e-8 * max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    for i in range(p):
        r = A[i].copy()
        norm0 = max(np.linalg.norm(r), 1.0)
        for q in basis:  # twice for numerical re-orthogonalization
            r -= (r @ q) * q
        for q in basis:
            r -= (r @ q) * q
        norm = np.linalg.norm(r)
        if norm > tol * norm0:
            kept.append(i)
            basis.append(r / norm)
        else:
            if kept:
                coeff, *_ = np.linalg.lstsq(A[kept].T, A[i], rcond=None)
                resid = abs(b[i] - coeff @ b[kept])
            else:
                resid = abs(b[i])  # zero row: needs zero rhs
            if resid > btol:
                raise InfeasibleRows(
                    f"equality row {i} is dependent but has inconsistent rhs "
                    f"(residual {resid:.3e})"
                )
    return A[kept].copy(), b[kept].copy(), kept


def _max_step(v, dv):
    """Largest alpha in (0, 1] keeping v + alpha*dv >= 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def solve_qp(problem: QpProblem, tol=1e-8, max_iter=100) -> LayerSolution:
    """Solve the regularized problem to the requested KKT tolerance.

    Dependent equality rows are dropped automatically (their duals are
    reported as zero).  Raises Infeasible when the feasible set is empty and
    NoConvergence when the iteration cap is hit with feasible residuals.
    """
    if problem.gamma <= 0:
        raise ValueError("gamma must be positive for the differentiable forward pass")
    theta = problem.theta
    n = theta.size
    A, b, kept = _reduce_rows_indices(problem.A, problem.b)
    G, h = problem.G, problem.h
    p, m = A.shape[0], G.shape[0]
    q = 2.0 * problem.gamma

    if m == 0:
        x, nu = _solve_equality_qp(q, theta, A, b)
        nu_full = np.zeros(problem.A.shape[0])
        nu_full[kept] = nu
        return LayerSolution(
            x=x,
            lam=np.zeros(0),
            nu=nu_full,
            objective=float(theta @ x - problem.gamma * (x @ x)),
        )

    # Infeasible-start Mehrotra predictor-corrector.
    if p:
        x = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        x = np.zeros(n)
    s_raw = h - G @ x
    s = s_raw + (max(0.0, -float(np.min(s_raw))) + 1.0)
    lam = np.ones(m)
    nu = np.zeros(p)
    eye = np.eye(n)
    best_pinf = np.inf
    converged = False

    for _ in range(max_iter):
        rd = q * x - theta + G.T @ lam + (A.T @ nu if p else 0.0)
        rp = A @ x - b if p else np.zeros(0)
        rg = G @ x + s - h
        mu = float(lam @ s) / m
        comp = float(np.max(lam * s))  # max, not mean: every product must close
        pinf = max(
            float(np.max(np.abs(rp))) if p else 0.0, float(np.max(np.abs(rg)))
        )
        best_pinf = min(best_pinf, pinf)
        if max(float(np.max(np.abs(rd))), pinf, comp) <= tol:
            converged = True
            break
        if mu < 1e-10 and pinf > max(1e-6, 100 * tol):
            raise Infeasible(
                f"complementarity collapsed with primal residual {pinf:.3e}"
            )
        if float(np.max(lam)) > 1e10 and pinf > 1e-6:
            raise Infeasible(f"diverging duals with primal residual {pinf:.3e}")

        d = lam / s
        W = q * eye + G.T @ (d[:, None] * G)
        if p:
            K = np.zeros((n + p, n + p))
            K[:n, :n] = W
            K[:n, n:] = A.T
            K[n:, :n] = A
        else:
            K = W
        for jitter in (0.0, 1e-10, 1e-8):
            try:
                lu = scipy.linalg.lu_factor(K + jitter * np.eye(K.shape[0]))
                break
            except scipy.linalg.LinAlgError:
                continue
        else:
            raise NoConvergence("interior-point normal equations are singular")

        def newton(rc):
            rhs_x = -rd - G.T @ (d * rg - rc / s)
            if p:
                sol = scipy.linalg.lu_solve(lu, np.concatenate([rhs_x, -rp]))
                dx, dnu = sol[:n], sol[n:]
            else:
                dx, dnu = scipy.linalg.lu_solve(lu, rhs_x), np.zeros(0)
            ds = -rg - G @ dx
            dlam = -(rc + lam * ds) / s
            return dx, dnu, ds, dlam

        dx_a, dnu_a, ds_a, dl_a = newton(lam * s)
        ap = _max_step(s, ds_a)
        ad = _max_step(lam, dl_a)
        mu_aff = float((s + ap * ds_a) @ (lam + ad * dl_a)) / m
        sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3
        dx, dnu, ds, dlam = newton(lam * s + ds_a * dl_a - sigma * mu)
        alpha = 0.99 * min(_max_step(s, ds), _max_step(lam, dlam))
        x = x + alpha * dx
        nu = nu + alpha * dnu
        s = s + alpha * ds
        lam = lam + alpha * dlam

    if not converged:
        if best_pinf > 1e-6:
            raise Infeasible(
                f"primal residual stalled at {best_pinf:.3e}; feasible set is empty"
            )
        raise NoConvergence(
            f"iteration cap {max_iter} hit; best primal residual {best_pinf:.3e}"
        )

    x, lam, nu = _polish(q, theta, A, b, G, h, x, lam, nu, tol)
    lam = np.maximum(lam, 0.0)
    nu_full = np.zeros(problem.A.shape[0])
    if p:
        nu_full[kept] = nu
    return LayerSolution(
        x=x,
        lam=lam,
        nu=nu_full,
        objective=float(theta @ x - problem.gamma * (x @ x)),
    )


def _polish(q, theta, A, b, G, h, x, lam, nu, tol):
    """Crossover: re-solve on the predicted active set for an exact solution.

    The interior-point iterate leaves O(sqrt(tol)) slack on weakly active
    constraints; solving the equality-constrained KKT system on the active
    set removes it.  Misclassified constraints are repaired by a short
    active-set refinement loop; if no candidate set verifies, the
    interior-point iterate stands.
    """
    n = theta.size
    p = A.shape[0]
    s = h - G @ x
    active = lam > s
    for _ in range(8):
        act = np.flatnonzero(active)
        na = act.size
        Ga = G[act]
        K = np.zeros((n + na + p, n + na + p))
        K[:n, :n] = q * np.eye(n)
        if na:
            K[:n, n : n + na] = Ga.T
            K[n : n + na, :n] = Ga
        if p:
            K[:n, n + na :] = A.T
            K[n + na :, :n] = A
        rhs = np.concatenate([theta, h[act], b])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        x2 = sol[:n]
        lam2 = np.zeros(G.shape[0])
        lam2[act] = sol[n : n + na]
        nu2 = sol[n + na :]
        slack2 = G @ x2 - h
        stat = q * x2 - theta + G.T @ lam2 + (A.T @ nu2 if p else 0.0)
        ok = (
            float(np.max(np.abs(stat))) <= 10 * tol
            and (not p or float(np.max(np.abs(A @ x2 - b))) <= 10 * tol)
            and (slack2.size == 0 or float(np.max(slack2)) <= 10 * tol)
            and (lam2.size == 0 or float(np.min(lam2)) >= -10 * tol)
            and (slack2.size == 0 or float(np.max(np.abs(lam2 * slack2))) <= 10 * tol)
        )
        if ok:
            return x2, np.maximum(lam2, 0.0), nu2
        violated = slack2 > 10 * tol
        negative = np.zeros_like(active)
        negative[act] = lam2[act] < -10 * tol
        if not np.any(violated) and not np.any(negative):
            break  # residuals fail for another reason; keep the IPM iterate
        active = (active | violated) & ~negative
    return x, lam, nu


def _solve_equality_qp(q, theta, A, b):
    n = theta.size
    p = A.shape[0]
    if p == 0:
        return theta / q, np.zeros(0)
    K = np.zeros((n + p, n + p))
    K[:n, :n] = q * np.eye(n)
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([theta, b])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:]


def kkt_residuals(problem: QpProblem, sol: LayerSolution):
    """Residuals of the maximize-form KKT conditions at (x, lam, nu)."""
    x, lam, nu = sol.x, sol.lam, sol.nu
    stat = problem.theta - 2 * problem.gamma * x
    if problem.G.shape[0]:
        stat = stat - problem.G.T @ lam
    if problem.A.shape[0]:
        stat = stat - problem.A.T @ nu
    slack = problem.G @ x - problem.h if problem.G.shape[0] else np.zeros(0)
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "primal_eq": float(np.max(np.abs(problem.A @ x - problem.b)))
        if problem.A.shape[0]
        else 0.0,
        "primal_ineq": float(np.max(slack)) if slack.size else 0.0,
        "dual_neg": float(np.max(-lam)) if lam.size else 0.0,
        "complementarity": float(np.max(np.abs(lam * slack))) if slack.size else 0.0,
    }


def _assemble_kkt(problem, x, lam, A_red, tie_tol=None):
    """Differentiated KKT matrix in maximize form.

    Rows: stationarity (n), complementarity per inequality (m), equality (p).
    With ``tie_tol`` set, constraints where both the dual and the slack vanish
    are treated as inactive (their sensitivity is pinned to zero).
    """
    n = x.size
    G, h = problem.G, problem.h
    m, p = G.shape[0], A_red.shape[0]
    slack = G @ x - h if m else np.zeros(0)
    M = np.zeros((n + m + p, n + m + p))
    M[:n, :n] = 2.0 * problem.gamma * np.eye(n)
    if m:
        M[:n, n : n + m] = G.T
        M[n : n + m, :n] = lam[:, None] * G
        diag = slack.copy()
        if tie_tol is not None:
            tie = (lam <= tie_tol) & (np.abs(slack) <= tie_tol)
            if np.any(tie):
                M[n : n + m, :n][tie] = 0.0
                diag[tie] = -1.0
        M[n : n + m, n : n + m] = np.diag(diag)
    if p:
        M[:n, n + m :] = A_red.T
        M[n + m :, :n] = A_red
    return M


def backward_qp(problem: QpProblem, sol: LayerSolution, upstream, damping=1e-8):
    """Pull the upstream gradient back to the objective coefficients.

    Solves the transposed differentiated KKT system; the right-hand side for
    the stationarity block is the identity because grad_x(theta . x) = theta.
    Returns upstream . (dx/dtheta), length n.
    """
    upstream = np.asarray(upstream, dtype=float).ravel()
    n = problem.n
    if upstream.size != n:
        raise ValueError("upstream gradient length does not match problem size")
    A_red, _, _ = _reduce_rows_indices(problem.A, problem.b)
    M = _assemble_kkt(problem, sol.x, sol.lam, A_red)
    rhs = np.zeros(M.shape[0])
    rhs[:n] = upstream
    z, _ = solve_checked(
        M.T,
        rhs,
        damping=damping,
        label="qp backward system",
        fallback=lambda: _assemble_kkt(problem, sol.x, sol.lam, A_red, tie_tol=1e-6).T,
    )
    return z[:n]


def max_weight_assignment(weights):
    """Maximum-weight perfect assignment on a square matrix.

    Augmenting-path algorithm with dual potentials, O(s^3).  Returns an array
    ``cols`` with row i matched to column cols[i].
    """
    W = np.asarray(weights, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("assignment requires a square weight matrix")
    s = W.shape[0]
    cost = -W  # minimize cost == maximize weight
    u = np.zeros(s + 1)
    v = np.zeros(s + 1)
    match_row = np.zeros(s + 1, dtype=int)  # row matched to each column, 1-based
    way = np.zeros(s + 1, dtype=int)
    for i in range(1, s + 1):
        match_row[0] = i
        j0 = 0
        minv = np.full(s + 1, np.inf)
        used = np.zeros(s + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            free = np.flatnonzero(~used[1:]) + 1
            better = cur[free - 1] < minv[free]
            minv[free[better]] = cur[free - 1][better]
            way[free[better]] = j0
            j1 = free[int(np.argmin(minv[free]))]
            delta = minv[j1]
            u[match_row[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1
    cols = np.zeros(s, dtype=int)
    for j in range(1, s + 1):
        cols[match_row[j] - 1] = j - 1
    return cols


def solve_integral(problem: QpProblem, structure: IntegralStructure):
    """Optimal integral solution of the unregularized (gamma = 0) LP."""
    theta = problem.theta
    n = theta.size
    if structure is IntegralStructure.BIPARTITE_MATCHING:
        s = int(round(np.sqrt(n)))
        if s * s != n:
            raise UnsupportedStructure("matching problems need n = s^2 variables")
        W = theta.reshape(s, s)
        cols = max_weight_assignment(np.maximum(W, 0.0))
        x = np.zeros(n)
        for i, j in enumerate(cols):
            if W[i, j] > 0.0:
                x[i * s + j] = 1.0
        return x
    if structure is IntegralStructure.TOP_K:
        ones_rows = np.flatnonzero(np.all(problem.G == 1.0, axis=1))
        if ones_rows.size == 0:
            raise UnsupportedStructure("no budget row (all-ones) found in G")
        k = int(round(np.max(problem.h[ones_rows])))
        order = np.argsort(-theta, kind="stable")
        x = np.zeros(n)
        for i in order[:k]:
            if theta[i] > 0.0:
                x[i] = 1.0
        return x
    if structure is IntegralStructure.GENERIC_LP:
        res = scipy.optimize.linprog(
            -theta,
            A_ub=problem.G if problem.G.shape[0] else None,
            b_ub=problem.h if problem.h.size else None,
            A_eq=problem.A if problem.A.shape[0] else None,
            b_eq=problem.b if problem.b.size else None,
            bounds=(None, None),
            method="highs",
        )
        if res.status == 2:
            raise Infeasible("LP relaxation is infeasible")
        if not res.success:
            raise NoConvergence(f"LP solve failed: {res.message}")
        x = np.round(res.x)
        if np.max(np.abs(x - res.x)) > 1e-6:
            raise UnsupportedStructure("LP vertex solution is not integral")
        return x
    raise UnsupportedStructure(f"unknown structure {structure!r}")


# -- plain-text serialization -------------------------------------------------

def format_problem(problem: QpProblem) -> str:
    """Header line ``n p m gamma``, then rows of A|b, then G|h, then theta."""
    n = problem.n
    p = problem.A.shape[0]
    m = problem.G.shape[0]
    lines = [f"{n} {p} {m} {problem.gamma:.17g}"]
    for i in range(p):
        lines.append(_fmt_row(np.append(problem.A[i], problem.b[i])))
    for i in range(m):
        lines.append(_fmt_row(np.append(problem.G[i], problem.h[i])))
    lines.append(_fmt_row(problem.theta))
    return "\n".join(lines) + "\n"


def parse_problem(text: str) -> QpProblem:
    tokens = text.split()
    if len(tokens) < 4:
        raise ValueError("problem text is missing the header")
    n, p, m = int(tokens[0]), int(tokens[1]), int(tokens[2])
    gamma = float(tokens[3])
    body = np.array([float(t) for t in tokens[4:]])
    need = p * (n + 1) + m * (n + 1) + n
    if body.size != need:
        raise ValueError(f"expected {need} values after the header, got {body.size}")
    pos = 0
    Ab = body[pos : pos + p * (n + 1)].reshape(p, n + 1)
    pos += p * (n + 1)
    Gh = body[pos : pos + m * (n + 1)].reshape(m, n + 1)
    pos += m * (n + 1)
    theta = body[pos:]
    return QpProblem(
        theta=theta,
        A=Ab[:, :n],
        b=Ab[:, n],
        G=Gh[:, :n],
        h=Gh[:, n],
        gamma=gamma,
    )


def save_problem(problem: QpProblem, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_problem(problem))


def load_problem(path) -> QpProblem:
    with open(path, "r", encoding="utf-8") as f:
        return parse_problem(f.read())


def _fmt_row(values):
    return " ".join(format(float(v), ".17g") for v in values)
