"""Differentiable decision layer for budgeted coverage maximization.

The decision problem selects at most ``k`` actions; action i covers item j
independently with probability ``theta[i, j]`` and covered items pay their
weight.  The induced set function is monotone submodular and its multilinear
extension has a closed form, so the forward pass can run projected gradient
ascent with exact gradients and the backward pass can differentiate the KKT
system of the local optimum analytically.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .kkt import solve_checked

__all__ = [
    "CoverageInstance",
    "FractionalPoint",
    "CoverageDuals",
    "NotStationary",
    "TooLarge",
    "NoConvergenceWarning",
    "coverage_value",
    "extension_value",
    "extension_value_monte_carlo",
    "extension_grad_x",
    "extension_hessian_x",
    "project_capped_simplex",
    "sga_maximize",
    "recover_duals",
    "grad_theta_of_grad_x",
    "iter_grad_theta_of_grad_x",
    "backward_submod",
    "pipage_round",
    "greedy_select",
    "brute_force_select",
    "discrete_oracles",
    "format_coverage",
    "parse_coverage",
    "save_coverage",
    "load_coverage",
]


class NotStationary(RuntimeError):
    """The point does not satisfy the first-order conditions for a local max."""


class TooLarge(ValueError):
    """Brute-force enumeration would exceed the configured cap."""


class NoConvergenceWarning(RuntimeWarning):
    """Gradient ascent returned before reaching the stationarity tolerance."""


@dataclass
class CoverageInstance:
    """Coverage decision problem: theta (actions x items), item weights, budget."""

    theta: np.ndarray
    w: np.ndarray
    k: int

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2:
            raise ValueError("theta must be a 2-d actions-by-items matrix")
        self.w = np.asarray(self.w, dtype=float).ravel()
        if self.w.size != self.theta.shape[1]:
            raise ValueError("weight vector length must match the item count")
        self.k = int(self.k)
        if np.any(self.theta < 0) or np.any(self.theta > 1):
            raise ValueError("coverage probabilities must lie in [0, 1]")
        if np.any(self.w < 0):
            raise ValueError("item weights must be nonnegative")
        if not 1 <= self.k <= self.theta.shape[0]:
            raise ValueError("budget k must satisfy 1 <= k <= number of actions")

    @property
    def n_actions(self):
        return self.theta.shape[0]

    @property
    def n_items(self):
        return self.theta.shape[1]


@dataclass
class FractionalPoint:
    """Point in [0,1]^n giving per-action inclusion probabilities."""

    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        if np.any(self.x < -1e-9) or np.any(self.x > 1 + 1e-9):
            raise ValueError("coordinates must lie in [0, 1]")

    def check_budget(self, k, tol=1e-6):
        if float(self.x.sum()) > k + tol:
            raise ValueError(f"coordinate sum {self.x.sum():.6f} exceeds budget {k}")


@dataclass
class CoverageDuals:
    """Multipliers for the cardinality polytope: budget, lower and upper bounds."""

    lam_budget: float
    lam_lower: np.ndarray
    lam_upper: np.ndarray

    def stationarity_residual(self, grad):
        """grad - (lam_budget * 1 - lam_lower + lam_upper), maximize convention."""
        return np.asarray(grad, dtype=float) - (
            self.lam_budget - self.lam_lower + self.lam_upper
        )


def _as_x(x):
    if isinstance(x, FractionalPoint):
        return x.x
    return np.asarray(x, dtype=float).ravel()


def coverage_value(inst: CoverageInstance, S) -> float:
    """Discrete objective f(S) = sum_j w_j (1 - prod_{i in S} (1 - theta_ij))."""
    idx = np.sort(np.fromiter(S, dtype=int)) if not isinstance(S, np.ndarray) else np.sort(S)
    if idx.size == 0:
        return 0.0
    uncovered = np.prod(1.0 - inst.theta[idx], axis=0)
    return float(inst.w @ (1.0 - uncovered))


def extension_value(x, inst: CoverageInstance) -> float:
    """Multilinear extension F(x) = sum_j w_j (1 - prod_i (1 - x_i theta_ij))."""
    x = _as_x(x)
    uncovered = np.prod(1.0 - x[:, None] * inst.theta, axis=0)
    return float(inst.w @ (1.0 - uncovered))


def extension_value_monte_carlo(x, inst: CoverageInstance, samples=10**6, rng=0,
                                chunk=200_000):
    """Sampling estimate of F(x): include each action independently with prob x_i.

    Returns (mean, standard error).  This is the defining expectation of the
    multilinear extension and serves as an oracle for the closed form.
    """
    x = _as_x(x)
    rng = _rng(rng)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        b = min(chunk, samples - done)
        take = rng.random((b, x.size)) < x  # (b, n) inclusion indicators
        # uncovered prob per sample/item: product over included actions only
        factors = np.where(take[:, :, None], 1.0 - inst.theta[None, :, :], 1.0)
        vals = (1.0 - factors.prod(axis=1)) @ inst.w
        total += float(vals.sum())
        total_sq += float((vals * vals).sum())
        done += b
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    return mean, math.sqrt(var / samples)


def _excl_prod_columns(V):
    """P[i, j] = prod over l != i of V[l, j] via prefix/suffix products.

    Exact for zero entries (no division)."""
    n = V.shape[0]
    pre = np.ones_like(V)
    suf = np.ones_like(V)
    if n > 1:
        np.cumprod(V[:-1], axis=0, out=pre[1:])
        suf[:-1] = np.cumprod(V[:0:-1], axis=0)[::-1]
    return pre * suf


def _pair_excl_prod(v):
    """(L, P2) with L[i] = prod_{l != i} v_l and P2[i, k] = prod_{l not in {i,k}} v_l.

    P2's diagonal is zeroed; handle the k == i case with L."""
    n = v.size
    zeros = np.flatnonzero(v == 0.0)
    P2 = np.zeros((n, n))
    if zeros.size == 0:
        total = float(np.prod(v))
        L = total / v
        P2 = L[:, None] / v[None, :]
    elif zeros.size == 1:
        z = zeros[0]
        L = np.zeros(n)
        mask = np.ones(n, dtype=bool)
        mask[z] = False
        L[z] = float(np.prod(v[mask]))
        with np.errstate(divide="ignore", invalid="ignore"):
            row = np.where(mask, L[z] / v, 0.0)
        P2[z, :] = row
        P2[:, z] = row
    elif zeros.size == 2:
        z0, z1 = zeros
        mask = np.ones(n, dtype=bool)
        mask[[z0, z1]] = False
        val = float(np.prod(v[mask]))
        P2[z0, z1] = P2[z1, z0] = val
        L = np.zeros(n)
    else:
        L = np.zeros(n)
    np.fill_diagonal(P2, 0.0)
    return L, P2


def extension_grad_x(x, inst: CoverageInstance):
    """grad_i F = sum_j w_j theta_ij prod_{l != i} (1 - x_l theta_lj); >= 0."""
    x = _as_x(x)
    V = 1.0 - x[:, None] * inst.theta
    L = _excl_prod_columns(V)
    return (inst.theta * L) @ inst.w


def extension_hessian_x(x, inst: CoverageInstance):
    """Hessian of F: zero diagonal, H_ik = -sum_j w_j theta_ij theta_kj prod_{l != i,k}."""
    x = _as_x(x)
    n = inst.n_actions
    H = np.zeros((n, n))
    for j in range(inst.n_items):
        _, P2 = _pair_excl_prod(1.0 - x * inst.theta[:, j])
        H -= inst.w[j] * np.outer(inst.theta[:, j], inst.theta[:, j]) * P2
    np.fill_diagonal(H, 0.0)
    return H


def _project_array(v, k, tol=1e-10):
    v = np.asarray(v, dtype=float).ravel()
    x = np.clip(v, 0.0, 1.0)
    if x.sum() <= k + tol:
        return x
    # Bisect the budget multiplier tau: sum clip(v - tau, 0, 1) is piecewise
    # linear and decreasing, so the root bracket [0, max(v)] always works.
    lo, hi = 0.0, float(np.max(v))
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if np.clip(v - mid, 0.0, 1.0).sum() > k:
            lo = mid
        else:
            hi = mid
    return np.clip(v - 0.5 * (lo + hi), 0.0, 1.0)


def project_capped_simplex(v, k, tol=1e-10) -> FractionalPoint:
    """Euclidean projection onto {x in [0,1]^n : sum x <= k}."""
    if k < 1:
        raise ValueError("budget k must be at least 1")
    return FractionalPoint(_project_array(v, k, tol))


def sga_maximize(inst: CoverageInstance, steps=100, step_size=0.05, rng=0,
                 x0=None, item_subsample=None, stationarity_tol=1e-6,
                 full_output=False):
    """Projected (stochastic) gradient ascent on the multilinear extension.

    Starts from (k/n) * 1 plus uniform noise in [-0.01, 0.01] (the noise lets
    ascent leave saddle points) unless ``x0`` is given.  Exact gradients by
    default; ``item_subsample`` draws that many items per step for a cheaper
    stochastic estimate.  A NoConvergenceWarning is emitted when the gradient
    mapping norm still exceeds ``stationarity_tol`` after ``steps`` updates.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = _rng(rng)
    n = inst.n_actions
    if x0 is None:
        x0 = (inst.k / n) + rng.uniform(-0.01, 0.01, size=n)
    x = _project_array(np.asarray(x0, dtype=float).ravel(), inst.k)
    exact = item_subsample is None or item_subsample >= inst.n_items
    for _ in range(steps):
        if exact:
            g = extension_grad_x(x, inst)
        else:
            idx = rng.choice(inst.n_items, size=item_subsample, replace=False)
            sub = CoverageInstance(
                inst.theta[:, idx],
                inst.w[idx] * (inst.n_items / item_subsample),
                inst.k,
            )
            g = extension_grad_x(x, sub)
        x_new = _project_array(x + step_size * g, inst.k)
        moved = float(np.linalg.norm(x_new - x))
        x = x_new
        # with exact gradients the step length IS the gradient mapping norm
        if exact and moved <= stationarity_tol:
            break
    gap = float(
        np.linalg.norm(x - _project_array(x + step_size * extension_grad_x(x, inst), inst.k))
    )
    converged = gap <= stationarity_tol
    if not converged:
        warnings.warn(
            f"gradient mapping norm {gap:.3e} above tolerance after {steps} steps",
            NoConvergenceWarning,
            stacklevel=2,
        )
    point = FractionalPoint(x)
    if full_output:
        return point, {"converged": converged, "gradient_mapping_norm": gap}
    return point


def recover_duals(x, grad, k, tol=1e-4) -> CoverageDuals:
    """Analytic multipliers at an (approximate) local maximum.

    Fractional coordinates of a stationary point share one gradient value; the
    budget dual equals it (maximize convention, so it is nonnegative for
    monotone objectives), bound duals absorb the rest.  Raises NotStationary
    when fractional gradients disagree beyond ``tol`` or complementary
    slackness cannot hold.
    """
    x = _as_x(x)
    grad = np.asarray(grad, dtype=float).ravel()
    if x.size != grad.size:
        raise ValueError("x and grad must have the same length")
    if float(x.sum()) > k + 1e-6:
        raise ValueError("x violates the budget constraint")
    dust = 1e-12
    at0 = x <= dust
    at1 = x >= 1.0 - dust
    frac = ~(at0 | at1)
    tight = float(x.sum()) >= k - 1e-6

    if not tight:
        # Budget slack forces lam_budget = 0; no coordinate below its upper
        # bound may have positive gradient.
        free = ~at1
        if np.any(free) and float(np.max(grad[free])) > tol:
            raise NotStationary(
                "budget is slack but a free coordinate has positive gradient"
            )
        lam_budget = 0.0
    elif np.any(frac):
        g = grad[frac]
        spread = float(g.max() - g.min())
        if spread > tol:
            raise NotStationary(
                f"fractional gradients disagree by {spread:.3e} (> {tol:g})"
            )
        lam_budget = float(g.mean())
    else:
        lo = float(np.max(grad[at0])) if np.any(at0) else 0.0
        hi = float(np.min(grad[at1])) if np.any(at1) else lo
        if hi < lo - tol:
            raise NotStationary(
                "an unselected coordinate dominates a selected one at the budget"
            )
        if hi < 0.0:
            raise NotStationary("selected coordinate has negative gradient")
        lam_budget = 0.5 * (max(lo, 0.0) + max(hi, lo, 0.0))

    lam_lower = np.where(at0, lam_budget - grad, 0.0)
    lam_upper = np.where(at1, grad - lam_budget, 0.0)
    worst = min(float(np.min(lam_lower)), float(np.min(lam_upper)))
    if worst < -tol:
        raise NotStationary(f"recovered dual would be negative ({worst:.3e})")
    return CoverageDuals(
        lam_budget=lam_budget,
        lam_lower=np.maximum(lam_lower, 0.0),
        lam_upper=np.maximum(lam_upper, 0.0),
    )


def iter_grad_theta_of_grad_x(x, inst: CoverageInstance):
    """Yield (j, T_j) with T_j[i, k] = d grad_i F / d theta_kj, one item at a time.

    Streaming keeps the backward pass from materializing the full n*n*m tensor
    when the item set is large."""
    x = _as_x(x)
    theta = inst.theta
    for j in range(inst.n_items):
        L, P2 = _pair_excl_prod(1.0 - x * theta[:, j])
        T = -inst.w[j] * theta[:, j][:, None] * x[None, :] * P2
        np.fill_diagonal(T, inst.w[j] * L)
        yield j, T


def grad_theta_of_grad_x(x, inst: CoverageInstance):
    """Dense (n, n, m) tensor T[i, k, j] = d grad_i F / d theta_kj."""
    n, m = inst.n_actions, inst.n_items
    out = np.zeros((n, n, m))
    for j, T in iter_grad_theta_of_grad_x(x, inst):
        out[:, :, j] = T
    return out


def _assemble_submod_kkt(inst, x, duals, tie_tol=None):
    """Differentiated KKT matrix for the cardinality polytope [-I; I; 1^T]."""
    n = x.size
    H = extension_hessian_x(x, inst)
    lam = np.concatenate(
        [duals.lam_lower, duals.lam_upper, [duals.lam_budget]]
    )
    Abar = np.vstack([-np.eye(n), np.eye(n), np.ones((1, n))])
    slack = np.concatenate([-x, x - 1.0, [x.sum() - inst.k]])
    rows = 2 * n + 1
    M = np.zeros((n + rows, n + rows))
    M[:n, :n] = -H
    M[:n, n:] = Abar.T
    lamA = lam[:, None] * Abar
    diag = slack.copy()
    if tie_tol is not None:
        tie = (lam <= tie_tol) & (np.abs(slack) <= tie_tol)
        if np.any(tie):
            lamA[tie] = 0.0
            diag[tie] = -1.0
    M[n:, :n] = lamA
    M[n:, n:] = np.diag(diag)
    return M


def backward_submod(inst: CoverageInstance, x, duals: CoverageDuals, upstream,
                    damping=1e-8):
    """Pull an upstream gradient (dF_true/dx at the fixed point) back to theta.

    Solves the transposed KKT system once, then contracts the streamed
    d grad F / d theta tensor item by item.  Returns an (actions x items)
    matrix of d loss / d theta.
    """
    x = _as_x(x)
    upstream = np.asarray(upstream, dtype=float).ravel()
    n = inst.n_actions
    if upstream.size != n:
        raise ValueError("upstream gradient length must match the action count")
    M = _assemble_submod_kkt(inst, x, duals)
    rhs = np.zeros(M.shape[0])
    rhs[:n] = upstream
    z, _ = solve_checked(
        M.T,
        rhs,
        damping=damping,
        label="coverage backward system",
        fallback=lambda: _assemble_submod_kkt(inst, x, duals, tie_tol=1e-6).T,
    )
    zx = z[:n]
    out = np.zeros((n, inst.n_items))
    for j, T in iter_grad_theta_of_grad_x(x, inst):
        out[:, j] = T.T @ zx
    return out


def pipage_round(x, inst: CoverageInstance, rng=0):
    """Round a fractional point to a set S with |S| <= k and E[f(S)] >= F(x).

    Repeatedly shifts mass between two fractional coordinates toward the
    endpoint that does not decrease F (F is convex along e_i - e_j), then
    resolves a single leftover fractional coordinate by a Bernoulli draw.
    """
    rng = _rng(rng)
    x = np.clip(_as_x(x), 0.0, 1.0).copy()
    x[x < 1e-9] = 0.0
    x[x > 1.0 - 1e-9] = 1.0
    while True:
        frac = np.flatnonzero((x > 0.0) & (x < 1.0))
        if frac.size < 2:
            break
        i, j = frac[0], frac[1]
        t_up = min(1.0 - x[i], x[j])  # move mass j -> i
        t_dn = min(x[i], 1.0 - x[j])  # move mass i -> j
        cand_up = x.copy()
        cand_up[i] = 1.0 if t_up == 1.0 - x[i] else x[i] + t_up
        cand_up[j] = 0.0 if t_up == x[j] else x[j] - t_up
        cand_dn = x.copy()
        cand_dn[i] = 0.0 if t_dn == x[i] else x[i] - t_dn
        cand_dn[j] = 1.0 if t_dn == 1.0 - x[j] else x[j] + t_dn
        if extension_value(cand_up, inst) >= extension_value(cand_dn, inst):
            x = cand_up
        else:
            x = cand_dn
    frac = np.flatnonzero((x > 0.0) & (x < 1.0))
    if frac.size == 1:
        i = frac[0]
        x[i] = 1.0 if rng.random() < x[i] else 0.0
    return set(int(i) for i in np.flatnonzero(x > 0.5))


def greedy_select(inst: CoverageInstance, k=None):
    """Lazy greedy for the monotone submodular coverage objective."""
    import heapq

    k = inst.k if k is None else int(k)
    uncovered = inst.w.copy()  # residual weight not yet covered, per item
    gains = inst.theta @ uncovered
    heap = [(-g, i) for i, g in enumerate(gains)]
    heapq.heapify(heap)
    chosen = set()
    while len(chosen) < min(k, inst.n_actions) and heap:
        neg, i = heapq.heappop(heap)
        fresh = float(inst.theta[i] @ uncovered)
        if heap and fresh < -heap[0][0] - 1e-12:
            heapq.heappush(heap, (-fresh, i))
            continue
        chosen.add(int(i))
        uncovered *= 1.0 - inst.theta[i]
    return chosen


def brute_force_select(inst: CoverageInstance, k=None, cap=2_000_000):
    """Exact optimum by enumerating all subsets of size <= k.

    Raises TooLarge when the number of candidate subsets exceeds ``cap``.
    """
    k = inst.k if k is None else int(k)
    n = inst.n_actions
    count = sum(math.comb(n, r) for r in range(1, min(k, n) + 1))
    if count > cap:
        raise TooLarge(f"{count} candidate subsets exceed the cap {cap}")
    best_set, best_val = set(), 0.0
    for r in range(1, min(k, n) + 1):
        for combo in itertools.combinations(range(n), r):
            val = coverage_value(inst, combo)
            if val > best_val + 1e-15:
                best_val = val
                best_set = set(combo)
    return best_set, best_val


def discrete_oracles(inst: CoverageInstance, k=None, cap=2_000_000):
    """(greedy set, exact optimal set) — test oracles and baselines."""
    greedy = greedy_select(inst, k)
    optimal, _ = brute_force_select(inst, k, cap)
    return greedy, optimal


# -- plain-text serialization -------------------------------------------------

def format_coverage(inst: CoverageInstance) -> str:
    """Header ``|V| |U| k``, one weight line, then theta rows."""
    lines = [f"{inst.n_actions} {inst.n_items} {inst.k}"]
    lines.append(" ".join(format(float(v), ".17g") for v in inst.w))
    for row in inst.theta:
        lines.append(" ".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"


def parse_coverage(text: str) -> CoverageInstance:
    tokens = text.split()
    if len(tokens) < 3:
        raise ValueError("coverage text is missing the header")
    n, m, k = int(tokens[0]), int(tokens[1]), int(tokens[2])
    body = np.array([float(t) for t in tokens[3:]])
    if body.size != m + n * m:
        raise ValueError(f"expected {m + n * m} values after the header, got {body.size}")
    return CoverageInstance(theta=body[m:].reshape(n, m), w=body[:m], k=k)


def save_coverage(inst: CoverageInstance, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_coverage(inst))


def load_coverage(path) -> CoverageInstance:
    with open(path, "r", encoding="utf-8") as f:
        return parse_coverage(f.read())


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
