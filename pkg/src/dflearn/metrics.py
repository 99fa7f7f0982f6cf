"""Evaluation measures: decision quality under true parameters plus standard
accuracy measures (MSE, cross-entropy, AUC) with bootstrap confidence intervals."""

from __future__ import annotations

import numpy as np

from .coverage import CoverageInstance, coverage_value
from .models import DomainError, two_stage_loss

__all__ = [
    "InfeasibleDecision",
    "DegenerateLabels",
    "DomainError",
    "decision_quality",
    "auc",
    "mse",
    "cross_entropy",
    "bootstrap_ci",
]


class InfeasibleDecision(ValueError):
    """The decision violates the domain's feasibility constraint."""


class DegenerateLabels(ValueError):
    """AUC needs at least one positive and one negative label."""


def decision_quality(domain, decision, theta_true, k=None) -> float:
    """Objective value of a feasible decision under the true parameters.

    budget / recommendation: ``decision`` is a set of selected row indices and
    the value is the coverage objective (weights 1).  matching: ``decision``
    is a binary s x s matrix (or flat vector) and the value is the total true
    weight of the matched pairs.
    """
    theta = np.asarray(theta_true, dtype=float)
    if domain in ("budget", "recommendation"):
        idx = np.sort(np.fromiter(decision, dtype=int)) if not isinstance(
            decision, np.ndarray
        ) else np.sort(np.asarray(decision, dtype=int))
        if idx.size and (idx.min() < 0 or idx.max() >= theta.shape[0]):
            raise InfeasibleDecision("selected index out of range")
        if k is not None and idx.size > k:
            raise InfeasibleDecision(f"selected {idx.size} rows with budget {k}")
        inst = CoverageInstance(theta, np.ones(theta.shape[1]), max(1, theta.shape[0]))
        return coverage_value(inst, idx)
    if domain == "matching":
        if theta.ndim == 2 and theta.shape[1] == 1:
            s = int(round(np.sqrt(theta.shape[0])))
            theta = theta.reshape(s, s)
        s = theta.shape[0]
        x = np.asarray(decision, dtype=float).reshape(s, s)
        if not np.all((x == 0.0) | (x == 1.0)):
            raise InfeasibleDecision("matching decision must be binary")
        if np.any(x.sum(axis=0) > 1) or np.any(x.sum(axis=1) > 1):
            raise InfeasibleDecision("matching decision violates degree constraints")
        return float(np.sum(theta * x))
    raise ValueError(f"unknown domain {domain!r}")


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count 1/2."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    pos = y == 1
    neg = ~pos
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("need at least one positive and one negative label")
    ranks = _average_ranks(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def mse(theta_hat, theta_true) -> float:
    """Mean squared error over all entries."""
    loss, _ = two_stage_loss("mse", theta_hat, theta_true)
    return loss


def cross_entropy(theta_hat, theta_true) -> float:
    """Mean binary cross-entropy over all entries; raises DomainError as the loss."""
    loss, _ = two_stage_loss("cross_entropy", theta_hat, theta_true)
    return loss


def bootstrap_ci(values, draws=10_000, level=0.95, seed=0):
    """Percentile bootstrap interval for the mean: (mean, low, high)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("bootstrap needs a nonempty sample")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(draws, v.size))
    means = v[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    mean = float(v.mean())
    return mean, min(float(lo), mean), max(float(hi), mean)
