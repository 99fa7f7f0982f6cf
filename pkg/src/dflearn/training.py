"""Training loops: decision-focused and two-stage, plus shared evaluation.

Decision-focused steps run the decision layer forward on the prediction,
differentiate the true-parameter objective through the layer's KKT system,
and push that gradient into the network.  Two-stage steps use a generic loss
(MSE for regression targets, cross-entropy for classification targets).
Both take one optimization instance per gradient step.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import coverage as cov
from . import metrics
from .domains import DatasetInstance, matching_targets, matching_to_qp
from .kkt import SingularSystem
from .models import (
    Mlp,
    adam_step,
    init_adam,
    init_mlp,
    mlp_backward,
    mlp_forward,
    model_params,
    set_model_params,
    two_stage_loss,
)
from .qp import IntegralStructure, NoConvergence, backward_qp, solve_integral, solve_qp

__all__ = [
    "DOMAIN_LOSS",
    "DOMAIN_OUTPUT",
    "build_model",
    "predict_theta",
    "decide",
    "instance_quality",
    "random_decision",
    "decision_grad_theta",
    "train_model",
    "evaluate_model",
]

DOMAIN_LOSS = {
    "budget": "mse",
    "matching": "cross_entropy",
    "recommendation": "cross_entropy",
}

# Output maps keep predictions inside each domain's parameter range.
DOMAIN_OUTPUT = {
    "budget": ("scaled_sigmoid", 0.2),
    "matching": ("sigmoid", 1.0),
    "recommendation": ("sigmoid", 1.0),
}

_PRED_EPS = 1e-9  # sigmoid saturation guard for losses and coverage instances


def build_model(domain, in_dim, out_dim, depth=1, hidden=200, rng=0) -> Mlp:
    """Fresh predictor for a domain: depth 1 is linear + output map."""
    kind, scale = DOMAIN_OUTPUT[domain]
    dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
    return init_mlp(dims, output=kind, output_scale=scale, rng=rng)


def predict_theta(model: Mlp, inst: DatasetInstance):
    """Predicted parameter matrix in the instance's target shape, plus cache."""
    pred, cache = mlp_forward(model, inst.features)
    return pred, cache


def decide(domain, theta_hat, k):
    """Test-time discrete decision from a predicted parameter matrix.

    Coverage domains use lazy greedy; matching uses the exact augmenting-path
    solver.  Both are deterministic.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    if domain in ("budget", "recommendation"):
        inst = cov.CoverageInstance(
            np.clip(theta_hat, 0.0, 1.0), np.ones(theta_hat.shape[1]), k
        )
        return cov.greedy_select(inst, k)
    if domain == "matching":
        s = int(round(np.sqrt(theta_hat.size)))
        prob = matching_to_qp(theta_hat.reshape(s, s), gamma=0.0)
        return solve_integral(prob, IntegralStructure.BIPARTITE_MATCHING).reshape(s, s)
    raise ValueError(f"unknown domain {domain!r}")


def instance_quality(domain, decision, inst: DatasetInstance, k) -> float:
    theta_true = matching_targets(inst) if domain == "matching" else inst.targets
    return metrics.decision_quality(domain, decision, theta_true, k=k)


def random_decision(domain, inst: DatasetInstance, k, rng):
    """Uniform feasible decision, the Random baseline."""
    if domain in ("budget", "recommendation"):
        rows = inst.targets.shape[0]
        return set(int(i) for i in rng.choice(rows, size=min(k, rows), replace=False))
    s = inst.k
    x = np.zeros((s, s))
    x[np.arange(s), rng.permutation(s)] = 1.0
    return x


def true_coverage_instance(inst: DatasetInstance, k) -> cov.CoverageInstance:
    return cov.CoverageInstance(inst.targets, np.ones(inst.targets.shape[1]), k)


def decision_grad_theta(domain, inst: DatasetInstance, theta_hat, k, gamma=0.1,
                        sga_steps=100, sga_step_size=0.05, sga_item_frac=1.0,
                        rng=0):
    """d(true objective at the layer's solution) / d(theta_hat).

    Coverage domains: SGA forward on the predicted instance, analytic dual
    recovery (lenient tolerance: SGA output is only approximately stationary,
    and any subgradient serves for stochastic training), KKT backward with the
    true-parameter extension gradient upstream.  ``sga_item_frac`` < 1 turns
    on stochastic item subsampling; a fully converged ascent sits on an
    integral vertex whose exact sensitivity is zero, so keeping the iterate
    fractional is what lets training signal through.  Matching: regularized
    QP forward and KKT backward with the true weights upstream.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    if domain in ("budget", "recommendation"):
        inst_hat = cov.CoverageInstance(
            np.clip(theta_hat, 0.0, 1.0 - _PRED_EPS),
            np.ones(theta_hat.shape[1]),
            k,
        )
        n_items = theta_hat.shape[1]
        subsample = None
        if sga_item_frac < 1.0:
            subsample = max(1, int(round(sga_item_frac * n_items)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", cov.NoConvergenceWarning)
            point = cov.sga_maximize(
                inst_hat, steps=sga_steps, step_size=sga_step_size, rng=rng,
                item_subsample=subsample,
            )
        grad_hat = cov.extension_grad_x(point.x, inst_hat)
        duals = cov.recover_duals(point.x, grad_hat, k, tol=np.inf)
        upstream = cov.extension_grad_x(point.x, true_coverage_instance(inst, k))
        return cov.backward_submod(inst_hat, point.x, duals, upstream)
    if domain == "matching":
        s = inst.k
        prob = matching_to_qp(theta_hat.reshape(s, s), gamma=gamma)
        sol = solve_qp(prob)
        upstream = matching_targets(inst).ravel()
        return backward_qp(prob, sol, upstream).reshape(theta_hat.shape)
    raise ValueError(f"unknown domain {domain!r}")


def train_model(domain, instances, method, k, gamma=0.1, depth=1, hidden=200,
                epochs=30, lr=1e-3, seed=0, sga_steps=25, sga_step_size=0.05,
                sga_item_frac=0.3, val_fraction=0.1, patience=10):
    """Train a predictor on a list of instances; returns (model, history).

    ``method`` is "decision" or "two_stage".  One instance per Adam step.
    A held-out ``val_fraction`` of the training instances drives early
    stopping (best parameters are restored); history records the per-epoch
    validation score (quality for decision training, negative loss for
    two-stage).
    """
    if method not in ("decision", "two_stage"):
        raise ValueError(f"unknown training method {method!r}")
    if not instances:
        raise ValueError("need at least one training instance")
    rng = _rng(seed)
    inst0 = instances[0]
    out_dim = inst0.targets.shape[1]
    model = build_model(
        domain, inst0.features.shape[1], out_dim, depth=depth, hidden=hidden, rng=rng
    )
    _init_output_bias(model, instances)
    state = init_adam(model_params(model), lr=lr)

    if val_fraction <= 0.0 or len(instances) < 2:
        n_val = 0
    else:
        n_val = max(1, int(round(val_fraction * len(instances))))
    order = rng.permutation(len(instances))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    loss_kind = DOMAIN_LOSS[domain]

    best_score = -np.inf
    best_params = None
    stale = 0
    history = []
    skipped = 0
    for _ in range(epochs):
        for i in rng.permutation(train_idx):
            inst = instances[int(i)]
            pred, cache = mlp_forward(model, inst.features)
            if method == "two_stage":
                safe = np.clip(pred, _PRED_EPS, 1.0 - _PRED_EPS) if loss_kind == "cross_entropy" else pred
                _, d_pred = two_stage_loss(loss_kind, safe, inst.targets)
            else:
                try:
                    g = decision_grad_theta(
                        domain, inst, pred, k, gamma=gamma,
                        sga_steps=sga_steps, sga_step_size=sga_step_size,
                        sga_item_frac=sga_item_frac, rng=rng,
                    )
                except (cov.NotStationary, NoConvergence, SingularSystem):
                    skipped += 1
                    continue
                d_pred = -g  # maximize decision quality
            dWs, dbs = mlp_backward(model, cache, d_pred)
            grads = [a for pair in zip(dWs, dbs) for a in pair]
            set_model_params(model, adam_step(state, model_params(model), grads))

        if n_val:
            score = _validation_score(domain, model, [instances[int(i)] for i in val_idx],
                                      method, k, gamma, loss_kind)
            history.append(score)
            if score > best_score + 1e-12:
                best_score = score
                best_params = [p.copy() for p in model_params(model)]
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_params is not None:
        set_model_params(model, best_params)
    return model, {"history": history, "skipped_steps": skipped}


def _init_output_bias(model, instances):
    """Start predictions at the target base rate.

    With a fresh net the initial residual is one large constant offset; pushed
    through a saturating output map it correlates with feature norms and
    steers early training systematically wrong.  Setting the last bias to the
    inverse output map of the mean target removes that offset.
    """
    mean = float(np.mean([inst.targets.mean() for inst in instances]))
    if model.output == "identity":
        model.biases[-1][:] = mean
        return
    scale = model.output_scale if model.output == "scaled_sigmoid" else 1.0
    p = min(max(mean / scale, 1e-4), 1.0 - 1e-4)
    model.biases[-1][:] = np.log(p / (1.0 - p))


def _validation_score(domain, model, val_instances, method, k, gamma, loss_kind):
    """Held-out score for early stopping.

    Two-stage models are selected on their own loss.  Decision models are
    selected on the continuous relaxation of the true objective (the training
    target itself): it is smooth in the parameters, unlike the discrete test
    decision, which jumps in whole units and makes tiny validation sets
    useless.
    """
    if method == "decision":
        vals = []
        for inst in val_instances:
            pred, _ = mlp_forward(model, inst.features)
            pred = np.asarray(pred, dtype=float)
            if domain == "matching":
                s = inst.k
                sol = solve_qp(matching_to_qp(pred.reshape(s, s), gamma=gamma))
                vals.append(float(matching_targets(inst).ravel() @ sol.x))
            else:
                inst_hat = cov.CoverageInstance(
                    np.clip(pred, 0.0, 1.0 - _PRED_EPS),
                    np.ones(pred.shape[1]),
                    k,
                )
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", cov.NoConvergenceWarning)
                    point = cov.sga_maximize(inst_hat, steps=100, rng=0)
                vals.append(
                    cov.extension_value(point.x, true_coverage_instance(inst, k))
                )
        return float(np.mean(vals))
    losses = []
    for inst in val_instances:
        pred, _ = mlp_forward(model, inst.features)
        if loss_kind == "cross_entropy":
            pred = np.clip(pred, _PRED_EPS, 1.0 - _PRED_EPS)
        losses.append(two_stage_loss(loss_kind, pred, inst.targets)[0])
    return -float(np.mean(losses))


def evaluate_model(domain, model, instances, k):
    """Mean test measures: decision quality plus the domain's accuracy metrics.

    Returns a dict with keys quality, mse, ce, auc (inapplicable ones None).
    """
    qualities, mses, ces, aucs = [], [], [], []
    for inst in instances:
        pred, _ = mlp_forward(model, inst.features)
        qualities.append(instance_quality(domain, decide(domain, pred, k), inst, k))
        if domain == "budget":
            mses.append(metrics.mse(pred, inst.targets))
        else:
            safe = np.clip(pred, _PRED_EPS, 1.0 - _PRED_EPS)
            ces.append(metrics.cross_entropy(safe, inst.targets))
            try:
                aucs.append(metrics.auc(safe.ravel(), inst.targets.ravel()))
            except metrics.DegenerateLabels:
                pass
    return {
        "quality": float(np.mean(qualities)),
        "mse": float(np.mean(mses)) if mses else None,
        "ce": float(np.mean(ces)) if ces else None,
        "auc": float(np.mean(aucs)) if aucs else None,
    }


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
