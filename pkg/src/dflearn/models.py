"""Predictive models: feed-forward nets with manual backprop, Adam, and losses.

Networks map per-unit feature rows to parameter rows.  Hidden layers use the
rectifier; the output map keeps predictions inside the parameter space
(identity for unconstrained regression, sigmoid for probabilities, scaled
sigmoid for bounded ranges like [0, 0.2]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mlp",
    "AdamState",
    "ShapeMismatch",
    "DomainError",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "model_params",
    "set_model_params",
    "init_adam",
    "adam_step",
    "two_stage_loss",
    "clone_model",
    "save_model",
    "load_model",
]

OUTPUT_KINDS = ("identity", "sigmoid", "scaled_sigmoid")


class ShapeMismatch(ValueError):
    """Input width does not match the model's first layer."""


class DomainError(ValueError):
    """Loss inputs are outside the valid domain."""


@dataclass
class Mlp:
    """Fully connected rectifier network.

    weights[i] has shape (d_i, d_{i+1}) and acts as x @ W + b; the final
    linear output passes through the configured output map.
    """

    weights: list
    biases: list
    output: str = "identity"
    output_scale: float = 1.0

    def __post_init__(self):
        if self.output not in OUTPUT_KINDS:
            raise ValueError(f"unknown output kind {self.output!r}")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError("consecutive layer dimensions are incompatible")
        for W, b in zip(self.weights, self.biases):
            if b.shape != (W.shape[1],):
                raise ValueError("bias shape does not match its layer")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("model weights must be finite")

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]


def init_mlp(dims, output="identity", output_scale=1.0, rng=0) -> Mlp:
    """He-style fan-in scaled uniform initialization, zero biases."""
    rng = _rng(rng)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return Mlp(weights=weights, biases=biases, output=output, output_scale=output_scale)


def _output_map(model, z):
    if model.output == "identity":
        return z
    sig = 1.0 / (1.0 + np.exp(-z))
    if model.output == "sigmoid":
        return sig
    return model.output_scale * sig


def _output_map_grad(model, out):
    if model.output == "identity":
        return np.ones_like(out)
    if model.output == "sigmoid":
        return out * (1.0 - out)
    c = model.output_scale
    return out * (1.0 - out / c)


def mlp_forward(model: Mlp, features):
    """Predict parameter rows from feature rows.

    Returns (prediction, cache); the cache holds the layer inputs and final
    output needed by mlp_backward.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.weights[0].shape[0]:
        raise ShapeMismatch(
            f"feature width {X.shape[1]} != input layer width {model.weights[0].shape[0]}"
        )
    inputs = []
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ W + b
        h = z if i == last else np.maximum(z, 0.0)
    out = _output_map(model, h)
    return out, {"inputs": inputs, "out": out}


def mlp_backward(model: Mlp, cache, d_out):
    """Gradients of a scalar loss for every weight and bias.

    ``d_out`` is dLoss/dPrediction with the prediction's shape.
    """
    d = np.asarray(d_out, dtype=float)
    if d.ndim == 1:
        d = d[None, :]
    d = d * _output_map_grad(model, cache["out"])
    dWs = [None] * len(model.weights)
    dbs = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        h = cache["inputs"][i]
        if i < len(model.weights) - 1:
            # rectifier mask: the stored input of layer i+1 is relu(z_i)
            d = d * (cache["inputs"][i + 1] > 0.0)
        dWs[i] = h.T @ d
        dbs[i] = d.sum(axis=0)
        if i > 0:
            d = d @ model.weights[i].T
    return dWs, dbs


def model_params(model: Mlp):
    """Flat list of parameter arrays (weights then bias per layer)."""
    out = []
    for W, b in zip(model.weights, model.biases):
        out.extend([W, b])
    return out


def set_model_params(model: Mlp, params):
    it = iter(params)
    for i in range(len(model.weights)):
        model.weights[i] = next(it)
        model.biases[i] = next(it)


@dataclass
class AdamState:
    """First/second moment accumulators and hyperparameters."""

    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state: AdamState, params, grads):
    """One Adam update with bias correction; returns the new parameter list."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient lists do not match the Adam state")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / (1 - b1**state.t)
        v_hat = state.v[i] / (1 - b2**state.t)
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def two_stage_loss(kind, theta_hat, theta_true):
    """Task-agnostic training loss: mean squared error or cross-entropy.

    Returns (loss, dLoss/dTheta_hat), both averaged over all entries.
    """
    p = np.asarray(theta_hat, dtype=float)
    t = np.asarray(theta_true, dtype=float)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != target shape {t.shape}")
    count = p.size
    if kind == "mse":
        diff = p - t
        return float(np.mean(diff * diff)), 2.0 * diff / count
    if kind == "cross_entropy":
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise DomainError("cross-entropy predictions must lie strictly in (0, 1)")
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise DomainError("cross-entropy targets must lie in [0, 1]")
        loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
        grad = (p - t) / (p * (1.0 - p)) / count
        return float(loss), grad
    raise ValueError(f"unknown loss kind {kind!r}")


def clone_model(model: Mlp) -> Mlp:
    return Mlp(
        weights=[W.copy() for W in model.weights],
        biases=[b.copy() for b in model.biases],
        output=model.output,
        output_scale=model.output_scale,
    )


# -- plain-text checkpoints ---------------------------------------------------

def save_model(model: Mlp, path):
    """Header with layer dims and output map, then one matrix block per layer."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        dims = " ".join(str(d) for d in model.dims)
        f.write(f"mlp {len(model.weights)} {model.output} {model.output_scale:.17g}\n")
        f.write(dims + "\n")
        for W, b in zip(model.weights, model.biases):
            for row in W:
                f.write(" ".join(format(float(v), ".17g") for v in row) + "\n")
            f.write(" ".join(format(float(v), ".17g") for v in b) + "\n")


def load_model(path) -> Mlp:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != "mlp":
            raise ValueError("not a model checkpoint")
        n_layers = int(header[1])
        output, scale = header[2], float(header[3])
        dims = [int(t) for t in f.readline().split()]
        if len(dims) != n_layers + 1:
            raise ValueError("dimension line does not match the layer count")
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            W = np.array(
                [[float(t) for t in f.readline().split()] for _ in range(d_in)]
            )
            if W.shape != (d_in, d_out):
                raise ValueError("weight block has the wrong shape")
            b = np.array([float(t) for t in f.readline().split()])
            if b.shape != (d_out,):
                raise ValueError("bias line has the wrong shape")
            weights.append(W)
            biases.append(b)
    return Mlp(weights=weights, biases=biases, output=output, output_scale=scale)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
