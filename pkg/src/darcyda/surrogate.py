"""Feedforward network surrogate for the coarse observation map.

Everything is written against plain numpy arrays: layers compute
y_l = A_l(b_l + W_l y_{l-1}), training minimizes mean squared error
with RMSprop on hand-derived backprop gradients.  The default design
for k inputs and m outputs is [k, 4k, 8k, 4k, m] with activations
sigmoid, relu, relu, exponential; the exponential output keeps
predicted heads positive.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from ._core import (
    ACT_EXPONENTIAL,
    ACT_LINEAR,
    ACT_RELU,
    ACT_SIGMOID,
    EXP_CLAMP,
    nn_forward,
)
from .errors import (
    InvalidArgumentError,
    NumericOverflowError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

ACTIVATION_CODES = {"linear": ACT_LINEAR, "sigmoid": ACT_SIGMOID,
                    "relu": ACT_RELU, "exponential": ACT_EXPONENTIAL}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}


@dataclass
class NetworkSpec:
    """Layer widths [n_in, ..., n_out] and one activation per layer."""

    layer_sizes: list
    activations: list

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise InvalidArgumentError("need at least input and output layer sizes")
        if any(int(s) < 1 for s in self.layer_sizes):
            raise InvalidArgumentError("layer sizes must be positive")
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise InvalidArgumentError(
                f"{len(self.layer_sizes) - 1} layers need as many activations, "
                f"got {len(self.activations)}")
        for name in self.activations:
            if name not in ACTIVATION_CODES:
                raise InvalidArgumentError(f"unknown activation {name!r}")
        self.layer_sizes = [int(s) for s in self.layer_sizes]

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]


def design_spec(n_inputs, n_outputs):
    """The standard surrogate design for this problem:
    [k, 4k, 8k, 4k, m] with sigmoid/relu/relu/exponential."""
    k = int(n_inputs)
    return NetworkSpec(layer_sizes=[k, 4 * k, 8 * k, 4 * k, int(n_outputs)],
                       activations=["sigmoid", "relu", "relu", "exponential"])


class SurrogateNet:
    """Weights, biases, and activation codes of a feedforward network.

    ``weights[l]`` has shape (out_l, in_l); single-input forward passes
    are dispatched to the compiled kernel backend.
    """

    def __init__(self, spec, weights, biases, meta=None):
        self.spec = spec
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        sizes = spec.layer_sizes
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l + 1], sizes[l]) or b.shape != (sizes[l + 1],):
                raise InvalidArgumentError(
                    f"layer {l}: weight shape {w.shape} or bias shape {b.shape} "
                    f"does not match spec sizes {sizes[l]}->{sizes[l + 1]}")
        self.act_codes = np.asarray(
            [ACTIVATION_CODES[a] for a in spec.activations], dtype=np.int32)
        self.meta = dict(meta) if meta else {}

    @classmethod
    def initialize(cls, spec, rng):
        """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
        weights, biases = [], []
        sizes = spec.layer_sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(spec, weights, biases)

    def forward(self, x):
        """Evaluate one input vector."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.spec.n_inputs,):
            raise InvalidArgumentError(
                f"input must have shape ({self.spec.n_inputs},), got {x.shape}")
        try:
            y, _ = nn_forward(x, self.weights, self.biases, self.act_codes)
        except FloatingPointError as exc:
            raise NumericOverflowError(str(exc)) from exc
        return np.asarray(y)

    __call__ = forward

    def forward_batch(self, x):
        """Evaluate a batch of input rows, returns (N, m)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.n_inputs:
            raise InvalidArgumentError(
                f"batch must have shape (N, {self.spec.n_inputs})")
        acts, _, clamped = _forward_trace(self, x)
        return acts[-1]

    def parameter_copy(self):
        return ([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def set_parameters(self, params):
        weights, biases = params
        self.weights = [np.ascontiguousarray(w) for w in weights]
        self.biases = [np.ascontiguousarray(b) for b in biases]


def latin_hypercube(n_samples, n_dims, rng):
    """Latin hypercube design on (0,1)^k: each column visits every one
    of the n_samples equal-width cells exactly once, jittered uniformly
    within the cell."""
    if n_samples < 1 or n_dims < 1:
        raise InvalidArgumentError("need n_samples >= 1 and n_dims >= 1")
    out = np.empty((n_samples, n_dims))
    for j in range(n_dims):
        cells = rng.permutation(n_samples)
        u = rng.random(n_samples)
        col = (cells + u) / n_samples
        col[col == 0.0] = 0.5 / n_samples   # keep the open interval
        out[:, j] = col
    return out


def probit(u):
    """Standard normal quantile function, elementwise on (0,1)."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise InvalidArgumentError("probit input must lie strictly inside (0,1)")
    return ndtri(u)


def split_training_set(inputs, targets, test_fraction=0.1):
    """Deterministic 9:1 split: the last N//10 rows are held out."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] != targets.shape[0]:
        raise InvalidArgumentError("inputs and targets disagree on sample count")
    n = inputs.shape[0]
    n_test = int(round(n * test_fraction))
    if not (0 < n_test < n):
        raise InvalidArgumentError(f"cannot hold out {n_test} of {n} samples")
    n_train = n - n_test
    return (inputs[:n_train], targets[:n_train],
            inputs[n_train:], targets[n_train:])


def rmse(predictions, targets):
    """Root mean squared error over all entries."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidArgumentError("prediction/target shape mismatch")
    return float(np.sqrt(np.mean((p - t) ** 2)))


# ---------------------------------------------------------------------------
# training

def _forward_trace(net, x):
    """Batched forward keeping pre-activations for backprop.

    Returns (activations, pre_activations, n_clamped); activations[0]
    is the input batch.
    """
    acts = [x]
    zs = []
    clamped = 0
    for w, b, code in zip(net.weights, net.biases, net.act_codes):
        # overflow is detected and surfaced here, not left to numpy
        with np.errstate(over="ignore", invalid="ignore"):
            z = acts[-1] @ w.T + b
        if not np.isfinite(z).all():
            raise NumericOverflowError("non-finite pre-activation in batched forward")
        zs.append(z)
        if code == ACT_SIGMOID:
            a = 1.0 / (1.0 + np.exp(-z))
        elif code == ACT_RELU:
            a = np.maximum(z, 0.0)
        elif code == ACT_EXPONENTIAL:
            over = z > EXP_CLAMP
            if over.any():
                clamped += int(over.sum())
            a = np.exp(np.minimum(z, EXP_CLAMP))
        else:
            a = z
        acts.append(a)
    return acts, zs, clamped


def _activation_grad(code, z, a):
    if code == ACT_SIGMOID:
        return a * (1.0 - a)
    if code == ACT_RELU:
        return (z > 0.0).astype(np.float64)
    if code == ACT_EXPONENTIAL:
        return np.where(z <= EXP_CLAMP, a, 0.0)
    return np.ones_like(z)


def loss_and_gradients(net, inputs, targets):
    """MSE loss (mean over batch and outputs) and its gradients.

    Returns (loss, grad_weights, grad_biases, n_clamped).
    """
    acts, zs, clamped = _forward_trace(net, inputs)
    resid = acts[-1] - targets
    loss = float(np.mean(resid ** 2))
    dy = 2.0 * resid / resid.size
    grad_w = [None] * len(net.weights)
    grad_b = [None] * len(net.weights)
    for l in range(len(net.weights) - 1, -1, -1):
        dz = dy * _activation_grad(net.act_codes[l], zs[l], acts[l + 1])
        grad_w[l] = dz.T @ acts[l]
        grad_b[l] = dz.sum(axis=0)
        if l > 0:
            dy = dz @ net.weights[l]
    return loss, grad_w, grad_b, clamped


@dataclass
class TrainingConfig:
    epochs: int = 200
    batch_size: int = 50
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidArgumentError("epochs must be >= 0, batch_size >= 1")
        if not (0.0 < self.rho < 1.0) or self.learning_rate <= 0 or self.epsilon <= 0:
            raise InvalidArgumentError("bad optimizer constants")


@dataclass
class TrainingHistory:
    epoch_losses: list = field(default_factory=list)
    n_clamped: int = 0
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    best_epoch: int = -1


def train(net, inputs, targets, config, rng):
    """Train ``net`` in place with minibatch RMSprop.

    Each epoch reshuffles the training rows (driven by ``rng``, so a
    fixed seed fixes the whole trajectory).  RMSprop keeps one running
    second-moment accumulator per parameter:
    v <- rho v + (1-rho) g^2, p <- p - lr g / (sqrt(v) + eps).
    Raises TrainingDivergedError (with the best checkpoint attached)
    when the epoch loss goes non-finite.

    Returns a TrainingHistory; ``epochs=0`` is a bit-exact no-op.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] != targets.shape[0]:
        raise InvalidArgumentError("inputs and targets disagree on sample count")
    n = inputs.shape[0]
    history = TrainingHistory()
    if config.epochs == 0:
        return history

    loss0, *_ = loss_and_gradients(net, inputs, targets)
    history.initial_loss = loss0
    v_w = [np.zeros_like(w) for w in net.weights]
    v_b = [np.zeros_like(b) for b in net.biases]
    best = (loss0, net.parameter_copy(), -1)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gw, gb, clamped = loss_and_gradients(net, inputs[idx], targets[idx])
            history.n_clamped += clamped
            for l in range(len(net.weights)):
                v_w[l] = config.rho * v_w[l] + (1.0 - config.rho) * gw[l] ** 2
                v_b[l] = config.rho * v_b[l] + (1.0 - config.rho) * gb[l] ** 2
                net.weights[l] -= config.learning_rate * gw[l] / (np.sqrt(v_w[l]) + config.epsilon)
                net.biases[l] -= config.learning_rate * gb[l] / (np.sqrt(v_b[l]) + config.epsilon)
        epoch_loss, *_ = loss_and_gradients(net, inputs, targets)
        history.epoch_losses.append(epoch_loss)
        if not np.isfinite(epoch_loss):
            net.set_parameters(best[1])
            raise TrainingDivergedError(
                f"training loss became non-finite in epoch {epoch}",
                epoch=epoch, checkpoint=best[1])
        if epoch_loss < best[0]:
            best = (epoch_loss, net.parameter_copy(), epoch)

    history.final_loss = history.epoch_losses[-1]
    history.best_epoch = best[2]
    if history.n_clamped:
        logger.info("exponential clamp engaged %d times during training",
                    history.n_clamped)
    return history


# ---------------------------------------------------------------------------
# serialization

def save_network(path, net):
    layers = [{"W": w.tolist(), "b": b.tolist(), "activation": a}
              for w, b, a in zip(net.weights, net.biases, net.spec.activations)]
    payload = {"spec": {"layer_sizes": net.spec.layer_sizes,
                        "activations": list(net.spec.activations)},
               "layers": layers,
               "training_meta": net.meta}
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))


def load_network(path):
    with open(path) as f:
        data = json.load(f)
    try:
        spec = NetworkSpec(layer_sizes=data["spec"]["layer_sizes"],
                           activations=data["spec"]["activations"])
        weights = [np.asarray(layer["W"], dtype=np.float64) for layer in data["layers"]]
        biases = [np.asarray(layer["b"], dtype=np.float64) for layer in data["layers"]]
        file_acts = [layer["activation"] for layer in data["layers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"malformed network file {path}: {exc}") from exc
    if file_acts != list(spec.activations):
        raise InvalidArgumentError(
            f"malformed network file {path}: layer activations disagree with spec")
    return SurrogateNet(spec, weights, biases, meta=data.get("training_meta", {}))
