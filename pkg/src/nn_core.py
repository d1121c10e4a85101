"""
Feedforward network engine.

Networks are stacks of semi-affine layers f(W z + b). The engine evaluates
them, backpropagates the weighted least-squares objective

    (1/n) sum_i w_i (y_i - yhat_i)^2 + l1 * sum|W| + l2 * sum W^2

and fits them with plain minibatch SGD. Zero hidden layers gives a linear
factor model; one or more hidden layers give the deep variant.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from errors import (
    DimensionMismatchError,
    TrainingDivergedError,
    ValidationError,
)
from output import atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE = 0.01
DEFAULT_EPOCHS = 500
DEFAULT_BATCH_SIZE = 32
DEFAULT_INIT_RULE = "glorot_uniform"

SERIALIZATION_FORMAT = "dff-network"
SERIALIZATION_VERSION = 1


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Activation:
    """An elementwise activation with its first and second derivatives."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    d2f: Optional[Callable[[np.ndarray], np.ndarray]] = None
    smooth: bool = True


def _tanh_d1(z: np.ndarray) -> np.ndarray:
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_d2(z: np.ndarray) -> np.ndarray:
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


ACTIVATIONS: dict[str, Activation] = {
    "identity": Activation(
        name="identity",
        f=lambda z: z,
        df=lambda z: np.ones_like(z),
        d2f=lambda z: np.zeros_like(z),
    ),
    "tanh": Activation(name="tanh", f=np.tanh, df=_tanh_d1, d2f=_tanh_d2),
    # Subgradient 0 at the kink.
    "relu": Activation(
        name="relu",
        f=lambda z: np.maximum(z, 0.0),
        df=lambda z: (z > 0.0).astype(float),
        d2f=None,
        smooth=False,
    ),
}


def get_activation(name: str) -> Activation:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValidationError(
            f"Unknown activation '{name}'. Available: {', '.join(ACTIVATIONS)}"
        ) from None


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One semi-affine layer: weights (out_dim x in_dim), bias, activation."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        bias = np.array(self.bias, dtype=float).reshape(-1)
        if weights.ndim == 1:
            weights = weights.reshape(1, -1)
        if weights.ndim != 2:
            raise DimensionMismatchError(f"weights must be a matrix, got shape {weights.shape}")
        if bias.shape[0] != weights.shape[0]:
            raise DimensionMismatchError(
                f"bias length {bias.shape[0]} does not match out_dim {weights.shape[0]}"
            )
        get_activation(self.activation)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Ordered layers of a feedforward network with a scalar output."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("A network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise DimensionMismatchError(
                    f"in_dim {layers[i].in_dim} does not match previous out_dim "
                    f"{layers[i - 1].out_dim}",
                    layer=i + 1,
                )
        if layers[-1].out_dim != 1:
            raise DimensionMismatchError(
                f"final layer must have out_dim 1, got {layers[-1].out_dim}",
                layer=len(layers),
            )
        if len(layers) == 1 and layers[0].activation != "identity":
            raise ValidationError("A network without hidden layers must use the identity activation")
        for i, layer in enumerate(layers, 1):
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise ValidationError(f"layer {i}: non-finite weights or biases")
        object.__setattr__(self, "layers", layers)

    @property
    def n_inputs(self) -> int:
        return self.layers[0].in_dim

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(layer.out_dim for layer in self.layers[:-1])

    @property
    def n_hidden_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(layer.activation for layer in self.layers)

    @property
    def n_parameters(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def composite_weights(self) -> np.ndarray:
        """Product W^(L) ... W^(1) as a length-K vector."""
        product = self.layers[0].weights
        for layer in self.layers[1:]:
            product = layer.weights @ product
        return product[0].copy()

    def to_vector(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weights.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)

    def from_vector(self, vector: np.ndarray) -> "NetworkParams":
        """New params with this network's shapes, filled from a flat vector."""
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.n_parameters:
            raise DimensionMismatchError(
                f"vector length {vector.size} does not match {self.n_parameters} parameters"
            )
        layers = []
        offset = 0
        for layer in self.layers:
            w_size = layer.weights.size
            weights = vector[offset:offset + w_size].reshape(layer.weights.shape)
            offset += w_size
            bias = vector[offset:offset + layer.out_dim]
            offset += layer.out_dim
            layers.append(LayerSpec(weights, bias, layer.activation))
        return NetworkParams(tuple(layers))

    def describe(self) -> str:
        dims = [str(self.n_inputs)] + [str(h) for h in self.hidden_sizes] + ["1"]
        acts = sorted(set(self.activations[:-1])) or ["linear"]
        return f"{'-'.join(dims)} ({'/'.join(acts)})"


@dataclass
class LayerState:
    """Pre- and post-activation values of every layer for one evaluation."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray] = field(default_factory=list)
    post_activations: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class Architecture:
    """Shape of a network: input count, hidden widths and activations."""

    n_inputs: int
    hidden: tuple[int, ...] = ()
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_inputs < 1:
            raise ValidationError(f"n_inputs must be positive, got {self.n_inputs}")
        if any(h < 1 for h in self.hidden):
            raise ValidationError(f"hidden widths must be positive, got {self.hidden}")
        get_activation(self.activation)
        get_activation(self.output_activation)
        if not self.hidden and self.output_activation != "identity":
            raise ValidationError("A network without hidden layers must use the identity activation")

    @classmethod
    def parse(cls, text: str, n_inputs: int, activation: str = "tanh") -> "Architecture":
        """Parse hidden widths such as ``"50,10"``; ``""``, ``"0"`` or ``"linear"`` mean none."""
        text = (text or "").strip().lower()
        if text in ("", "0", "linear", "none"):
            return cls(n_inputs=n_inputs, hidden=(), activation=activation)
        try:
            hidden = tuple(int(part) for part in text.split(",") if part.strip())
        except ValueError:
            raise ValidationError(f"Invalid architecture '{text}': expected comma-separated widths") from None
        return cls(n_inputs=n_inputs, hidden=hidden, activation=activation)

    @property
    def is_linear(self) -> bool:
        return not self.hidden

    @property
    def n_parameters(self) -> int:
        dims = [self.n_inputs, *self.hidden, 1]
        return sum(dims[i + 1] * (dims[i] + 1) for i in range(len(dims) - 1))

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.n_inputs, *self.hidden, 1]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def describe(self) -> str:
        return ",".join(str(h) for h in self.hidden) or "linear"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for SGD fitting."""

    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    l1_lambda: float = 0.0
    l2_lambda: float = 0.0
    seed: int = 0
    init_scale_rule: str = DEFAULT_INIT_RULE
    penalize_bias: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if self.l1_lambda < 0 or self.l2_lambda < 0:
            raise ValidationError("penalty strengths must be nonnegative")
        if self.seed < 0:
            raise ValidationError(f"seed must be nonnegative, got {self.seed}")
        if self.init_scale_rule not in INIT_RULES:
            raise ValidationError(
                f"Unknown init rule '{self.init_scale_rule}'. Available: {', '.join(INIT_RULES)}"
            )


@dataclass
class TrainResult:
    """Fitted parameters plus the per-epoch training objective."""

    params: NetworkParams
    loss_trace: np.ndarray
    config: TrainConfig

    @property
    def final_loss(self) -> float:
        return float(self.loss_trace[-1])


# ---------------------------------------------------------------------------
# Randomness and initialization
# ---------------------------------------------------------------------------


def derive_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent generator for (seed, stream) pairs, e.g. one per window or fold."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream_id)]))


INIT_RULES = {
    "glorot_uniform": lambda fan_in, fan_out: np.sqrt(6.0 / (fan_in + fan_out)),
    "he_uniform": lambda fan_in, fan_out: np.sqrt(6.0 / fan_in),
    "zeros": lambda fan_in, fan_out: 0.0,
}


def init_params(
    architecture: Architecture,
    rng: np.random.Generator,
    rule: str = DEFAULT_INIT_RULE,
) -> NetworkParams:
    """Uniform weights on [-s, s] with s set by the rule; zero biases."""
    try:
        scale_fn = INIT_RULES[rule]
    except KeyError:
        raise ValidationError(f"Unknown init rule '{rule}'") from None

    dims = architecture.layer_dims()
    layers = []
    for i, (fan_in, fan_out) in enumerate(dims):
        scale = scale_fn(fan_in, fan_out)
        weights = rng.uniform(-scale, scale, size=(fan_out, fan_in)) if scale > 0 else np.zeros((fan_out, fan_in))
        activation = architecture.output_activation if i == len(dims) - 1 else architecture.activation
        layers.append(LayerSpec(weights, np.zeros(fan_out), activation))
    return NetworkParams(tuple(layers))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def forward(params: NetworkParams, x: np.ndarray) -> tuple[float, LayerState]:
    """Evaluate the network at a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != params.n_inputs:
        raise DimensionMismatchError(
            f"input of shape {x.shape} does not match in_dim {params.n_inputs}", layer=1
        )
    state = LayerState(inputs=x)
    a = x
    for layer in params.layers:
        z = layer.weights @ a + layer.bias
        a = get_activation(layer.activation).f(z)
        state.pre_activations.append(z)
        state.post_activations.append(a)
    return float(a[0]), state


def forward_batch(params: NetworkParams, X: np.ndarray) -> tuple[np.ndarray, LayerState]:
    """Evaluate the network on the rows of X (n x K); returns predictions of length n."""
    X = _as_design(X, params.n_inputs)
    zs, activations = _propagate(
        [l.weights for l in params.layers],
        [l.bias for l in params.layers],
        [get_activation(l.activation) for l in params.layers],
        X,
    )
    state = LayerState(inputs=X, pre_activations=zs, post_activations=activations[1:])
    return activations[-1][:, 0].copy(), state


def predict(params: NetworkParams, X: np.ndarray) -> np.ndarray:
    return forward_batch(params, X)[0]


def _as_design(X: np.ndarray, n_inputs: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != n_inputs:
        raise DimensionMismatchError(
            f"inputs of shape {X.shape} do not match in_dim {n_inputs}", layer=1
        )
    return X


def _propagate(weights, biases, activations, X):
    zs = []
    outputs = [X]
    a = X
    for W, b, act in zip(weights, biases, activations):
        z = a @ W.T + b
        a = act.f(z)
        zs.append(z)
        outputs.append(a)
    return zs, outputs


# ---------------------------------------------------------------------------
# Objective and gradients
# ---------------------------------------------------------------------------


def _penalty(weights, biases, l1: float, l2: float, penalize_bias: bool) -> float:
    total = 0.0
    tensors = list(weights) + (list(biases) if penalize_bias else [])
    for T in tensors:
        if l1:
            total += l1 * float(np.abs(T).sum())
        if l2:
            total += l2 * float((T * T).sum())
    return total


def _check_targets(X: np.ndarray, y, weights) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatchError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != y.shape[0]:
            raise DimensionMismatchError(f"{y.shape[0]} targets but {w.shape[0]} loss weights")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValidationError("loss weights must be finite and strictly positive")
    return y, w


def objective(
    params: NetworkParams,
    X: np.ndarray,
    y: np.ndarray,
    weights: Optional[np.ndarray] = None,
    l1_lambda: float = 0.0,
    l2_lambda: float = 0.0,
    penalize_bias: bool = False,
) -> float:
    """Weighted mean squared error plus the L1/L2 penalty."""
    X = _as_design(X, params.n_inputs)
    y, w = _check_targets(X, y, weights)
    y_hat = predict(params, X)
    mse = float(np.mean(w * (y - y_hat) ** 2))
    return mse + _penalty(
        [l.weights for l in params.layers],
        [l.bias for l in params.layers],
        l1_lambda,
        l2_lambda,
        penalize_bias,
    )


def _gradients(weights, biases, activations, X, y, w, l1, l2, penalize_bias):
    n = X.shape[0]
    zs, outputs = _propagate(weights, biases, activations, X)
    residual = outputs[-1][:, 0] - y
    delta = ((2.0 / n) * w * residual)[:, None] * activations[-1].df(zs[-1])

    grad_w = [None] * len(weights)
    grad_b = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        grad_w[l] = delta.T @ outputs[l]
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l]) * activations[l - 1].df(zs[l - 1])

    for l in range(len(weights)):
        if l1:
            grad_w[l] = grad_w[l] + l1 * np.sign(weights[l])
            if penalize_bias:
                grad_b[l] = grad_b[l] + l1 * np.sign(biases[l])
        if l2:
            grad_w[l] = grad_w[l] + 2.0 * l2 * weights[l]
            if penalize_bias:
                grad_b[l] = grad_b[l] + 2.0 * l2 * biases[l]
    return grad_w, grad_b


def _all_finite(arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def backprop(
    params: NetworkParams,
    X: np.ndarray,
    y: np.ndarray,
    weights: Optional[np.ndarray] = None,
    l1_lambda: float = 0.0,
    l2_lambda: float = 0.0,
    penalize_bias: bool = False,
) -> NetworkParams:
    """
    Exact gradient of the penalized weighted objective.

    Returns a NetworkParams of the same shapes holding dObjective/dW and
    dObjective/db. The L1 subgradient at exactly-zero weights is 0.
    """
    X = _as_design(X, params.n_inputs)
    y, w = _check_targets(X, y, weights)
    grad_w, grad_b = _gradients(
        [l.weights for l in params.layers],
        [l.bias for l in params.layers],
        [get_activation(l.activation) for l in params.layers],
        X, y, w, l1_lambda, l2_lambda, penalize_bias,
    )
    if not (_all_finite(grad_w) and _all_finite(grad_b)):
        raise TrainingDivergedError("non-finite gradient")
    return NetworkParams(tuple(
        LayerSpec(gw, gb, layer.activation)
        for gw, gb, layer in zip(grad_w, grad_b, params.layers)
    ))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(
    X: np.ndarray,
    y: np.ndarray,
    architecture: Architecture,
    config: TrainConfig = TrainConfig(),
    loss_weights: Optional[np.ndarray] = None,
    initial_params: Optional[NetworkParams] = None,
    stream_id: int = 0,
) -> TrainResult:
    """
    Fit a network by minibatch SGD.

    Args:
        X: inputs (n x K)
        y: targets (n)
        architecture: network shape; ignored when initial_params is given
        config: SGD hyperparameters and seed
        loss_weights: per-sample weights sigma_i^-2 (defaults to ones)
        initial_params: warm start instead of random initialization
        stream_id: RNG stream, so independent fits sharing a seed differ

    Returns:
        TrainResult with fitted params and the per-epoch objective

    Raises:
        TrainingDivergedError: if a gradient or the epoch loss is non-finite
    """
    X = _as_design(X, architecture.n_inputs if initial_params is None else initial_params.n_inputs)
    y, w = _check_targets(X, y, loss_weights)
    if X.shape[0] == 0:
        raise ValidationError("Training data is empty")

    rng = derive_rng(config.seed, stream_id)
    params = initial_params if initial_params is not None else init_params(
        architecture, rng, config.init_scale_rule
    )
    weights = [l.weights.copy() for l in params.layers]
    biases = [l.bias.copy() for l in params.layers]
    activations = [get_activation(l.activation) for l in params.layers]

    n = X.shape[0]
    batch_size = min(config.batch_size, n)
    lr = config.learning_rate
    trace = np.empty(config.epochs)
    last_finite = None

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        for batch, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            grad_w, grad_b = _gradients(
                weights, biases, activations, X[idx], y[idx], w[idx],
                config.l1_lambda, config.l2_lambda, config.penalize_bias,
            )
            if not (_all_finite(grad_w) and _all_finite(grad_b)):
                raise TrainingDivergedError(
                    "non-finite gradient", epoch=epoch, batch=batch, last_finite_epoch=last_finite
                )
            for l in range(len(weights)):
                weights[l] -= lr * grad_w[l]
                biases[l] -= lr * grad_b[l]

        _, outputs = _propagate(weights, biases, activations, X)
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(np.mean(w * (y - outputs[-1][:, 0]) ** 2)) + _penalty(
                weights, biases, config.l1_lambda, config.l2_lambda, config.penalize_bias
            )
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                "non-finite training loss", epoch=epoch, last_finite_epoch=last_finite
            )
        trace[epoch - 1] = loss
        last_finite = epoch
        if epoch % 100 == 0:
            logger.debug("epoch %d loss %.6g", epoch, loss)

    fitted = NetworkParams(tuple(
        LayerSpec(W, b, act.name) for W, b, act in zip(weights, biases, activations)
    ))
    logger.debug(
        "trained %s on %d samples: final loss %.6g", fitted.describe(), n, trace[-1]
    )
    return TrainResult(params=fitted, loss_trace=trace, config=config)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def to_text(params: NetworkParams) -> str:
    """Versioned JSON document; floats use shortest round-trip repr."""
    doc = {
        "format": SERIALIZATION_FORMAT,
        "version": SERIALIZATION_VERSION,
        "layers": [
            {
                "activation": layer.activation,
                "in_dim": layer.in_dim,
                "out_dim": layer.out_dim,
                "weights": layer.weights.ravel().tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in params.layers
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def from_text(text: str) -> NetworkParams:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"Network document is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ValidationError("Network document must be a JSON object")

    if doc.get("format") != SERIALIZATION_FORMAT:
        raise ValidationError(f"Not a network document (format={doc.get('format')!r})")
    if doc.get("version") != SERIALIZATION_VERSION:
        raise ValidationError(f"Unsupported network document version {doc.get('version')!r}")

    layers = []
    for i, entry in enumerate(doc.get("layers", []), 1):
        try:
            weights = np.array(entry["weights"], dtype=float).reshape(entry["out_dim"], entry["in_dim"])
            bias = np.array(entry["bias"], dtype=float)
            layers.append(LayerSpec(weights, bias, entry["activation"]))
        except (KeyError, ValueError, TypeError) as e:
            raise DimensionMismatchError(f"malformed layer entry: {e}", layer=i) from None
    return NetworkParams(tuple(layers))


def save_network(params: NetworkParams, path: str | Path) -> Path:
    path = Path(path)
    atomic_write_text(path, to_text(params))
    return path


def load_network(path: str | Path) -> NetworkParams:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Network file not found: {path}")
    return from_text(path.read_text(encoding="utf-8"))


def linear_network(weights: Sequence[float], bias: float = 0.0) -> NetworkParams:
    """Zero-hidden-layer network w.x + b."""
    return NetworkParams((LayerSpec(np.asarray(weights, dtype=float).reshape(1, -1), [bias], "identity"),))
