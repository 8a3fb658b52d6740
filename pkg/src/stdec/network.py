""" Dense feed-forward autoencoder with explicit forward and backward passes.

Only the fixed topology the clustering models need is supported: a chain of dense
layers, one of which is designated as the latent layer. Any loss attached to the
latent layer (clustering or spatial) is injected into the backward pass through
``latent_grad`` and summed with the gradient flowing back from the decoder.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Sequence

import numpy as np

from .errors import ConfigurationError, GradientCheckError

logger = logging.getLogger(__name__)

Activation = Literal["relu", "linear"]

HIDDEN_UNITS = (8, 8, 128, 4, 128, 8, 8)
""" Hidden widths of the seven-layer autoencoder; the 4-unit layer is the latent layer. """


@dataclass
class DenseLayer:
    """ Affine map followed by an activation and (training only) inverted dropout. """

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2:
            raise ConfigurationError("Layer weights should be a 2-dimensional matrix.")
        if self.bias.shape != (self.weights.shape[1],):
            raise ConfigurationError(
                f"Bias of shape {self.bias.shape} does not match {self.weights.shape[1]} outputs.")
        if self.activation not in ("relu", "linear"):
            raise ConfigurationError(f"Unknown activation {self.activation!r}.")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("Dropout rate should lie in [0, 1).")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def glorot(cls, in_dim: int, out_dim: int, rng: np.random.Generator,
               activation: Activation = "relu", dropout_rate: float = 0.0) -> "DenseLayer":
        """ Uniform Glorot initialisation, zero bias. """
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-limit, limit, (in_dim, out_dim)), np.zeros(out_dim),
                   activation, dropout_rate)


@dataclass
class Network:
    """ Ordered dense layers; ``layers[:latent_index + 1]`` is the encoder. """

    layers: list[DenseLayer]
    latent_index: int
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("A network needs at least one layer.")
        if not 0 <= self.latent_index < len(self.layers) - 1:
            raise ConfigurationError(
                f"Latent index {self.latent_index} is not an interior layer boundary.")
        for position, (before, after) in enumerate(zip(self.layers, self.layers[1:])):
            if before.out_dim != after.in_dim:
                raise ConfigurationError(
                    f"Layer {position} outputs {before.out_dim} values"
                    f" but layer {position + 1} expects {after.in_dim}.")
        self.rng = np.random.default_rng([self.rng_seed, 1])

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def latent_dim(self) -> int:
        return self.layers[self.latent_index].out_dim

    def parameters(self) -> list[np.ndarray]:
        """ The live parameter arrays, ``[W0, b0, W1, b1, ...]``. """
        result = []
        for layer in self.layers:
            result.extend((layer.weights, layer.bias))
        return result

    def set_parameters(self, values: Sequence[np.ndarray]) -> None:
        if len(values) != 2 * len(self.layers):
            raise ConfigurationError("Parameter list does not match the network layers.")
        for layer, weights, bias in zip(self.layers, values[::2], values[1::2]):
            if weights.shape != layer.weights.shape or bias.shape != layer.bias.shape:
                raise ConfigurationError("Parameter shapes do not match the network layers.")
            layer.weights, layer.bias = np.array(weights, dtype=float), np.array(bias, dtype=float)


def build_network(input_dim: int, output_dim: int,
                  hidden_units: Sequence[int] = HIDDEN_UNITS,
                  latent_position: int | None = None,
                  dropout_rate: float = 0.2,
                  seed: int = 0,
                  latent_activation: Activation = "linear",
                  latent_dropout_rate: float = 0.0) -> Network:
    """ Build the autoencoder used by every clustering variant.

    Parameters
    ----------
    input_dim: int
        Width of the encoder input (window length times features, plus the one-hot location).
    output_dim: int
        Width of the reconstruction (window length times features).
    hidden_units: sequence of int
        Hidden layer widths.
    latent_position: int, optional
        Index of the latent layer within ``hidden_units``. Defaults to the narrowest layer.
    dropout_rate: float
        Dropout applied after every hidden layer except the latent one.
    seed: int
        Seeds the weight initialisation and the dropout masks.
    latent_activation: str
        Activation of the latent layer; the other hidden layers use ReLU and the
        output layer is linear.
    latent_dropout_rate: float
        Dropout applied after the latent layer. ``latent_activation="relu"`` with
        ``latent_dropout_rate=dropout_rate`` gives seven identical ReLU hidden layers.
    """
    if not hidden_units:
        raise ConfigurationError("The autoencoder needs at least one hidden layer.")
    if latent_position is None:
        latent_position = int(np.argmin(hidden_units))
    if not 0 <= latent_position < len(hidden_units):
        raise ConfigurationError(f"Latent position {latent_position} is outside the hidden layers.")
    rng = np.random.default_rng([seed, 0])
    sizes = [input_dim, *hidden_units]
    layers = []
    for position, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        latent = position == latent_position
        layers.append(DenseLayer.glorot(
            fan_in, fan_out, rng,
            activation=latent_activation if latent else "relu",
            dropout_rate=latent_dropout_rate if latent else dropout_rate))
    layers.append(DenseLayer.glorot(hidden_units[-1], output_dim, rng, activation="linear"))
    return Network(layers, latent_position, seed)


@dataclass
class LayerCache:
    inputs: np.ndarray
    pre_activation: np.ndarray
    mask: np.ndarray | None = None


def forward(net: Network, inputs: np.ndarray, training: bool = False
            ) -> tuple[np.ndarray, np.ndarray, list[LayerCache]]:
    """ Run the network on a batch of rows.

    Returns the latent activation, the final output and the per-layer cache needed by
    :func:`backward`. Dropout masks are drawn from ``net.rng`` only when ``training``.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != net.input_dim:
        raise ConfigurationError(
            f"Expected input rows of width {net.input_dim}, got shape {inputs.shape}.")
    cache = []
    activation = inputs
    latent = inputs
    for index, layer in enumerate(net.layers):
        pre_activation = activation @ layer.weights + layer.bias
        output = np.maximum(pre_activation, 0.0) if layer.activation == "relu" else pre_activation
        mask = None
        if training and layer.dropout_rate > 0.0:
            keep = 1.0 - layer.dropout_rate
            mask = (net.rng.random(output.shape) < keep) / keep
            output = output * mask
        cache.append(LayerCache(activation, pre_activation, mask))
        activation = output
        if index == net.latent_index:
            latent = output
    return latent, activation, cache


def backward(net: Network, cache: list[LayerCache], output_grad: np.ndarray,
             latent_grad: np.ndarray | None = None) -> list[np.ndarray]:
    """ Gradients of a loss with respect to every parameter, aligned with ``net.parameters()``.

    ``output_grad`` is dL/d(output) and ``latent_grad`` is dL/d(latent) from losses
    attached to the latent layer; ``None`` means no such loss.
    """
    if len(cache) != len(net.layers):
        raise ConfigurationError("Cache does not belong to this network.")
    output_shape = cache[-1].pre_activation.shape
    if np.shape(output_grad) != output_shape:
        raise ConfigurationError(
            f"Output gradient of shape {np.shape(output_grad)} does not match {output_shape}.")
    latent_shape = cache[net.latent_index].pre_activation.shape
    if latent_grad is not None and np.shape(latent_grad) != latent_shape:
        raise ConfigurationError(
            f"Latent gradient of shape {np.shape(latent_grad)} does not match {latent_shape}.")

    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    grad = np.asarray(output_grad, dtype=float)
    for index in reversed(range(len(net.layers))):
        layer, entry = net.layers[index], cache[index]
        if index == net.latent_index and latent_grad is not None:
            grad = grad + latent_grad
        if entry.mask is not None:
            grad = grad * entry.mask
        if layer.activation == "relu":
            grad = grad * (entry.pre_activation > 0.0)
        grads[2 * index] = entry.inputs.T @ grad
        grads[2 * index + 1] = grad.sum(axis=0)
        grad = grad @ layer.weights.T
    return grads


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0


def adam_step(state: AdamState, params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """ One bias-corrected Adam update; returns new parameter arrays and advances ``state``. """
    if len(params) != len(grads):
        raise ConfigurationError("Every parameter needs exactly one gradient.")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(param, dtype=float) for param in params]
        state.second_moment = [np.zeros_like(param, dtype=float) for param in params]
    if len(state.first_moment) != len(params):
        raise ConfigurationError("Adam accumulators were built for a different parameter list.")
    for param, grad, moment in zip(params, grads, state.first_moment):
        if np.shape(param) != np.shape(grad) or np.shape(param) != moment.shape:
            raise ConfigurationError(
                f"Parameter shape {np.shape(param)} does not match gradient {np.shape(grad)}.")

    state.step_count += 1
    first_correction = 1.0 - state.beta1 ** state.step_count
    second_correction = 1.0 - state.beta2 ** state.step_count
    updated = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        first = state.beta1 * state.first_moment[index] + (1.0 - state.beta1) * grad
        second = state.beta2 * state.second_moment[index] + (1.0 - state.beta2) * grad * grad
        state.first_moment[index], state.second_moment[index] = first, second
        step = state.learning_rate * (first / first_correction) / (
            np.sqrt(second / second_correction) + state.epsilon)
        updated.append(param - step)
    return updated


LossFunction = Callable[[Network, np.ndarray], tuple[float, list[np.ndarray]]]


@dataclass
class GradientReport:
    max_rel_err: float
    passed: bool
    checked: int


def finite_diff_check(net: Network, loss_fn: LossFunction, inputs: np.ndarray,
                      tolerance: float = 1e-4,
                      extra_params: Sequence[np.ndarray] = ()) -> GradientReport:
    """ Compare analytic gradients to central finite differences.

    ``loss_fn(net, inputs)`` returns the loss and its gradients, aligned with
    ``net.parameters()`` followed by ``extra_params`` (e.g. cluster centroids). Each
    parameter is perturbed in place by ``h = 1e-5 * max(1, |value|)``.
    """
    params = [*net.parameters(), *extra_params]
    loss, analytic = loss_fn(net, inputs)
    repeated, _ = loss_fn(net, inputs)
    if loss != repeated:
        raise GradientCheckError("The loss is not deterministic; disable dropout before checking.")
    if len(analytic) != len(params):
        raise ConfigurationError(
            f"Loss returned {len(analytic)} gradients for {len(params)} parameters.")

    worst = 0.0
    checked = 0
    for param, grad in zip(params, analytic):
        grad = np.asarray(grad, dtype=float)
        for index in np.ndindex(param.shape):
            original = param[index]
            step = 1e-5 * max(1.0, abs(original))
            param[index] = original + step
            plus, _ = loss_fn(net, inputs)
            param[index] = original - step
            minus, _ = loss_fn(net, inputs)
            param[index] = original
            numeric = (plus - minus) / (2.0 * step)
            scale = max(abs(numeric), abs(grad[index]), 1e-6)
            worst = max(worst, abs(numeric - grad[index]) / scale)
            checked += 1
    logger.debug("Finite-difference check over %d parameters: max relative error %.3g",
                 checked, worst)
    return GradientReport(worst, worst < tolerance, checked)


def network_header(net: Network) -> dict[str, Any]:
    return {
        "layers": [{"in_dim": layer.in_dim, "out_dim": layer.out_dim,
                    "activation": layer.activation, "dropout_rate": layer.dropout_rate}
                   for layer in net.layers],
        "latent_index": net.latent_index,
        "rng_seed": net.rng_seed,
    }


@dataclass
class Checkpoint:
    network: Network | None
    arrays: dict[str, np.ndarray]
    metadata: dict[str, Any]


def save_checkpoint(path: str | Path, net: Network | None,
                    arrays: dict[str, np.ndarray] | None = None,
                    metadata: dict[str, Any] | None = None) -> Path:
    """ Write parameters, extra arrays and a JSON header into one ``.npz`` file. """
    path = Path(path)
    header = {"network": network_header(net) if net is not None else None,
              "metadata": metadata or {}}
    payload = dict(arrays or {})
    if net is not None:
        for index, layer in enumerate(net.layers):
            payload[f"layer{index}_weights"] = layer.weights
            payload[f"layer{index}_bias"] = layer.bias
    with open(path, "wb") as checkpoint_file:
        np.savez(checkpoint_file, header=np.array(json.dumps(header)), **payload)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as stored:
        header = json.loads(str(stored["header"]))
        arrays = {name: stored[name] for name in stored.files if name != "header"}
    net = None
    if header["network"] is not None:
        layers = []
        for index, spec in enumerate(header["network"]["layers"]):
            layers.append(DenseLayer(arrays.pop(f"layer{index}_weights"),
                                     arrays.pop(f"layer{index}_bias"),
                                     spec["activation"], spec["dropout_rate"]))
        net = Network(layers, header["network"]["latent_index"], header["network"]["rng_seed"])
    return Checkpoint(net, arrays, header["metadata"])
