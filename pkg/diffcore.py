"""
Differentiation core for the RUL regression models.

Provides the fixed layer menu the four architectures need (dense, tanh /
sigmoid / ReLU, 1-D convolution, LSTM, GRU, bidirectional wrapper), each with
an explicit forward pass that returns a cache and a reverse-mode backward
pass that consumes it. Gradients are produced with respect to both the
parameters (training) and the input window (attacks).

Parameter traversal order: a ParameterSet is an insertion-ordered dict keyed
``"<layer>.<param>"``. Layers are visited in network order, parameters in the
order each layer declares them (W, U, b for recurrent cells), and every
array is walked in row-major order. ``flatten_parameters`` and the defense
weight grouping both rely on this order.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from exceptions import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

DTYPE = np.float64

Tensor = np.ndarray
ParameterSet = Dict[str, np.ndarray]
ParamLayout = List[Tuple[str, Tuple[int, ...], int]]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _subset(params: ParameterSet, prefix: str) -> ParameterSet:
    cut = len(prefix) + 1
    return {key[cut:]: value for key, value in params.items() if key.startswith(prefix + ".")}


def _prefixed(grads: ParameterSet, prefix: str) -> ParameterSet:
    return {f"{prefix}.{key}": value for key, value in grads.items()}


class Layer:
    """Base class for a differentiable layer."""

    def __init__(self, name: str):
        self.name = name

    def parameter_layout(self) -> ParamLayout:
        """Return (name, shape, fan_in) for every parameter, in traversal order."""
        return []

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        raise NotImplementedError

    def forward(self, params: ParameterSet, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, params: ParameterSet, cache: Any,
                 dout: np.ndarray) -> Tuple[np.ndarray, ParameterSet]:
        raise NotImplementedError


class Dense(Layer):
    """Affine map over the last axis of a (B, in) batch."""

    def __init__(self, name: str, in_features: int, out_features: int):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features

    def parameter_layout(self) -> ParamLayout:
        return [
            ("W", (self.in_features, self.out_features), self.in_features),
            ("b", (self.out_features,), self.in_features),
        ]

    def output_shape(self, input_shape):
        if input_shape != (self.in_features,):
            raise ConfigurationError(
                f"{self.name}: expected input {(self.in_features,)}, got {input_shape}"
            )
        return (self.out_features,)

    def forward(self, params, x):
        return x @ params["W"] + params["b"], x

    def backward(self, params, cache, dout):
        x = cache
        grads = {"W": x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ params["W"].T, grads


class Activation(Layer):
    """Elementwise tanh, sigmoid or ReLU."""

    KINDS = ("tanh", "sigmoid", "relu")

    def __init__(self, name: str, kind: str):
        super().__init__(name)
        if kind not in self.KINDS:
            raise ConfigurationError(f"unsupported activation '{kind}'")
        self.kind = kind

    def output_shape(self, input_shape):
        return input_shape

    def forward(self, params, x):
        if self.kind == "tanh":
            out = np.tanh(x)
            return out, out
        if self.kind == "sigmoid":
            out = _sigmoid(x)
            return out, out
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, params, cache, dout):
        if self.kind == "tanh":
            return dout * (1.0 - cache ** 2), {}
        if self.kind == "sigmoid":
            return dout * cache * (1.0 - cache), {}
        return np.where(cache, dout, 0.0), {}


class Conv1D(Layer):
    """Valid 1-D convolution over the time axis of a (B, T, C) batch."""

    def __init__(self, name: str, in_channels: int, filters: int, kernel_size: int):
        super().__init__(name)
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel_size

    def parameter_layout(self) -> ParamLayout:
        fan_in = self.kernel_size * self.in_channels
        return [
            ("W", (self.kernel_size, self.in_channels, self.filters), fan_in),
            ("b", (self.filters,), fan_in),
        ]

    def output_shape(self, input_shape):
        steps, channels = input_shape
        if channels != self.in_channels:
            raise ConfigurationError(
                f"{self.name}: expected {self.in_channels} channels, got {channels}"
            )
        if steps < self.kernel_size:
            raise ConfigurationError(
                f"{self.name}: sequence length {steps} shorter than kernel {self.kernel_size}"
            )
        return (steps - self.kernel_size + 1, self.filters)

    def forward(self, params, x):
        steps_out = x.shape[1] - self.kernel_size + 1
        out = np.broadcast_to(params["b"], (x.shape[0], steps_out, self.filters)).copy()
        for j in range(self.kernel_size):
            out += x[:, j:j + steps_out, :] @ params["W"][j]
        return out, x

    def backward(self, params, cache, dout):
        x = cache
        steps_out = dout.shape[1]
        dx = np.zeros_like(x)
        d_w = np.empty_like(params["W"])
        for j in range(self.kernel_size):
            d_w[j] = np.einsum("btc,btf->cf", x[:, j:j + steps_out, :], dout)
            dx[:, j:j + steps_out, :] += dout @ params["W"][j].T
        return dx, {"W": d_w, "b": dout.sum(axis=(0, 1))}


class Flatten(Layer):
    """Collapse (B, T, F) into (B, T*F)."""

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, dout):
        return dout.reshape(cache), {}


class Recurrent(Layer):
    """Shared shape handling for LSTM and GRU cells."""

    GATES = 1

    def __init__(self, name: str, input_size: int, hidden_size: int,
                 return_sequences: bool = False):
        super().__init__(name)
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.return_sequences = return_sequences

    def parameter_layout(self) -> ParamLayout:
        width = self.GATES * self.hidden_size
        return [
            ("W", (self.input_size, width), self.input_size),
            ("U", (self.hidden_size, width), self.hidden_size),
            ("b", (width,), self.input_size),
        ]

    def output_shape(self, input_shape):
        steps, features = input_shape
        if features != self.input_size:
            raise ConfigurationError(
                f"{self.name}: expected {self.input_size} features, got {features}"
            )
        if self.return_sequences:
            return (steps, self.hidden_size)
        return (self.hidden_size,)

    def _upstream(self, dout: np.ndarray, steps: int) -> np.ndarray:
        if self.return_sequences:
            return dout
        dhs = np.zeros((dout.shape[0], steps, self.hidden_size), dtype=DTYPE)
        dhs[:, -1, :] = dout
        return dhs


class LSTM(Recurrent):
    """LSTM with input, forget and output gates; gate order i, f, g, o."""

    GATES = 4

    def forward(self, params, x):
        batch, steps, _ = x.shape
        hidden = self.hidden_size
        w, u, b = params["W"], params["U"], params["b"]
        h = np.zeros((batch, hidden), dtype=DTYPE)
        c = np.zeros((batch, hidden), dtype=DTYPE)
        hs = np.empty((batch, steps, hidden), dtype=DTYPE)
        tape = []
        for t in range(steps):
            x_t = x[:, t, :]
            z = x_t @ w + h @ u + b
            i = _sigmoid(z[:, :hidden])
            f = _sigmoid(z[:, hidden:2 * hidden])
            g = np.tanh(z[:, 2 * hidden:3 * hidden])
            o = _sigmoid(z[:, 3 * hidden:])
            c_next = f * c + i * g
            tanh_c = np.tanh(c_next)
            tape.append((x_t, h, c, i, f, g, o, tanh_c))
            h, c = o * tanh_c, c_next
            hs[:, t, :] = h
        out = hs if self.return_sequences else h
        return out, (x.shape, tape)

    def backward(self, params, cache, dout):
        shape, tape = cache
        w, u = params["W"], params["U"]
        hidden = self.hidden_size
        dhs = self._upstream(dout, shape[1])
        dx = np.zeros(shape, dtype=DTYPE)
        d_w, d_u = np.zeros_like(w), np.zeros_like(u)
        d_b = np.zeros_like(params["b"])
        dh_next = np.zeros((shape[0], hidden), dtype=DTYPE)
        dc_next = np.zeros((shape[0], hidden), dtype=DTYPE)
        for t in reversed(range(shape[1])):
            x_t, h_prev, c_prev, i, f, g, o, tanh_c = tape[t]
            dh = dhs[:, t, :] + dh_next
            dc = dc_next + dh * o * (1.0 - tanh_c ** 2)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g ** 2),
                dh * tanh_c * o * (1.0 - o),
            ], axis=1)
            dc_next = dc * f
            d_w += x_t.T @ dz
            d_u += h_prev.T @ dz
            d_b += dz.sum(axis=0)
            dx[:, t, :] = dz @ w.T
            dh_next = dz @ u.T
        return dx, {"W": d_w, "U": d_u, "b": d_b}


class GRU(Recurrent):
    """GRU with update and reset gates; gate order z, r, n."""

    GATES = 3

    def forward(self, params, x):
        batch, steps, _ = x.shape
        hidden = self.hidden_size
        w, u, b = params["W"], params["U"], params["b"]
        u_zr, u_n = u[:, :2 * hidden], u[:, 2 * hidden:]
        h = np.zeros((batch, hidden), dtype=DTYPE)
        hs = np.empty((batch, steps, hidden), dtype=DTYPE)
        tape = []
        for t in range(steps):
            x_t = x[:, t, :]
            xw = x_t @ w + b
            hu = h @ u_zr
            z = _sigmoid(xw[:, :hidden] + hu[:, :hidden])
            r = _sigmoid(xw[:, hidden:2 * hidden] + hu[:, hidden:])
            rh = r * h
            n = np.tanh(xw[:, 2 * hidden:] + rh @ u_n)
            tape.append((x_t, h, z, r, n, rh))
            h = (1.0 - z) * n + z * h
            hs[:, t, :] = h
        out = hs if self.return_sequences else h
        return out, (x.shape, tape)

    def backward(self, params, cache, dout):
        shape, tape = cache
        w, u = params["W"], params["U"]
        hidden = self.hidden_size
        u_zr, u_n = u[:, :2 * hidden], u[:, 2 * hidden:]
        dhs = self._upstream(dout, shape[1])
        dx = np.zeros(shape, dtype=DTYPE)
        d_w, d_u = np.zeros_like(w), np.zeros_like(u)
        d_b = np.zeros_like(params["b"])
        dh_next = np.zeros((shape[0], hidden), dtype=DTYPE)
        for t in reversed(range(shape[1])):
            x_t, h_prev, z, r, n, rh = tape[t]
            dh = dhs[:, t, :] + dh_next
            dn_pre = dh * (1.0 - z) * (1.0 - n ** 2)
            dz_pre = dh * (h_prev - n) * z * (1.0 - z)
            drh = dn_pre @ u_n.T
            dr_pre = drh * h_prev * r * (1.0 - r)
            dzr = np.concatenate([dz_pre, dr_pre], axis=1)
            dgates = np.concatenate([dzr, dn_pre], axis=1)
            d_w += x_t.T @ dgates
            d_b += dgates.sum(axis=0)
            d_u[:, :2 * hidden] += h_prev.T @ dzr
            d_u[:, 2 * hidden:] += rh.T @ dn_pre
            dx[:, t, :] = dgates @ w.T
            dh_next = dh * z + drh * r + dzr @ u_zr.T
        return dx, {"W": d_w, "U": d_u, "b": d_b}


class Bidirectional(Layer):
    """Run a recurrent cell forward and over the reversed sequence, concatenating outputs."""

    def __init__(self, name: str, forward_cell: Recurrent, backward_cell: Recurrent):
        super().__init__(name)
        self.cells = {"fw": forward_cell, "bw": backward_cell}
        self.return_sequences = forward_cell.return_sequences

    def parameter_layout(self) -> ParamLayout:
        return [
            (f"{tag}.{pname}", shape, fan_in)
            for tag, cell in self.cells.items()
            for pname, shape, fan_in in cell.parameter_layout()
        ]

    def output_shape(self, input_shape):
        shape = self.cells["fw"].output_shape(input_shape)
        return shape[:-1] + (2 * shape[-1],)

    def forward(self, params, x):
        out_f, cache_f = self.cells["fw"].forward(_subset(params, "fw"), x)
        out_b, cache_b = self.cells["bw"].forward(_subset(params, "bw"), x[:, ::-1, :])
        if self.return_sequences:
            out_b = out_b[:, ::-1, :]
        return np.concatenate([out_f, out_b], axis=-1), (cache_f, cache_b)

    def backward(self, params, cache, dout):
        cache_f, cache_b = cache
        hidden = dout.shape[-1] // 2
        dout_f, dout_b = dout[..., :hidden], dout[..., hidden:]
        if self.return_sequences:
            dout_b = dout_b[:, ::-1, :]
        dx_f, grads_f = self.cells["fw"].backward(_subset(params, "fw"), cache_f, dout_f)
        dx_b, grads_b = self.cells["bw"].backward(_subset(params, "bw"), cache_b, dout_b)
        grads = {**_prefixed(grads_f, "fw"), **_prefixed(grads_b, "bw")}
        return dx_f + dx_b[:, ::-1, :], grads


class Network:
    """Sequential stack of layers ending in a single-unit regression head."""

    def __init__(self, layers: Sequence[Layer], input_shape: Tuple[int, int]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape: Tuple[int, ...] = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (1,):
            raise ConfigurationError(f"network must end in a scalar head, got output {shape}")

    def parameter_layout(self) -> ParamLayout:
        return [
            (f"{layer.name}.{pname}", shape, fan_in)
            for layer in self.layers
            for pname, shape, fan_in in layer.parameter_layout()
        ]

    def init_parameters(self, seed: int) -> ParameterSet:
        """Uniform init in [-s, s] with s = 1/sqrt(fan_in), drawn in traversal order."""
        rng = np.random.default_rng(seed)
        params: ParameterSet = {}
        for name, shape, fan_in in self.parameter_layout():
            scale = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-scale, scale, size=shape).astype(DTYPE)
        return params

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 3 or tuple(x.shape[1:]) != self.input_shape:
            raise ConfigurationError(
                f"input shape {tuple(x.shape)} does not match model window {self.input_shape}"
            )

    def forward(self, params: ParameterSet, x: np.ndarray) -> Tuple[np.ndarray, List[Any]]:
        caches = []
        out = x
        for layer in self.layers:
            out, cache = layer.forward(_subset(params, layer.name), out)
            caches.append(cache)
        return out[:, 0], caches

    def backward(self, params: ParameterSet, caches: List[Any],
                 dpred: np.ndarray) -> Tuple[np.ndarray, ParameterSet]:
        grads: ParameterSet = {}
        delta = dpred[:, None]
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            delta, layer_grads = layer.backward(_subset(params, layer.name), cache, delta)
            grads.update(_prefixed(layer_grads, layer.name))
        ordered = {name: grads[name] for name in params}
        return delta, ordered


class Differentiable(Protocol):
    """Anything carrying a network and its parameters (models.RegressionModel)."""

    network: Network
    params: ParameterSet


@dataclass
class GradientBundle:
    """Loss gradients with respect to the input window and every parameter."""
    input_grad: np.ndarray
    param_grads: ParameterSet


def _as_batch(model: Differentiable, window: np.ndarray) -> np.ndarray:
    x = np.asarray(window, dtype=DTYPE)
    if x.ndim == 2:
        x = x[None, ...]
    model.network.check_input(x)
    return x


def forward(model: Differentiable, window: np.ndarray) -> float:
    """Predict the RUL of a single T×N window."""
    prediction, _ = model.network.forward(model.params, _as_batch(model, window))
    return float(prediction[0])


def forward_batch(model: Differentiable, windows: np.ndarray) -> np.ndarray:
    """Predict a (B, T, N) batch; returns a (B,) array."""
    x = np.asarray(windows, dtype=DTYPE)
    model.network.check_input(x)
    prediction, _ = model.network.forward(model.params, x)
    return prediction


def mse_loss(predictions: Sequence[float], labels: Sequence[float]) -> float:
    """Mean of squared differences."""
    predictions = np.asarray(predictions, dtype=DTYPE).ravel()
    labels = np.asarray(labels, dtype=DTYPE).ravel()
    if predictions.size == 0 or predictions.size != labels.size:
        raise UsageError(
            f"mse_loss needs equal nonzero lengths, got {predictions.size} and {labels.size}"
        )
    return float(np.mean((predictions - labels) ** 2))


def batch_gradients(model: Differentiable, windows: np.ndarray,
                    labels: np.ndarray) -> Tuple[float, GradientBundle]:
    """Mean MSE over a batch and its gradients."""
    x = np.asarray(windows, dtype=DTYPE)
    model.network.check_input(x)
    labels = np.asarray(labels, dtype=DTYPE)
    prediction, caches = model.network.forward(model.params, x)
    residual = prediction - labels
    dpred = 2.0 * residual / residual.size
    dx, grads = model.network.backward(model.params, caches, dpred)
    return float(np.mean(residual ** 2)), GradientBundle(dx, grads)


def input_gradients(model: Differentiable, windows: np.ndarray,
                    labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample squared-error losses and their gradients w.r.t. each window.

    The loss summed over the batch is differentiated, so row i of the result
    is exactly the gradient of sample i's own loss.
    """
    x = np.asarray(windows, dtype=DTYPE)
    model.network.check_input(x)
    prediction, caches = model.network.forward(model.params, x)
    residual = prediction - np.asarray(labels, dtype=DTYPE)
    dx, _ = model.network.backward(model.params, caches, 2.0 * residual)
    return residual ** 2, dx


def gradients(model: Differentiable, window: np.ndarray, label: float) -> GradientBundle:
    """Gradients of the single-pair MSE loss w.r.t. input and all parameters."""
    x = _as_batch(model, window)
    _, bundle = batch_gradients(model, x, np.array([label], dtype=DTYPE))
    return GradientBundle(bundle.input_grad[0], bundle.param_grads)


def _pair_loss(model: Differentiable, params: ParameterSet, x: np.ndarray, label: float) -> float:
    prediction, _ = model.network.forward(params, x)
    return float((prediction[0] - label) ** 2)


def finite_diff_check(model: Differentiable, window: np.ndarray, label: float,
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Covers every input coordinate and every parameter coordinate. The error of
    one coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if step <= 0:
        raise UsageError(f"finite difference step must be positive, got {step}")
    analytic = gradients(model, window, label)
    x = _as_batch(model, window).copy()
    params = {name: value.copy() for name, value in model.params.items()}
    worst = 0.0

    def record(numeric: float, exact: float) -> None:
        nonlocal worst
        worst = max(worst, abs(exact - numeric) / max(1.0, abs(numeric)))

    flat_x = x.reshape(-1)
    flat_grad = analytic.input_grad.reshape(-1)
    for k in range(flat_x.size):
        original = flat_x[k]
        flat_x[k] = original + step
        upper = _pair_loss(model, params, x, label)
        flat_x[k] = original - step
        lower = _pair_loss(model, params, x, label)
        flat_x[k] = original
        record((upper - lower) / (2 * step), flat_grad[k])

    for name, array in params.items():
        flat = array.reshape(-1)
        exact = analytic.param_grads[name].reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            upper = _pair_loss(model, params, x, label)
            flat[k] = original - step
            lower = _pair_loss(model, params, x, label)
            flat[k] = original
            record((upper - lower) / (2 * step), exact[k])

    logger.debug(f"finite difference check: max relative error {worst:.3e}")
    return worst


def _check_update(params: ParameterSet, grads: ParameterSet, lr: float) -> None:
    if lr <= 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    for name, value in params.items():
        if name not in grads or grads[name].shape != value.shape:
            raise UsageError(f"gradient for '{name}' missing or mis-shaped")


def sgd_update(params: ParameterSet, grads: ParameterSet, lr: float) -> ParameterSet:
    """Descent step: each parameter moves by -lr * grad. Returns a new ParameterSet."""
    _check_update(params, grads, lr)
    return {name: value - lr * grads[name] for name, value in params.items()}


class AdamState:
    """First and second moment estimates for adam_update."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: ParameterSet = {}
        self.v: ParameterSet = {}


def adam_update(params: ParameterSet, grads: ParameterSet, lr: float,
                state: AdamState) -> ParameterSet:
    """Adaptive-moment descent step; same contract as sgd_update, state advanced in place."""
    _check_update(params, grads, lr)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    updated = {}
    for name, value in params.items():
        g = grads[name]
        m = state.beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


class Optimizer:
    """Applies sgd_update or adam_update with a fixed learning rate."""

    KINDS = ("sgd", "adam")

    def __init__(self, kind: str, learning_rate: float):
        if kind not in self.KINDS:
            raise ConfigurationError(f"unsupported optimizer '{kind}' (choose from {self.KINDS})")
        self.kind = kind
        self.learning_rate = learning_rate
        self.state: Optional[AdamState] = AdamState() if kind == "adam" else None

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        if self.state is None:
            return sgd_update(params, grads, self.learning_rate)
        return adam_update(params, grads, self.learning_rate, self.state)


def flatten_parameters(params: ParameterSet) -> np.ndarray:
    """Concatenate all parameters in the documented traversal order."""
    if not params:
        return np.zeros(0, dtype=DTYPE)
    return np.concatenate([value.reshape(-1) for value in params.values()])


def copy_parameters(params: ParameterSet) -> ParameterSet:
    return {name: value.copy() for name, value in params.items()}


def all_finite(values: Dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(value)) for value in values.values())
