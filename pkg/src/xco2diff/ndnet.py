"""Minimal dense/conv network substrate with hand-written backward rules.

Everything runs in 64-bit floats on plain numpy arrays.  Layers implement
explicit forward/backward pairs so every gradient can be checked against
central finite differences; no autodiff framework is involved anywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .util import read_f64, read_u32, write_f64, write_u32

CHECKPOINT_MAGIC = b"NDN1"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "identity", "softplus")


class LayerShapeError(ValueError):
    """Raised when consecutive layer shapes do not chain."""


class GradientError(FloatingPointError):
    """Raised when a non-finite gradient reaches the optimizer."""


class CheckpointError(ValueError):
    """Raised on malformed or corrupt checkpoint files."""


# ---------------------------------------------------------------------------
# Layer specs


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    activation: str = "relu"


@dataclass(frozen=True)
class Conv1d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    activation: str = "relu"


@dataclass(frozen=True)
class MaxPool1d:
    window: int


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv1d, MaxPool1d, Flatten]


@dataclass(frozen=True)
class NetworkSpec:
    """An input shape plus an ordered stack of layer specs.

    input_shape is (features,) for dense stacks or (channels, length) for
    conv stacks.  Shape chaining is validated eagerly at construction.
    """

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = [tuple(int(d) for d in self.input_shape)]
        for i, layer in enumerate(self.layers):
            shapes.append(_chain_shape(shapes[-1], layer, i))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]


def _chain_shape(shape: tuple[int, ...], layer: LayerSpec, index: int) -> tuple[int, ...]:
    def bad(expected: str):
        return LayerShapeError(
            f"layer {index} ({layer!r}): expected {expected}, got input shape {shape}"
        )

    if isinstance(layer, Dense):
        if layer.activation not in _ACTIVATIONS:
            raise LayerShapeError(f"layer {index}: unknown activation {layer.activation!r}")
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise bad(f"({layer.in_features},)")
        return (layer.out_features,)
    if isinstance(layer, Conv1d):
        if layer.activation not in _ACTIVATIONS:
            raise LayerShapeError(f"layer {index}: unknown activation {layer.activation!r}")
        if layer.kernel < 1 or layer.stride < 1:
            raise LayerShapeError(f"layer {index}: kernel and stride must be >= 1")
        if len(shape) != 2 or shape[0] != layer.in_channels:
            raise bad(f"({layer.in_channels}, length)")
        out_len = (shape[1] - layer.kernel) // layer.stride + 1
        if out_len < 1:
            raise bad(f"length >= kernel {layer.kernel}")
        return (layer.out_channels, out_len)
    if isinstance(layer, MaxPool1d):
        if len(shape) != 2:
            raise bad("(channels, length)")
        if layer.window < 1 or shape[1] % layer.window != 0:
            raise bad(f"length divisible by window {layer.window}")
        return (shape[0], shape[1] // layer.window)
    if isinstance(layer, Flatten):
        if len(shape) != 2:
            raise bad("(channels, length)")
        return (shape[0] * shape[1],)
    raise LayerShapeError(f"layer {index}: unknown layer spec {layer!r}")


# ---------------------------------------------------------------------------
# Activations


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    # softplus, overflow-safe
    return np.logaddexp(0.0, z)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(z)
    # d softplus / dz = sigmoid(z)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# Parameters

Params = list  # list[dict[str, np.ndarray]], one dict per layer ({} if none)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    params: Params = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            bound = np.sqrt(6.0 / (layer.in_features + layer.out_features))
            w = rng.uniform(-bound, bound, size=(layer.in_features, layer.out_features))
            params.append({"w": w, "b": np.zeros(layer.out_features)})
        elif isinstance(layer, Conv1d):
            fan_in = layer.in_channels * layer.kernel
            fan_out = layer.out_channels * layer.kernel
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(layer.out_channels, layer.in_channels, layer.kernel))
            params.append({"w": w, "b": np.zeros(layer.out_channels)})
        else:
            params.append({})
    return params


def copy_params(params: Params) -> Params:
    return [{k: v.copy() for k, v in layer.items()} for layer in params]


def num_params(params: Params) -> int:
    return sum(v.size for layer in params for v in layer.values())


def _check_params(spec: NetworkSpec, params: Params) -> None:
    if len(params) != len(spec.layers):
        raise LayerShapeError(
            f"params cover {len(params)} layers, spec has {len(spec.layers)}"
        )


# ---------------------------------------------------------------------------
# Forward / backward


def forward(spec: NetworkSpec, params: Params, x: np.ndarray) -> np.ndarray:
    y, _ = forward_cached(spec, params, x)
    return y


def forward_cached(spec: NetworkSpec, params: Params, x: np.ndarray):
    """Run the stack, returning the output and per-layer caches for backward.

    Accepts a single example shaped like spec.input_shape or a batch with a
    leading batch axis; the output keeps the same convention.
    """
    _check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(spec.input_shape)
    if single:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise LayerShapeError(
            f"input shape {x.shape[1:]} does not match spec input {spec.input_shape}"
        )
    caches = []
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, Dense):
            z = x @ p["w"] + p["b"]
            caches.append((x, z))
            x = _act(layer.activation, z)
        elif isinstance(layer, Conv1d):
            cols = _conv_cols(x, layer.kernel, layer.stride)
            z = np.einsum("bclk,ock->bol", cols, p["w"], optimize=True) + p["b"][:, None]
            caches.append((x, cols, z))
            x = _act(layer.activation, z)
        elif isinstance(layer, MaxPool1d):
            b, c, length = x.shape
            blocks = x.reshape(b, c, length // layer.window, layer.window)
            idx = blocks.argmax(axis=3)
            caches.append((x.shape, idx))
            x = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]
        else:  # Flatten
            caches.append((x.shape,))
            x = x.reshape(x.shape[0], -1)
    return (x[0] if single else x), caches


def _conv_cols(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (batch, channels, out_len, kernel) view of sliding windows
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)
    return windows[:, :, ::stride, :]


def backward(spec: NetworkSpec, params: Params, caches, grad_out: np.ndarray):
    """Chain-rule pass; returns (param_grads, grad_input).

    grad_out must carry the same leading-axis convention the forward output
    had.  Parameter gradients are summed over the batch axis.
    """
    _check_params(spec, params)
    g = np.asarray(grad_out, dtype=np.float64)
    single = g.ndim == len(spec.output_shape)
    if single:
        g = g[None]
    grads: Params = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p, cache = spec.layers[i], params[i], caches[i]
        if isinstance(layer, Dense):
            x, z = cache
            gz = g * _act_grad(layer.activation, z)
            grads[i] = {"w": x.T @ gz, "b": gz.sum(axis=0)}
            g = gz @ p["w"].T
        elif isinstance(layer, Conv1d):
            x, cols, z = cache
            gz = g * _act_grad(layer.activation, z)
            grads[i] = {
                "w": np.einsum("bol,bclk->ock", gz, cols, optimize=True),
                "b": gz.sum(axis=(0, 2)),
            }
            gx = np.zeros_like(x)
            out_len = gz.shape[2]
            for k in range(layer.kernel):
                span = k + layer.stride * out_len
                gx[:, :, k:span:layer.stride] += np.einsum(
                    "bol,oc->bcl", gz, p["w"][:, :, k], optimize=True
                )
            g = gx
        elif isinstance(layer, MaxPool1d):
            in_shape, idx = cache
            b, c, length = in_shape
            gx = np.zeros((b, c, length // layer.window, layer.window))
            np.put_along_axis(gx, idx[..., None], g[..., None], axis=3)
            g = gx.reshape(in_shape)
        else:  # Flatten
            (in_shape,) = cache
            grads[i] = {}
            g = g.reshape(in_shape)
        if grads[i] is None:
            grads[i] = {}
    return grads, (g[0] if single else g)


# ---------------------------------------------------------------------------
# Adam with bias correction


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = None
    v: Params = None


def init_adam(params: Params, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = lambda: [{k: np.zeros_like(v) for k, v in layer.items()} for layer in params]
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0, m=zeros(), v=zeros())


def adam_step(params: Params, grads: Params, state: AdamState) -> None:
    """One in-place Adam update.  Rejects non-finite gradients."""
    for layer in grads:
        for g in layer.values():
            if not np.all(np.isfinite(g)):
                raise GradientError("non-finite gradient passed to adam_step")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        for key in p:
            m[key] *= state.beta1
            m[key] += (1.0 - state.beta1) * g[key]
            v[key] *= state.beta2
            v[key] += (1.0 - state.beta2) * g[key] ** 2
            m_hat = m[key] / c1
            v_hat = v[key] / c2
            p[key] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Exponential moving average of parameters


@dataclass
class EMAState:
    decay: float
    shadow: Params


def init_ema(params: Params, decay: float = 0.999) -> EMAState:
    return EMAState(decay=decay, shadow=copy_params(params))


def ema_update(state: EMAState, params: Params) -> None:
    d = state.decay
    for s, p in zip(state.shadow, params):
        for key in s:
            s[key] *= d
            s[key] += (1.0 - d) * p[key]


# ---------------------------------------------------------------------------
# Checkpoint I/O (NDN1): bit-exact round trip of a parameter list.


def save_params(path, params: Params) -> None:
    for layer in params:
        for v in layer.values():
            if not np.all(np.isfinite(v)):
                raise CheckpointError("refusing to save non-finite parameters")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        write_u32(f, CHECKPOINT_VERSION, len(params))
        for layer in params:
            keys = sorted(layer)
            write_u32(f, len(keys))
            for key in keys:
                name = key.encode("ascii")
                write_u32(f, len(name))
                f.write(name)
                arr = layer[key]
                write_u32(f, arr.ndim, *arr.shape)
                write_f64(f, arr)


def load_params(path) -> Params:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a NDN1 checkpoint")
        version = read_u32(f)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        n_layers = read_u32(f)
        params: Params = []
        for _ in range(n_layers):
            n_tensors = read_u32(f)
            layer = {}
            for _ in range(n_tensors):
                name_len = read_u32(f)
                key = f.read(name_len).decode("ascii")
                ndim = read_u32(f)
                if ndim == 0:
                    shape: tuple[int, ...] = ()
                elif ndim == 1:
                    shape = (read_u32(f),)
                else:
                    shape = tuple(read_u32(f, ndim))
                count = int(np.prod(shape)) if shape else 1
                arr = read_f64(f, count).reshape(shape)
                if not np.all(np.isfinite(arr)):
                    raise CheckpointError(f"{path}: non-finite values in tensor {key!r}")
                layer[key] = arr
            params.append(layer)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return params
