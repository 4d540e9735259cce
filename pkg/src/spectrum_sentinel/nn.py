"""Minimal differentiable layer kit: 3x3 convolutions, factor-2 pooling and
upsampling, dense layers, tanh/softmax/linear activations, MSE and
cross-entropy losses, and the Adam optimizer.

Shapes are channels-last: image activations are (batch, rows, cols, channels),
dense activations are (batch, width). Parameters and activations are float32
by default; loss reductions always accumulate in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument, InvalidState, NumericError

ACTIVATIONS = ("tanh", "softmax", "linear")


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv3x3:
    """Same-padding 3x3 convolution, stride 1, fixed kernel size."""
    filters: int
    activation: str = "tanh"


@dataclass(frozen=True)
class MaxPool2:
    """Factor-2 max pooling. Each enabled axis is pooled by 2; an odd axis is
    padded with -inf to the next even length first (ceil semantics)."""
    pool_rows: bool = True
    pool_cols: bool = True


@dataclass(frozen=True)
class Upsample2:
    """Factor-2 nearest-neighbour upsampling on the enabled axes."""
    rows: bool = True
    cols: bool = True


@dataclass(frozen=True)
class Dense:
    """Fully connected layer; flattens any trailing input dimensions."""
    width: int
    activation: str = "linear"


@dataclass(frozen=True)
class Activation:
    """Standalone activation layer (for chains that need one without params)."""
    activation: str


@dataclass(frozen=True)
class Reshape:
    """Reshape per-sample activations to the given shape (batch preserved)."""
    shape: tuple[int, ...]


LayerSpec = Conv3x3 | MaxPool2 | Upsample2 | Dense | Activation | Reshape


def _check_activation(name: str) -> None:
    if name not in ACTIVATIONS:
        raise InvalidArgument(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Parameters and Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be > 0")
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise InvalidArgument("Adam betas must lie in (0, 1)")


class Params:
    """Ordered parameter tensors of one chain plus Adam moment accumulators."""

    def __init__(self, tensors: list[np.ndarray]):
        self.tensors = tensors
        self.m = [np.zeros_like(t) for t in tensors]
        self.v = [np.zeros_like(t) for t in tensors]
        self.step = 0

    def copy(self) -> "Params":
        out = Params([t.copy() for t in self.tensors])
        out.m = [t.copy() for t in self.m]
        out.v = [t.copy() for t in self.v]
        out.step = self.step
        return out

    def astype(self, dtype) -> "Params":
        out = Params([t.astype(dtype) for t in self.tensors])
        out.step = self.step
        return out


def adam_step(params: Params, grads: Sequence[np.ndarray], config: AdamConfig) -> Params:
    """One bias-corrected Adam update, in place. Returns the same object."""
    if len(grads) != len(params.tensors):
        raise InvalidArgument(
            f"expected {len(params.tensors)} gradient tensors, got {len(grads)}")
    for i, (t, g) in enumerate(zip(params.tensors, grads)):
        if g.shape != t.shape:
            raise InvalidArgument(f"gradient {i} shape {g.shape} != parameter shape {t.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {i}")
    params.step += 1
    t = params.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for theta, m, v, g in zip(params.tensors, params.m, params.v, grads):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(theta.dtype)
    return params


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------

def _pooled(n: int, enabled: bool) -> int:
    if not enabled or n <= 1:
        return n
    return (n + 1) // 2


def infer_shapes(layers: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-sample output shape after each layer, starting from input_shape."""
    shapes = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv3x3):
            if len(shape) != 3:
                raise InvalidArgument(f"layer {i} (Conv3x3) expects (rows, cols, ch), got {shape}")
            shape = (shape[0], shape[1], layer.filters)
        elif isinstance(layer, MaxPool2):
            if len(shape) != 3:
                raise InvalidArgument(f"layer {i} (MaxPool2) expects (rows, cols, ch), got {shape}")
            shape = (_pooled(shape[0], layer.pool_rows), _pooled(shape[1], layer.pool_cols), shape[2])
        elif isinstance(layer, Upsample2):
            if len(shape) != 3:
                raise InvalidArgument(f"layer {i} (Upsample2) expects (rows, cols, ch), got {shape}")
            shape = (shape[0] * (2 if layer.rows else 1), shape[1] * (2 if layer.cols else 1), shape[2])
        elif isinstance(layer, Dense):
            shape = (layer.width,)
        elif isinstance(layer, Activation):
            pass
        elif isinstance(layer, Reshape):
            if int(np.prod(shape)) != int(np.prod(layer.shape)):
                raise InvalidArgument(
                    f"layer {i} (Reshape) cannot map {shape} to {layer.shape}")
            shape = tuple(layer.shape)
        else:
            raise InvalidArgument(f"layer {i}: unknown layer spec {layer!r}")
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# Forward / backward primitives
# ---------------------------------------------------------------------------

def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, 9*C) patches for a same-padded 3x3 window."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1, :] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, h, w, 9 * c)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softmax":
        zs = z - z.max(axis=-1, keepdims=True)
        e = np.exp(zs)
        return e / e.sum(axis=-1, keepdims=True)
    return z


def _activate_backward(y: np.ndarray, g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return g * (1.0 - np.square(y))
    if kind == "softmax":
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return y * (g - dot)
    return g


class _Cache:
    __slots__ = ("chain", "per_layer", "x_shape", "dtype")

    def __init__(self, chain, per_layer, x_shape, dtype):
        self.chain = chain
        self.per_layer = per_layer
        self.x_shape = x_shape
        self.dtype = dtype


class Chain:
    """A sequential stack of layers with explicit parameter storage.

    The per-sample input shape is fixed at construction so dense widths and
    pooling parities are resolved once; forward() rejects inputs that do not
    match (naming the offending layer).
    """

    def __init__(self, layers: Sequence[LayerSpec], input_shape: tuple[int, ...]):
        for layer in layers:
            act = getattr(layer, "activation", None)
            if act is not None:
                _check_activation(act)
        self.layers = tuple(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = infer_shapes(layers, input_shape)
        self.output_shape = self.shapes[-1] if self.shapes else self.input_shape

    # -- parameters -------------------------------------------------------

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        prev = self.input_shape
        for layer, out in zip(self.layers, self.shapes):
            if isinstance(layer, Conv3x3):
                shapes.append((3, 3, prev[2], layer.filters))
                shapes.append((layer.filters,))
            elif isinstance(layer, Dense):
                shapes.append((int(np.prod(prev)), layer.width))
                shapes.append((layer.width,))
            prev = out
        return shapes

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> Params:
        """Uniform [-s, s] init with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
        tensors = []
        for shape in self.param_shapes():
            if len(shape) == 4:  # conv kernel
                fan_in = 9 * shape[2]
                fan_out = 9 * shape[3]
            elif len(shape) == 2:  # dense weight
                fan_in, fan_out = shape
            else:  # bias
                tensors.append(np.zeros(shape, dtype=dtype))
                continue
            s = np.sqrt(6.0 / (fan_in + fan_out))
            tensors.append(rng.uniform(-s, s, size=shape).astype(dtype))
        return Params(tensors)

    # -- forward ----------------------------------------------------------

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise InvalidArgument(
                f"layer 0 expects input of shape (batch,)+{self.input_shape}, got {x.shape}")
        per_layer = []
        pi = 0
        cur = x
        for layer in self.layers:
            if isinstance(layer, Conv3x3):
                w, b = params.tensors[pi], params.tensors[pi + 1]
                pi += 2
                col = _im2col3(cur)
                bsz, h, wd, k = col.shape
                z = col.reshape(-1, k) @ w.reshape(k, layer.filters)
                z = z.reshape(bsz, h, wd, layer.filters) + b
                y = _activate(z, layer.activation)
                per_layer.append(("conv", col, y, w, layer.activation))
                cur = y
            elif isinstance(layer, MaxPool2):
                y, idx, padded_shape, factors = _pool_forward(cur, layer.pool_rows, layer.pool_cols)
                per_layer.append(("pool", idx, padded_shape, factors, cur.shape))
                cur = y
            elif isinstance(layer, Upsample2):
                fr = 2 if layer.rows else 1
                fc = 2 if layer.cols else 1
                y = cur
                if fr == 2:
                    y = np.repeat(y, 2, axis=1)
                if fc == 2:
                    y = np.repeat(y, 2, axis=2)
                per_layer.append(("up", (fr, fc), cur.shape))
                cur = y
            elif isinstance(layer, Dense):
                w, b = params.tensors[pi], params.tensors[pi + 1]
                pi += 2
                flat = cur.reshape(cur.shape[0], -1)
                z = flat @ w + b
                y = _activate(z, layer.activation)
                per_layer.append(("dense", flat, y, w, layer.activation, cur.shape))
                cur = y
            elif isinstance(layer, Activation):
                y = _activate(cur, layer.activation)
                per_layer.append(("act", y, layer.activation))
                cur = y
            elif isinstance(layer, Reshape):
                per_layer.append(("reshape", cur.shape))
                cur = cur.reshape((cur.shape[0],) + layer.shape)
        return cur, _Cache(self, per_layer, x.shape, cur.dtype)

    # -- backward ---------------------------------------------------------

    def backward(self, cache: _Cache, output_gradient: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients for all parameters plus the gradient w.r.t. the chain input."""
        if cache.chain is not self:
            raise InvalidState("stale cache: produced by a different chain")
        if len(cache.per_layer) != len(self.layers):
            raise InvalidState("stale cache: layer record mismatch")
        grads: list[np.ndarray] = []
        g = output_gradient
        for layer, rec in zip(reversed(self.layers), reversed(cache.per_layer)):
            if isinstance(layer, Conv3x3):
                _, col, y, w, act = rec
                dz = _activate_backward(y, g, act)
                bsz, h, wd, k = col.shape
                dw = col.reshape(-1, k).T @ dz.reshape(-1, layer.filters)
                db = dz.sum(axis=(0, 1, 2))
                # input gradient: correlate dz with the flipped, transposed kernel
                w_flip = w[::-1, ::-1].transpose(0, 1, 3, 2)  # (3,3,Cout,Cin)
                col_g = _im2col3(dz)
                cin = w.shape[2]
                gx = col_g.reshape(-1, 9 * layer.filters) @ w_flip.reshape(9 * layer.filters, cin)
                g = gx.reshape(bsz, h, wd, cin)
                grads.append(db)
                grads.append(dw.reshape(w.shape))
            elif isinstance(layer, MaxPool2):
                _, idx, padded_shape, factors, in_shape = rec
                g = _pool_backward(g, idx, padded_shape, factors, in_shape)
            elif isinstance(layer, Upsample2):
                _, (fr, fc), in_shape = rec
                b, h, w_, c = in_shape
                g = g.reshape(b, h, fr, w_, fc, c).sum(axis=(2, 4))
            elif isinstance(layer, Dense):
                _, flat, y, w, act, in_shape = rec
                dz = _activate_backward(y, g, act)
                dw = flat.T @ dz
                db = dz.sum(axis=0)
                g = (dz @ w.T).reshape(in_shape)
                grads.append(db)
                grads.append(dw)
            elif isinstance(layer, Activation):
                _, y, act = rec
                g = _activate_backward(y, g, act)
            elif isinstance(layer, Reshape):
                _, in_shape = rec
                g = g.reshape(in_shape)
        grads.reverse()
        return grads, g


def _pool_forward(x: np.ndarray, pool_rows: bool, pool_cols: bool):
    b, h, w, c = x.shape
    fr = 2 if (pool_rows and h > 1) else 1
    fc = 2 if (pool_cols and w > 1) else 1
    hp = ((h + fr - 1) // fr) * fr
    wp = ((w + fc - 1) // fc) * fc
    if (hp, wp) != (h, w):
        fill = np.finfo(x.dtype).min if np.issubdtype(x.dtype, np.floating) else x.min()
        x = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)), constant_values=fill)
    h2, w2 = hp // fr, wp // fc
    v = x.reshape(b, h2, fr, w2, fc, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, fr * fc)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, idx, (b, hp, wp, c), (fr, fc)


def _pool_backward(g, idx, padded_shape, factors, in_shape):
    b, hp, wp, c = padded_shape
    fr, fc = factors
    h2, w2 = hp // fr, wp // fc
    buf = np.zeros((b, h2, w2, c, fr * fc), dtype=g.dtype)
    np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
    buf = buf.reshape(b, h2, w2, c, fr, fc).transpose(0, 1, 4, 2, 5, 3).reshape(b, hp, wp, c)
    _, h, w, _ = in_shape
    return buf[:, :h, :w, :]


# ---------------------------------------------------------------------------
# Losses (float64 accumulation)
# ---------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element; returns (loss, dL/dpred)."""
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(np.square(diff)))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype)


def cross_entropy_loss(probs: np.ndarray, onehot: np.ndarray, eps: float = 1e-12) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy over the batch; gradient w.r.t. probs."""
    if probs.shape != onehot.shape:
        raise InvalidArgument(f"probs shape {probs.shape} != target shape {onehot.shape}")
    p = np.clip(probs.astype(np.float64), eps, 1.0)
    loss = float(-np.sum(onehot * np.log(p)) / probs.shape[0])
    grad = (-(onehot / p) / probs.shape[0]).astype(probs.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# Parameter snapshots ("AAEP" container)
# ---------------------------------------------------------------------------

_MAGIC = b"AAEP"
_VERSION = 1


def save_tensors(path, tensors: Sequence[np.ndarray]) -> None:
    """Write tensors as: magic, u16 version, u32 count, then per tensor a
    u8 ndim + u32 dims header and a little-endian f32 payload."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<HI", _VERSION, len(tensors)))
        for t in tensors:
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_tensors(path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise InvalidArgument(f"bad parameter snapshot magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _VERSION:
        raise InvalidArgument(f"unsupported snapshot version {version}")
    off = 10
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out.append(arr.astype(np.float32))
    return out
