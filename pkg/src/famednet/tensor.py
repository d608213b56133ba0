"""Dense NCHW tensor ops with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.
Every layer caches what its backward pass needs during ``forward`` and
returns the input gradient from ``backward``; parameter gradients are
accumulated into the owning :class:`Param`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse

from . import kernels

DTYPE = np.float32


class ShapeError(ValueError):
    pass


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D (n, c, h, w) array, got {getattr(x, 'shape', type(x))}")
    return x


@dataclass
class Param:
    """A named parameter array with its gradient buffer."""

    value: np.ndarray
    learnable: bool = True
    decay: bool = False
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.learnable:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    @property
    def size(self) -> int:
        return int(self.value.size)


class Layer:
    def params(self) -> dict[str, Param]:
        return {}

    def release(self):
        """Drop whatever forward cached for the backward pass."""


# ---------------------------------------------------------------- conv 1x1


def conv1x1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    check_tensor(x)
    n, ci, h, w = x.shape
    if weight.ndim != 2 or weight.shape[1] != ci:
        raise ShapeError(
            f"conv1x1: weight shape {weight.shape} does not accept {ci} input channels"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv1x1: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = np.matmul(weight, x.reshape(n, ci, h * w))
    out += bias[:, None]
    return out.reshape(n, weight.shape[0], h, w)


def conv1x1_backward(dout, x, weight):
    """Return (dx, dweight, dbias)."""
    n, ci, h, w = x.shape
    co = weight.shape[0]
    d3 = dout.reshape(n, co, h * w)
    x3 = x.reshape(n, ci, h * w)
    dweight = np.matmul(d3, x3.transpose(0, 2, 1)).sum(axis=0)
    dbias = d3.sum(axis=(0, 2))
    dx = np.matmul(weight.T, d3).reshape(n, ci, h, w)
    return dx, dweight, dbias


class Conv1x1(Layer):
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Param(weight, decay=True)
        self.bias = Param(bias)
        self._x = None

    @property
    def in_channels(self):
        return self.weight.value.shape[1]

    @property
    def out_channels(self):
        return self.weight.value.shape[0]

    def forward(self, x, training=False):
        self._x = x
        return conv1x1(x, self.weight.value, self.bias.value)

    def backward(self, dout):
        dx, dw, db = conv1x1_backward(dout, self._x, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def release(self):
        self._x = None


class DenseConv1x1(Conv1x1):
    """Point-wise conv over a list of inputs, equivalent to a conv over their
    channel concatenation but without materializing it."""

    def _slices(self, inputs):
        sizes = [x.shape[1] for x in inputs]
        if sum(sizes) != self.in_channels:
            raise ShapeError(f"conv1x1: inputs carry {sum(sizes)} channels, weight expects {self.in_channels}")
        edges = np.concatenate([[0], np.cumsum(sizes)])
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]

    def forward(self, inputs, training=False):
        if isinstance(inputs, np.ndarray):
            inputs = [inputs]
        ref = inputs[0].shape
        for x in inputs:
            check_tensor(x)
            if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"conv1x1: input shape {x.shape} incompatible with {ref}")
        n, _, h, w = ref
        W = self.weight.value
        out = None
        for x, sl in zip(inputs, self._slices(inputs)):
            y = np.matmul(W[:, sl], x.reshape(n, x.shape[1], h * w))
            if out is None:
                out = y
            else:
                out += y
        out += self.bias.value[:, None]
        self._x = inputs
        return out.reshape(n, W.shape[0], h, w)

    def backward(self, dout):
        n, co, h, w = dout.shape
        d3 = dout.reshape(n, co, h * w)
        W = self.weight.value
        dxs = []
        for x, sl in zip(self._x, self._slices(self._x)):
            x3 = x.reshape(n, x.shape[1], h * w)
            self.weight.grad[:, sl] += np.matmul(d3, x3.transpose(0, 2, 1)).sum(axis=0)
            dxs.append(np.matmul(W[:, sl].T, d3).reshape(x.shape))
        self.bias.grad += d3.sum(axis=(0, 2))
        return dxs


# ---------------------------------------------------------------- conv 3x3


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1, zero-pad-1 3x3 convolution (cross-correlation)."""
    check_tensor(x)
    n, ci, h, w = x.shape
    if weight.shape[1:] != (ci, 3, 3):
        raise ShapeError(f"conv3x3: weight shape {weight.shape} does not accept {ci} input channels")
    co = weight.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, co, h * w), dtype=np.result_type(x, weight))
    for dy in range(3):
        for dx in range(3):
            patch = np.ascontiguousarray(xp[:, :, dy : dy + h, dx : dx + w]).reshape(n, ci, h * w)
            out += np.matmul(weight[:, :, dy, dx], patch)
    out += bias[:, None]
    return out.reshape(n, co, h, w)


def conv3x3_backward(dout, x, weight):
    n, ci, h, w = x.shape
    co = weight.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp)
    d3 = dout.reshape(n, co, h * w)
    dweight = np.zeros_like(weight)
    for dy in range(3):
        for dx in range(3):
            patch = np.ascontiguousarray(xp[:, :, dy : dy + h, dx : dx + w]).reshape(n, ci, h * w)
            dweight[:, :, dy, dx] = np.matmul(d3, patch.transpose(0, 2, 1)).sum(axis=0)
            dxp[:, :, dy : dy + h, dx : dx + w] += np.matmul(weight[:, :, dy, dx].T, d3).reshape(n, ci, h, w)
    return dxp[:, :, 1:-1, 1:-1], dweight, d3.sum(axis=(0, 2))


class Conv3x3(Conv1x1):
    def forward(self, x, training=False):
        self._x = x
        return conv3x3(x, self.weight.value, self.bias.value)

    def backward(self, dout):
        dx, dw, db = conv3x3_backward(dout, self._x, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum_bn: float = 0.1
    eps_bn: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=DTYPE) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self):
        return self.gamma.shape[0]


def batch_norm(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Return (out, cache). ``cache`` is None in eval mode."""
    check_tensor(x)
    c = x.shape[1]
    if c != state.channels:
        raise ShapeError(f"batch_norm: {c} channels but state holds {state.channels}")
    if mode == "eval":
        if state.running_mean is None or state.running_var is None:
            raise RuntimeError("batch_norm: running statistics are uninitialized; cannot run in eval mode")
        inv = (1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps_bn)).astype(x.dtype)
        scale = state.gamma * inv
        shift = state.beta - state.running_mean * scale
        return x * scale[None, :, None, None] + shift[None, :, None, None], None
    if mode != "train":
        raise ValueError(f"batch_norm: unknown mode {mode!r}")

    n, c, h, w = x.shape
    x3 = np.ascontiguousarray(x).reshape(n, c, h * w)
    mean, var = kernels.channel_moments(x3)
    inv_std = 1.0 / np.sqrt(var + state.eps_bn)
    scale = (state.gamma * inv_std).astype(x.dtype)
    shift = (state.beta - mean * state.gamma * inv_std).astype(x.dtype)
    out = kernels.affine(x3, scale, shift, np.empty_like(x3)).reshape(x.shape)

    m = state.momentum_bn
    if state.running_mean is None:
        state.running_mean = mean.astype(state.gamma.dtype)
        state.running_var = var.astype(state.gamma.dtype)
    else:
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var
    return out, (x3, mean, inv_std)


def batch_norm_backward(dout, cache, gamma):
    """Return (dx, dgamma, dbeta) for a train-mode batch norm."""
    x3, mean, inv_std = cache
    d3 = np.ascontiguousarray(dout).reshape(x3.shape)
    dx = np.empty_like(d3)
    dgamma, dbeta = kernels.bn_backward(d3, x3, mean, inv_std, gamma.astype(np.float64), dx)
    return dx.reshape(dout.shape), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


class BatchNorm(Layer):
    def __init__(self, state: BatchNormState):
        self.state = state
        self.gamma = Param(state.gamma)
        self.beta = Param(state.beta)
        self._cache = None
        self._eval = False

    def forward(self, x, training=False):
        out, self._cache = batch_norm(x, self.state, "train" if training else "eval")
        self._eval = not training
        if self._eval:
            self._cache = x
        return out

    def backward(self, dout):
        st = self.state
        if self._eval:
            inv = (1.0 / np.sqrt(st.running_var.astype(np.float64) + st.eps_bn)).astype(dout.dtype)
            xhat = (self._cache - st.running_mean[None, :, None, None]) * inv[None, :, None, None]
            self.gamma.grad += (dout * xhat).sum(axis=(0, 2, 3))
            self.beta.grad += dout.sum(axis=(0, 2, 3))
            return dout * (st.gamma * inv)[None, :, None, None]
        dx, dg, db = batch_norm_backward(dout, self._cache, st.gamma)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx

    def release(self):
        self._cache = None

    def params(self):
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mean": Param(self.state.running_mean, learnable=False),
            "running_var": Param(self.state.running_var, learnable=False),
        }


# ---------------------------------------------------------------- relu


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout, x):
    # Subgradient at exactly 0 is 0.
    return kernels.relu_mask_grad(np.ascontiguousarray(dout), np.ascontiguousarray(x), np.empty(dout.shape, dout.dtype))


class ReLU(Layer):
    def __init__(self):
        self._out = None

    def forward(self, x, training=False):
        self._out = relu(x)
        return self._out

    def backward(self, dout):
        return relu_backward(dout, self._out)

    def release(self):
        self._out = None


# ---------------------------------------------------------------- pooling


POOL_MODES = ("avg", "max")


def _check_pool_size(r: int, mode: str = "avg"):
    if mode not in POOL_MODES:
        raise ValueError(f"pool: unknown mode {mode!r}")
    if r < 1 or r % 2 == 0:
        raise ValueError(f"pool: window size must be a positive odd integer, got {r}")


def pool(x: np.ndarray, r: int, mode: str = "avg") -> np.ndarray:
    """Stride-1 ``r x r`` pooling that preserves spatial size.

    Average pooling divides by the number of in-bounds elements; max
    pooling ignores the padding.
    """
    out, _ = pool_forward(x, r, mode)
    return out


def pool_forward(x, r, mode="avg"):
    check_tensor(x)
    _check_pool_size(r, mode)
    if r == 1:
        return x.copy(), None
    n, c, h, w = x.shape
    x3 = np.ascontiguousarray(x).reshape(n * c, h, w)
    out = np.empty_like(x3)
    if mode == "avg":
        kernels.avg_pool(x3, r, out, False)
        return out.reshape(x.shape), None
    arg_w = np.empty(x3.shape, np.int8)
    arg_h = np.empty(x3.shape, np.int8)
    kernels.max_pool(x3, r, out, arg_w, arg_h)
    return out.reshape(x.shape), (arg_w, arg_h)


def pool_backward(dout, cache, r, mode="avg"):
    if r == 1:
        return dout.copy()
    n, c, h, w = dout.shape
    d3 = np.ascontiguousarray(dout).reshape(n * c, h, w)
    dx = np.empty_like(d3)
    if mode == "avg":
        kernels.avg_pool(d3, r, dx, True)
    else:
        kernels.max_pool_backward(d3, r, cache[0], cache[1], dx)
    return dx.reshape(dout.shape)


class Pool(Layer):
    def __init__(self, size: int, mode: str = "avg"):
        _check_pool_size(size, mode)
        self.size = size
        self.mode = mode
        self._cache = None

    def forward(self, x, training=False):
        out, self._cache = pool_forward(x, self.size, self.mode)
        return out

    def backward(self, dout):
        return pool_backward(dout, self._cache, self.size, self.mode)

    def release(self):
        self._cache = None


# ---------------------------------------------------------------- concat


def concat_channels(inputs: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Concatenate along channels; also return the split offsets."""
    if not inputs:
        raise ShapeError("concat_channels: need at least one input")
    ref = inputs[0].shape
    for t in inputs:
        check_tensor(t)
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    offsets = list(np.cumsum([t.shape[1] for t in inputs])[:-1])
    if len(inputs) == 1:
        return inputs[0], offsets
    return np.concatenate(inputs, axis=1), offsets


def split_channels(x: np.ndarray, offsets: list[int]) -> list[np.ndarray]:
    return np.split(x, offsets, axis=1)


# ---------------------------------------------------------------- bilinear resize


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> sparse.csr_matrix:
    """Sparse (n_out x n_in) linear-interpolation matrix, half-pixel centres, clamped."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"resize: sizes must be >= 1, got {n_in} -> {n_out}")
    if n_in == n_out:
        return sparse.identity(n_in, format="csr", dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.repeat(np.arange(n_out), 2)
    cols = np.stack([i0, i1], axis=1).ravel()
    vals = np.stack([1 - frac, frac], axis=1).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def _apply_along(x: np.ndarray, mat: sparse.csr_matrix, axis: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = mat.astype(x.dtype) @ flat
    out = np.asarray(out).reshape((mat.shape[0],) + moved.shape[1:])
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes (works for any ndim >= 2)."""
    h, w = x.shape[-2:]
    if (out_h, out_w) == (h, w):
        return x.copy()
    out = x
    if out_w != w:
        out = _apply_along(out, interp_matrix(w, out_w), x.ndim - 1)
    if out_h != h:
        out = _apply_along(out, interp_matrix(h, out_h), x.ndim - 2)
    return out


def bilinear_resize_backward(dout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    oh, ow = dout.shape[-2:]
    if (oh, ow) == (in_h, in_w):
        return dout.copy()
    d = dout
    if oh != in_h:
        d = _apply_along(d, interp_matrix(in_h, oh).T.tocsr(), d.ndim - 2)
    if ow != in_w:
        d = _apply_along(d, interp_matrix(in_w, ow).T.tocsr(), d.ndim - 1)
    return d


@dataclass
class Resize(Layer):
    out_h: int
    out_w: int
    _in_hw: tuple = field(default=(0, 0), repr=False)

    def forward(self, x, training=False):
        self._in_hw = x.shape[-2:]
        return bilinear_resize(x, self.out_h, self.out_w)

    def backward(self, dout):
        return bilinear_resize_backward(dout, *self._in_hw)
