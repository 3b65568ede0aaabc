"""Forward and backward kernels for the VGG layer stack.

Tensors are plain numpy arrays in NCHW order. Kernels keep the dtype of
their inputs, so float32 is used for training and float64 for gradient
checks. Every forward kernel that has a backward counterpart can return an
:class:`OpRecord` holding exactly what the backward pass needs; the generic
:func:`backward` dispatches on it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, InputError, StateError

Tensor = np.ndarray

FLOAT = np.float32
DOUBLE = np.float64


def tensor(values, dtype=FLOAT) -> Tensor:
    """Contiguous copy of ``values`` with the given float dtype."""
    return np.ascontiguousarray(np.asarray(values, dtype=dtype))


@dataclass(frozen=True)
class KernelParams:
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ConfigurationError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")

    def output_size(self, size: int) -> int:
        span = size + 2 * self.padding - self.kernel_size
        if span < 0:
            raise ConfigurationError(
                f"input extent {size} with padding {self.padding} is smaller than kernel {self.kernel_size}"
            )
        if span % self.stride:
            raise ConfigurationError(
                f"(size {size} + 2*{self.padding} - {self.kernel_size}) is not divisible by stride {self.stride}"
            )
        return span // self.stride + 1


CONV3 = KernelParams(3, 1, 1)
POOL2 = KernelParams(2, 2, 0)


@dataclass
class OpRecord:
    """What a forward kernel saved for its backward pass."""

    op: str
    saved: dict[str, Any] = field(default_factory=dict)


def _require_rank(x: Tensor, rank: int, what: str):
    if x.ndim != rank:
        raise DimensionError(f"{what} must have rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: Tensor, k: int, stride: int, out_h: int, out_w: int) -> Tensor:
    # xp: (C, Hp, Wp) already padded -> (C*k*k, out_h*out_w)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    c = xp.shape[0]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, out_h * out_w)


def _col2im(cols: Tensor, shape, k: int, stride: int, out_h: int, out_w: int) -> Tensor:
    # inverse scatter of _im2col into a padded (C, Hp, Wp) buffer, fixed loop order
    c, hp, wp = shape
    cols = cols.reshape(c, k, k, out_h, out_w)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[:, i, j]
    return out


def _conv_shapes(x: Tensor, w: Tensor, b: Tensor, params: KernelParams):
    _require_rank(x, 4, "conv2d input")
    _require_rank(w, 4, "conv2d weights")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel axis mismatch: input has {cin}, weights expect {wcin}")
    if kh != params.kernel_size or kw != params.kernel_size:
        raise DimensionError(
            f"conv2d kernel axes {kh}x{kw} do not match kernel_size {params.kernel_size}"
        )
    if b.shape != (cout,):
        raise DimensionError(f"conv2d bias axis must be ({cout},), got {b.shape}")
    return n, cin, h, wd, cout, params.output_size(h), params.output_size(wd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, params: KernelParams = CONV3, record: bool = False):
    """Cross-correlate ``x`` (N,Cin,H,W) with ``w`` (Cout,Cin,k,k) and add ``b``.

    Evaluated one sample at a time through an im2col matrix and a single
    GEMM, which keeps peak memory at one sample's column buffer.
    """
    n, cin, h, wd, cout, oh, ow = _conv_shapes(x, w, b, params)
    k, s, p = params.kernel_size, params.stride, params.padding
    wmat = w.reshape(cout, cin * k * k)
    out = np.empty((n, cout, oh, ow), dtype=np.result_type(x, w))
    for i in range(n):
        xp = np.pad(x[i], ((0, 0), (p, p), (p, p))) if p else x[i]
        cols = _im2col(xp, k, s, oh, ow)
        out[i] = (wmat @ cols).reshape(cout, oh, ow)
    out += b.reshape(1, cout, 1, 1)
    if record:
        return out, OpRecord("conv2d", {"x": x, "w": w, "params": params})
    return out


def conv2d_backward(x: Tensor, w: Tensor, grad: Tensor, params: KernelParams = CONV3,
                    need_input_grad: bool = True):
    """Gradients of conv2d w.r.t. input, weights and bias."""
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    k, s, p = params.kernel_size, params.stride, params.padding
    oh, ow = grad.shape[2], grad.shape[3]
    if grad.shape != (n, cout, params.output_size(h), params.output_size(wd)):
        raise DimensionError(f"conv2d upstream gradient has shape {grad.shape}")
    wmat = w.reshape(cout, cin * k * k)
    dw = np.zeros_like(wmat, dtype=np.result_type(x, grad))
    dx = np.zeros_like(x) if need_input_grad else None
    for i in range(n):
        xp = np.pad(x[i], ((0, 0), (p, p), (p, p))) if p else x[i]
        cols = _im2col(xp, k, s, oh, ow)
        g = grad[i].reshape(cout, oh * ow)
        dw += g @ cols.T
        if need_input_grad:
            dxp = _col2im(wmat.T @ g, xp.shape, k, s, oh, ow)
            dx[i] = dxp[:, p : p + h, p : p + wd] if p else dxp
    db = grad.sum(axis=(0, 2, 3))
    return dx, dw.reshape(w.shape), db


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2x2(x: Tensor, record: bool = False):
    """Disjoint 2x2 max pooling, stride 2.

    Returns ``(out, argmax)`` where ``argmax`` holds the row-major window
    position (0..3) that won; ties go to the first occurrence.
    """
    _require_rank(x, 4, "maxpool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    if record:
        return out, idx, OpRecord("maxpool2x2", {"argmax": idx, "shape": x.shape})
    return out, idx


def maxpool2x2_backward(argmax: Tensor, grad: Tensor, input_shape) -> Tensor:
    n, c, h, w = input_shape
    if grad.shape != (n, c, h // 2, w // 2) or argmax.shape != grad.shape:
        raise DimensionError(f"maxpool upstream gradient has shape {grad.shape}")
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
    np.put_along_axis(win, argmax[..., None].astype(np.intp), grad[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# dense, relu, flatten
# ---------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor, record: bool = False):
    """``x @ w.T + b`` with ``w`` stored as (Dout, Din)."""
    _require_rank(x, 2, "dense input")
    _require_rank(w, 2, "dense weights")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"dense input axis 1 is {x.shape[1]}, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"dense bias axis must be ({w.shape[0]},), got {b.shape}")
    out = x @ w.T + b
    if record:
        return out, OpRecord("dense", {"x": x, "w": w})
    return out


def dense_backward(x: Tensor, w: Tensor, grad: Tensor, need_input_grad: bool = True):
    if grad.shape != (x.shape[0], w.shape[0]):
        raise DimensionError(f"dense upstream gradient has shape {grad.shape}")
    dx = grad @ w if need_input_grad else None
    return dx, grad.T @ x, grad.sum(axis=0)


def relu(x: Tensor, record: bool = False):
    out = np.maximum(x, 0)
    if record:
        return out, OpRecord("relu", {"x": x})
    return out


def relu_backward(x: Tensor, grad: Tensor) -> Tensor:
    return np.where(x > 0, grad, 0).astype(grad.dtype, copy=False)


def flatten(x: Tensor, record: bool = False):
    out = x.reshape(x.shape[0], -1)
    if record:
        return out, OpRecord("flatten", {"shape": x.shape})
    return out


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

@dataclass
class DropoutState:
    rate: float = 0.5
    training: bool = False
    rng_seed: int = 0
    mask: Tensor | None = None

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.rate}")


def dropout(x: Tensor, state: DropoutState, record: bool = False):
    """Inverted dropout; the drawn mask (already scaled) is kept on ``state``."""
    if not 0.0 <= state.rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {state.rate}")
    if not state.training or state.rate == 0.0:
        state.mask = np.ones(x.shape, dtype=x.dtype)
        out = x.copy()
    else:
        keep = np.random.default_rng(state.rng_seed).random(x.shape) >= state.rate
        state.mask = keep.astype(x.dtype) / x.dtype.type(1.0 - state.rate)
        out = x * state.mask
    if record:
        return out, OpRecord("dropout", {"mask": state.mask})
    return out


def dropout_backward(mask: Tensor, grad: Tensor) -> Tensor:
    return grad * mask


# ---------------------------------------------------------------------------
# output activations and losses
# ---------------------------------------------------------------------------

def _check_one_hot(labels: Tensor, logits: Tensor):
    if labels.shape != logits.shape:
        raise DimensionError(f"labels shape {labels.shape} differs from logits shape {logits.shape}")
    ok = np.all((labels == 0) | (labels == 1), axis=1) & (labels.sum(axis=1) == 1)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise InputError(f"label row {bad} is not one-hot")


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Tensor):
    """Mean cross-entropy of row-wise softmax.

    Returns ``(loss, probs)``; the logit gradient is ``(probs - labels) / N``.
    """
    _require_rank(logits, 2, "logits")
    if logits.shape[1] < 2:
        raise ConfigurationError("softmax cross-entropy needs at least 2 classes")
    _check_one_hot(labels, logits)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = float(-(log_probs * labels).sum() / logits.shape[0])
    return max(loss, 0.0), np.exp(log_probs)


def softmax_cross_entropy_backward(probs: Tensor, labels: Tensor) -> Tensor:
    return (probs - labels) / probs.dtype.type(probs.shape[0])


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_binary_loss(logits: Tensor, labels: Tensor):
    """Two independent sigmoid units scored by mean binary cross-entropy.

    Returns ``(loss, probs)``. The mean runs over all N*2 units, so the
    logit gradient is ``(probs - labels) / (2N)``.
    """
    _require_rank(logits, 2, "logits")
    if logits.shape[1] != 2:
        raise ConfigurationError(f"sigmoid binary head needs exactly 2 units, got {logits.shape[1]}")
    _check_one_hot(labels, logits)
    per_unit = np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return float(per_unit.mean()), sigmoid(logits)


def sigmoid_binary_loss_backward(probs: Tensor, labels: Tensor) -> Tensor:
    return (probs - labels) / probs.dtype.type(probs.size)


# ---------------------------------------------------------------------------
# generic backward + finite differences
# ---------------------------------------------------------------------------

def backward(record: OpRecord | None, grad: Tensor, need_input_grad: bool = True) -> dict[str, Tensor | None]:
    """Route ``grad`` through the op described by ``record``.

    Returns a dict with ``"input"`` plus ``"weight"``/``"bias"`` for
    parameterised ops.
    """
    if record is None:
        raise StateError("backward called without a recorded forward pass")
    s = record.saved
    if record.op == "conv2d":
        dx, dw, db = conv2d_backward(s["x"], s["w"], grad, s["params"], need_input_grad)
        return {"input": dx, "weight": dw, "bias": db}
    if record.op == "dense":
        dx, dw, db = dense_backward(s["x"], s["w"], grad, need_input_grad)
        return {"input": dx, "weight": dw, "bias": db}
    if record.op == "maxpool2x2":
        return {"input": maxpool2x2_backward(s["argmax"], grad, s["shape"])}
    if record.op == "relu":
        return {"input": relu_backward(s["x"], grad)}
    if record.op == "dropout":
        return {"input": dropout_backward(s["mask"], grad)}
    if record.op == "flatten":
        return {"input": grad.reshape(s["shape"])}
    raise StateError(f"no backward rule for op {record.op!r}")


def finite_diff_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-3,
                         indices=None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored. ``indices`` restricts the
    probe to a subset of flat positions; the others are left at zero.
    """
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    """Worst elementwise relative error; near-zero analytic entries compare absolutely."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise DimensionError(f"gradient sizes differ: {a.shape} vs {n.shape}")
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.where(np.abs(a) < floor, diff, diff / np.where(scale == 0, 1.0, scale))
    return float(err.max()) if err.size else 0.0
