"""Dense tensor primitives with analytic backward passes.

Tensors are plain row-major ``numpy.ndarray`` objects. The runtime dtype is
float32; every primitive preserves the floating dtype of its inputs so the
same code path can be exercised in float64 for gradient checking.

Backward functions take the upstream gradient plus the forward inputs (or
the forward output where that is cheaper, e.g. softmax) and return one
gradient per differentiable input, in argument order.

Calls to :func:`matmul`, :func:`linear` and :func:`conv2d` report their
multiply-accumulate counts to any active :func:`count_macs` context.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigurationError, DimensionError

DTYPE = np.float32
GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous floating array (float32 unless told)."""
    if dtype is None:
        arr = np.asarray(x)
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DTYPE
    return np.ascontiguousarray(x, dtype=dtype)


# MAC accounting ------------------------------------------------------------

@dataclass
class MacCounter:
    macs: int = 0


_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar("mac_counter", default=None)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates executed by primitives inside the block.

    >>> with count_macs() as c:
    ...     _ = matmul(np.ones((2, 3)), np.ones((3, 4)))
    >>> c.macs
    24
    """
    counter = MacCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


def _record(macs: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.macs += int(macs)


@contextlib.contextmanager
def threads(n: int | None):
    """Limit BLAS threads; ``n=1`` is the deterministic single-threaded mode."""
    if n is None:
        yield
        return
    if n < 1:
        raise ConfigurationError(f"thread count must be >= 1, got {n}")
    with threadpool_limits(limits=n):
        yield


# matmul ----------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly; no broadcasting.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    batch = math.prod(a.shape[:-2])
    _record(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return np.matmul(a, b)


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    return np.matmul(grad, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), grad)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` applied over the last axis; ``w`` has shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {tuple(x.shape)} does not match weight {tuple(w.shape)}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, w.shape[0]), w)
    if b is not None:
        y = y + b
    return y.reshape(*lead, w.shape[1])


def linear_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    g2 = grad.reshape(-1, w.shape[1])
    x2 = x.reshape(-1, w.shape[0])
    gx = (g2 @ w.T).reshape(x.shape)
    return gx, x2.T @ g2, g2.sum(axis=0)


# softmax ---------------------------------------------------------------------

def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 1:
        raise DimensionError("softmax: last dimension must be >= 1")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the softmax input given its output ``y``."""
    return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


# layer norm --------------------------------------------------------------------

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: input {tuple(x.shape)} vs gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def layer_norm_backward(grad: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = 1e-6):
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    lead = tuple(range(x.ndim - 1))
    ggamma = (grad * xhat).sum(axis=lead)
    gbeta = grad.sum(axis=lead)
    gxhat = grad * gamma
    gx = rstd / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
    return gx, ggamma, gbeta


# GELU (tanh approximation) -----------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    inner = GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# conv2d --------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    # (B*Ho*Wo, C*kh*kw)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, C * kh * kw), Ho, Wo


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: invalid stride={stride} padding={padding}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(
            f"conv2d: non-positive output size {Ho}x{Wo} for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    cols, Ho, Wo = _im2col(x, kh, kw, stride, padding)
    y = matmul(cols, w.reshape(O, -1).T)
    if b is not None:
        y = y + b
    return np.ascontiguousarray(y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, padding)
    g2 = grad.transpose(0, 2, 3, 1).reshape(-1, O)
    gw = (g2.T @ cols).reshape(w.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
    gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
    return np.ascontiguousarray(gx), gw, gb


# token-grid max pooling ----------------------------------------------------------

def _check_pool(H: int, W: int, ph: int, pw: int) -> None:
    if ph < 1 or pw < 1 or H % ph or W % pw:
        raise ConfigurationError(f"max_pool_tokens: grid H={H}, W={W} not divisible by pool ph={ph}, pw={pw}")


def _windows(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    B, H, W, d = x.shape
    return (
        x.reshape(B, H // ph, ph, W // pw, pw, d)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(B, H // ph, W // pw, d, ph * pw)
    )


def max_pool_tokens(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Per-channel max over non-overlapping ph x pw windows of a (B, H, W, d) grid."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool_tokens: expected (B, H, W, d), got {tuple(x.shape)}")
    _check_pool(x.shape[1], x.shape[2], ph, pw)
    return _windows(x, ph, pw).max(axis=-1)


def max_pool_tokens_backward(grad: np.ndarray, x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Route each window's gradient to its first maximal element."""
    B, H, W, d = x.shape
    win = _windows(x, ph, pw)
    idx = win.argmax(axis=-1)
    gwin = np.zeros_like(win)
    np.put_along_axis(gwin, idx[..., None], grad[..., None], axis=-1)
    return np.ascontiguousarray(
        gwin.reshape(B, H // ph, W // pw, d, ph, pw).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, d)
    )
