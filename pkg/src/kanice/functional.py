"""Fused differentiable primitives used by the layers.

Each function computes its forward with numpy and registers a hand-written
vector-Jacobian product on the active tape.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeMismatch, Tensor, _sigmoid, as_tensor, primitive

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class BatchTooSmall(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi from the error function."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return primitive(out, (x,), vjp)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = _sigmoid(xd)
    out = xd * sig

    def vjp(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return primitive(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return primitive(x.data * mask, (x,), lambda g: (g * mask,))


ACTIVATIONS = {"gelu": gelu, "silu": silu, "relu": relu}


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col_t(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch matrix in (C*kh*kw, N*Ho*Wo) layout; the inner copy runs along
    image rows, which is much cheaper than the row-per-patch layout."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    c = xp.shape[1]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an NCHW batch, plus optional per-channel bias."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeMismatch(f"input has {c} channels, weight expects {cin}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads) if padding else x.data
    cols = _im2col_t(xp, kh, kw, stride)                  # (cin*kh*kw, n*ho*wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gt = g.transpose(1, 0, 2, 3).reshape(cout, -1)     # (cout, n*ho*wo)
        gw = (gt @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and padding < min(kh, kw):
            # correlation of g with the flipped kernel, as one GEMM; padding g
            # by k-1-p yields exactly the unpadded input extent
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx = (wflip @ _im2col_t(gp, kh, kw, 1)).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            dcols = (wmat.T @ gt).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gt.sum(axis=1)

    return primitive(out, inputs, vjp)


# ---------------------------------------------------------------- pooling

def maxpool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling with a square window.  Trailing rows/columns that do not
    fill a window are dropped.  Ties route the gradient to the first element
    in row-major window order."""
    stride = stride or size
    n, c, h, w = x.shape
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    win = sliding_window_view(x.data, (size, size), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, size * size)
    idx = flat.argmax(axis=-1)  # argmax returns the first maximal entry
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        di, dj = np.divmod(idx, size)
        nn, cc, ii, jj = np.indices(idx.shape, sparse=True)
        rows = ii * stride + di
        cols = jj * stride + dj
        if stride >= size:
            gx[nn, cc, rows, cols] = g  # windows are disjoint
        else:
            np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return primitive(np.ascontiguousarray(out), (x,), vjp)


# ---------------------------------------------------------------- batch norm

def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
                 mean: np.ndarray | None = None, var: np.ndarray | None = None):
    """Per-channel normalization of an NCHW batch followed by gamma/beta.

    With ``mean``/``var`` omitted the batch statistics are used (training
    mode) and returned alongside the output so the caller can update running
    estimates.  Otherwise the given statistics are treated as constants.
    """
    n, c, h, w = x.shape
    xd = x.data
    batch_stats = mean is None
    if batch_stats:
        if n * h * w <= 1:
            raise BatchTooSmall("batch norm in train mode needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
    mean = np.asarray(mean, dtype=xd.dtype)
    var = np.asarray(var, dtype=xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[:, None, None]) * inv_std[:, None, None]
    out = xhat * gamma.data[:, None, None] + beta.data[:, None, None]
    m = n * h * w

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[:, None, None]
        if batch_stats:
            gx = (inv_std[:, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[:, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[:, None, None])
        else:
            gx = gxhat * inv_std[:, None, None]
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    out_t = primitive(out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)
    return out_t, mean, var


# ---------------------------------------------------------------- loss

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return primitive(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)
