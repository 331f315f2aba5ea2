"""Layer kernels with hand-written backward passes.

Tensors are NCHW arrays. Every ``*_forward`` returns ``(output, cache)`` and
the matching ``*_backward`` maps the upstream gradient and cache to input
(and parameter) gradients. Kernels work in whatever float dtype they are
given, which lets gradient checks recompute in float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-6


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (batch, channels, height, width), got {x.shape}")


# ----------------------------------------------------------------- convolution


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 'same' cross-correlation with odd square kernels."""
    _check4(x)
    out_ch, in_ch, kh, kw = w.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {in_ch}")
    if kh != kw or kh % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if b.shape != (out_ch,):
        raise ValueError(f"bias shape {b.shape} does not match {out_ch} output channels")
    n, _, h, wd = x.shape
    pad = kh // 2
    # column matrix laid out (c, kh, kw) x (n, h, w) so copies run along image rows
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, c, h, w, kh, kw
        cols = cols.transpose(1, 4, 5, 0, 2, 3).reshape(in_ch * kh * kw, n * h * wd)
    else:
        cols = x.transpose(1, 0, 2, 3).reshape(in_ch, n * h * wd)
    y = w.reshape(out_ch, -1) @ cols
    y += b[:, None]
    y = np.ascontiguousarray(y.reshape(out_ch, n, h, wd).transpose(1, 0, 2, 3))
    return y, (cols, x.shape, w)


def conv2d_backward(dy: np.ndarray, cache):
    cols, xshape, w = cache
    n, in_ch, h, wd = xshape
    out_ch, _, kh, kw = w.shape
    dym = dy.transpose(1, 0, 2, 3).reshape(out_ch, -1)
    dw = (dym @ cols.T).reshape(w.shape)
    db = dym.sum(axis=1)
    # input gradient is a 'same' correlation with the flipped, transposed kernel
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d_forward(dy, wf, np.zeros(in_ch, dtype=dy.dtype))
    return dx, dw, db


# ------------------------------------------------------------------ activations


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask):
    return dy * mask


def sigmoid_forward(x: np.ndarray):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, y


def sigmoid_backward(dy: np.ndarray, y):
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------------- pooling


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling; ties route to the first cell in row-major order."""
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, (arg, x.shape)


def maxpool2_backward(dy: np.ndarray, cache):
    arg, xshape = cache
    n, c, h, w = xshape
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(xshape)


def upsample2_forward(x: np.ndarray):
    """Nearest-neighbour 2x upsampling."""
    _check4(x)
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def upsample2_backward(dy: np.ndarray, xshape):
    n, c, h, w = xshape
    return dy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------- concatenation


def concat_forward(a: np.ndarray, b: np.ndarray):
    _check4(a, "a")
    _check4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dy: np.ndarray, split: int):
    return dy[:, :split], dy[:, split:]


# ------------------------------------------------------------------------- loss


def bce_forward(pred: np.ndarray, target: np.ndarray, eps: float = BCE_EPS):
    """Mean binary cross entropy with predictions clamped to [eps, 1-eps]."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    p = np.clip(pred, eps, 1.0 - eps)
    t = target.astype(p.dtype)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    return float(loss), (pred, p, t, eps)


def bce_backward(cache):
    pred, p, t, eps = cache
    grad = (p - t) / (p * (1.0 - p)) / p.size
    inside = (pred >= eps) & (pred <= 1.0 - eps)
    return grad * inside


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_forward(logits: np.ndarray, labels: np.ndarray):
    probs = softmax(logits.astype(np.float64))
    n = len(labels)
    loss = -np.mean(np.log(np.maximum(probs[np.arange(n), labels], 1e-300)))
    return float(loss), (probs, labels)


def softmax_xent_backward(cache):
    probs, labels = cache
    n = len(labels)
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    return g / n


# ---------------------------------------------------------------------- dense


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    flat = x.reshape(len(x), -1)
    if flat.shape[1] != w.shape[1]:
        raise ValueError(f"dense layer expects {w.shape[1]} features, got {flat.shape[1]}")
    return flat @ w.T + b, (flat, x.shape, w)


def dense_backward(dy: np.ndarray, cache):
    flat, xshape, w = cache
    return (dy @ w).reshape(xshape), dy.T @ flat, dy.sum(axis=0)


def he_uniform(rng, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
