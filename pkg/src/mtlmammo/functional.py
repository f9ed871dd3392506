"""Differentiable operations on :class:`~mtlmammo.tensor.Tensor`.

Each op computes its forward value with numpy and, when a graph is active and
an input is tracked, records a closure producing the input gradients.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, _record

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---- elementwise plumbing ------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _record("add", [a, b], out,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.data, b.data
    out = av * bv
    return _record("mul", [a, b], out,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record("scale", [a], a.data * c, lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(1)
    return _record("sum", [a], out, lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype).reshape(1)
    return _record("mean", [a], out,
                   lambda g: (np.full(shape, g.reshape(()) / n, dtype=g.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", [a], a.data.reshape(shape), lambda g: (g.reshape(old),))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    return _record("relu", [x], np.where(mask, x.data, 0).astype(x.dtype, copy=False),
                   lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _record("sigmoid", [x], out, lambda g: (g * out * (1 - out),))


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data
    shifted = z - z.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", [x], out, backward)


# ---- layers ----------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) over NCHW input."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if h + 2 * padding < kh or w + 2 * padding < kw or ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty: input {x.shape}, weight {weight.shape}, "
                         f"stride {stride}, padding {padding}")

    # columns laid out [C*kh*kw, N*ho*wo] so every kernel offset is one contiguous slab
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, -1)
    w2 = weight.data.reshape(f, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    geom = (x.shape, weight.shape, stride, padding, ho, wo)
    has_bias = bias is not None
    return _record("conv2d", [x, weight, bias], out,
                   lambda g: _conv2d_backward(g, cols, w2, geom, has_bias))


def _conv2d_backward(g, cols, w2, geom, has_bias):
    (n, c, h, w), (f, _, kh, kw), stride, padding, ho, wo = geom
    g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
    dw = (g2 @ cols.T).reshape(f, c, kh, kw)
    db = g2.sum(axis=1) if has_bias else None
    dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
    dxt = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dxt = dxt[:, :, padding:padding + h, padding:padding + w]
    return (np.ascontiguousarray(dxt.transpose(1, 0, 2, 3)), dw, db)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: Optional[np.ndarray] = None,
               running_var: Optional[np.ndarray] = None,
               training: bool = True, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of NCHW input.

    In training mode the batch moments are used and the running buffers (if
    given) are updated in place as ``r = momentum * r + (1 - momentum) * batch``,
    with the unbiased variance going into ``running_var``.
    """
    n, c, h, w = x.shape
    m = n * h * w
    shp = (1, c, 1, 1)
    gv, bv = gamma.data.reshape(shp), beta.data.reshape(shp)
    if not training:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm in eval mode needs running statistics")
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(shp)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(shp)) * inv
        out = xhat * gv + bv

        def backward_eval(g):
            return (g * gv * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _record("batch_norm", [x, gamma, beta], out, backward_eval)

    if m < 2:
        raise ValueError(f"batch_norm in train mode needs N*H*W >= 2, got input {x.shape}")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gv + bv
    if running_mean is not None:
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(c)
    if running_var is not None:
        running_var *= momentum
        running_var += (1 - momentum) * var.reshape(c) * (m / (m - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return (dx, dgamma, dbeta)

    return _record("batch_norm", [x, gamma, beta], out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _record("global_avg_pool", [x], out,
                   lambda g: (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),))


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix A (n_out x n_in), half-pixel (align_corners=False)."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    scale_ = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    return a


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return _record("upsample_bilinear", [x], x.data.copy(), lambda g: (g,))
    ah = bilinear_matrix(h, out_h).astype(x.dtype)
    aw = bilinear_matrix(w, out_w).astype(x.dtype)
    out = ah @ x.data @ aw.T
    return _record("upsample_bilinear", [x], out, lambda g: (ah.T @ g @ aw,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    xv, wv = x.data, weight.data
    out = xv @ wv
    if bias is not None:
        out = out + bias.data
    has_bias = bias is not None
    return _record("linear", [x, weight, bias], out,
                   lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0) if has_bias else None))
