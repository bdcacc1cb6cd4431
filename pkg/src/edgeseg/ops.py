"""Layer kernels with explicit forward/backward pairs.

Every tensor is a 4-D ``(n, c, h, w)`` numpy array. Forward functions return
``(out, cache)`` and the matching ``*_backward`` consumes ``(dout, cache)``.
Kernels preserve the input dtype: training runs in float32, gradient checks
run the same code on float64 shadow copies.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEBUG = bool(os.environ.get("EDGESEG_DEBUG"))

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
UPSAMPLE_FACTORS = (2, 4, 8)


class ShapeError(ValueError):
    """Raised when tensor shapes do not fit an operation."""


class ConfigError(ValueError):
    """Raised for invalid layer settings."""


class DataError(ValueError):
    """Raised for invalid label data."""


class IndexCorruptionError(RuntimeError):
    """Pool indices point outside the tensor they are applied to."""


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dims must be >= 1, got {x.shape}")
    if DEBUG and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name}: non-finite values")
    return x


def _out_dim(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"{axis}: size {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not give a positive integer output size"
        )
    return span // stride + 1


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add ``(n, ho, wo, c, kh, kw)`` patches into a padded ``shape`` array."""
    n, ho, wo, c = cols.shape[:4]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(x, kernel, bias, stride: int = 1, pad: int = 0):
    """Cross-correlation with zero padding.

    Stride 1 runs as one matmul per kernel tap over a flattened, zero-padded
    channels-last copy of the input: each tap is then a contiguous row slice.
    Other strides go through im2col.
    """
    check_tensor(x, "conv2d input")
    co, ci, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if c != ci:
        raise ShapeError(f"channel axis: input has {c} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias axis: expected ({co},), got {bias.shape}")
    ho = _out_dim(h, kh, stride, pad, "height axis")
    wo = _out_dim(w, kw, stride, pad, "width axis")
    if stride == 1:
        hp, wp = h + 2 * pad, w + 2 * pad
        xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
        xp[:, pad : pad + h, pad : pad + w] = x.transpose(0, 2, 3, 1)
        xf = xp.reshape(-1, c)
        taps = np.ascontiguousarray(kernel.transpose(2, 3, 1, 0))  # kh, kw, ci, co
        span = xf.shape[0] - ((kh - 1) * wp + kw - 1)
        yf = np.zeros((n * hp * wp, co), dtype=x.dtype)
        acc = yf[:span]
        for i in range(kh):
            for j in range(kw):
                off = i * wp + j
                acc += xf[off : off + span] @ taps[i, j]
        y = yf.reshape(n, hp, wp, co)[:, :ho, :wo]
        cache = ("flat", xf, x.shape, kernel, taps, pad, span, bias is not None)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        y = (cols @ kernel.reshape(co, -1).T).reshape(n, ho, wo, co)
        cache = ("cols", cols, x.shape, kernel, stride, pad, bias is not None)
    if bias is not None:
        y = y + bias
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cache


def conv2d_backward(dout, cache):
    if cache[0] == "flat":
        return _conv2d_flat_backward(dout, cache)
    _, cols, xshape, kernel, stride, pad, has_bias = cache
    co, ci, kh, kw = kernel.shape
    n, c, h, w = xshape
    ho, wo = dout.shape[2:]
    dy = dout.transpose(0, 2, 3, 1).reshape(-1, co)
    dk = (dy.T @ cols).reshape(kernel.shape)
    db = dy.sum(axis=0) if has_bias else None
    dcols = (dy @ kernel.reshape(co, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = _col2im(dcols, (n, c, h + 2 * pad, w + 2 * pad), kh, kw, stride)
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dk, db


def _conv2d_flat_backward(dout, cache):
    _, xf, xshape, kernel, taps, pad, span, has_bias = cache
    co, ci, kh, kw = kernel.shape
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = dout.shape[2:]
    dyp = np.zeros((n, hp, wp, co), dtype=dout.dtype)
    dyp[:, :ho, :wo] = dout.transpose(0, 2, 3, 1)
    dyf = dyp.reshape(-1, co)[:span]
    db = dyf.sum(axis=0) if has_bias else None
    dtaps = np.empty_like(taps)
    dxf = np.zeros((n * hp * wp, c), dtype=dout.dtype)
    taps_t = np.ascontiguousarray(taps.transpose(0, 1, 3, 2))
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            dtaps[i, j] = xf[off : off + span].T @ dyf
            dxf[off : off + span] += dyf @ taps_t[i, j]
    dk = np.ascontiguousarray(dtaps.transpose(3, 2, 0, 1))
    dx = dxf.reshape(n, hp, wp, c)[:, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dk, db


def conv1x1(x, kernel, bias):
    if kernel.shape[2:] != (1, 1):
        raise ShapeError(f"kernel axes: conv1x1 needs a 1x1 kernel, got {kernel.shape[2:]}")
    return conv2d(x, kernel, bias, 1, 0)


conv1x1_backward = conv2d_backward


def conv_transpose2d(x, kernel, bias, stride: int, pad: int = 0):
    """Fractional-stride convolution, the input-adjoint of :func:`conv2d`.

    ``kernel`` has shape ``(c_in, c_out, kh, kw)``.
    """
    check_tensor(x, "conv_transpose2d input")
    ci, co, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if c != ci:
        raise ShapeError(f"channel axis: input has {c} channels, kernel expects {ci}")
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    if hf - 2 * pad < 1 or wf - 2 * pad < 1:
        raise ShapeError(f"height/width axis: padding {pad} removes the whole output")
    xm = x.transpose(0, 2, 3, 1).reshape(-1, ci)
    cols = (xm @ kernel.reshape(ci, -1)).reshape(n, h, w, co, kh, kw)
    y = _col2im(cols, (n, co, hf, wf), kh, kw, stride)
    if pad:
        y = y[:, :, pad : hf - pad, pad : wf - pad]
    if bias is not None:
        y = y + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(y), (xm, x.shape, kernel, stride, pad, bias is not None)


def conv_transpose2d_backward(dout, cache):
    xm, xshape, kernel, stride, pad, has_bias = cache
    ci, co, kh, kw = kernel.shape
    n, _, h, w = xshape
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    dp = np.pad(dout, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else dout
    dcols = _im2col(dp, kh, kw, stride, h, w)
    dk = (xm.T @ dcols).reshape(kernel.shape)
    dx = (dcols @ kernel.reshape(ci, -1).T).reshape(n, h, w, ci).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), dk, db


def upsample_kernel_size(factor: int) -> int:
    return 2 * factor - factor % 2


def bilinear_kernel(channels: int, factor: int, dtype=np.float32) -> np.ndarray:
    """Per-channel bilinear interpolation weights of shape ``(c, c, k, k)``."""
    k = upsample_kernel_size(factor)
    f = (k + 1) // 2
    center = f - 1 if k % 2 == 1 else f - 0.5
    og = np.arange(k)
    filt1 = 1 - np.abs(og - center) / f
    filt = np.outer(filt1, filt1)
    kernel = np.zeros((channels, channels, k, k), dtype=dtype)
    kernel[np.arange(channels), np.arange(channels)] = filt
    return kernel


def upsample_tconv(x, kernel, bias, factor: int):
    """Learnable ``factor``x upsampling.

    The input is edge-replicated by one pixel before the transposed
    convolution so that the output keeps full kernel support at the borders;
    a bilinear kernel then reproduces constant maps exactly.
    """
    if factor not in UPSAMPLE_FACTORS:
        raise ConfigError(f"unsupported upsampling factor {factor}; use one of {UPSAMPLE_FACTORS}")
    k = upsample_kernel_size(factor)
    if kernel.shape[2:] != (k, k):
        raise ShapeError(f"kernel axes: factor {factor} needs {k}x{k}, got {kernel.shape[2:]}")
    check_tensor(x, "upsample input")
    h, w = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    y, tcache = conv_transpose2d(xp, kernel, bias, factor, 0)
    off = factor + (k - factor) // 2
    y = np.ascontiguousarray(y[:, :, off : off + factor * h, off : off + factor * w])
    return y, (tcache, off, y.shape)


def upsample_tconv_backward(dout, cache):
    tcache, off, yshape = cache
    xshape = tcache[1]
    kernel = tcache[2]
    factor = tcache[3]
    n, c, hp, wp = xshape
    k = kernel.shape[2]
    full = np.zeros((n, dout.shape[1], (hp - 1) * factor + k, (wp - 1) * factor + k), dtype=dout.dtype)
    full[:, :, off : off + yshape[2], off : off + yshape[3]] = dout
    dxp, dk, db = conv_transpose2d_backward(full, tcache)
    # undo edge replication: padded border rows/cols fold back onto the edges
    dxp = dxp.copy()
    dxp[:, :, 1, :] += dxp[:, :, 0, :]
    dxp[:, :, -2, :] += dxp[:, :, -1, :]
    dxp[:, :, :, 1] += dxp[:, :, :, 0]
    dxp[:, :, :, -2] += dxp[:, :, :, -1]
    return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1]), dk, db


# --------------------------------------------------------------------------
# pointwise and pooling


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool2(x):
    """2x2/stride-2 max pooling returning per-output flat input-plane indices.

    Ties go to the first position of the row-major window scan.
    """
    check_tensor(x, "maxpool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"height/width axis: maxpool2 needs even dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + arg // 2
    cols = 2 * np.arange(w // 2)[None, :] + arg % 2
    return np.ascontiguousarray(out), rows * w + cols


def maxpool2_backward(dout, indices, in_shape):
    return unpool2(dout, indices, in_shape[2:])


def unpool2(x, indices, out_hw):
    """Place each value back at its recorded argmax position; zeros elsewhere."""
    check_tensor(x, "unpool2 input")
    if indices.shape != x.shape:
        raise ShapeError(f"indices shape {indices.shape} does not match input {x.shape}")
    n, c = x.shape[:2]
    h, w = out_hw
    flat_idx = indices.reshape(n, c, -1)
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= h * w):
        raise IndexCorruptionError(f"pool index outside the {h}x{w} target plane")
    out = np.zeros((n, c, h * w), dtype=x.dtype)
    np.put_along_axis(out, flat_idx, x.reshape(n, c, -1), axis=2)
    return out.reshape(n, c, h, w)


def unpool2_backward(dout, indices):
    n, c = indices.shape[:2]
    g = np.take_along_axis(dout.reshape(n, c, -1), indices.reshape(n, c, -1), axis=2)
    return g.reshape(indices.shape)


def avgpool2(x):
    check_tensor(x, "avgpool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"height/width axis: avgpool2 needs even dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * dout.dtype.type(0.25)


def concat_channels(inputs):
    if not inputs:
        raise ShapeError("concat of an empty list")
    ref = inputs[0].shape
    for t in inputs:
        check_tensor(t, "concat input")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"batch/spatial axes: cannot concat {t.shape} with {ref}")
    return np.concatenate(inputs, axis=1), [t.shape[1] for t in inputs]


def concat_channels_backward(dout, sizes):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=1)


def add_elementwise(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return a + b


def softmax_channels(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(dout, probs):
    return probs * (dout - (dout * probs).sum(axis=1, keepdims=True))


def batchnorm(x, gamma, beta, mode: str, running: dict, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalisation.

    In ``train`` mode ``running['mean']`` and ``running['var']`` are updated in
    place with ``running = momentum * running + (1 - momentum) * batch``.
    """
    check_tensor(x, "batchnorm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channel axis: gamma/beta must have length {c}")
    shape = (1, c, 1, 1)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running["mean"] *= momentum
        running["mean"] += (1 - momentum) * mean
        running["var"] *= momentum
        running["var"] += (1 - momentum) * var
    elif mode == "infer":
        mean, var = running["mean"], running["var"]
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv, gamma, mode)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, mode = cache
    shape = (1, -1, 1, 1)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(shape)
    if mode == "infer":
        return dxhat * inv.reshape(shape), dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (inv.reshape(shape) / m) * (
        m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def dropout(x, rate: float, mode: str, rng: np.random.Generator | None):
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# --------------------------------------------------------------------------
# losses


def loss_softmax_xent(logits, labels, ignore_label: int | None = 255):
    """Mean per-pixel cross-entropy over non-ignored pixels.

    ``labels`` is an ``(n, h, w)`` integer array. Returns ``(loss, dlogits)``.
    """
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    valid = labels != ignore_label if ignore_label is not None else np.ones(labels.shape, bool)
    lab = np.where(valid, labels, 0)
    if lab.size and (lab.max() >= c or lab.min() < 0):
        raise DataError(f"label value {int(lab.max())} outside [0, {c})")
    count = int(valid.sum())
    probs = softmax_channels(logits)
    if count == 0:
        return 0.0, np.zeros_like(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, lab[:, None], axis=1)[:, 0]
    loss = float(((logz - picked) * valid).sum(dtype=np.float64) / count)
    grad = probs
    np.put_along_axis(grad, lab[:, None], np.take_along_axis(grad, lab[:, None], axis=1) - 1, axis=1)
    grad *= (valid / count).astype(logits.dtype)[:, None]
    return loss, grad


def loss_weighted_l2(pred, target, weights):
    """``sum(w * (pred - target)**2) / sum(w)`` and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape or pred.shape != weights.shape:
        raise ShapeError(f"shapes differ: pred {pred.shape}, target {target.shape}, weights {weights.shape}")
    wsum = float(weights.sum(dtype=np.float64))
    if wsum <= 0:
        raise DataError("weighted L2 loss needs a positive weight sum")
    diff = pred - target
    loss = float((weights * diff * diff).sum(dtype=np.float64) / wsum)
    grad = (2.0 / wsum) * weights * diff
    return loss, grad.astype(pred.dtype)
