"""Layer primitives with hand-written backward passes.

Tensors are plain numpy arrays in NCHW layout. Every forward function
returns ``(out, cache)`` and the matching ``*_backward`` consumes the
cache and the upstream gradient. Nothing here holds state; batch-norm
running statistics are passed in and updated in place only in training
mode.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ecovnet.errors import ArgumentError, DimensionError

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.9
LOG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# padding helpers
# ---------------------------------------------------------------------------

def output_extent(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ArgumentError(f"unknown padding mode {padding!r}")


def _pad_amounts(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    out = output_extent(size, kernel, stride, padding)
    total = max((out - 1) * stride + kernel - size, 0)
    # odd totals put the extra pixel on the bottom/right
    return total // 2, total - total // 2


def _pad(x: np.ndarray, k: int, stride: int, padding: str):
    H, W = x.shape[2:]
    ph = _pad_amounts(H, k, stride, padding)
    pw = _pad_amounts(W, k, stride, padding)
    if ph == (0, 0) and pw == (0, 0):
        return x, (ph, pw)
    return np.pad(x, ((0, 0), (0, 0), ph, pw)), (ph, pw)


def _check_stride(stride: int) -> None:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ArgumentError(f"stride must be a positive integer, got {stride!r}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: str = "same"):
    """Dense 2-D convolution (cross-correlation), no bias.

    ``x`` is (N, C, H, W) and ``w`` is (O, C, k, k).
    """
    _check_stride(stride)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and 4-D kernels")
    O, C, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"kernel must be square, got {kh}x{kw}")
    if x.shape[1] != C:
        raise DimensionError(f"input has {x.shape[1]} channels, kernels expect {C}")
    N, _, H, W = x.shape
    Ho = output_extent(H, kh, stride, padding)
    Wo = output_extent(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError("kernel larger than input")

    if kh == 1 and stride == 1:
        out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x, optimize=True)
        return out, (x, w, stride, padding, None, None)

    xp, pads = _pad(x, kh, stride, padding)
    # (N, C, Ho, Wo, k, k) view, then gather into columns
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    out = cols @ w.reshape(O, -1).T
    out = out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x, w, stride, padding, cols, pads)


def conv2d_backward(dout: np.ndarray, cache):
    """Returns (dx, dw)."""
    x, w, stride, padding, cols, pads = cache
    O, C, k, _ = w.shape
    N, _, H, W = x.shape
    Ho, Wo = dout.shape[2:]

    if cols is None:  # 1x1 stride-1 fast path
        w2 = w[:, :, 0, 0]
        dx = np.einsum("oc,nohw->nchw", w2, dout, optimize=True)
        dw = np.einsum("nohw,nchw->oc", dout, x, optimize=True)[:, :, None, None]
        return dx, dw

    d2 = dout.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
    dw = (d2.T @ cols).reshape(w.shape)
    dcols = (d2 @ w.reshape(O, -1)).reshape(N, Ho, Wo, C, k, k)
    (pt, pb), (pl, pr) = pads
    dxp = np.zeros((N, C, H + pt + pb, W + pl + pr), dtype=dout.dtype)
    for a in range(k):
        for b in range(k):
            dxp[:, :, a:a + stride * Ho:stride, b:b + stride * Wo:stride] += (
                dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pt:pt + H, pl:pl + W]
    return np.ascontiguousarray(dx), dw


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: str = "same"):
    """Per-channel convolution; ``w`` is (C, k, k), one kernel per channel."""
    _check_stride(stride)
    if x.ndim != 4 or w.ndim != 3:
        raise DimensionError("depthwise_conv2d expects 4-D input and (C, k, k) kernels")
    C, k, k2 = w.shape
    if k != k2:
        raise DimensionError(f"kernel must be square, got {k}x{k2}")
    if x.shape[1] != C:
        raise DimensionError(f"{C} kernels for {x.shape[1]} input channels")
    N, _, H, W = x.shape
    Ho = output_extent(H, k, stride, padding)
    Wo = output_extent(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError("kernel larger than input")
    xp, pads = _pad(x, k, stride, padding)
    out = np.zeros((N, C, Ho, Wo), dtype=np.result_type(x, w))
    for a in range(k):
        for b in range(k):
            out += xp[:, :, a:a + stride * Ho:stride, b:b + stride * Wo:stride] * w[None, :, a, b, None, None]
    return out, (x.shape, xp, w, stride, pads)


def depthwise_conv2d_backward(dout: np.ndarray, cache):
    """Returns (dx, dw)."""
    xshape, xp, w, stride, pads = cache
    C, k, _ = w.shape
    N, _, H, W = xshape
    Ho, Wo = dout.shape[2:]
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for a in range(k):
        for b in range(k):
            sl = (slice(None), slice(None), slice(a, a + stride * Ho, stride), slice(b, b + stride * Wo, stride))
            dw[:, a, b] = np.einsum("nchw,nchw->c", dout, xp[sl])
            dxp[sl] += dout * w[None, :, a, b, None, None]
    (pt, _), (pl, _) = pads
    return np.ascontiguousarray(dxp[:, :, pt:pt + H, pl:pl + W]), dw


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               epsilon: float = BN_EPSILON, momentum: float = BN_MOMENTUM):
    """Batch normalization over every axis except channels (axis 1).

    Works for (N, C) and (N, C, H, W). In training mode the running
    statistics are updated in place by exponential moving average.
    """
    C = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (C,):
            raise DimensionError(f"{name} has shape {arr.shape}, expected ({C},)")
    if epsilon <= 0:
        raise ArgumentError("epsilon must be positive")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)

    if training:
        count = x.size // C
        if count == 0:
            raise ArgumentError("batch norm in training mode needs at least one sample")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out.astype(x.dtype, copy=False), (xhat, gamma, inv_std, training, axes, bshape)


def batch_norm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, gamma, inv_std, training, axes, bshape = cache
    dgamma = np.sum(dout * xhat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    dxhat = dout * gamma.reshape(bshape)
    if not training:
        return dxhat * inv_std.reshape(bshape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x):
    # tanh form cannot overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = ("swish", "sigmoid", "relu")


def activation(kind: str, x):
    if kind == "swish":
        s = sigmoid(x)
        return x * s, (kind, x, s)
    if kind == "sigmoid":
        s = sigmoid(x)
        return s, (kind, x, s)
    if kind == "relu":
        return np.maximum(x, 0), (kind, x, None)
    raise ArgumentError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(dout, cache):
    kind, x, s = cache
    if kind == "swish":
        return dout * (s + x * s * (1.0 - s))
    if kind == "sigmoid":
        return dout * s * (1.0 - s)
    return dout * (x > 0)


# ---------------------------------------------------------------------------
# pooling / dense
# ---------------------------------------------------------------------------

def global_avg_pool(x):
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError(f"global_avg_pool expects non-empty NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, cache):
    N, C, H, W = cache
    return np.broadcast_to((dout / (H * W))[:, :, None, None], cache).copy()


def fully_connected(x, weight, bias):
    """Affine map ``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
    return x @ weight + bias, (x, weight)


def fully_connected_backward(dout, cache):
    """Returns (dx, dweight, dbias)."""
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None, mask_shape=None):
    """Inverted dropout. ``mask_shape`` broadcasts one draw over trailing axes."""
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ArgumentError("training-mode dropout needs an rng")
    shape = x.shape if mask_shape is None else mask_shape
    mask = (rng.random(shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------------------
# squeeze-and-excitation
# ---------------------------------------------------------------------------

def squeeze_units(channels: int, reduce_ratio: int) -> int:
    if reduce_ratio < 1:
        raise ArgumentError("reduce_ratio must be >= 1")
    if reduce_ratio > channels:
        raise ArgumentError(f"reduce_ratio {reduce_ratio} exceeds channel count {channels}")
    return channels // reduce_ratio


def squeeze_excite(x, w_reduce, b_reduce, w_expand, b_expand):
    """GAP -> FC(C/r) -> swish -> FC(C) -> sigmoid gate, broadcast over H x W.

    Weights are (C, C/r) and (C/r, C).
    """
    s, pool_cache = global_avg_pool(x)
    z1, fc1 = fully_connected(s, w_reduce, b_reduce)
    a1, act1 = activation("swish", z1)
    z2, fc2 = fully_connected(a1, w_expand, b_expand)
    g, act2 = activation("sigmoid", z2)
    out = x * g[:, :, None, None]
    return out, (x, g, pool_cache, fc1, act1, fc2, act2)


def squeeze_excite_backward(dout, cache):
    """Returns (dx, dw_reduce, db_reduce, dw_expand, db_expand)."""
    x, g, pool_cache, fc1, act1, fc2, act2 = cache
    dx = dout * g[:, :, None, None]
    dg = np.einsum("nchw,nchw->nc", dout, x)
    dz2 = activation_backward(dg, act2)
    da1, dw2, db2 = fully_connected_backward(dz2, fc2)
    dz1 = activation_backward(da1, act1)
    ds, dw1, db1 = fully_connected_backward(dz1, fc1)
    dx += global_avg_pool_backward(ds, pool_cache)
    return dx, dw1, db1, dw2, db2


# ---------------------------------------------------------------------------
# softmax and loss
# ---------------------------------------------------------------------------

def softmax(logits):
    """Row-wise softmax with max subtraction; accepts a vector or an N x C matrix."""
    z = np.asarray(logits)
    if z.size == 0 or z.shape[-1] == 0:
        raise ArgumentError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_onehot(onehot):
    ok = np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=1) == 1)
    if not ok:
        raise ArgumentError("labels must be one-hot rows")


def cross_entropy_loss(probs, onehot, class_weights=None, l1_coeff: float = 0.0,
                       l2_coeff: float = 0.0, reg_params=()):
    """Class-weighted categorical cross-entropy plus L1/L2 penalties.

    The data term is averaged over the batch size N, not over the sum of
    weights. ``reg_params`` are the arrays the penalties apply to.
    """
    probs = np.asarray(probs)
    onehot = np.asarray(onehot)
    if probs.shape != onehot.shape or probs.ndim != 2:
        raise DimensionError(f"probs {probs.shape} and labels {onehot.shape} disagree")
    _check_onehot(onehot)
    N, C = probs.shape
    w = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (C,) or np.any(w <= 0):
        raise ArgumentError("class weights must be positive, one per class")
    p_true = np.sum(probs * onehot, axis=1)
    sample_w = onehot @ w
    loss = float(-np.sum(sample_w * np.log(np.maximum(p_true, LOG_FLOOR))) / N)
    for p in reg_params:
        if l1_coeff:
            loss += l1_coeff * float(np.abs(p).sum())
        if l2_coeff:
            loss += l2_coeff * float(np.square(p).sum())
    return loss


def softmax_cross_entropy_backward(probs, onehot, class_weights=None):
    """Gradient of the weighted data term with respect to the logits."""
    N, C = probs.shape
    w = np.ones(C) if class_weights is None else np.asarray(class_weights)
    sample_w = (onehot @ w).astype(probs.dtype)
    return (probs - onehot) * sample_w[:, None] / N


def regularization_grad(param, l1_coeff: float, l2_coeff: float):
    return l1_coeff * np.sign(param) + 2.0 * l2_coeff * param
