"""Differentiable layer primitives: convolution, pooling, batch norm, losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Tensor, make_op


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv(x: Tensor, w: Tensor, stride=1, padding=0, dims: int = 2, groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding over 1 or 2 spatial axes.

    ``x`` is ``[B, C_in, *spatial]`` and ``w`` is ``[C_out, C_in // groups, *kernel]``.
    ``groups == C_in == C_out`` gives a depthwise convolution.
    """
    if dims == 1:
        if x.ndim != 3 or w.ndim != 3:
            raise DimensionError(f"conv1d expects 3-d input and weight, got {x.shape} and {w.shape}")
        b, c, length = x.shape
        co, cg, k = w.shape
        out = _conv2d(x.reshape(b, c, 1, length), w.reshape(co, cg, 1, k),
                      (1, int(stride)), (0, int(padding)), groups)
        return out.reshape(out.shape[0], out.shape[1], out.shape[3])
    if dims == 2:
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
        return _conv2d(x, w, _pair(stride), _pair(padding), groups)
    raise ConfigError(f"conv dims must be 1 or 2, got {dims}")


def _conv2d(x: Tensor, w: Tensor, stride: tuple[int, int], padding: tuple[int, int], groups: int) -> Tensor:
    b, c, h, wd = x.shape
    co, cg, kh, kw = w.shape
    if groups < 1 or c != cg * groups or co % groups:
        raise DimensionError(f"conv channels incompatible with groups={groups}: input {x.shape}, weight {w.shape}")
    sh, sw = stride
    ph, pw = padding
    hp, wp = h + 2 * ph, wd + 2 * pw
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    g, cog, ck = groups, co // groups, cg * kh * kw

    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.reshape(b, g, cg, ho, wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6).reshape(b, g, ho * wo, ck)
    wm = w.data.reshape(g, cog, ck)
    out = np.matmul(cols, wm.transpose(0, 2, 1))
    out = out.transpose(0, 1, 3, 2).reshape(b, co, ho, wo)

    def backward(grad):
        gy = grad.reshape(b, g, cog, ho * wo).transpose(0, 1, 3, 2)
        gx = gw = None
        if w.requires_grad:
            lhs = cols.transpose(1, 3, 0, 2).reshape(g, ck, b * ho * wo)
            rhs = gy.transpose(1, 0, 2, 3).reshape(g, b * ho * wo, cog)
            gw = np.matmul(lhs, rhs).transpose(0, 2, 1).reshape(w.shape)
        if x.requires_grad:
            gcols = np.matmul(gy, wm).reshape(b, g, ho, wo, cg, kh, kw)
            gxp = np.zeros((b, g, cg, hp, wp), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                        gcols[:, :, :, :, :, i, j].transpose(0, 1, 4, 2, 3)
            gx = gxp.reshape(b, c, hp, wp)[:, :, ph:ph + h, pw:pw + wd]
        return gx, gw

    return make_op(out, (x, w), backward, "conv")


def max_pool(x: Tensor, factor: int, dims: int = 2) -> Tensor:
    """Non-overlapping max pooling with kernel = stride = ``factor``."""
    if factor == 1:
        return x
    spatial = x.shape[2:]
    if len(spatial) != dims:
        raise DimensionError(f"max_pool{dims}d got input of shape {x.shape}")
    for n in spatial:
        if n % factor:
            raise DimensionError(f"spatial extent {n} not divisible by pool factor {factor}")
    b, c = x.shape[:2]
    if dims == 1:
        (length,) = spatial
        win = x.data.reshape(b, c, length // factor, factor)
        out_shape = (b, c, length // factor)
    else:
        h, w = spatial
        win = x.data.reshape(b, c, h // factor, factor, w // factor, factor).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(b, c, h // factor, w // factor, factor * factor)
        out_shape = (b, c, h // factor, w // factor)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(grad):
        gwin = np.zeros(win.shape, dtype=grad.dtype)
        np.put_along_axis(gwin, idx[..., None], grad[..., None], axis=-1)
        if dims == 1:
            return (gwin.reshape(x.shape),)
        h, w = spatial
        gwin = gwin.reshape(b, c, h // factor, w // factor, factor, factor).transpose(0, 1, 2, 4, 3, 5)
        return (gwin.reshape(x.shape),)

    return make_op(out.reshape(out_shape), (x,), backward, "max_pool")


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5, axis: int = 1) -> Tensor:
    """Per-channel normalization along ``axis``.

    Training mode normalizes with (biased) batch statistics and blends them
    into the running buffers in place: ``running = momentum * running + (1 - momentum) * batch``.
    """
    axis = axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    n = x.size // x.shape[axis]
    if n < 1:
        raise DimensionError(f"batch_norm needs at least one element per channel, got {x.shape}")
    gamma = weight.data.reshape(bshape)
    beta = bias.data.reshape(bshape)

    if training:
        mean = x.data.mean(axis=red, keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=red, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= momentum
        running_mean += (1 - momentum) * mean.reshape(-1).astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1 - momentum) * unbiased.reshape(-1).astype(running_var.dtype)
    else:
        inv_std = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std
    out = xhat * gamma + beta

    def backward(grad):
        gw = (grad * xhat).sum(axis=red).reshape(weight.shape)
        gb = grad.sum(axis=red).reshape(bias.shape)
        gx = None
        if x.requires_grad:
            dxhat = grad * gamma
            if training:
                gx = inv_std * (dxhat - dxhat.mean(axis=red, keepdims=True)
                                - xhat * (dxhat * xhat).mean(axis=red, keepdims=True))
            else:
                gx = dxhat * inv_std
        return gx, gw, gb

    return make_op(out, (x, weight, bias), backward, "batch_norm")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(grad):
        return (grad - soft * grad.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(``logits``)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [B, K] logits and [B] targets, got {logits.shape}, {targets.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(targets)), targets]
    return -picked.mean()
