"""Differentiable layer primitives and losses (NCHW layout throughout)."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, as_tensor, concat, make_result


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view (N, C, Ho, Wo, kh, kw) of all kernel windows."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation; ``weight`` has shape (out, in, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if c != in_c:
        raise ValueError(f"input has {c} channels, weight expects {in_c}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive conv output extent ({ho}, {wo}) for input {x.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (out_c,):
            raise ValueError(f"bias shape {bias.shape} does not match {out_c} output channels")

    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    # im2col columns are ordered (kh, kw, c); gathering channel-innermost is the cheap copy
    if pointwise:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 4, 5, 1).reshape(-1, kh * kw * c)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1).reshape(out_c, -1))
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_c)
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(out_c, kh, kw, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if pointwise:
                gx = np.ascontiguousarray(dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                dcols = dcols.reshape(n, ho, wo, kh, kw, c)
                dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + hs:stride, j:j + ws:stride] += \
                            dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
                gx = dxp[:, :, padding:padding + h, padding:padding + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in_features, out_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    if bias is not None and as_tensor(bias).shape != (weight.shape[1],):
        raise ValueError(f"bias shape {as_tensor(bias).shape} != ({weight.shape[1]},)")
    out = x @ weight
    return out + bias if bias is not None else out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), bw)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)

    def bw(g):
        return (g * slope,)

    return make_result(x.data * slope, (x,), bw)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W) for NCHW or (N,) for NC input.

    In training mode the running buffers are updated in place (unbiased
    variance); in eval mode only the running statistics are used.
    """
    x = as_tensor(x)
    c = x.shape[1]
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ValueError(f"batch_norm state has {gamma.shape[0]} channels, input has {c}")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, c, 1, 1) if x.ndim == 4 else (1, c)
    count = x.size // c
    g_b, b_b = gamma.data.reshape(bshape), beta.data.reshape(bshape)

    if training:
        if count <= 1:
            raise ValueError("batch_norm in training mode needs more than one value per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = xhat * g_b + b_b

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            gxhat = g * g_b
            if training:
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (gxhat - s1 / count - xhat * (s2 / count)) * inv_std.reshape(bshape)
            else:
                dx = gxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), bw)


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; the gradient goes to the first maximal element of each window."""
    stride = stride or kernel
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ValueError(f"pool window {kernel} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, kernel, stride, 0), conv_output_size(w, kernel, stride, 0)
    win = _windows(x.data, kernel, kernel, stride).reshape(n, c, ho, wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros_like(x.data)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            dx[:, :, i:i + hs:stride, j:j + ws:stride] += g * (idx == t)
        return (dx,)

    return make_result(out, (x,), bw)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ValueError(f"pool window {kernel} larger than input {h}x{w}")
    ho, wo = conv_output_size(h, kernel, stride, 0), conv_output_size(w, kernel, stride, 0)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    # window taps summed in row-major order, then divided once
    acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            acc += x.data[:, :, i:i + hs:stride, j:j + ws:stride]
    out = acc / x.dtype.type(kernel * kernel)

    def bw(g):
        dx = np.zeros_like(x.data)
        share = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i:i + hs:stride, j:j + ws:stride] += share
        return (dx,)

    return make_result(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over H and W: (N, C, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3))


def pool(x: Tensor, kind: str, window: int = 2, stride: Optional[int] = None) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window, stride)
    if kind == "avg":
        return avg_pool2d(x, window, stride)
    if kind == "global_avg":
        return global_avg_pool(x)
    raise ValueError(f"unknown pool kind {kind!r}")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return make_result(loss, (logits,), bw)


def disc_l2_loss(d_out: Tensor, target: float) -> Tensor:
    """``(1/N) * sum_i (target - d_out_i)^2`` for discriminator scores of shape (N, 1)."""
    d_out = as_tensor(d_out)
    if d_out.shape[0] == 0:
        raise ValueError("disc_l2_loss needs a non-empty batch")
    if not np.isfinite(target):
        raise ValueError("target must be finite")
    diff = d_out - float(target)
    return (diff * diff).sum() / d_out.shape[0]


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"cannot concatenate {t.shape} with {ref} along channels")
    return concat(tensors, axis=1)


def sum_features(*tensors: Tensor) -> Tensor:
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    out = tensors[0]
    for t in tensors[1:]:
        if t.shape != out.shape:
            raise ValueError(f"sum fusion needs identical shapes, got {out.shape} and {t.shape}")
        out = out + t
    return out


def split_channels(x: Tensor, sizes: Sequence[int]) -> list:
    out, lo = [], 0
    for s in sizes:
        out.append(x[:, lo:lo + s])
        lo += s
    return out
