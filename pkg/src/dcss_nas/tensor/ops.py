"""Differentiable primitives used by the supernet, its regularizers and its loss.

Each primitive computes its forward result with numpy and records a backward
rule through :func:`dcss_nas.tensor.core.record`. Convolution runs as
im2col followed by one batched matrix multiply; :func:`conv2d_direct` keeps
a plain nested-loop rendition as a correctness reference.
"""

from __future__ import annotations

import contextvars
from collections.abc import Sequence
from typing import TYPE_CHECKING, Any

import numpy as np

from dcss_nas.errors import LabelError, NumericalError, ShapeError
from dcss_nas.tensor.core import Tensor, record

if TYPE_CHECKING:
    from numpy.typing import NDArray

    Array = NDArray[np.float64]
    IntArray = NDArray[np.int64]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
IGNORE_INDEX = 255

# multiply-accumulate counter consulted by dcss_nas.complexity.count_flops
_mac_counter: contextvars.ContextVar[list[int] | None] = contextvars.ContextVar(
    "mac_counter", default=None
)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` back down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def rule(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def rule(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def rule(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), rule)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    if not tensors:
        raise ShapeError("add_n", "operand count", ">= 1", 0)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("add_n", "shape", shape, t.shape)
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data

    def rule(g: Array) -> list[Array]:
        return [g] * len(tensors)

    return record("add_n", total, tensors, rule)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    def rule(g: Array) -> tuple[Array]:
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", np.asarray(a.data.sum()), (a,), rule)


def mean(a: Tensor) -> Tensor:
    n = a.size

    def rule(g: Array) -> tuple[Array]:
        return (np.full(a.shape, float(g) / n),)

    return record("mean", np.asarray(a.data.mean()), (a,), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def rule(g: Array) -> tuple[Array]:
        return (g.reshape(a.shape),)

    return record("reshape", a.data.reshape(tuple(shape)), (a,), rule)


def weighted_sum(weights: Tensor, tensors: Sequence[Tensor]) -> Tensor:
    """``sum_k weights[k] * tensors[k]`` for a 1-D weight vector."""
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise ShapeError("weighted_sum", "weight count", len(tensors), weights.shape)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("weighted_sum", "operand shape", shape, t.shape)
    w = weights.data
    out = w[0] * tensors[0].data
    for k in range(1, len(tensors)):
        out = out + w[k] * tensors[k].data

    def rule(g: Array) -> list[Array]:
        gw = np.array([float(np.vdot(g, t.data)) for t in tensors])
        return [gw, *(w[k] * g for k in range(len(tensors)))]

    return record("weighted_sum", out, (weights, *tensors), rule)


# ---------------------------------------------------------------------------
# Activations and normalized exponentials
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def rule(g: Array) -> tuple[Array]:
        # subgradient 0 at the kink
        return (g * mask,)

    return record("relu", a.data * mask, (a,), rule)


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)

    def rule(g: Array) -> tuple[Array]:
        return (g * s * (1.0 - s),)

    return record("sigmoid", s, (a,), rule)


def softplus(a: Tensor) -> Tensor:
    """``ln(1 + e^x)`` without overflow for large ``|x|``."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def rule(g: Array) -> tuple[Array]:
        return (g * _stable_sigmoid(x),)

    return record("softplus", out, (a,), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g: Array) -> tuple[Array]:
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", s, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def rule(g: Array) -> tuple[Array]:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), rule)


# ---------------------------------------------------------------------------
# Indexing, concatenation and channel routing
# ---------------------------------------------------------------------------


def take(a: Tensor, indices: Sequence[int] | IntArray, axis: int = 0) -> Tensor:
    """Select ``indices`` along ``axis``; gradients scatter back additively."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim

    def rule(g: Array) -> tuple[Array]:
        out = np.zeros(a.shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return record("take", np.take(a.data, idx, axis=ax), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "operand count", ">= 1", 0)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        for d in range(t.ndim):
            if d != ax and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError("concat", f"dim {d}", tensors[0].shape[d], t.shape[d])
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g: Array) -> list[Array]:
        return list(np.split(g, bounds, axis=ax))

    return record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, rule)


def scatter_channels(parts: Sequence[tuple[Tensor, IntArray]], channels: int) -> Tensor:
    """Assemble an NCHW map whose channel ``idx[j]`` comes from channel ``j`` of a part.

    The index sets must partition ``range(channels)``; values are copied, so
    channels routed from an input arrive bit-identical.
    """
    if not parts:
        raise ShapeError("scatter_channels", "part count", ">= 1", 0)
    n, _, h, w = parts[0][0].shape
    covered = np.concatenate([np.asarray(idx) for _, idx in parts])
    if covered.size != channels or np.unique(covered).size != channels:
        raise ShapeError("scatter_channels", "channel cover", channels, covered.size)
    out = np.empty((n, channels, h, w))
    for tensor, idx in parts:
        if tensor.shape != (n, len(idx), h, w):
            raise ShapeError("scatter_channels", "part shape", (n, len(idx), h, w), tensor.shape)
        out[:, idx] = tensor.data

    def rule(g: Array) -> list[Array]:
        return [g[:, idx] for _, idx in parts]

    return record("scatter_channels", out, [t for t, _ in parts], rule)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: Array, kernel: int, stride: int, oh: int, ow: int) -> Array:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kernel, kernel, oh, ow))
    for i in range(kernel):
        for j in range(kernel):
            rows = slice(i, i + stride * (oh - 1) + 1, stride)
            cols[:, :, i, j] = xp[:, :, rows, slice(j, j + stride * (ow - 1) + 1, stride)]
    return cols


def _col2im(
    cols: Array, padded_shape: tuple[int, ...], kernel: int, stride: int, oh: int, ow: int
) -> Array:
    xp = np.zeros(padded_shape)
    for i in range(kernel):
        for j in range(kernel):
            rows = slice(i, i + stride * (oh - 1) + 1, stride)
            xp[:, :, rows, slice(j, j + stride * (ow - 1) + 1, stride)] += cols[:, :, i, j]
    return xp


def _check_conv(
    x_shape: tuple[int, ...], w_shape: tuple[int, ...], stride: int, padding: int, groups: int
) -> tuple[int, int]:
    if len(x_shape) != 4:
        raise ShapeError("conv2d", "input rank", 4, len(x_shape))
    if len(w_shape) != 4:
        raise ShapeError("conv2d", "weight rank", 4, len(w_shape))
    _, cin, h, w = x_shape
    cout, cin_g, kh, kw = w_shape
    if groups < 1 or cin % groups:
        raise ShapeError("conv2d", "input channels divisible by groups", groups, cin)
    if cout % groups:
        raise ShapeError("conv2d", "output channels divisible by groups", groups, cout)
    if cin_g != cin // groups:
        raise ShapeError("conv2d", "weight input channels", cin // groups, cin_g)
    if kh != kw:
        raise ShapeError("conv2d", "kernel width", kh, kw)
    if stride < 1:
        raise ShapeError("conv2d", "stride", ">= 1", stride)
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", "spatial extent", f">= {kh - 2 * padding}", (h, w))
    return oh, ow


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input with weight ``[Cout, Cin/groups, k, k]``."""
    oh, ow = _check_conv(x.shape, weight.shape, stride, padding, groups)
    n, cin, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d", "bias", (cout,), bias.shape)
    cout_g = cout // groups
    p = oh * ow
    kk = cin_g * k * k

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, oh, ow).reshape(n, groups, kk, p)
    w_g = weight.data.reshape(groups, cout_g, kk)
    out = np.matmul(w_g[None], cols).reshape(n, cout, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    counter = _mac_counter.get()
    if counter is not None:
        counter[0] += n * cout * p * kk

    def rule(g: Array) -> list[Array | None]:
        go = g.reshape(n, groups, cout_g, p)
        gw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(w_g.transpose(0, 2, 1)[None], go).reshape(n, cin, k, k, oh, ow)
        gxp = _col2im(gcols, xp.shape, k, stride, oh, ow)
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        grads: list[Array | None] = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, rule)


def conv2d_direct(
    x: Array,
    weight: Array,
    bias: Array | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Array:
    """Nested-loop convolution on raw arrays; the reference the fast path is checked against."""
    oh, ow = _check_conv(x.shape, weight.shape, stride, padding, groups)
    n, cin, _, _ = x.shape
    cout, cin_g, k, _ = weight.shape
    cout_g = cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            g = o // cout_g
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0
                    for c in range(cin_g):
                        for i in range(k):
                            for j in range(k):
                                acc += (
                                    weight[o, c, i, j]
                                    * xp[b, g * cin_g + c, y * stride + i, z * stride + j]
                                )
                    out[b, o, y, z] = acc + (bias[o] if bias is not None else 0.0)
    return out


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def interpolation_matrix(in_size: int, out_size: int) -> Array:
    """Row-stochastic ``[out, in]`` matrix for 1-D linear interpolation (align_corners=False)."""
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("resize_bilinear", "input rank", 4, x.ndim)
    _, _, h, w = x.shape
    mh = interpolation_matrix(h, out_h)
    mw = interpolation_matrix(w, out_w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def rule(g: Array) -> tuple[Array]:
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return record("resize_bilinear", out, (x,), rule)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError("bilinear_upsample", "factor", ">= 1", factor)
    if factor & (factor - 1):
        raise ShapeError("bilinear_upsample", "factor", "power of two", factor)
    if factor == 1:
        return x
    _, _, h, w = x.shape
    return resize_bilinear(x, h * factor, w * factor)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta_shift: Tensor,
    running_mean: Array,
    running_var: Array,
    *,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics normalize the input and the running
    buffers are updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm", "input rank", 4, x.ndim)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta_shift.shape != (c,):
        raise ShapeError("batch_norm", "affine channels", (c,), (gamma.shape, beta_shift.shape))
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError("batch_norm", "running stats channels", (c,), running_mean.shape)
    gam = gamma.data[None, :, None, None]
    bet = beta_shift.data[None, :, None, None]

    if training:
        m = n * h * w
        if m == 1:
            raise ShapeError("batch_norm", "batch*height*width", "> 1 in training mode", m)
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / (m - 1))

        def rule(g: Array) -> tuple[Array, Array, Array]:
            dxhat = g * gam
            dx = (
                inv_std[None, :, None, None]
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def rule(g: Array) -> tuple[Array, Array, Array]:
            dx = g * gam * inv_std[None, :, None, None]
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("batch_norm", gam * xhat + bet, (x, gamma, beta_shift), rule)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy(
    logits: Tensor, labels: NDArray[Any], ignore_index: int = IGNORE_INDEX
) -> Tensor:
    """Mean pixel-wise cross entropy over pixels whose label is not ``ignore_index``."""
    if logits.ndim != 4:
        raise ShapeError("cross_entropy", "logits rank", 4, logits.ndim)
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError("cross_entropy", "label shape", (n, h, w), labels.shape)
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise NumericalError("cross_entropy: every pixel carries ignore_index")
    lab = np.where(valid, labels, 0).astype(np.int64)
    if lab.min() < 0 or lab.max() >= c:
        raise LabelError(f"cross_entropy: labels must lie in [0, {c}) or equal {ignore_index}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def rule(g: Array) -> tuple[Array]:
        grad = np.exp(logp)
        target = np.take_along_axis(grad, lab[:, None], axis=1) - 1.0
        np.put_along_axis(grad, lab[:, None], target, axis=1)
        grad *= valid[:, None] * (float(g) / count)
        return (grad,)

    return record("cross_entropy", np.asarray(loss), (logits,), rule)
