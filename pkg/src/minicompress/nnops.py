"""Convolution, normalization, pooling and loss kernels.

All kernels are hand-written on top of numpy: convolution lowers to an
im2col buffer followed by one batched matrix product, so BLAS does the
heavy lifting, and the backward passes reuse the buffers captured in the
forward closure.  Convolution is cross-correlation (no kernel flip) and
bias-free; spatial extents shrink by the usual floor rule, and a
non-positive output extent is a configuration error.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor, log_softmax, mul, record, tsum

# im2col helpers -------------------------------------------------------------


def _out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"conv output extent {out} < 1 for size={size} kernel={kernel} "
            f"stride={stride} padding={padding}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Return patches of shape [N, C*kh*kw, OH*OW] plus (OH, OW)."""
    n, c, h, w = x.shape
    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = windows.reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), (oh, ow)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int,
            stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add column gradients back into input layout."""
    n, c, h, w = x_shape
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding),
                      dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        hi = i + stride * oh
        for j in range(kw):
            wj = j + stride * ow
            padded[:, :, i:hi:stride, j:wj:stride] += cols[:, :, i, j]
    if padding:
        return padded[:, :, padding:-padding, padding:-padding]
    return padded


# convolution ----------------------------------------------------------------


def conv2d(x, weight, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Bias-free 2-D cross-correlation.

    ``x`` is [N, Cin, H, W]; ``weight`` is [Cout, Cin/groups, Kh, Kw].
    Differentiable w.r.t. both operands.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(
            f"channel counts ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise DimensionError(
            f"weight expects {cin_g * groups} input channels, input has {cin}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")

    cols, (oh, ow) = _im2col(x.data, kh, kw, stride, padding)
    length = oh * ow
    cout_g = cout // groups
    # [N, G, Cg*kh*kw, L] x [G, Cout_g, Cg*kh*kw] -> [N, G, Cout_g, L]
    cols_g = cols.reshape(n, groups, cin_g * kh * kw, length)
    w2d = weight.data.reshape(groups, cout_g, cin_g * kh * kw)
    out_data = np.matmul(w2d[None], cols_g)
    out = Tensor(out_data.reshape(n, cout, oh, ow))

    def bwd(g):
        g4 = g.reshape(n, groups, cout_g, length)
        gw = np.matmul(g4, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        gw = gw.reshape(weight.data.shape)
        gcols = np.matmul(w2d.transpose(0, 2, 1)[None], g4)
        gx = _col2im(gcols.reshape(n, cin * kh * kw, length),
                     x.data.shape, kh, kw, stride, padding, oh, ow)
        return gx, gw

    return record(out, (x, weight), bwd)


# batch normalization ---------------------------------------------------------


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over [N, C, H, W].

    Train mode normalizes by batch statistics and updates the running
    buffers in place (running variance uses the unbiased estimate); eval
    mode normalizes by the running buffers.  Differentiable w.r.t. the
    input and both affine parameters in either mode.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"affine parameters must have shape ({c},), got {gamma.shape}/{beta.shape}")
    m = n * h * w

    if training:
        if m < 2:
            raise ConfigurationError(
                "train-mode batchnorm needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(xhat * gamma.data[None, :, None, None]
                 + beta.data[None, :, None, None])

    def bwd(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        scale = (gamma.data * inv_std)[None, :, None, None]
        if training:
            gx = scale * (g
                          - (gbeta / m)[None, :, None, None]
                          - xhat * (ggamma / m)[None, :, None, None])
        else:
            gx = scale * g
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), bwd)


# pooling ----------------------------------------------------------------------


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: [N, C, H, W] -> [N, C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(g):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape)
        return (gx.copy(),)

    return record(out, (x,), bwd)


def max_pool2d(x, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; gradients route to the first maximal entry per window."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh = _out_extent(h, kernel, stride, padding)
    ow = _out_extent(w, kernel, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp, shape=(n, c, oh, ow, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    flat = windows.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def bwd(g):
        gp = np.zeros_like(xp)
        ni, ci, ohi, owi = np.indices((n, c, oh, ow))
        hi = ohi * stride + arg // kernel
        wi = owi * stride + arg % kernel
        np.add.at(gp, (ni, ci, hi, wi), g)
        if padding:
            gp = gp[:, :, padding:-padding, padding:-padding]
        return (gp,)

    return record(out, (x,), bwd)


# linear -----------------------------------------------------------------------


def linear(x, weight, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: [N, D] x [K, D] (+ [K]) -> [N, K]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(
            f"linear expects 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear input width {x.shape[1]} != weight width {weight.shape[1]}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(
                f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out_data = out_data + bias.data
    out = Tensor(out_data)

    if bias is None:
        def bwd(g):
            return g @ weight.data, g.T @ x.data
        return record(out, (x, weight), bwd)

    def bwd(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return record(out, (x, weight, bias), bwd)


# losses -----------------------------------------------------------------------


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = as_tensor(logits)
    n, k = logits.shape
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    logp = log_softmax(logits, axis=1)
    return mul(tsum(mul(logp, onehot)), -1.0 / n)


def cosine_distance(a, b) -> Tensor:
    """Per-sample ``1 - cos(a_i, b_i)`` on flattened features, shape [N].

    A zero-norm sample on either side contributes exactly 1 (cosine treated
    as 0) and receives no gradient; this is the documented degenerate case.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    n = a.shape[0]
    af = a.data.reshape(n, -1)
    bf = b.data.reshape(n, -1)
    na = np.sqrt((af * af).sum(axis=1))
    nb = np.sqrt((bf * bf).sum(axis=1))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, (af * bf).sum(axis=1) / denom, 0.0)
    out = Tensor(1.0 - cos)

    def bwd(g):
        # d(1-cos)/da = -(b/(|a||b|) - cos * a/|a|^2); zero where degenerate
        safe_na2 = np.where(ok, na * na, 1.0)
        ga = -(bf / denom[:, None] - cos[:, None] * af / safe_na2[:, None])
        gb_na2 = np.where(ok, nb * nb, 1.0)
        gb = -(af / denom[:, None] - cos[:, None] * bf / gb_na2[:, None])
        mask = ok[:, None]
        ga = (ga * mask) * g[:, None]
        gb = (gb * mask) * g[:, None]
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return record(out, (a, b), bwd)
