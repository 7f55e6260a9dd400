"""Forward/backward kernels for every layer the models need.

Each op returns a fresh Tensor wired into the autograd graph. Kernels are
dtype-polymorphic (float32 in production, float64 under the finite-difference
oracles) and use matmul/einsum fast paths for the conv patterns the models
actually hit: 1x1 pointwise, non-overlapping stride==k "patchify" stems, and
7x7 depthwise.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MaskError, ShapeError
from .tensor import Tensor, grad_enabled

LN_EPS = 1e-6
BN_EPS = 1e-5
GRN_EPS = 1e-6
_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def _result(data, parents, backward_fn, op):
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _need(t) -> bool:
    return t is not None and t.requires_grad


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def mul_const(a: Tensor, const) -> Tensor:
    """Multiply by a fixed (non-learnable) array, e.g. a binary mask."""
    c = np.asarray(const, dtype=a.dtype)
    return _result(a.data * c, (a,), lambda g: (g * c,), "mul_const")


# ---------------------------------------------------------------------------
# convolution


def _conv_check(x, w, stride, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    k = kh
    if c % groups or co % groups:
        raise ShapeError(f"conv2d: groups={groups} must divide C_in={c} and C_out={co}")
    if cig != c // groups:
        raise ShapeError(
            f"conv2d: weight expects {cig * groups} input channels (groups={groups}), input has {c}"
        )
    if stride == 1:
        pad = k // 2
    elif stride == k:
        pad = 0
    else:
        raise ShapeError(f"conv2d: stride must be 1 or equal to kernel size, got stride={stride} k={k}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{wd} too small for kernel {k} stride {stride}")
    return k, pad, ho, wo


def _pointwise_fw(x, wmat):
    n, c, h, w = x.shape
    y = np.matmul(wmat, x.reshape(n, c, h * w))
    return y.reshape(n, wmat.shape[0], h, w)


def _patchify_fw(x, w, k):
    n, c, h, wd = x.shape
    ho, wo = h // k, wd // k
    cols = (
        x[:, :, : ho * k, : wo * k]
        .reshape(n, c, ho, k, wo, k)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n, ho, wo, c * k * k)
    )
    y = cols @ w.reshape(w.shape[0], -1).T
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols


def _depthwise_fw(xp, w, h, wo_):
    # 49 shifted fused multiply-adds; xp already padded, output same HxW.
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[-1]
    out = np.zeros((n, c, h, wo_), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + h, j : j + wo_] * w[None, :, 0, i, j, None, None]
    return out


def _general_fw(xp, w, stride, groups, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[-1]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    wing = win.reshape(n, groups, c // groups, ho, wo, k, k)
    wg = w.reshape(groups, w.shape[0] // groups, c // groups, k, k)
    y = np.einsum("ngihwkl,goikl->ngohw", wing, wg)
    return y.reshape(n, w.shape[0], ho, wo)


def _conv_grad_x(w, gout, xshape, k, stride, pad, groups):
    n, c, h, wd = xshape
    co = w.shape[0]
    ho, wo = gout.shape[2], gout.shape[3]
    hp, wp = h + 2 * pad, wd + 2 * pad
    gx = np.zeros((n, groups, c // groups, hp, wp), dtype=gout.dtype)
    wg = w.reshape(groups, co // groups, c // groups, k, k)
    go = gout.reshape(n, groups, co // groups, ho, wo)
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("goi,ngohw->ngihw", wg[:, :, :, i, j], go)
            gx[:, :, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    gx = gx.reshape(n, c, hp, wp)
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + wd]
    return gx


def _conv_grad_w(x, gout, k, stride, pad, groups):
    n, c = x.shape[0], x.shape[1]
    co = gout.shape[1]
    ho, wo = gout.shape[2], gout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    wing = win.reshape(n, groups, c // groups, ho, wo, k, k)
    go = gout.reshape(n, groups, co // groups, ho, wo)
    gw = np.einsum("ngohw,ngihwkl->goikl", go, wing)
    return gw.reshape(co, c // groups, k, k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, groups: int = 1) -> Tensor:
    """2-d convolution, NCHW. Padding is k//2 for stride 1, none for stride==k."""
    k, pad, ho, wo = _conv_check(x, w, stride, groups)
    n, c, h, wd = x.shape
    co = w.shape[0]
    xd, wdat = x.data, w.data

    cols = None
    if k == 1 and stride == 1 and groups == 1:
        out = _pointwise_fw(xd, wdat.reshape(co, c))
    elif stride == k and groups == 1:
        out, cols = _patchify_fw(xd, wdat, k)
    elif groups == c and co == c and stride == 1:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        out = _depthwise_fw(xp, wdat, ho, wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        out = _general_fw(xp, wdat, stride, groups, ho, wo)
    if b is not None:
        if b.data.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({co},)")
        out += b.data.reshape(1, co, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = gw = gb = None
        if _need(x):
            if k == 1 and stride == 1 and groups == 1:
                gx = np.matmul(wdat.reshape(co, c).T, g.reshape(n, co, ho * wo)).reshape(n, c, h, wd)
            else:
                gx = _conv_grad_x(wdat, g, x.shape, k, stride, pad, groups)
        if _need(w):
            if k == 1 and stride == 1 and groups == 1:
                gw = np.einsum("nop,ncp->oc", g.reshape(n, co, ho * wo), xd.reshape(n, c, ho * wo))
                gw = gw.reshape(co, c, 1, 1)
            elif cols is not None:
                gt = g.transpose(0, 2, 3, 1).reshape(-1, co)
                gw = (gt.T @ cols.reshape(-1, c * k * k)).reshape(co, c, k, k)
            else:
                gw = _conv_grad_w(xd, g, k, stride, pad, groups)
        if b is not None and _need(b):
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# linear maps


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b over the last axis; weight is (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    fin, fout = w.shape[1], w.shape[0]

    def backward(g):
        gx = g @ w.data if _need(x) else None
        gw = g.reshape(-1, fout).T @ x.data.reshape(-1, fin) if _need(w) else None
        gb = g.reshape(-1, fout).sum(axis=0) if (b is not None and _need(b)) else None
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(y, parents, backward, "linear")


def channel_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-position linear map over the channel axis of an NCHW tensor."""
    n, c, h, wd = x.shape
    if w.shape[1] != c:
        raise ShapeError(f"channel_linear: weight in-features {w.shape[1]} != channels {c}")
    o = w.shape[0]
    y = np.matmul(w.data, x.data.reshape(n, c, h * wd)).reshape(n, o, h, wd)
    if b is not None:
        y += b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(n, o, h * wd)
        gx = np.matmul(w.data.T, g2).reshape(n, c, h, wd) if _need(x) else None
        gw = np.einsum("nop,ncp->oc", g2, x.data.reshape(n, c, h * wd)) if _need(w) else None
        gb = g.sum(axis=(0, 2, 3)) if (b is not None and _need(b)) else None
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(y, parents, backward, "channel_linear")


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int) -> Tensor:
    """Normalize over one axis (channel axis 1 for NCHW, -1 for vectors)."""
    nfeat = x.shape[axis]
    if gamma.shape != (nfeat,) or beta.shape != (nfeat,):
        raise ShapeError(f"layer_norm: affine shape {gamma.shape} does not match axis size {nfeat}")
    bshape = [1] * x.ndim
    bshape[axis] = nfeat
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, x.dtype))
    xn = xc * inv
    y = gam * xn + bet

    def backward(g):
        gxn = g * gam
        gx = None
        if _need(x):
            m1 = gxn.mean(axis=axis, keepdims=True)
            m2 = (gxn * xn).mean(axis=axis, keepdims=True)
            gx = inv * (gxn - m1 - xn * m2)
        red = tuple(i for i in range(x.ndim) if i != (axis % x.ndim))
        gg = (g * xn).sum(axis=red) if _need(gamma) else None
        gb = g.sum(axis=red) if _need(beta) else None
        return gx, gg, gb

    return _result(y, (x, gamma, beta), backward, "layer_norm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization (channel axis 1, stats over the rest).

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place (unbiased variance when more than one element
    contributes, as is conventional). Eval mode uses the running buffers.
    """
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: need at least 2-d input, got {x.shape}")
    c = x.shape[1]
    red = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = c
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)
    nred = int(np.prod([x.shape[i] for i in red]))
    eps = np.asarray(BN_EPS, x.dtype)

    if training:
        mu = x.data.mean(axis=red)
        xc = x.data - mu.reshape(bshape)
        var = np.mean(xc * xc, axis=red)
        var_update = var * (nred / (nred - 1)) if nred > 1 else var
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var_update
        inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
        xn = xc * inv
    else:
        inv = (1.0 / np.sqrt(running_var.data + eps)).reshape(bshape)
        xn = (x.data - running_mean.data.reshape(bshape)) * inv
    y = gam * xn + bet

    def backward(g):
        gxn = g * gam
        gx = None
        if _need(x):
            if training:
                m1 = gxn.mean(axis=red).reshape(bshape)
                m2 = (gxn * xn).mean(axis=red).reshape(bshape)
                gx = inv * (gxn - m1 - xn * m2)
            else:
                gx = gxn * inv
        gg = (g * xn).sum(axis=red) if _need(gamma) else None
        gb = g.sum(axis=red) if _need(beta) else None
        return gx, gg, gb, None, None

    return _result(y, (x, gamma, beta, running_mean, running_var), backward, "batch_norm")


def grn(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Global response normalization over an NCHW tensor.

    Per channel c: G_c = ||x_c||_2 over spatial dims, N_c = G_c / (mean_c G + eps),
    y = gamma * (x * N_c) + beta + x. Zero-initialized gamma/beta make it identity.
    """
    if x.ndim != 4:
        raise ShapeError(f"grn: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"grn: affine shape {gamma.shape} does not match channels {c}")
    gam = gamma.data.reshape(1, c, 1, 1)
    bet = beta.data.reshape(1, c, 1, 1)

    gnorm = np.sqrt((x.data * x.data).sum(axis=(2, 3)))  # (N, C)
    m = gnorm.mean(axis=1, keepdims=True) + np.asarray(GRN_EPS, x.dtype)  # (N, 1)
    nc = gnorm / m  # (N, C)
    scaled = x.data * nc[:, :, None, None]
    y = gam * scaled + bet + x.data

    def backward(g):
        gx = None
        if _need(x):
            s = (g * x.data).sum(axis=(2, 3)) * gamma.data[None, :]  # (N, C)
            dg_direct = s / m
            dm = -(s * gnorm).sum(axis=1, keepdims=True) / (m * m)
            dg = dg_direct + dm / c
            safe = np.where(gnorm > 0, gnorm, 1.0)
            unit = np.where(gnorm[:, :, None, None] > 0, x.data / safe[:, :, None, None], 0.0)
            gx = g * (gam * nc[:, :, None, None] + 1.0) + dg[:, :, None, None] * unit
        gg = (g * scaled).sum(axis=(0, 2, 3)) if _need(gamma) else None
        gb = g.sum(axis=(0, 2, 3)) if _need(beta) else None
        return gx, gg, gb

    return _result(y, (x, gamma, beta), backward, "grn")


# ---------------------------------------------------------------------------
# activations


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c0 = np.asarray(_GELU_C0, xd.dtype)
    c1 = np.asarray(_GELU_C1, xd.dtype)
    x2 = xd * xd
    t = np.tanh(c0 * xd * (1.0 + c1 * x2))
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = c0 * (1.0 + 3.0 * c1 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result(y, (x,), backward, "gelu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data >= 0
    y = np.where(pos, x.data, slope * x.data)

    def backward(g):
        return (g * np.where(pos, np.asarray(1.0, g.dtype), np.asarray(slope, g.dtype)),)

    return _result(y, (x,), backward, "leaky_relu")


# ---------------------------------------------------------------------------
# pooling / reshaping


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(y, (x,), backward, "global_avg_pool")


def patches_to_image(x: Tensor, patch: int, channels: int) -> Tensor:
    """(N, C*patch^2, h, w) -> (N, C, h*patch, w*patch) pixel unshuffle inverse.

    Channel index c*patch^2 + pi*patch + pj holds pixel (pi, pj) of the patch
    for image channel c.
    """
    n, cpp, h, w = x.shape
    if cpp != channels * patch * patch:
        raise ShapeError(f"patches_to_image: {cpp} channels != {channels}*{patch}^2")
    y = (
        x.data.reshape(n, channels, patch, patch, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, channels, h * patch, w * patch)
    )

    def backward(g):
        gx = (
            g.reshape(n, channels, h, patch, w, patch)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, cpp, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _result(np.ascontiguousarray(y), (x,), backward, "patches_to_image")


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient 0 at exact ties."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    y = np.abs(diff).mean()

    def backward(g):
        base = np.sign(diff) / diff.size
        gp = g * base if _need(pred) else None
        gt = -g * base if _need(target) else None
        return gp, gt

    return _result(np.asarray(y, pred.dtype), (pred, target), backward, "l1_loss")


def masked_mse(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Sum of squared differences at masked positions / count of masked positions.

    The mask is binary (1 = counted) and broadcastable to the prediction; the
    count is taken over the broadcast mask. An all-zero mask is an error.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"masked_mse: shape mismatch {pred.shape} vs {target.shape}")
    try:
        mb = np.broadcast_to(mask.data, pred.shape)
    except ValueError as e:
        raise ShapeError(f"masked_mse: mask {mask.shape} not broadcastable to {pred.shape}") from e
    phi = float(mb.sum())
    if phi == 0.0:
        raise MaskError("masked_mse: empty mask (no masked positions)")
    diff = (pred.data - target.data) * mb
    y = (diff * diff).sum() / phi

    def backward(g):
        base = (2.0 / phi) * diff  # diff already carries the mask
        gp = g * base if _need(pred) else None
        gt = -g * base if _need(target) else None
        return gp, gt, None

    return _result(np.asarray(y, pred.dtype), (pred, target, mask), backward, "masked_mse")
