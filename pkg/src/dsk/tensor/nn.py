"""Differentiable network building blocks on top of the tape engine.

All spatial operations assume a periodic domain: the only padding mode for
convolutions is circular wrap-around, matching the physics the network is
trained on. Spatial tensors are `[channels, length]` or
`[batch, channels, length]`; both ranks are accepted and the output rank
follows the input.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .engine import ShapeError, Tensor, _lift, _result, needs_grad

__all__ = [
    "gelu",
    "conv1d_circular",
    "group_norm",
    "linear",
    "concat_channels",
    "upsample_nearest",
    "take_positions",
    "add_channel_bias",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact-erf GELU, x * Phi(x)."""
    x = _lift(x)
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def backward(g, xd=xd, phi=phi):
        # d/dx [x Phi(x)] = Phi(x) + x phi(x)
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi + xd * pdf),)

    return _result(out, (x,), backward)


def _spatial_3d(x: Tensor, opname: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 2:
        return x.data[None], True
    if x.data.ndim == 3:
        return x.data, False
    raise ShapeError(f"{opname}: expected [C, L] or [B, C, L], got shape {x.shape}")


def conv1d_circular(x, w, b, stride: int = 1) -> Tensor:
    """Circular cross-correlation: x [.., C_in, L] * w [C_out, C_in, K] + b [C_out].

    K must be odd; L must be divisible by stride. The input is wrapped by
    (K-1)/2 cells on each side, so output length is L // stride.
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    xd, squeeze = _spatial_3d(x, "conv1d_circular")
    wd, bd = w.data, b.data
    if wd.ndim != 3:
        raise ShapeError(f"conv1d_circular: weight must be [C_out, C_in, K], got {w.shape}")
    c_out, c_in, k = wd.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d_circular: kernel width must be odd, got {k}")
    if bd.shape != (c_out,):
        raise ShapeError(f"conv1d_circular: bias shape {b.shape} does not match C_out={c_out}")
    batch, c_x, length = xd.shape
    if c_x != c_in:
        raise ShapeError(f"conv1d_circular: input has {c_x} channels, weight expects {c_in}")
    if length % stride != 0:
        raise ShapeError(f"conv1d_circular: length {length} not divisible by stride {stride}")
    pad = (k - 1) // 2
    if 2 * pad > length:
        raise ShapeError(f"conv1d_circular: kernel width {k} exceeds wrap limit for length {length}")

    if pad:
        xp = np.concatenate([xd[..., -pad:], xd, xd[..., :pad]], axis=-1)
    else:
        xp = xd
    win = sliding_window_view(xp, k, axis=-1)[:, :, ::stride, :]  # [B, C_in, L_out, K]
    l_out = length // stride
    # out[b,o,l] = sum_{i,k} win[b,i,l,k] w[o,i,k]; the bias add also
    # materializes the contiguous [B, C_out, L_out] layout
    out = np.tensordot(win, wd, axes=([1, 3], [1, 2]))  # [B, L_out, C_out]
    out = out.transpose(0, 2, 1) + bd[None, :, None]

    needs_x, needs_w, needs_b = needs_grad(x), needs_grad(w), needs_grad(b)
    win_saved = win if (needs_x or needs_w) else None

    def backward(g):
        if squeeze:
            g = g[None]
        gx = gw = gb = None
        if needs_b:
            gb = g.sum(axis=(0, 2))
        if needs_w:
            gw = np.tensordot(g, win_saved, axes=([0, 2], [0, 2]))  # [C_out, C_in, K]
        if needs_x:
            g_win = np.tensordot(g, wd, axes=([1], [0]))  # [B, L_out, C_in, K]
            g_win = g_win.transpose(0, 2, 1, 3)  # [B, C_in, L_out, K]
            gxp = np.zeros((batch, c_in, length + 2 * pad))
            # taps at different k overlap between output positions; one
            # strided accumulation per tap keeps each += collision-free
            for kk in range(k):
                gxp[:, :, kk:kk + l_out * stride:stride] += g_win[:, :, :, kk]
            gx = np.ascontiguousarray(gxp[:, :, pad:pad + length])
            if pad:
                gx[:, :, :pad] += gxp[:, :, length + pad:]
                gx[:, :, length - pad:] += gxp[:, :, :pad]
            if squeeze:
                gx = gx[0]
        return (gx, gw, gb)

    return _result(out[0] if squeeze else out, (x, w, b), backward)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-group standardization over (channel, length) followed by affine."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    xd, squeeze = _spatial_3d(x, "group_norm")
    batch, c, length = xd.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match {c} channels")
    per = (c // groups) * length
    xg = xd.reshape(batch, groups, per)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(batch, c, length)
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    needs_x, needs_g, needs_b = needs_grad(x), needs_grad(gamma), needs_grad(beta)

    def backward(g):
        if squeeze:
            g = g[None]
        gx = gg = gb = None
        if needs_b:
            gb = g.sum(axis=(0, 2))
        if needs_g:
            gg = (g * xhat).sum(axis=(0, 2))
        if needs_x:
            dxhat = (g * gamma.data[None, :, None]).reshape(batch, groups, per)
            xh = xhat.reshape(batch, groups, per)
            s1 = dxhat.sum(axis=2, keepdims=True)
            s2 = (dxhat * xh).sum(axis=2, keepdims=True)
            gx = inv_std * (dxhat - (s1 + xh * s2) / per)
            gx = gx.reshape(batch, c, length)
            if squeeze:
                gx = gx[0]
        return (gx, gg, gb)

    return _result(out[0] if squeeze else out, (x, gamma, beta), backward)


def linear(x, w, b) -> Tensor:
    """Affine map x [.., D_in] @ w [D_in, D_out] + b [D_out]."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2:
        raise ShapeError(f"linear: weight must be [D_in, D_out], got {w.shape}")
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if bd.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match D_out={wd.shape[1]}")
    out = xd @ wd + bd

    needs_x, needs_w, needs_b = needs_grad(x), needs_grad(w), needs_grad(b)

    def backward(g):
        gx = g @ wd.T if needs_x else None
        gw = None
        if needs_w:
            gw = np.tensordot(xd, g, axes=(range(xd.ndim - 1), range(g.ndim - 1)))
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if needs_b else None
        return (gx, gw, gb)

    return _result(out, (x, w, b), backward)


def concat_channels(a, b) -> Tensor:
    """Concatenate along the channel axis of [.., C, L] tensors."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[-2]
    out = np.concatenate([a.data, b.data], axis=-2)

    def backward(g, ca=ca):
        ga = g[..., :ca, :] if needs_a else None
        gb = g[..., ca:, :] if needs_b else None
        return (ga, gb)

    needs_a, needs_b = needs_grad(a), needs_grad(b)
    return _result(out, (a, b), backward)


def upsample_nearest(x, factor: int) -> Tensor:
    """Repeat each spatial sample `factor` times along the last axis."""
    x = _lift(x)
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    out = np.repeat(x.data, factor, axis=-1)

    def backward(g, factor=factor, shape=x.shape):
        return (g.reshape(*shape, factor).sum(axis=-1),)

    return _result(out, (x,), backward)


def take_positions(x, indices) -> Tensor:
    """Gather positions along the last axis; backward scatter-adds."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take_positions: indices must be 1-D, got shape {idx.shape}")
    length = x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise ShapeError(f"take_positions: index out of range for length {length}")
    out = x.data[..., idx]

    def backward(g, idx=idx, shape=x.shape):
        gx = np.zeros(shape)
        np.add.at(gx, (..., idx), g)
        return (gx,)

    return _result(out, (x,), backward)


def add_channel_bias(x, b) -> Tensor:
    """Add a per-channel bias to [.., C, L]: b is [C] or [B, C] for batched x."""
    x, b = _lift(x), _lift(b)
    xd, squeeze = _spatial_3d(x, "add_channel_bias")
    bd = b.data
    batch, c, length = xd.shape
    if bd.shape == (c,):
        out = xd + bd[None, :, None]
        reduce_axes = (0, 2)
    elif bd.shape == (batch, c) and not squeeze:
        out = xd + bd[:, :, None]
        reduce_axes = (2,)
    else:
        raise ShapeError(f"add_channel_bias: bias shape {b.shape} does not fit input {x.shape}")

    def backward(g, squeeze=squeeze, reduce_axes=reduce_axes):
        if squeeze:
            g = g[None]
        gx = (g[0] if squeeze else g) if needs_x else None
        gb = g.sum(axis=reduce_axes) if needs_b else None
        return (gx, gb)

    needs_x, needs_b = needs_grad(x), needs_grad(b)
    return _result(out[0] if squeeze else out, (x, b), backward)
