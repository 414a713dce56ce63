"""Fused differentiable operations built on NumericArray."""
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from gaussfusion.core.errors import ContractError, DimensionError
from gaussfusion.core.tensor import NumericArray, lift, make, matmul, pad

Layer = Tuple[NumericArray, NumericArray, str]


def softmax(x: NumericArray, axis: int = -1) -> NumericArray:
    x = lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make(y, (x,), backward, 'softmax')


def log_softmax(x: NumericArray, axis: int = -1) -> NumericArray:
    x = lift(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), backward, 'log_softmax')


ACTIVATIONS: Dict[str, Callable[[NumericArray], NumericArray]] = {
    'identity': lambda x: x,
    'relu': lambda x: x.relu(),
    'sigmoid': lambda x: x.sigmoid(),
    'tanh': lambda x: x.tanh(),
    'softplus': lambda x: x.softplus(),
}


def activation(name: str) -> Callable[[NumericArray], NumericArray]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation '{name}', expected one of {sorted(ACTIVATIONS)}") from None


def linear(x: NumericArray, w: NumericArray, b: Optional[NumericArray] = None) -> NumericArray:
    """Affine map ``x @ w + b`` with ``w`` of shape (in, out)."""
    x = lift(x)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear input width {x.shape} does not match weight {w.shape}")
    if x.ndim == 1:
        out = matmul(x.reshape(1, -1), w).reshape(w.shape[1])
    else:
        out = matmul(x, w)
    return out if b is None else out + b


def mlp_forward(x: NumericArray, layers: Sequence[Layer]) -> NumericArray:
    """Run ``x`` through a chain of (weight, bias, activation) layers.

    Args:
        x: Input of shape (..., in).
        layers: Layers applied in order; activation names come from ``ACTIVATIONS``.

    Returns:
        The output of the final layer.
    """
    for w, b, act in layers:
        x = activation(act)(linear(x, w, b))
    return x


def layer_norm(x: NumericArray, gain: NumericArray, bias: NumericArray, eps: float = 1e-5) -> NumericArray:
    x = lift(x)
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def _bilinear_corners(u: np.ndarray, v: np.ndarray, h: int, w: int):
    inside = (u >= 0) & (u <= h - 1) & (v >= 0) & (v <= w - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(uc), max(h - 2, 0)).astype(np.int64)
    v0 = np.minimum(np.floor(vc), max(w - 2, 0)).astype(np.int64)
    u1 = np.minimum(u0 + 1, h - 1)
    v1 = np.minimum(v0 + 1, w - 1)
    du = np.where(inside, uc - u0, 0.0)
    dv = np.where(inside, vc - v0, 0.0)
    return inside, u0, u1, v0, v1, du, dv


def bilinear_sample(feat: NumericArray, pts: NumericArray) -> NumericArray:
    """Bilinearly sample feature maps at continuous grid coordinates.

    ``feat`` is either (d, H, W) with ``pts`` of shape (n, 2), giving (n, d), or the
    grouped form (G, c, H, W) with ``pts`` of shape (n, G, 2), giving (n, G, c).
    Coordinates are (u, v) with u along H and v along W. Points outside
    [0, H-1] x [0, W-1] sample zeros and receive zero gradient.
    """
    feat, pts = lift(feat), lift(pts)
    grouped = feat.ndim == 4
    if not grouped:
        if feat.ndim != 3 or pts.ndim != 2 or pts.shape[-1] != 2:
            raise DimensionError(f"bilinear_sample expects feat[d,H,W] and pts[n,2], got {feat.shape} and {pts.shape}")
        return bilinear_sample(feat.reshape(1, *feat.shape), pts.reshape(pts.shape[0], 1, 2)).reshape(
            pts.shape[0], feat.shape[0])
    n_groups, channels, h, w = feat.shape
    if pts.ndim != 3 or pts.shape[1:] != (n_groups, 2):
        raise DimensionError(f"grouped bilinear_sample expects pts[n,{n_groups},2], got {pts.shape}")

    fv = feat.values
    u, v = pts.values[..., 0], pts.values[..., 1]
    inside, u0, u1, v0, v1, du, dv = _bilinear_corners(u, v, h, w)
    group = np.broadcast_to(np.arange(n_groups), u.shape)
    mask = inside[..., None]

    f00 = fv[group, :, u0, v0]
    f10 = fv[group, :, u1, v0]
    f01 = fv[group, :, u0, v1]
    f11 = fv[group, :, u1, v1]
    w00 = ((1 - du) * (1 - dv))[..., None]
    w10 = (du * (1 - dv))[..., None]
    w01 = ((1 - du) * dv)[..., None]
    w11 = (du * dv)[..., None]
    out = (w00 * f00 + w10 * f10 + w01 * f01 + w11 * f11) * mask

    def backward(g):
        g = g * mask
        flat = np.zeros((n_groups * h * w, channels), dtype=fv.dtype)
        for ui, vi, wt in ((u0, v0, w00), (u1, v0, w10), (u0, v1, w01), (u1, v1, w11)):
            idx = ((group * h + ui) * w + vi).reshape(-1)
            np.add.at(flat, idx, (wt * g).reshape(-1, channels))
        gfeat = flat.reshape(n_groups, h, w, channels).transpose(0, 3, 1, 2)
        d_du = ((1 - dv)[..., None] * (f10 - f00) + dv[..., None] * (f11 - f01))
        d_dv = ((1 - du)[..., None] * (f01 - f00) + du[..., None] * (f11 - f10))
        gpts = np.stack([(g * d_du).sum(-1), (g * d_dv).sum(-1)], axis=-1)
        return gfeat, gpts

    return make(out, (feat, pts), backward, 'bilinear_sample')


def conv2d(x: NumericArray, w: NumericArray, b: Optional[NumericArray] = None,
           stride: int = 1, padding: int = 0) -> NumericArray:
    """2D cross-correlation via im2col.

    Args:
        x: Input of shape (C_in, H, W) or (N, C_in, H, W).
        w: Kernel of shape (C_out, C_in, kh, kw).
        b: Optional bias of shape (C_out,).
        stride: Step between output samples.
        padding: Zero padding on every spatial side.

    Returns:
        Output of shape (C_out, H_out, W_out), batched if ``x`` was.
    """
    x = lift(x)
    batched = x.ndim == 4
    if not batched:
        x = x.reshape(1, *x.shape)
    n, c_in, h, wd = x.shape
    c_out, c_w, kh, kw = w.shape
    if c_w != c_in:
        raise DimensionError(f"conv2d input channels {c_in} do not match kernel {w.shape}")
    if padding:
        x = pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv2d kernel {w.shape} larger than padded input {x.shape}")

    ch, ki, kj = np.meshgrid(np.arange(c_in), np.arange(kh), np.arange(kw), indexing='ij')
    oi, oj = np.meshgrid(np.arange(h_out) * stride, np.arange(w_out) * stride, indexing='ij')
    rows = ki.reshape(-1, 1) + oi.reshape(1, -1)
    cols_idx = kj.reshape(-1, 1) + oj.reshape(1, -1)
    chans = np.broadcast_to(ch.reshape(-1, 1), rows.shape)

    cols = x[:, chans, rows, cols_idx]
    out = matmul(w.reshape(c_out, c_in * kh * kw), cols)
    if b is not None:
        out = out + b.reshape(c_out, 1)
    out = out.reshape(n, c_out, h_out, w_out)
    return out if batched else out.reshape(c_out, h_out, w_out)
