"""Differentiable primitives.

Every function takes :class:`~fmehscmt.tensor.Tensor` inputs (python scalars
and arrays are accepted where noted and treated as constants), computes the
forward value with numpy, and records a backward closure on the inputs' tape.
Image tensors are laid out NCHW; token tensors are (batch, tokens, dim).
"""
from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Parameter, Tape, Tensor, check_finite

LN_EPS = 1e-5


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _tape_of(*xs) -> Optional[Tape]:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("inputs are bound to different tapes")
            tape = x.tape
    return tape


def _emit(out: np.ndarray, parents: Sequence, backward, op: str) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        check_finite(out, op)
        return Tensor(out, check=False)
    return tape.record(out, parents, backward, op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                 lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = (xd * cdf).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf)).astype(xd.dtype),

    return _emit(out, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True)),

    return _emit(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True),

    return _emit(out, (x,), backward, "log_softmax")


def dropout(x: Tensor, rate: float, training: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return _emit(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- reductions & shape

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, shape).astype(x.dtype),

    return _emit(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return grads

    return _emit(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate maps of shapes {a.shape} and {b.shape}")
    return concat((a, b), axis=1)


def to_tokens(x: Tensor) -> Tensor:
    """(N, C, H, W) map -> (N, H*W, C) tokens."""
    n, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def to_map(x: Tensor, spatial: Tuple[int, int]) -> Tensor:
    """(N, H*W, C) tokens -> (N, C, H, W) map."""
    n, t, c = x.shape
    h, w = spatial
    if t != h * w:
        raise ShapeError(f"{t} tokens do not fill a {h}x{w} grid")
    return transpose(reshape(x, (n, h, w, c)), (0, 3, 1, 2))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis."""
    w = _as_tensor(weight)
    b = _as_tensor(bias) if bias is not None else None
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _emit(out, parents, backward, "linear")


def layer_norm(x: Tensor, gamma, beta, axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalize over ``axis`` then apply the per-channel affine."""
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    axis = axis % x.ndim
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine {gamma.shape}/{beta.shape} vs {c} channels")
    bshape = [1] * x.ndim
    bshape[axis] = c
    gd = gamma.data.reshape(bshape)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gd + beta.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return dx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return _emit(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------- convolution & pooling

def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _window(arr, i, j, stride, ho, wo):
    return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _dense_conv(xp: np.ndarray, kd: np.ndarray, stride: int, ho: int, wo: int):
    """Contract a strided window view of ``xp`` against ``kd`` in one product.

    Returns the NCHW output and the gathered (N*Ho*Wo, C*kh*kw) window matrix,
    which the backward pass reuses.
    """
    n, c = xp.shape[:2]
    o, _, kh, kw = kd.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ kd.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)), cols


def _dense_conv_backward(g, cols, xp_shape, kd, stride, ho, wo):
    n, c, hp, wp = xp_shape
    o, _, kh, kw = kd.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gk = (g2.T @ cols).reshape(kd.shape)
    gcols = (g2 @ kd.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                gcols[..., i, j]
    return gxp.transpose(0, 3, 1, 2), gk


def conv2d(x: Tensor, kernel, bias=None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """Cross-correlation of an NCHW map with an (O, C/groups, kh, kw) kernel.

    Depthwise kernels accumulate one shifted, scaled copy of the input per
    kernel offset; dense kernels contract a strided window view of the input.
    """
    w = _as_tensor(kernel)
    b = _as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigError(f"bad conv2d geometry stride={stride} padding={padding} groups={groups}")
    n, c, h, wd_ = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups:
        raise ConfigError(f"channels {c}->{o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"kernel {w.shape} expects {cg * groups} input channels, got {c}")
    if h + 2 * padding < kh or wd_ + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd_}+{padding}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias {b.shape} vs {o} output channels")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(wd_, kw, stride, padding)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    kd = w.data
    depthwise = groups == c and o == c
    og = o // groups
    saved = []

    if depthwise:
        out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, stride, ho, wo) * kd[:, 0, i, j][None, :, None, None]
    elif groups == 1:
        out, cols = _dense_conv(xp, kd, stride, ho, wo)
        saved.append(cols)
    else:
        parts = []
        for gi in range(groups):
            part, cols = _dense_conv(xp[:, gi * cg:(gi + 1) * cg], kd[gi * og:(gi + 1) * og],
                                     stride, ho, wo)
            parts.append(part)
            saved.append(cols)
        out = np.concatenate(parts, axis=1)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        if depthwise:
            gxp = np.zeros_like(xp)
            gk = np.zeros_like(kd)
            for i in range(kh):
                for j in range(kw):
                    gk[:, 0, i, j] = (g * _window(xp, i, j, stride, ho, wo)).sum(axis=(0, 2, 3))
                    _window(gxp, i, j, stride, ho, wo)[...] += g * kd[:, 0, i, j][None, :, None, None]
        else:
            gxs, gks = [], []
            for gi in range(groups):
                gx_part, gk_part = _dense_conv_backward(
                    g[:, gi * og:(gi + 1) * og], saved[gi], (n, cg) + xp.shape[2:],
                    kd[gi * og:(gi + 1) * og], stride, ho, wo)
                gxs.append(gx_part)
                gks.append(gk_part)
            gxp = gxs[0] if groups == 1 else np.concatenate(gxs, axis=1)
            gk = gks[0] if groups == 1 else np.concatenate(gks, axis=0)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd_] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gk, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _emit(out, parents, backward, "conv2d")


def _check_pool(x: Tensor, window: int, stride: int, op: str) -> Tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an NCHW map, got {x.shape}")
    if window < 1 or stride < 1:
        raise ConfigError(f"{op}: window and stride must be positive")
    h, w = x.shape[2:]
    if window > h or window > w:
        raise ShapeError(f"{op}: window {window} larger than input {h}x{w}")
    return _out_extent(h, window, stride, 0), _out_extent(w, window, stride, 0)


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    ho, wo = _check_pool(x, window, stride, "max_pool2d")
    xd = x.data
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(win.shape[:4] + (window * window,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(xd)
        for a in range(window):
            for b in range(window):
                hit = arg == a * window + b
                _window(gx, a, b, stride, ho, wo)[...] += np.where(hit, g, 0)
        return gx,

    return _emit(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    ho, wo = _check_pool(x, window, stride, "avg_pool2d")
    xd = x.data
    out = np.zeros(xd.shape[:2] + (ho, wo), dtype=xd.dtype)
    for a in range(window):
        for b in range(window):
            out += _window(xd, a, b, stride, ho, wo)
    out /= window * window

    def backward(g):
        gx = np.zeros_like(xd)
        share = g / (window * window)
        for a in range(window):
            for b in range(window):
                _window(gx, a, b, stride, ho, wo)[...] += share
        return gx,

    return _emit(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def gather_bias(table, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Expand a (heads, R, C) table into (heads, len(rows)*len(cols), ...) biases.

    ``rows`` is an (Hq, Hk) index array into R and ``cols`` a (Wq, Wk) index
    array into C; the result has shape (heads, Hq*Wq, Hk*Wk).
    """
    t = _as_tensor(table)
    hq, hk = rows.shape
    wq, wk = cols.shape
    r = rows[:, None, :, None]
    c = cols[None, :, None, :]
    out = t.data[:, r, c].reshape(t.shape[0], hq * wq, hk * wk)

    def backward(g):
        gt = np.zeros_like(t.data)
        g4 = g.reshape(t.shape[0], hq, wq, hk, wk)
        rr = np.broadcast_to(r, (hq, wq, hk, wk))
        cc = np.broadcast_to(c, (hq, wq, hk, wk))
        flat = (rr * t.shape[2] + cc).reshape(-1)
        for head in range(t.shape[0]):
            gt[head].reshape(-1)[:] += np.bincount(flat, weights=g4[head].reshape(-1),
                                                   minlength=t.shape[1] * t.shape[2])
        return gt,

    return _emit(out, (t,), backward, "gather_bias")
