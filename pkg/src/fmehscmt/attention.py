"""Lightweight multi-head self-attention with reduced keys/values.

Keys and values are spatially reduced by a strided 3x3 depthwise convolution
before the score matrix is formed, so scores are n x n' with
n' = ceil(H/s) * ceil(W/s). A learnable per-head table adds a relative
position bias indexed by the offset between a query position and the
(stride-scaled) position of each reduced key.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .params import Init, Scope
from .tensor import Tensor

_score_log: Optional[List[Tuple[int, ...]]] = None


@contextlib.contextmanager
def track_score_shapes():
    """Collect the shape of every attention score matrix built inside the block."""
    global _score_log
    prev, _score_log = _score_log, []
    try:
        yield _score_log
    finally:
        _score_log = prev


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int
    kv_stride: int = 2
    kv_kernel: int = 3
    bias_enabled: bool = True
    window: Optional[int] = None  # reserved for a windowed variant; unused

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1:
            raise ConfigError("attention dim and heads must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.kv_stride < 1:
            raise ConfigError("kv_stride must be >= 1")
        if self.kv_kernel < 1 or self.kv_kernel % 2 == 0:
            raise ConfigError("kv_kernel must be a positive odd integer")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def reduced_extent(spatial: Tuple[int, int], stride: int) -> Tuple[int, int]:
    h, w = spatial
    return -(-h // stride), -(-w // stride)


def bias_table_shape(spatial: Tuple[int, int], heads: int) -> Tuple[int, int, int]:
    h, w = spatial
    return heads, 2 * h - 1, 2 * w - 1


def relative_indices(spatial: Tuple[int, int], stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column lookups into the bias table.

    Entry [q, k] of the row array is ``q - k*stride`` shifted to be
    non-negative (and clipped to the table), likewise for columns.
    """
    h, w = spatial
    hk, wk = reduced_extent(spatial, stride)
    rows = np.arange(h)[:, None] - stride * np.arange(hk)[None, :] + (h - 1)
    cols = np.arange(w)[:, None] - stride * np.arange(wk)[None, :] + (w - 1)
    return np.clip(rows, 0, 2 * h - 2), np.clip(cols, 0, 2 * w - 2)


def init_lmhsa(init: Init, cfg: AttentionConfig, spatial: Tuple[int, int]) -> None:
    d = cfg.dim
    for name in ("wq", "wk", "wv"):
        init.linear(name, d, d, bias=False)
    init.conv("dw_k", d, d, cfg.kv_kernel, groups=d, bias=False)
    init.conv("dw_v", d, d, cfg.kv_kernel, groups=d, bias=False)
    if cfg.bias_enabled:
        init.zeros("rel_bias", bias_table_shape(spatial, cfg.heads), kind="relbias")
    init.linear("wo", d, d, bias=False)


def qkv_project(x: Tensor, wq, wk, wv) -> Tuple[Tensor, Tensor, Tensor]:
    if x.ndim != 3:
        raise ShapeError(f"qkv_project expects (batch, tokens, dim), got {x.shape}")
    return ops.linear(x, wq), ops.linear(x, wk), ops.linear(x, wv)


def reduce_kv(k: Tensor, v: Tensor, spatial: Tuple[int, int], cfg: AttentionConfig,
              dw_k, dw_v) -> Tuple[Tensor, Tensor]:
    h, w = spatial
    if k.shape[1] != h * w or v.shape[1] != h * w:
        raise ShapeError(f"{k.shape[1]} tokens do not match grid {h}x{w}")
    pad = cfg.kv_kernel // 2
    out = []
    for t, kern in ((k, dw_k), (v, dw_v)):
        m = ops.to_map(t, spatial)
        m = ops.conv2d(m, kern, None, stride=cfg.kv_stride, padding=pad, groups=cfg.dim)
        out.append(ops.to_tokens(m))
    return out[0], out[1]


def light_attention(q: Tensor, k: Tensor, v: Tensor, bias=None) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + bias) v over the last two axes.

    Leading axes are batch/head axes and must agree between q, k and v.
    ``bias`` broadcasts against the (..., n, n') score matrix.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention dims disagree: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = ops.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = ops.mul(ops.matmul(q, kt), scale)
    if _score_log is not None:
        _score_log.append(scores.shape)
    if bias is not None:
        scores = ops.add(scores, bias)
    return ops.matmul(ops.softmax(scores, axis=-1), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    return ops.transpose(ops.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))


def lmhsa(x: Tensor, spatial: Tuple[int, int], cfg: AttentionConfig, p: Scope) -> Tensor:
    """Multi-head lightweight attention over (batch, tokens, dim) input."""
    if x.ndim != 3 or x.shape[2] != cfg.dim:
        raise ShapeError(f"lmhsa expects (batch, tokens, {cfg.dim}), got {x.shape}")
    n_batch, n_tok, _ = x.shape
    q, k, v = qkv_project(x, p["wq"], p["wk"], p["wv"])
    k, v = reduce_kv(k, v, spatial, cfg, p["dw_k"], p["dw_v"])
    bias = None
    if cfg.bias_enabled:
        rows, cols = relative_indices(spatial, cfg.kv_stride)
        bias = ops.gather_bias(p["rel_bias"], rows, cols)
    heads = light_attention(_split_heads(q, cfg.heads), _split_heads(k, cfg.heads),
                            _split_heads(v, cfg.heads), bias)
    merged = ops.reshape(ops.transpose(heads, (0, 2, 1, 3)), (n_batch, n_tok, cfg.dim))
    return ops.linear(merged, p["wo"])
