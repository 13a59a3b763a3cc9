"""CMT block: local perception unit, lightweight attention, inverted-residual FFN.

    y   = LPU(x)
    z   = LMHSA(LN(y)) + y
    out = IRFFN(LN(z)) + z

The FFN is fed LN(z), the output of the attention sublayer, rather than LN(y).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from . import ops
from .attention import AttentionConfig, init_lmhsa, lmhsa
from .errors import ConfigError, ShapeError
from .params import Init, Scope
from .tensor import Tensor


@dataclass(frozen=True)
class CmtBlockConfig:
    dim: int
    heads: int
    irffn_ratio: int = 4
    kv_stride: int = 2

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.irffn_ratio < 1:
            raise ConfigError("irffn_ratio must be >= 1")
        if self.kv_stride < 1:
            raise ConfigError("kv_stride must be >= 1")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.dim, self.heads, kv_stride=self.kv_stride)


def init_lpu(init: Init, dim: int) -> None:
    init.conv("dw", dim, dim, 3, groups=dim)


def init_irffn(init: Init, dim: int, ratio: int) -> None:
    hidden = dim * ratio
    init.conv("pw1", hidden, dim, 1)
    init.conv("dw", hidden, hidden, 3, groups=hidden)
    init.conv("pw2", dim, hidden, 1)


def init_cmt_block(init: Init, cfg: CmtBlockConfig, spatial: Tuple[int, int]) -> None:
    init_lpu(init.sub("lpu"), cfg.dim)
    init.norm("ln1", cfg.dim)
    init_lmhsa(init.sub("lmhsa"), cfg.attention, spatial)
    init.norm("ln2", cfg.dim)
    init_irffn(init.sub("irffn"), cfg.dim, cfg.irffn_ratio)


def lpu(x: Tensor, dw_kernel, dw_bias=None) -> Tensor:
    """Depthwise 3x3 convolution plus identity skip, on an NCHW map."""
    if x.ndim != 4 or dw_kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"LPU kernel {dw_kernel.shape} does not match map {x.shape}")
    c = x.shape[1]
    return ops.add(ops.conv2d(x, dw_kernel, dw_bias, stride=1, padding=1, groups=c), x)


def irffn(x: Tensor, spatial: Tuple[int, int], p: Scope, ratio: int) -> Tensor:
    h, w = spatial
    if x.ndim != 3 or x.shape[1] != h * w:
        raise ShapeError(f"IRFFN input {x.shape} does not match grid {h}x{w}")
    hidden = x.shape[2] * ratio
    m = ops.to_map(x, spatial)
    m = ops.gelu(ops.conv2d(m, p["pw1"], p["pw1_b"]))
    if m.shape[1] != hidden:
        raise ShapeError(f"expansion produced {m.shape[1]} channels, expected {hidden}")
    m = ops.add(ops.conv2d(m, p["dw"], p["dw_b"], padding=1, groups=hidden), m)
    m = ops.gelu(m)
    m = ops.conv2d(m, p["pw2"], p["pw2_b"])
    return ops.to_tokens(m)


def cmt_block(x: Tensor, spatial: Tuple[int, int], cfg: CmtBlockConfig, p: Scope,
              capture: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Apply one block to (batch, tokens, dim) input; shape is preserved.

    When ``capture`` is given, the intermediates ``y``, ``z`` and ``ffn`` are
    stored in it.
    """
    if x.ndim != 3 or x.shape[2] != cfg.dim:
        raise ShapeError(f"cmt_block expects (batch, tokens, {cfg.dim}), got {x.shape}")
    lp = p.sub("lpu")
    y = ops.to_tokens(lpu(ops.to_map(x, spatial), lp["dw"], lp["dw_b"]))
    attn = lmhsa(ops.layer_norm(y, p["ln1_g"], p["ln1_b"]), spatial, cfg.attention,
                 p.sub("lmhsa"))
    z = ops.add(attn, y)
    ffn = irffn(ops.layer_norm(z, p["ln2_g"], p["ln2_b"]), spatial, p.sub("irffn"),
                cfg.irffn_ratio)
    out = ops.add(ffn, z)
    if capture is not None:
        capture.update(y=y, z=z, ffn=ffn)
    return out


def cmt_block_map(x: Tensor, cfg: CmtBlockConfig, p: Scope) -> Tensor:
    """Map-layout convenience wrapper around :func:`cmt_block`."""
    spatial = x.shape[2:]
    return ops.to_map(cmt_block(ops.to_tokens(x), spatial, cfg, p), spatial)
