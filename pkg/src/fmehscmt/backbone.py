"""Two-stream feature extractor and full model assembly.

The HSCMT stream is a stem CNN followed by four stages of
patch embedding -> CMT blocks -> conv/GELU + mean of max and avg pooling.
Each stage halves the spatial extent exactly once (in the pooling step).
The residual stream is a strided stem conv followed by four M/N block pairs.
Their final maps are concatenated (HSCMT channels first) and passed to the
pixel-attention head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .cmt import CmtBlockConfig, cmt_block, init_cmt_block
from .errors import ConfigError, ShapeError
from .head import classify, init_head, pixel_attention
from .params import Init, ParamStore, Scope
from .tensor import Tape, Tensor


@dataclass
class ModelConfig:
    input_channels: int = 1
    input_size: int = 224
    stage_dims: Tuple[int, ...] = (64, 128, 256, 512)
    stage_depths: Tuple[int, ...] = (2, 2, 2, 2)
    stage_heads: Tuple[int, ...] = (1, 2, 4, 8)
    irffn_ratio: int = 4
    kv_stride: int = 2
    residual_stem_dim: int = 64
    residual_dims: Tuple[int, ...] = (64, 128, 192, 256)
    num_classes: int = 4
    dropout: float = 0.3

    def __post_init__(self):
        for name in ("stage_dims", "stage_depths", "stage_heads", "residual_dims"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"{name} needs 4 entries, got {len(value)}")
            setattr(self, name, value)
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of 32")
        positive = (self.input_channels, self.irffn_ratio, self.kv_stride,
                    self.residual_stem_dim, self.num_classes) + self.stage_dims \
            + self.stage_heads + self.residual_dims
        if min(positive) < 1 or min(self.stage_depths) < 0:
            raise ConfigError("all extents must be positive (depths non-negative)")
        for d, h in zip(self.stage_dims, self.stage_heads):
            if d % h:
                raise ConfigError(f"stage dim {d} not divisible by {h} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def stem_dim(self) -> int:
        return self.stage_dims[0]

    @property
    def fused_channels(self) -> int:
        return self.stage_dims[3] + self.residual_dims[3]

    def stage_spatial(self, i: int) -> int:
        """Side length at which stage ``i`` (0-based) runs its CMT blocks."""
        return self.input_size // 2 ** (i + 1)

    def block_config(self, i: int) -> CmtBlockConfig:
        return CmtBlockConfig(self.stage_dims[i], self.stage_heads[i],
                              self.irffn_ratio, self.kv_stride)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def paper_config() -> ModelConfig:
    return ModelConfig()


def desk_config() -> ModelConfig:
    return ModelConfig(input_size=64, stage_dims=(16, 32, 64, 128), stage_depths=(1, 1, 1, 1),
                       stage_heads=(1, 2, 4, 8), residual_stem_dim=16,
                       residual_dims=(16, 32, 48, 64))


def micro_config() -> ModelConfig:
    return ModelConfig(input_size=32, stage_dims=(8, 16, 32, 64), stage_depths=(1, 1, 1, 1),
                       stage_heads=(1, 2, 2, 4), irffn_ratio=2, residual_stem_dim=8,
                       residual_dims=(8, 8, 16, 16))


PRESETS = {"paper": paper_config, "desk": desk_config, "micro": micro_config}


# ---------------------------------------------------------------- initialization

def init_stem(init: Init, in_ch: int, dim: int) -> None:
    init.conv("conv1", dim, in_ch, 3)
    init.conv("conv2", dim, dim, 3)
    init.conv("conv3", dim, dim, 3)


def init_stage(init: Init, cfg: ModelConfig, i: int) -> None:
    in_dim = cfg.stem_dim if i == 0 else cfg.stage_dims[i - 1]
    dim = cfg.stage_dims[i]
    side = cfg.stage_spatial(i)
    init.conv("embed", dim, in_dim, 3)
    init.norm("embed_ln", dim)
    for b in range(cfg.stage_depths[i]):
        init_cmt_block(init.sub(f"block{b}"), cfg.block_config(i), (side, side))
    init.conv("hs", dim, dim, 3)


def init_block_m(init: Init, in_dim: int, out_dim: int) -> None:
    init.conv("pw", out_dim, in_dim, 1)
    init.conv("conv", out_dim, out_dim, 3)
    init.conv("proj", out_dim, in_dim, 1)


def init_block_n(init: Init, dim: int) -> None:
    init.conv("conv1", dim, dim, 3)
    init.conv("conv2", dim, dim, 3)


def init_residual_branch(init: Init, cfg: ModelConfig) -> None:
    init.conv("stem", cfg.residual_stem_dim, cfg.input_channels, 3)
    prev = cfg.residual_stem_dim
    for i, dim in enumerate(cfg.residual_dims):
        init_block_m(init.sub(f"m{i}"), prev, dim)
        init_block_n(init.sub(f"n{i}"), dim)
        prev = dim


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Build a freshly initialized parameter store for ``cfg``."""
    store = ParamStore(dtype)
    root = Init(store, np.random.default_rng(seed))
    init_stem(root.sub("stem"), cfg.input_channels, cfg.stem_dim)
    for i in range(4):
        init_stage(root.sub(f"stage{i}"), cfg, i)
    init_residual_branch(root.sub("residual"), cfg)
    init_head(root.sub("head"), cfg.fused_channels, cfg.num_classes)
    return store


# ---------------------------------------------------------------- forward pieces

def stem(x: Tensor, p: Scope) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"stem expects an NCHW image batch, got {x.shape}")
    if x.shape[1] != p["conv1"].shape[1]:
        raise ShapeError(f"stem expects {p['conv1'].shape[1]} input channels, got {x.shape[1]}")
    x = ops.gelu(ops.conv2d(x, p["conv1"], p["conv1_b"], stride=2, padding=1))
    x = ops.gelu(ops.conv2d(x, p["conv2"], p["conv2_b"], padding=1))
    return ops.gelu(ops.conv2d(x, p["conv3"], p["conv3_b"], padding=1))


def patch_embed(x: Tensor, p: Scope) -> Tensor:
    """3x3 conv, channel LayerNorm, flatten. Returns (batch, H*W, dim) tokens."""
    m = ops.conv2d(x, p["embed"], p["embed_b"], padding=1)
    return ops.layer_norm(ops.to_tokens(m), p["embed_ln_g"], p["embed_ln_b"])


def hs_refine(x: Tensor, p: Scope) -> Tensor:
    """Conv + GELU, then the mean of 2x2 max and average pooling."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"hs_refine needs even spatial extents, got {x.shape}")
    m = ops.gelu(ops.conv2d(x, p["hs"], p["hs_b"], padding=1))
    pooled = ops.add(ops.max_pool2d(m, 2, 2), ops.avg_pool2d(m, 2, 2))
    return ops.mul(pooled, 0.5)


def hscmt_stage(x: Tensor, i: int, cfg: ModelConfig, p: Scope) -> Tensor:
    if not 0 <= i < 4:
        raise ConfigError(f"stage index {i} outside [0, 3]")
    spatial = x.shape[2:]
    t = patch_embed(x, p)
    block_cfg = cfg.block_config(i)
    for b in range(cfg.stage_depths[i]):
        t = cmt_block(t, spatial, block_cfg, p.sub(f"block{b}"))
    return hs_refine(ops.to_map(t, spatial), p)


def residual_block_m(x: Tensor, p: Scope, stride: int = 2) -> Tensor:
    """Projection-shortcut block: relu(conv3(relu(pw(x))) + proj(x))."""
    main = ops.relu(ops.conv2d(x, p["pw"], p["pw_b"]))
    main = ops.conv2d(main, p["conv"], p["conv_b"], stride=stride, padding=1)
    short = ops.conv2d(x, p["proj"], p["proj_b"], stride=stride)
    if main.shape != short.shape:
        raise ShapeError(f"M block paths disagree: {main.shape} vs {short.shape}")
    return ops.relu(ops.add(main, short))


def residual_block_n(x: Tensor, p: Scope) -> Tensor:
    """Identity-shortcut block: relu(conv(relu(conv(x))) + x)."""
    main = ops.relu(ops.conv2d(x, p["conv1"], p["conv1_b"], padding=1))
    main = ops.conv2d(main, p["conv2"], p["conv2_b"], padding=1)
    if main.shape != x.shape:
        raise ShapeError(f"N block changes shape {x.shape} -> {main.shape}")
    return ops.relu(ops.add(main, x))


def residual_branch(image: Tensor, p: Scope) -> Tensor:
    x = ops.relu(ops.conv2d(image, p["stem"], p["stem_b"], stride=2, padding=1))
    for i in range(4):
        x = residual_block_m(x, p.sub(f"m{i}"), stride=2)
        x = residual_block_n(x, p.sub(f"n{i}"))
    return x


def fme_fuse(hscmt_out: Tensor, residual_out: Tensor) -> Tensor:
    """Concatenate channels, HSCMT maps first."""
    if hscmt_out.ndim != 4 or residual_out.ndim != 4 or \
            hscmt_out.shape[0] != residual_out.shape[0] or hscmt_out.shape[2:] != residual_out.shape[2:]:
        raise ShapeError(f"cannot fuse maps {hscmt_out.shape} and {residual_out.shape}")
    return ops.concat_channels(hscmt_out, residual_out)


@dataclass
class ModelOutput:
    logits: Tensor
    probs: Tensor
    penultimate: Tensor
    stages: List[Tensor] = field(default_factory=list)
    residual: Optional[Tensor] = None
    fused: Optional[Tensor] = None
    gate: Optional[Tensor] = None


def forward(images, cfg: ModelConfig, store: ParamStore, tape: Optional[Tape] = None,
            training: bool = False, rng: Optional[np.random.Generator] = None) -> ModelOutput:
    """Run the full model on an (N, C, S, S) batch."""
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=store.dtype))
    if x.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise ShapeError(f"expected images (N, {cfg.input_channels}, {cfg.input_size}, "
                         f"{cfg.input_size}), got {x.shape}")
    p = store.scope(tape)
    h = stem(x, p.sub("stem"))
    stages = []
    for i in range(4):
        h = hscmt_stage(h, i, cfg, p.sub(f"stage{i}"))
        stages.append(h)
    res = residual_branch(x, p.sub("residual"))
    fused = fme_fuse(h, res)
    gated, gate = pixel_attention(fused, p.sub("head.pa"))
    logits, probs, pen = classify(gated, p.sub("head"), cfg.dropout, training, rng)
    return ModelOutput(logits, probs, pen, stages, res, fused, gate)


def shape_walk(cfg: ModelConfig) -> dict:
    """Arithmetic shape contract for ``cfg`` without running any kernels."""
    s = cfg.input_size
    stages = [(cfg.stage_dims[i], s // 2 ** (i + 2)) for i in range(4)]
    residual = (cfg.residual_dims[3], s // 32)
    return {"stem": (cfg.stem_dim, s // 2), "stages": stages, "residual": residual,
            "fused": (cfg.fused_channels, s // 32), "logits": cfg.num_classes}
