"""Pixel-attention gate over the fused map and the classification head."""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import ops
from .errors import ShapeError
from .params import Init, Scope
from .tensor import Tensor


def attention_width(fused_channels: int) -> int:
    return max(8, fused_channels // 8)


def init_head(init: Init, fused_channels: int, num_classes: int) -> None:
    hidden = attention_width(fused_channels)
    pa = init.sub("pa")
    pa.conv("w_x", hidden, fused_channels, 1, bias=False)
    pa.conv("w_sa", hidden, 1, 1, bias=False)
    pa.zeros("b_sa", (hidden,))
    # zero projection: every gate starts at exactly 0.5 instead of saturating
    pa.zeros("f", (1, hidden, 1, 1), kind="weight")
    pa.zeros("b_f", (1,))
    init.linear("fc", num_classes, fused_channels)


def pixel_attention(x: Tensor, p: Scope) -> Tuple[Tensor, Tensor]:
    """Gate every spatial position of ``x`` by a sigmoid weight in (0, 1).

    The spatial descriptor is the per-position channel mean. Returns the gated
    map and the (N, 1, H, W) gate.
    """
    if x.ndim != 4:
        raise ShapeError(f"pixel_attention expects an NCHW map, got {x.shape}")
    if p["w_x"].shape[1] != x.shape[1]:
        raise ShapeError(f"pixel attention built for {p['w_x'].shape[1]} channels, got {x.shape[1]}")
    descriptor = ops.mean(x, axis=1, keepdims=True)
    hidden = ops.add(ops.conv2d(x, p["w_x"]), ops.conv2d(descriptor, p["w_sa"], p["b_sa"]))
    hidden = ops.relu(hidden)
    gate = ops.sigmoid(ops.conv2d(hidden, p["f"], p["b_f"]))
    return ops.mul(x, gate), gate


def classify(x_sa: Tensor, p: Scope, dropout: float = 0.3, training: bool = False,
             rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """Global average pool -> dropout -> linear. Returns (logits, probs, penultimate)."""
    if x_sa.ndim != 4:
        raise ShapeError(f"classify expects an NCHW map, got {x_sa.shape}")
    penultimate = ops.global_avg_pool(x_sa)
    dropped = ops.dropout(penultimate, dropout, training, rng)
    logits = ops.linear(dropped, p["fc"], p["fc_b"])
    return logits, ops.softmax(logits, axis=-1), penultimate
