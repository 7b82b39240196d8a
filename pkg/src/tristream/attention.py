"""Axis-wise self-attention over video feature maps.

Temporal-wise attention folds the spatial grid into the batch and relates the
frame positions of each pixel column; spatial-wise attention folds time into
the batch and relates pixel positions within each frame. Their composition
(temporal first, then spatial) touches far fewer token pairs than joint
attention over all spatio-temporal positions while keeping a global receptive
field.

The attended branch enters through a learnable scalar gain initialized to
zero, so a freshly constructed layer is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import channel_project
from .tensor import (
    ShapeError,
    Tensor,
    matmul,
    permute,
    randn_seeded,
    reshape,
    residual_gain,
    softmax,
)


def clamp_reduction(channels: int, reduction: int) -> int:
    """Largest divisor of ``channels`` not exceeding ``reduction``."""
    r = min(max(1, reduction), channels)
    while channels % r:
        r -= 1
    return r


@dataclass
class AttentionParams:
    """Projection weights and residual gain for one attention stage."""

    w_f: Tensor  # (C/r, C) key projection
    w_g: Tensor  # (C/r, C) query projection
    w_h: Tensor  # (C, C) value projection
    gamma: Tensor  # scalar residual gain
    reduction: int

    @classmethod
    def create(cls, channels: int, reduction: int = 8, seed: int = 0, dtype="f64") -> "AttentionParams":
        r = clamp_reduction(channels, reduction)
        inner = channels // r
        ss = np.random.SeedSequence(entropy=seed)
        kids = ss.spawn(3)
        scale = 0.02

        def w(shape, child):
            t = randn_seeded(shape, int(child.generate_state(1)[0]), dtype=dtype)
            t.data *= scale
            t.requires_grad = True
            return t

        gamma = Tensor(np.zeros((), dtype=np.float32 if str(dtype) == "f32" else np.float64), requires_grad=True)
        return cls(
            w_f=w((inner, channels), kids[0]),
            w_g=w((inner, channels), kids[1]),
            w_h=w((channels, channels), kids[2]),
            gamma=gamma,
            reduction=r,
        )

    def tensors(self):
        return (("w_f", self.w_f), ("w_g", self.w_g), ("w_h", self.w_h), ("gamma", self.gamma))


def axis_self_attention(x: Tensor, axis_mode: str, params: AttentionParams) -> Tensor:
    """Self-attention over frames (``temporal``) or pixels (``spatial``) of a
    (N, C, T, H, W) feature map; output is gamma * attended + x."""
    if x.data.ndim != 5:
        raise ShapeError(f"axis_self_attention expects rank 5, got {x.shape}")
    if axis_mode not in ("temporal", "spatial"):
        raise ShapeError(f"unknown axis_mode {axis_mode!r}")
    n, c, t, h, w = x.data.shape
    if params.w_h.data.shape != (c, c):
        raise ShapeError(f"value projection {params.w_h.shape} does not fit {c} channels")

    flat = reshape(x, (n, c, t * h * w))
    f = channel_project(flat, params.w_f)
    g = channel_project(flat, params.w_g)
    v = channel_project(flat, params.w_h)
    inner = params.w_f.data.shape[0]

    if axis_mode == "temporal":
        # groups: every (batch, pixel) column; tokens: the T frame positions
        def group(z: Tensor, ch: int) -> Tensor:
            z5 = reshape(z, (n, ch, t, h, w))
            return reshape(permute(z5, (0, 3, 4, 1, 2)), (n * h * w, ch, t))

        def ungroup(z: Tensor) -> Tensor:
            z5 = reshape(z, (n, h, w, c, t))
            return permute(z5, (0, 3, 4, 1, 2))

    else:
        # groups: every (batch, frame); tokens: the H*W pixel positions
        def group(z: Tensor, ch: int) -> Tensor:
            z5 = reshape(z, (n, ch, t, h, w))
            return reshape(permute(z5, (0, 2, 1, 3, 4)), (n * t, ch, h * w))

        def ungroup(z: Tensor) -> Tensor:
            z5 = reshape(z, (n, t, c, h, w))
            return permute(z5, (0, 2, 1, 3, 4))

    fg = group(f, inner)
    gg = group(g, inner)
    vg = group(v, c)
    scores = matmul(permute(fg, (0, 2, 1)), gg)  # (B, L, L)
    weights = softmax(scores, axis=2)
    attended = matmul(vg, permute(weights, (0, 2, 1)))  # (B, C, L)
    branch = ungroup(attended)
    return residual_gain(x, branch, params.gamma)


def factorized_self_attention(x: Tensor, params_t: AttentionParams, params_s: AttentionParams) -> Tensor:
    """Temporal-wise attention followed by spatial-wise attention."""
    return axis_self_attention(axis_self_attention(x, "temporal", params_t), "spatial", params_s)


def attention_pair_counts(n: int, t: int, h: int, w: int) -> dict[str, int]:
    """Token-pair counts of the factorized composition versus joint attention."""
    factored = n * h * w * t * t + n * t * (h * w) ** 2
    joint = n * (t * h * w) ** 2
    return {"factored": factored, "joint": joint}
