"""Three-stream video generator and two-stream discriminator.

The generator stacks hierarchy blocks, each running a spatial stream (2D
appearance features shared across time), a temporal stream (1D motion
features shared across space) and a video stream (3D joint embedding), then
fusing them: motion features are replicated over the pixel grid and added
position-wise to the joint embedding, appearance features are replicated
over time and concatenated channel-wise. The appearance code only reaches
the output through the spatial stream and the video-stream input, the motion
code only through the temporal stream and the video-stream input, which is
what makes the two codes separately manipulable.

The discriminator judges full videos with strided 3D convolutions and
independently sampled frames with strided 2D convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, factorized_self_attention
from .nn import (
    BatchNormState,
    ConvParams,
    ConvSpec,
    FactorizedConvParams,
    conv_forward,
    normalize_activate,
    transposed_conv_forward,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    randn_seeded,
    replicate_along_axis,
    reshape,
    sigmoid,
    take_frames,
    tanh,
)

WEIGHT_INIT_STD = 0.02


@dataclass
class LatentPair:
    """Appearance and motion codes, optionally with a one-hot class vector."""

    appearance: np.ndarray | Tensor
    motion: np.ndarray | Tensor
    one_hot: np.ndarray | None = None

    def __post_init__(self):
        if self.one_hot is not None:
            oh = np.asarray(self.one_hot)
            row_sums = oh.sum(axis=-1)
            if not (np.all((oh == 0) | (oh == 1)) and np.all(row_sums == 1)):
                raise ShapeError("one_hot rows must contain exactly one 1")


@dataclass
class FeatureTriple:
    """Per-level feature maps: appearance (N,c,H,W), motion (N,c,T), video (N,2c,T,H,W)."""

    spatial: Tensor
    temporal: Tensor
    video: Tensor


@dataclass
class FusionTrace:
    """Intermediates of one fusion: joint embedding before fusion, the
    spatially replicated motion map, their position-wise sum, and the
    temporally replicated appearance map."""

    pre_fusion: Tensor
    motion_replicated: Tensor
    fused_sum: Tensor
    appearance_replicated: Tensor


def fuse(f_s: Tensor, f_t: Tensor, f_v_prime: Tensor) -> tuple[Tensor, FusionTrace]:
    """Combine the three per-level streams into the fused video feature map."""
    if f_s.data.ndim != 4 or f_t.data.ndim != 3 or f_v_prime.data.ndim != 5:
        raise ShapeError(
            f"fuse expects ranks (4, 3, 5), got {f_s.shape}, {f_t.shape}, {f_v_prime.shape}"
        )
    n, c, h, w = f_s.data.shape
    nt, ct, t = f_t.data.shape
    nv, cv, tv, hv, wv = f_v_prime.data.shape
    if not (n == nt == nv):
        raise ShapeError("fuse: batch extents differ")
    if ct != cv:
        raise ShapeError(f"fuse: motion channels {ct} must match joint channels {cv}")
    if (tv, hv, wv) != (t, h, w) or c != cv:
        raise ShapeError(
            f"fuse: incompatible extents spatial={f_s.shape} temporal={f_t.shape} video={f_v_prime.shape}"
        )
    motion_rep = replicate_along_axis(replicate_along_axis(f_t, 3, h), 4, w)
    fused_sum = add(f_v_prime, motion_rep)
    appearance_rep = replicate_along_axis(f_s, 2, t)
    video = concat([fused_sum, appearance_rep], axis=1)
    trace = FusionTrace(f_v_prime, motion_rep, fused_sum, appearance_rep)
    return video, trace


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    levels: int = 5
    base_channels: tuple[int, ...] = (512, 256, 128, 64, 32)
    width_mult: float = 1.0
    conv_variant: str = "fact_1p2d"  # "fact_1p2d" | "fact_2p1d" | "full3d"
    attn_level: int | None = 3
    attn_reduction: int = 8
    enable_spatial: bool = True
    enable_temporal: bool = True
    out_frames: int = 16
    out_size: int = 64
    num_classes: int | None = None
    z_appearance: int = 128
    z_motion: int = 10
    dtype: str = "f64"
    mask_motion_input: bool = False  # test hook: zero motion channels entering the video stream

    def __post_init__(self):
        if self.levels != len(self.base_channels):
            raise ShapeError("base_channels must list one width per level")
        if self.attn_level is not None and not (0 <= self.attn_level < self.levels):
            raise ShapeError(f"attn_level {self.attn_level} out of range")
        self.spatial_sizes()
        self.temporal_sizes()

    def channels(self) -> list[int]:
        return [max(4, int(round(b * self.width_mult))) for b in self.base_channels]

    def spatial_sizes(self) -> list[int]:
        return _doubling_schedule(4, self.out_size, self.levels, "spatial")

    def temporal_sizes(self) -> list[int]:
        return _doubling_schedule(2, self.out_frames, self.levels, "temporal")


def _doubling_schedule(start: int, target: int, levels: int, what: str) -> list[int]:
    sizes = []
    cur = start
    for _ in range(levels):
        sizes.append(cur)
        cur = min(cur * 2, target)
    if sizes[-1] != target:
        raise ShapeError(
            f"{what} target {target} unreachable from {start} in {levels} levels (got {sizes})"
        )
    return sizes


def _level_geometry(prev: int, nxt: int, first_kernel: int) -> tuple[int, int, int]:
    """(kernel, stride, padding) for one axis of one level."""
    if prev == 1:
        return (first_kernel, 1, 0)
    if nxt == 2 * prev:
        return (4, 2, 1)
    if nxt == prev:
        return (3, 1, 1)
    raise ShapeError(f"unsupported extent step {prev} -> {nxt}")


def desk_config(**overrides) -> GeneratorConfig:
    """Small profile sized for CPU smoke training."""
    kw = dict(out_frames=8, out_size=32, width_mult=0.25, attn_level=2)
    kw.update(overrides)
    return GeneratorConfig(**kw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _init_weight(shape, seed_seq, dtype) -> Tensor:
    t = randn_seeded(shape, int(seed_seq.generate_state(1)[0]), dtype=dtype)
    t.data *= WEIGHT_INIT_STD
    t.requires_grad = True
    return t


def _zeros_param(shape, dtype) -> Tensor:
    dt = np.float32 if str(dtype) == "f32" else np.float64
    return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)


class TransposedConvBlock:
    """Transposed convolution of any variant, then normalization/activation."""

    def __init__(self, spec: ConvSpec, mode: str, seed_seq, dtype):
        self.spec = spec
        self.mode = mode
        if spec.factorized:
            m = spec.resolved_mid_channels()
            kt, kh, kw = spec.kernel
            if spec.variant == "fact_1p2d":
                shape1, shape2 = (spec.in_channels, m, kt), (m, spec.out_channels, kh, kw)
            else:
                shape1, shape2 = (spec.in_channels, m, kh, kw), (m, spec.out_channels, kt)
            self.params = FactorizedConvParams(
                ConvParams(_init_weight(shape1, seed_seq, dtype), _zeros_param((m,), dtype) if spec.bias else None),
                ConvParams(
                    _init_weight(shape2, seed_seq, dtype),
                    _zeros_param((spec.out_channels,), dtype) if spec.bias else None,
                ),
            )
        else:
            shape = (spec.in_channels, spec.out_channels) + spec.kernel
            self.params = ConvParams(
                _init_weight(shape, seed_seq, dtype),
                _zeros_param((spec.out_channels,), dtype) if spec.bias else None,
            )
        self.norm = BatchNormState.create(spec.out_channels, dtype) if mode.startswith("norm") else None

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = transposed_conv_forward(self.spec, x, self.params)
        return normalize_activate(y, self.mode, self.norm, training)

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        if isinstance(self.params, FactorizedConvParams):
            out.append(("conv1/weight", self.params.first.weight))
            if self.params.first.bias is not None:
                out.append(("conv1/bias", self.params.first.bias))
            out.append(("conv2/weight", self.params.second.weight))
            if self.params.second.bias is not None:
                out.append(("conv2/bias", self.params.second.bias))
        else:
            out.append(("conv/weight", self.params.weight))
            if self.params.bias is not None:
                out.append(("conv/bias", self.params.bias))
        if self.norm is not None:
            out += [
                ("norm/gamma", self.norm.gamma),
                ("norm/beta", self.norm.beta),
                ("norm/running_mean", self.norm.running_mean),
                ("norm/running_var", self.norm.running_var),
            ]
        return out


class ConvBlock:
    """Strided convolution, optional normalization, leaky/sigmoid/no activation."""

    def __init__(self, spec: ConvSpec, mode: str, seed_seq, dtype):
        self.spec = spec
        self.mode = mode  # "leaky" | "norm_leaky" | "sigmoid" | "none"
        shape = (spec.out_channels, spec.in_channels) + spec.kernel
        self.params = ConvParams(
            _init_weight(shape, seed_seq, dtype),
            _zeros_param((spec.out_channels,), dtype) if spec.bias else None,
        )
        self.norm = BatchNormState.create(spec.out_channels, dtype) if mode.startswith("norm") else None

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = conv_forward(self.spec, x, self.params)
        if self.mode == "sigmoid":
            return sigmoid(y)
        if self.mode == "none":
            return y
        if self.mode == "norm_leaky":
            return normalize_activate(y, "norm_leaky", self.norm, training)
        return _leaky(y)

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [("conv/weight", self.params.weight)]
        if self.params.bias is not None:
            out.append(("conv/bias", self.params.bias))
        if self.norm is not None:
            out += [
                ("norm/gamma", self.norm.gamma),
                ("norm/beta", self.norm.beta),
                ("norm/running_mean", self.norm.running_mean),
                ("norm/running_var", self.norm.running_var),
            ]
        return out


def _leaky(y: Tensor) -> Tensor:
    from .tensor import leaky_relu

    return leaky_relu(y, 0.2)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class TriStreamBlock:
    """One hierarchy level: three parallel transposed convolutions plus fusion."""

    def __init__(self, level: int, cfg: GeneratorConfig, in_s: int, in_t: int, in_v: int, seed_seq):
        self.level = level
        self.cfg = cfg
        ch = cfg.channels()[level]
        self.out_channels = ch
        spatial_prev = 1 if level == 0 else cfg.spatial_sizes()[level - 1]
        temporal_prev = 1 if level == 0 else cfg.temporal_sizes()[level - 1]
        ks, ss, ps = _level_geometry(spatial_prev, cfg.spatial_sizes()[level], 4)
        kt, st, pt = _level_geometry(temporal_prev, cfg.temporal_sizes()[level], 2)

        self.spatial = (
            TransposedConvBlock(
                ConvSpec("s2d", in_s, ch, (ks, ks), (ss, ss), (ps, ps)), "norm_relu", seed_seq, cfg.dtype
            )
            if cfg.enable_spatial
            else None
        )
        self.temporal = (
            TransposedConvBlock(
                ConvSpec("t1d", in_t, ch, (kt,), (st,), (pt,)), "norm_relu", seed_seq, cfg.dtype
            )
            if cfg.enable_temporal
            else None
        )
        self.video = TransposedConvBlock(
            ConvSpec(cfg.conv_variant, in_v, ch, (kt, ks, ks), (st, ss, ss), (pt, ps, ps)),
            "norm_relu",
            seed_seq,
            cfg.dtype,
        )

    def forward(self, spatial_in: Tensor, temporal_in: Tensor, video_in: Tensor, training: bool):
        n = video_in.data.shape[0]
        h = self.cfg.spatial_sizes()[self.level]
        t = self.cfg.temporal_sizes()[self.level]
        dt = np.float32 if self.cfg.dtype == "f32" else np.float64
        if self.spatial is not None:
            f_s = self.spatial.forward(spatial_in, training)
        else:
            f_s = Tensor(np.zeros((n, self.out_channels, h, h), dtype=dt))
        if self.temporal is not None:
            f_t = self.temporal.forward(temporal_in, training)
        else:
            f_t = Tensor(np.zeros((n, self.out_channels, t), dtype=dt))
        f_v_prime = self.video.forward(video_in, training)
        f_v, trace = fuse(f_s, f_t, f_v_prime)
        return FeatureTriple(f_s, f_t, f_v), trace

    def tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        if self.spatial is not None:
            out += [(f"{prefix}/spatial/{n}", t) for n, t in self.spatial.tensors()]
        if self.temporal is not None:
            out += [(f"{prefix}/temporal/{n}", t) for n, t in self.temporal.tensors()]
        out += [(f"{prefix}/video/{n}", t) for n, t in self.video.tensors()]
        return out


class VideoGenerator:
    """Stacked tri-stream blocks mapping latent codes to videos in [-1, 1]."""

    def __init__(self, cfg: GeneratorConfig, seed: int = 0):
        self.cfg = cfg
        ss = np.random.SeedSequence(entropy=seed)
        chans = cfg.channels()
        self.blocks: list[TriStreamBlock] = []
        for level in range(cfg.levels):
            if level == 0:
                in_s = cfg.z_appearance
                in_t = cfg.z_motion + (cfg.num_classes or 0)
                in_v = cfg.z_appearance + cfg.z_motion
            else:
                in_s = in_t = chans[level - 1]
                in_v = 2 * chans[level - 1]
            self.blocks.append(TriStreamBlock(level, cfg, in_s, in_t, in_v, ss))
        if cfg.attn_level is not None:
            c_attn = 2 * chans[cfg.attn_level]
            self.attn_temporal = AttentionParams.create(
                c_attn, cfg.attn_reduction, seed=int(ss.generate_state(1)[0]), dtype=cfg.dtype
            )
            self.attn_spatial = AttentionParams.create(
                c_attn, cfg.attn_reduction, seed=int(ss.generate_state(1)[0]), dtype=cfg.dtype
            )
        else:
            self.attn_temporal = self.attn_spatial = None
        self.head = TransposedConvBlock(
            ConvSpec("full3d", 2 * chans[-1], 3, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
            "none",
            ss,
            cfg.dtype,
        )

    def forward(self, lat: LatentPair, training: bool = True, return_traces: bool = False):
        cfg = self.cfg
        dt = np.float32 if cfg.dtype == "f32" else np.float64
        z_a = lat.appearance if isinstance(lat.appearance, Tensor) else Tensor(np.asarray(lat.appearance, dtype=dt))
        z_m = lat.motion if isinstance(lat.motion, Tensor) else Tensor(np.asarray(lat.motion, dtype=dt))
        if z_a.data.ndim != 2 or z_a.data.shape[1] != cfg.z_appearance:
            raise ShapeError(f"appearance code must be (N, {cfg.z_appearance}), got {z_a.shape}")
        if z_m.data.ndim != 2 or z_m.data.shape[1] != cfg.z_motion:
            raise ShapeError(f"motion code must be (N, {cfg.z_motion}), got {z_m.shape}")
        if (lat.one_hot is not None) != (cfg.num_classes is not None):
            raise ShapeError("one_hot must be present exactly when num_classes is configured")
        n = z_a.data.shape[0]

        spatial_in = reshape(z_a, (n, cfg.z_appearance, 1, 1))
        if lat.one_hot is not None:
            oh = Tensor(np.asarray(lat.one_hot, dtype=dt))
            if oh.data.shape != (n, cfg.num_classes):
                raise ShapeError(f"one_hot must be (N, {cfg.num_classes}), got {oh.shape}")
            temporal_code = concat([z_m, oh], axis=1)
        else:
            temporal_code = z_m
        temporal_in = reshape(temporal_code, (n, temporal_code.data.shape[1], 1))
        motion_for_video = z_m
        if cfg.mask_motion_input:
            motion_for_video = Tensor(np.zeros_like(z_m.data))
        video_code = concat([z_a, motion_for_video], axis=1)
        video_in = reshape(video_code, (n, cfg.z_appearance + cfg.z_motion, 1, 1, 1))

        triples = []
        for level, block in enumerate(self.blocks):
            triple, _trace = block.forward(spatial_in, temporal_in, video_in, training)
            if cfg.attn_level == level and self.attn_temporal is not None:
                triple = FeatureTriple(
                    triple.spatial,
                    triple.temporal,
                    factorized_self_attention(triple.video, self.attn_temporal, self.attn_spatial),
                )
            triples.append(triple)
            spatial_in, temporal_in, video_in = triple.spatial, triple.temporal, triple.video

        rgb = self.head.forward(video_in, training)
        video = tanh(rgb)
        if return_traces:
            return video, triples
        return video

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, block in enumerate(self.blocks):
            out += block.tensors(f"block{i}")
        if self.attn_temporal is not None:
            out += [(f"attn_t/{n}", t) for n, t in self.attn_temporal.tensors()]
            out += [(f"attn_s/{n}", t) for n, t in self.attn_spatial.tensors()]
        out += [(f"head/{n}", t) for n, t in self.head.tensors()]
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.tensors() if t.requires_grad]


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------

def _disc_axis_geometry(extent: int) -> tuple[int, int, int, int]:
    """(kernel, stride, padding, out_extent) halving one axis where possible."""
    if extent >= 4:
        return 4, 2, 1, extent // 2
    if extent >= 2:
        return 2, 2, 0, extent // 2
    return 1, 1, 0, 1


class _Discriminator:
    """Five strided convolutions ending in a per-sample sigmoid score."""

    def __init__(self, extents: tuple[int, ...], width: int, seed_seq, dtype):
        chans = [width, 2 * width, 4 * width, 8 * width]
        self.layers: list[ConvBlock] = []
        cur_ext = list(extents)
        in_ch = 3
        for li, out_ch in enumerate(chans):
            geom = [_disc_axis_geometry(e) for e in cur_ext]
            kernel = tuple(g[0] for g in geom)
            stride = tuple(g[1] for g in geom)
            pad = tuple(g[2] for g in geom)
            cur_ext = [g[3] for g in geom]
            mode = "leaky" if li == 0 else "norm_leaky"
            variant = "conv2d" if len(extents) == 2 else "conv3d"
            self.layers.append(
                ConvBlock(ConvSpec(variant, in_ch, out_ch, kernel, stride, pad), mode, seed_seq, dtype)
            )
            in_ch = out_ch
        variant = "conv2d" if len(extents) == 2 else "conv3d"
        final = ConvSpec(
            variant,
            in_ch,
            1,
            tuple(cur_ext),
            tuple(1 for _ in cur_ext),
            tuple(0 for _ in cur_ext),
        )
        self.layers.append(ConvBlock(final, "sigmoid", seed_seq, dtype))

    def forward(self, x: Tensor, training: bool) -> Tensor:
        y = x
        for layer in self.layers:
            y = layer.forward(y, training)
        return reshape(y, (y.data.shape[0],))

    def tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"{prefix}/layer{i}/{n}", t) for n, t in layer.tensors()]
        return out


class VideoDiscriminator(_Discriminator):
    """Scores full videos (N, 3, T, H, W) with five 3D convolutions."""

    def __init__(self, frames: int, size: int, width: int = 64, seed: int = 0, dtype="f64"):
        super().__init__((frames, size, size), width, np.random.SeedSequence(entropy=seed), dtype)

    def forward(self, video: Tensor, training: bool = True) -> Tensor:
        if video.data.ndim != 5 or video.data.shape[1] != 3:
            raise ShapeError(f"video discriminator expects (N, 3, T, H, W), got {video.shape}")
        return super().forward(video, training)


class FrameDiscriminator(_Discriminator):
    """Scores individual frames (M, 3, H, W) with five 2D convolutions."""

    def __init__(self, size: int, width: int = 64, seed: int = 0, dtype="f64"):
        super().__init__((size, size), width, np.random.SeedSequence(entropy=seed), dtype)

    def forward(self, frames: Tensor, training: bool = True) -> Tensor:
        if frames.data.ndim != 4 or frames.data.shape[1] != 3:
            raise ShapeError(f"frame discriminator expects (M, 3, H, W), got {frames.shape}")
        return super().forward(frames, training)


def sample_frames(video: Tensor, count: int, rng: np.random.Generator) -> Tensor:
    """Uniformly sample ``count`` distinct frames per clip, ascending in time."""
    if video.data.ndim != 5:
        raise ShapeError(f"sample_frames expects rank 5, got {video.shape}")
    n, _, t = video.data.shape[:3]
    if not 1 <= count <= t:
        raise ShapeError(f"frame count {count} outside [1, {t}]")
    idx = np.stack([np.sort(rng.choice(t, size=count, replace=False)) for _ in range(n)])
    return take_frames(video, idx)


@dataclass
class GanModels:
    """Everything the adversarial game needs, built from one seed."""

    generator: VideoGenerator
    d_video: VideoDiscriminator
    d_image: FrameDiscriminator

    @classmethod
    def build(cls, cfg: GeneratorConfig, seed: int = 0, disc_base_width: int = 64) -> "GanModels":
        width = max(8, int(round(disc_base_width * cfg.width_mult)))
        return cls(
            generator=VideoGenerator(cfg, seed=seed),
            d_video=VideoDiscriminator(cfg.out_frames, cfg.out_size, width, seed=seed + 1, dtype=cfg.dtype),
            d_image=FrameDiscriminator(cfg.out_size, width, seed=seed + 2, dtype=cfg.dtype),
        )

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [(f"generator/{n}", t) for n, t in self.generator.tensors()]
        out += self.d_video.tensors("d_video")
        out += self.d_image.tensors("d_image")
        return out


def sample_latents(
    cfg: GeneratorConfig, batch: int, rng: np.random.Generator, classes: np.ndarray | None = None
) -> LatentPair:
    """Draw standard-normal codes (and build one-hot vectors when conditional)."""
    z_a = rng.standard_normal((batch, cfg.z_appearance))
    z_m = rng.standard_normal((batch, cfg.z_motion))
    one_hot = None
    if cfg.num_classes is not None:
        if classes is None:
            classes = rng.integers(0, cfg.num_classes, size=batch)
        one_hot = np.zeros((batch, cfg.num_classes))
        one_hot[np.arange(batch), np.asarray(classes)] = 1.0
    return LatentPair(z_a, z_m, one_hot)
