"""Convolution kernels, batch normalization and activations.

Plain and transposed convolutions over 1, 2 or 3 trailing axes share one
im2col/col2im core so the transposed variants are exact adjoints of the
strided ones. Factorized transposed variants (temporal-then-spatial and
spatial-then-temporal) are composed from the 1D and 2D primitives with a
rectification in between, so their backward pass falls out of the tape.

GEMMs and statistics accumulate in float64 regardless of storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    accumulate_grad,
    leaky_relu,
    permute,
    record,
    reshape,
    tanh,
)

VARIANTS_TRANSPOSED = ("t1d", "s2d", "full3d", "fact_1p2d", "fact_2p1d")
VARIANTS_PLAIN = ("conv2d", "conv3d")
_RANK_FOR_AXES = {1: 3, 2: 4, 3: 5}


@dataclass(frozen=True)
class ConvSpec:
    """Geometry and channel plan of one convolution layer.

    ``kernel``/``stride``/``padding`` carry one entry per convolved axis
    ((t,), (h, w) or (t, h, w)). ``mid_channels`` applies to the factorized
    variants only; when left at 0 it is resolved by the parameter-balance
    rule so the factorized layer approximately matches the parameter count
    of a dense 3D layer with the same channels and kernel.
    """

    variant: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    bias: bool = True
    mid_channels: int = 0
    mid_activation: str = "leaky"  # "leaky" | "identity"; between factorized stages

    def __post_init__(self):
        if self.variant not in VARIANTS_TRANSPOSED + VARIANTS_PLAIN:
            raise ShapeError(f"unknown conv variant {self.variant!r}")
        axes = self.n_axes
        for name in ("kernel", "stride", "padding"):
            vals = getattr(self, name)
            if len(vals) != axes:
                raise ShapeError(f"{self.variant} expects {axes} {name} entries, got {vals}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ShapeError("channel counts must be positive")
        if any(k <= 0 for k in self.kernel) or any(s <= 0 for s in self.stride):
            raise ShapeError("kernel and stride entries must be positive")
        if any(p < 0 for p in self.padding):
            raise ShapeError("padding entries must be non-negative")

    @property
    def n_axes(self) -> int:
        if self.variant == "t1d":
            return 1
        if self.variant in ("s2d", "conv2d"):
            return 2
        return 3

    @property
    def transposed(self) -> bool:
        return self.variant in VARIANTS_TRANSPOSED

    @property
    def factorized(self) -> bool:
        return self.variant in ("fact_1p2d", "fact_2p1d")

    def resolved_mid_channels(self) -> int:
        if not self.factorized:
            return 0
        if self.mid_channels > 0:
            return self.mid_channels
        return balance_mid_channels(self)

    def out_extents(self, in_extents: Sequence[int]) -> tuple[int, ...]:
        if len(in_extents) != self.n_axes:
            raise ShapeError(f"expected {self.n_axes} extents, got {in_extents}")
        out = []
        for e, k, s, p in zip(in_extents, self.kernel, self.stride, self.padding):
            if self.transposed:
                o = (e - 1) * s + k - 2 * p
            else:
                o = (e + 2 * p - k) // s + 1
            if o <= 0:
                raise ShapeError(f"non-positive output extent for input extent {e} with {self}")
            out.append(o)
        return tuple(out)


def balance_mid_channels(spec: ConvSpec) -> int:
    """Mid-channel count that matches a dense 3D layer's parameter count.

    Closed-form rounding of M from
    ``M * (stage1_per_channel + stage2_per_channel + bias1) ~= dense_weights``.
    """
    if not spec.factorized:
        raise ShapeError("balance rule applies to factorized variants only")
    kt, kh, kw = spec.kernel
    dense = spec.in_channels * spec.out_channels * kt * kh * kw
    b1 = 1 if spec.bias else 0
    if spec.variant == "fact_1p2d":
        denom = spec.in_channels * kt + spec.out_channels * kh * kw + b1
    else:
        denom = spec.in_channels * kh * kw + spec.out_channels * kt + b1
    return max(1, int(round(dense / denom)))


def param_count(spec: ConvSpec) -> int:
    """Exact learnable scalar count of the layer described by ``spec``."""
    kvol = int(np.prod(spec.kernel))
    bias_out = spec.out_channels if spec.bias else 0
    if not spec.factorized:
        return spec.in_channels * spec.out_channels * kvol + bias_out
    m = spec.resolved_mid_channels()
    kt, kh, kw = spec.kernel
    if spec.variant == "fact_1p2d":
        k1, k2 = kt, kh * kw
    else:
        k1, k2 = kh * kw, kt
    stage1 = spec.in_channels * m * k1 + (m if spec.bias else 0)
    stage2 = m * spec.out_channels * k2 + bias_out
    return stage1 + stage2


# ---------------------------------------------------------------------------
# im2col / col2im core
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel, stride, padding):
    """Extract strided patches: (N, C, *S) -> (N, C*kvol, L) plus output extents."""
    d = len(kernel)
    if any(padding):
        x = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=tuple(range(2, 2 + d)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    out_ext = win.shape[2:2 + d]
    n, c = x.shape[0], x.shape[1]
    order = (0, 1) + tuple(range(2 + d, 2 + 2 * d)) + tuple(range(2, 2 + d))
    kvol = int(np.prod(kernel))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(n, c * kvol, int(np.prod(out_ext)))
    return cols, out_ext


def _col2im(cols: np.ndarray, big_extents, channels, kernel, stride, padding):
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the large grid."""
    n = cols.shape[0]
    small_ext = tuple(
        (e + 2 * p - k) // s + 1 for e, k, s, p in zip(big_extents, kernel, stride, padding)
    )
    padded_ext = tuple(e + 2 * p for e, p in zip(big_extents, padding))
    out = np.zeros((n, channels) + padded_ext, dtype=cols.dtype)
    cols = cols.reshape((n, channels) + tuple(kernel) + small_ext)
    head = (slice(None), slice(None))
    for off in np.ndindex(*kernel):
        dst = tuple(slice(o, o + s * se, s) for o, s, se in zip(off, stride, small_ext))
        out[head + dst] += cols[head + off]
    crop = tuple(slice(p, p + e) for p, e in zip(padding, big_extents))
    return np.ascontiguousarray(out[head + crop])


def _f64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv_nd(x: Tensor, weight: Tensor, bias: Tensor | None, stride, padding) -> Tensor:
    """Strided cross-correlation. x: (N, Cin, *S); weight: (Cout, Cin, *k)."""
    d = weight.data.ndim - 2
    if x.data.ndim != d + 2:
        raise ShapeError(f"conv expects rank {d + 2} input, got {x.shape}")
    n, cin = x.data.shape[:2]
    cout, w_cin = weight.data.shape[:2]
    if cin != w_cin:
        raise ShapeError(f"conv channel mismatch: input {cin}, weight {w_cin}")
    kernel = weight.data.shape[2:]
    cols, out_ext = _im2col(x.data, kernel, stride, padding)
    w2 = _f64(weight.data.reshape(cout, -1))
    y = np.matmul(w2, _f64(cols))
    if bias is not None:
        y += _f64(bias.data).reshape(1, cout, 1)
    out = Tensor(y.reshape((n, cout) + out_ext).astype(x.data.dtype, copy=False))
    in_ext = x.data.shape[2:]
    L = cols.shape[2]

    def bw(g):
        g2 = _f64(g.reshape(n, cout, L))
        if weight.requires_grad:
            dw = np.matmul(g2, _f64(cols).transpose(0, 2, 1)).sum(axis=0)
            accumulate_grad(weight, dw.reshape(weight.data.shape).astype(weight.data.dtype, copy=False))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dx = _col2im(dcols, in_ext, cin, kernel, stride, padding)
            accumulate_grad(x, dx.astype(x.data.dtype, copy=False))
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g2.sum(axis=(0, 2)).astype(bias.data.dtype, copy=False))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bw)


def transposed_conv_nd(x: Tensor, weight: Tensor, bias: Tensor | None, stride, padding) -> Tensor:
    """Adjoint of the strided cross-correlation. x: (N, Cin, *S); weight: (Cin, Cout, *k)."""
    d = weight.data.ndim - 2
    if x.data.ndim != d + 2:
        raise ShapeError(f"transposed conv expects rank {d + 2} input, got {x.shape}")
    n, cin = x.data.shape[:2]
    w_cin, cout = weight.data.shape[:2]
    if cin != w_cin:
        raise ShapeError(f"transposed conv channel mismatch: input {cin}, weight {w_cin}")
    kernel = weight.data.shape[2:]
    in_ext = x.data.shape[2:]
    out_ext = tuple((e - 1) * s + k - 2 * p for e, k, s, p in zip(in_ext, kernel, stride, padding))
    if any(e <= 0 for e in out_ext):
        raise ShapeError(f"non-positive transposed output extent {out_ext}")
    kvol = int(np.prod(kernel))
    L_in = int(np.prod(in_ext))
    wf = _f64(weight.data.reshape(cin, cout * kvol))
    xf = _f64(x.data.reshape(n, cin, L_in))
    cols = np.matmul(wf.T, xf)  # (N, Cout*kvol, L_in)
    y = _col2im(cols, out_ext, cout, kernel, stride, padding)
    if bias is not None:
        y += _f64(bias.data).reshape((1, cout) + (1,) * d)
    out = Tensor(y.astype(x.data.dtype, copy=False))

    def bw(g):
        gcols, _ = _im2col(_f64(g), kernel, stride, padding)  # (N, Cout*kvol, L_in)
        if x.requires_grad:
            dx = np.matmul(wf, gcols)
            accumulate_grad(x, dx.reshape(x.data.shape).astype(x.data.dtype, copy=False))
        if weight.requires_grad:
            dw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0)
            accumulate_grad(weight, dw.reshape(weight.data.shape).astype(weight.data.dtype, copy=False))
        if bias is not None and bias.requires_grad:
            db = _f64(g).sum(axis=(0,) + tuple(range(2, 2 + d)))
            accumulate_grad(bias, db.astype(bias.data.dtype, copy=False))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bw)


def channel_project(x: Tensor, weight: Tensor) -> Tensor:
    """Position-wise channel map: (N, C, L) x (Co, C) -> (N, Co, L).

    Equivalent to a 1x1 convolution over the flattened positions.
    """
    if x.data.ndim != 3 or weight.data.ndim != 2:
        raise ShapeError("channel_project expects (N, C, L) input and (Co, C) weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"channel mismatch: {x.shape} vs {weight.shape}")
    y = np.matmul(_f64(weight.data), _f64(x.data))
    out = Tensor(y.astype(x.data.dtype, copy=False))

    def bw(g):
        g64 = _f64(g)
        if x.requires_grad:
            dx = np.matmul(_f64(weight.data).T, g64)
            accumulate_grad(x, dx.astype(x.data.dtype, copy=False))
        if weight.requires_grad:
            dw = np.matmul(g64, _f64(x.data).transpose(0, 2, 1)).sum(axis=0)
            accumulate_grad(weight, dw.astype(weight.data.dtype, copy=False))

    return record(out, (x, weight), bw)


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None


@dataclass
class FactorizedConvParams:
    first: ConvParams
    second: ConvParams


def conv_forward(spec: ConvSpec, x: Tensor, params: ConvParams) -> Tensor:
    """Plain strided convolution for the ``conv2d``/``conv3d`` variants."""
    if spec.variant not in VARIANTS_PLAIN:
        raise ShapeError(f"conv_forward handles plain variants, got {spec.variant}")
    _check_io_channels(spec, x, params.weight.data.shape[1], params.weight.data.shape[0])
    spec.out_extents(x.data.shape[2:])
    return conv_nd(x, params.weight, params.bias, spec.stride, spec.padding)


def transposed_conv_forward(spec: ConvSpec, x: Tensor, params) -> Tensor:
    """Transposed convolution of any supported variant.

    ``t1d`` expects (N, C, T); ``s2d`` (N, C, H, W); the 3D variants
    (N, C, T, H, W). Factorized variants take :class:`FactorizedConvParams`.
    """
    if spec.variant not in VARIANTS_TRANSPOSED:
        raise ShapeError(f"transposed_conv_forward got plain variant {spec.variant}")
    if not spec.factorized:
        _check_io_channels(spec, x, params.weight.data.shape[0], params.weight.data.shape[1])
        spec.out_extents(x.data.shape[2:])
        return transposed_conv_nd(x, params.weight, params.bias, spec.stride, spec.padding)

    if x.data.ndim != 5:
        raise ShapeError(f"factorized variants expect rank 5 input, got {x.shape}")
    n, c, t, h, w = x.data.shape
    if c != spec.in_channels:
        raise ShapeError(f"channel mismatch: input {c}, spec {spec.in_channels}")
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pt, ph, pw = spec.padding

    def rectify(y: Tensor) -> Tensor:
        return y if spec.mid_activation == "identity" else leaky_relu(y, 0.2)

    if spec.variant == "fact_1p2d":
        # temporal stage over T with (H, W) folded into the batch
        xt = reshape(permute(x, (0, 3, 4, 1, 2)), (n * h * w, c, t))
        mid = transposed_conv_nd(xt, params.first.weight, params.first.bias, (st,), (pt,))
        m, t2 = mid.data.shape[1], mid.data.shape[2]
        mid = rectify(mid)
        # spatial stage over (H, W) with the new T folded into the batch
        ms = reshape(permute(reshape(mid, (n, h, w, m, t2)), (0, 4, 3, 1, 2)), (n * t2, m, h, w))
        y = transposed_conv_nd(ms, params.second.weight, params.second.bias, (sh, sw), (ph, pw))
        h2, w2 = y.data.shape[2], y.data.shape[3]
        return permute(reshape(y, (n, t2, spec.out_channels, h2, w2)), (0, 2, 1, 3, 4))

    # fact_2p1d: spatial stage first, then temporal
    xs = reshape(permute(x, (0, 2, 1, 3, 4)), (n * t, c, h, w))
    mid = transposed_conv_nd(xs, params.first.weight, params.first.bias, (sh, sw), (ph, pw))
    m, h2, w2 = mid.data.shape[1], mid.data.shape[2], mid.data.shape[3]
    mid = rectify(mid)
    mt = reshape(permute(reshape(mid, (n, t, m, h2, w2)), (0, 3, 4, 2, 1)), (n * h2 * w2, m, t))
    y = transposed_conv_nd(mt, params.second.weight, params.second.bias, (st,), (pt,))
    t2 = y.data.shape[2]
    return permute(reshape(y, (n, h2, w2, spec.out_channels, t2)), (0, 3, 4, 1, 2))


def _check_io_channels(spec: ConvSpec, x: Tensor, w_in: int, w_out: int) -> None:
    if x.data.shape[1] != spec.in_channels:
        raise ShapeError(f"channel mismatch: input {x.data.shape[1]}, spec {spec.in_channels}")
    if w_in != spec.in_channels or w_out != spec.out_channels:
        raise ShapeError("weight channels disagree with spec")


# ---------------------------------------------------------------------------
# batch normalization and activation
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype="f64") -> "BatchNormState":
        dt = np.float32 if str(dtype) in ("f32", "float32") else np.float64
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dt), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dt), requires_grad=True),
            running_mean=Tensor(np.zeros(channels, dtype=dt)),
            running_var=Tensor(np.ones(channels, dtype=dt)),
        )


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over all non-channel axes (channel axis 1)."""
    if x.data.ndim < 2:
        raise ShapeError("batch_norm expects rank >= 2")
    c = x.data.shape[1]
    if state.gamma.data.shape != (c,):
        raise ShapeError(f"batch_norm channel mismatch: {c} vs {state.gamma.data.shape}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    m = int(np.prod([x.data.shape[a] for a in axes]))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    x64 = _f64(x.data)
    if training:
        mu = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        mom = state.momentum
        state.running_mean.data[...] = (1 - mom) * state.running_mean.data + mom * mu.astype(
            state.running_mean.data.dtype
        )
        state.running_var.data[...] = (1 - mom) * state.running_var.data + mom * var.astype(
            state.running_var.data.dtype
        )
    else:
        mu = _f64(state.running_mean.data)
        var = _f64(state.running_var.data)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x64 - mu.reshape(bshape)) * inv.reshape(bshape)
    gamma, beta = state.gamma, state.beta
    y = _f64(gamma.data).reshape(bshape) * xhat + _f64(beta.data).reshape(bshape)
    out = Tensor(y.astype(x.data.dtype, copy=False))

    def bw(g):
        g64 = _f64(g)
        if gamma.requires_grad:
            accumulate_grad(gamma, (g64 * xhat).sum(axis=axes).astype(gamma.data.dtype, copy=False))
        if beta.requires_grad:
            accumulate_grad(beta, g64.sum(axis=axes).astype(beta.data.dtype, copy=False))
        if x.requires_grad:
            dxhat = g64 * _f64(gamma.data).reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(bshape)
            accumulate_grad(x, dx.astype(x.data.dtype, copy=False))

    return record(out, (x, gamma, beta), bw)


def normalize_activate(x: Tensor, mode: str, state: BatchNormState | None, training: bool = True) -> Tensor:
    """Batch normalization followed by the configured nonlinearity.

    Modes: ``norm_leaky`` (slope 0.2), ``norm_relu``, ``tanh`` (no
    normalization; final video head only), ``none``.
    """
    if mode == "tanh":
        return tanh(x)
    if mode == "none":
        return x
    if state is None:
        raise ShapeError(f"mode {mode!r} requires normalization state")
    y = batch_norm(x, state, training)
    if mode == "norm_leaky":
        return leaky_relu(y, 0.2)
    if mode == "norm_relu":
        return leaky_relu(y, 0.0)
    raise ShapeError(f"unknown normalize_activate mode {mode!r}")
