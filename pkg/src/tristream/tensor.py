"""Dense tensors with reverse-mode differentiation on an explicit tape.

Values are numpy arrays (float32 or float64, row-major, always materialized;
tensors never alias each other). Accumulating computations (matrix products,
reductions, softmax normalizers) run in float64 regardless of storage dtype
so that float32 gradients remain comparable to central differences.

A ``Tape`` records one node per primitive in execution order, which is a
topological order by construction. ``backward`` walks the tape once in
reverse, consuming intermediate gradients as it goes; leaf gradients
accumulate across repeated calls.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_MAGIC = b"G3TN"
_VERSION = 1


class ShapeError(ValueError):
    """Raised when extents, ranks or dtypes do not satisfy an operation's contract."""


class GraphError(RuntimeError):
    """Raised on misuse of the differentiation tape."""


class Tensor:
    """A dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np.dtype(dtype), copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        contig = np.ascontiguousarray(arr)
        if arr.ndim == 0:
            contig = contig.reshape(())  # ascontiguousarray promotes 0-d to 1-d
        self.data: np.ndarray = contig
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # Operator sugar for the common elementwise cases.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable[[np.ndarray], None]):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of executed primitives, one backward walk each."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Attach ``out`` to the active tape if any input participates in differentiation.

    ``backward_fn`` receives the gradient w.r.t. ``out`` and must accumulate into
    the inputs via :func:`accumulate_grad`.
    """
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(root: Tensor) -> None:
    """Populate gradients of every leaf reachable from a scalar ``root``.

    Repeated calls without clearing leaf gradients accumulate. Intermediate
    gradients are consumed during the walk, so each call contributes exactly
    one gradient of ``root`` to every leaf.
    """
    if root.data.size != 1:
        raise GraphError(f"backward requires a scalar root, got shape {root.shape}")
    tape = root._tape
    if tape is None:
        raise GraphError("root was not produced on a tape")
    accumulate_grad(root, np.ones_like(root.data))
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)
        node.out.grad = None


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def _check_extents(shape: Iterable[int]) -> tuple[int, ...]:
    extents = tuple(int(s) for s in shape)
    if any(e <= 0 for e in extents):
        raise ShapeError(f"extents must be positive, got {extents}")
    total = 1
    for e in extents:
        total *= e
        if total > 2**48:
            raise ShapeError(f"extents overflow a practical allocation: {extents}")
    return extents


def randn_seeded(shape: Sequence[int], seed: int, dtype="f64") -> Tensor:
    """Standard-normal tensor, bit-reproducible for a given (shape, seed, dtype)."""
    extents = _check_extents(shape)
    dt = np.dtype(DTYPES.get(dtype, dtype))
    gen = np.random.Generator(np.random.PCG64(seed))
    if dt == np.float32:
        arr = gen.standard_normal(extents, dtype=np.float32)
    else:
        arr = gen.standard_normal(extents)
    return Tensor(arr)


def zeros(shape: Sequence[int], dtype="f64") -> Tensor:
    return Tensor(np.zeros(_check_extents(shape), dtype=np.dtype(DTYPES.get(dtype, dtype))))


def ones(shape: Sequence[int], dtype="f64") -> Tensor:
    return Tensor(np.ones(_check_extents(shape), dtype=np.dtype(DTYPES.get(dtype, dtype))))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bw(g):
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    return record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * a.data.dtype.type(c))

    def bw(g):
        accumulate_grad(a, g * a.data.dtype.type(c))

    return record(out, (a,), bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + a.data.dtype.type(c))

    def bw(g):
        accumulate_grad(a, g)

    return record(out, (a,), bw)


def scale_by(a: Tensor, gain: Tensor) -> Tensor:
    """Multiply by a learnable scalar tensor."""
    if gain.data.size != 1:
        raise ShapeError("scale_by expects a single-element gain")
    gval = float(gain.data.reshape(()))
    out = Tensor(a.data * a.data.dtype.type(gval))

    def bw(g):
        accumulate_grad(a, g * a.data.dtype.type(gval))
        accumulate_grad(gain, np.sum(g * a.data, dtype=np.float64).astype(gain.data.dtype).reshape(gain.data.shape))

    return record(out, (a, gain), bw)


def residual_gain(x: Tensor, branch: Tensor, gain: Tensor) -> Tensor:
    """x + gain * branch, returning x bit-for-bit when the gain is exactly zero."""
    _same_shape(x, branch, "residual_gain")
    if gain.data.size != 1:
        raise ShapeError("residual_gain expects a single-element gain")
    gval = float(gain.data.reshape(()))
    if gval == 0.0:
        out = Tensor(x.data.copy())
    else:
        out = Tensor(x.data + x.data.dtype.type(gval) * branch.data)

    def bw(g):
        accumulate_grad(x, g)
        accumulate_grad(branch, g * x.data.dtype.type(gval))
        accumulate_grad(
            gain,
            np.sum(g * branch.data, dtype=np.float64).astype(gain.data.dtype).reshape(gain.data.shape),
        )

    return record(out, (x, branch, gain), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product; leading (batch) extents must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: mismatched batch extents {a.shape} vs {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    if a.data.dtype != b.data.dtype:
        raise ShapeError("matmul: dtypes differ")
    out = Tensor(_gemm(a.data, b.data).astype(a.data.dtype, copy=False))

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        accumulate_grad(a, _gemm(g64, _swap_last(b.data)).astype(a.data.dtype, copy=False))
        accumulate_grad(b, _gemm(_swap_last(a.data), g64).astype(b.data.dtype, copy=False))

    return record(out, (a, b), bw)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # accumulate in f64 irrespective of storage dtype
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in shape)
    if int(np.prod(new_shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {new_shape}")
    out = Tensor(a.data.reshape(new_shape).copy())

    def bw(g):
        accumulate_grad(a, g.reshape(a.data.shape))

    return record(out, (a,), bw)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of rank {a.data.ndim}")
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    inv = np.argsort(axes)

    def bw(g):
        accumulate_grad(a, np.ascontiguousarray(np.transpose(g, inv)))

    return record(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    rank = tensors[0].data.ndim
    axis = axis % rank
    for t in tensors[1:]:
        if t.data.ndim != rank:
            raise ShapeError("concat: rank mismatch")
        if t.data.dtype != tensors[0].data.dtype:
            raise ShapeError("concat: dtype mismatch")
        for ax in range(rank):
            if ax != axis and t.data.shape[ax] != tensors[0].data.shape[ax]:
                raise ShapeError("concat: non-concatenated extents differ")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accumulate_grad(t, np.ascontiguousarray(piece))

    return record(out, tuple(tensors), bw)


def replicate_along_axis(t: Tensor, axis: int, count: int) -> Tensor:
    """Insert a new axis of extent ``count`` at ``axis``; every slice equals ``t``."""
    if count <= 0:
        raise ShapeError("replicate count must be positive")
    if not 0 <= axis <= t.data.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.data.ndim}")
    expanded = np.expand_dims(t.data, axis)
    out = Tensor(np.ascontiguousarray(np.broadcast_to(expanded, expanded.shape[:axis] + (count,) + expanded.shape[axis + 1:])))

    def bw(g):
        accumulate_grad(t, np.sum(g, axis=axis, dtype=np.float64).astype(t.data.dtype))

    return record(out, (t,), bw)


def _reduce_axes(a: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(a.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % a.data.ndim for ax in axes)


def sum_(a: Tensor, axes=None) -> Tensor:
    axes = _reduce_axes(a, axes)
    out = Tensor(np.sum(a.data, axis=axes, dtype=np.float64).astype(a.data.dtype))

    def bw(g):
        accumulate_grad(a, np.broadcast_to(np.expand_dims(g, axes), a.data.shape).astype(a.data.dtype, copy=False).copy())

    return record(out, (a,), bw)


def mean(a: Tensor, axes=None) -> Tensor:
    axes = _reduce_axes(a, axes)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = Tensor((np.sum(a.data, axis=axes, dtype=np.float64) / count).astype(a.data.dtype))

    def bw(g):
        spread = np.broadcast_to(np.expand_dims(g, axes), a.data.shape) / a.data.dtype.type(count)
        accumulate_grad(a, spread.astype(a.data.dtype, copy=False).copy())

    return record(out, (a,), bw)


def softmax(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.data.ndim
    x = a.data.astype(np.float64, copy=False)
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    y64 = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y64.astype(a.data.dtype, copy=False))

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        inner = np.sum(g64 * y64, axis=axis, keepdims=True)
        accumulate_grad(a, (y64 * (g64 - inner)).astype(a.data.dtype, copy=False))

    return record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ShapeError("log requires strictly positive input")
    out = Tensor(np.log(a.data))

    def bw(g):
        accumulate_grad(a, g / a.data)

    return record(out, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    out = Tensor(np.clip(a.data, lo, hi))
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)

    def bw(g):
        accumulate_grad(a, g * mask)

    return record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw(g):
        accumulate_grad(a, g * (1.0 - y * y))

    return record(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def bw(g):
        accumulate_grad(a, g * y * (1.0 - y))

    return record(out, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    s = a.data.dtype.type(slope)
    out = Tensor(np.where(a.data >= 0, a.data, a.data * s))
    factor = np.where(a.data >= 0, a.data.dtype.type(1), s)

    def bw(g):
        accumulate_grad(a, g * factor)

    return record(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def take_frames(video: Tensor, indices: np.ndarray) -> Tensor:
    """Gather frames per clip from a (N, C, T, H, W) batch.

    ``indices`` has shape (N, K); output is (N*K, C, H, W) with clips laid out
    consecutively. The backward pass scatter-adds into the source positions.
    """
    if video.data.ndim != 5:
        raise ShapeError(f"take_frames expects rank 5, got {video.shape}")
    n, c, t, h, w = video.data.shape
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != n:
        raise ShapeError("indices must have shape (batch, frames)")
    if idx.min() < 0 or idx.max() >= t:
        raise ShapeError("frame index out of range")
    k = idx.shape[1]
    batch_ix = np.repeat(np.arange(n), k)
    frame_ix = idx.reshape(-1)
    gathered = video.data[batch_ix, :, frame_ix]  # (N*K, C, H, W)
    out = Tensor(np.ascontiguousarray(gathered))

    def bw(g):
        dv = np.zeros_like(video.data)
        np.add.at(dv, (batch_ix, slice(None), frame_ix), g)
        accumulate_grad(video, dv)

    return record(out, (video,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    n_entries: int

    def __bool__(self) -> bool:
        return self.passed


def finite_diff_gradcheck(
    fn: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float | None = None,
    tol_rel: float = 1e-4,
    fd_dtype: str = "f64",
) -> GradcheckReport:
    """Compare the tape gradient of ``fn`` at ``point`` against central differences.

    ``fn`` maps a tensor to a scalar tensor and must be deterministic. The tape
    gradient is taken at the point's own dtype; the difference quotients are
    evaluated in ``fd_dtype`` (f64 by default, so the oracle stays meaningful
    for float32 data; ``fn`` must therefore accept either dtype). The relative
    error uses an absolute floor of 1e-8 in the denominator.
    """
    fd_np = DTYPES[fd_dtype]
    if eps is None:
        eps = 1e-5 if fd_np == np.float64 else 1e-3

    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape():
        y = fn(x)
        if y.data.size != 1:
            raise GraphError("gradcheck target must produce a scalar")
        backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)

    base = point.data.astype(np.float64).copy()
    fd = np.zeros(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        y_plus = fn(Tensor(base.astype(fd_np))).item()
        flat[i] = orig - eps
        y_minus = fn(Tensor(base.astype(fd_np))).item()
        flat[i] = orig
        fd[i] = (y_plus - y_minus) / (2.0 * eps)

    fd = fd.reshape(point.data.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    rel = np.abs(analytic - fd) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradcheckReport(max_rel_err=max_rel, passed=max_rel <= tol_rel, n_entries=int(rel.size))


# ---------------------------------------------------------------------------
# tensor dump format: magic "G3TN", version, rank, extents, dtype tag, payload
# ---------------------------------------------------------------------------

def dump_tensor_bytes(arr: np.ndarray | Tensor) -> bytes:
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if data.dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dump dtype {data.dtype}")
    tag = _DTYPE_TAGS[np.dtype(data.dtype)]
    header = _MAGIC + struct.pack("<II", _VERSION, data.ndim)
    header += struct.pack(f"<{data.ndim}Q", *data.shape)
    header += struct.pack("<B", tag)
    payload = np.ascontiguousarray(data).astype(_TAG_DTYPES[tag], copy=False).tobytes()
    return header + payload


def load_tensor_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 13:
        raise ValueError("tensor dump truncated")
    if blob[:4] != _MAGIC:
        raise ValueError(f"bad tensor dump magic {blob[:4]!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported tensor dump version {version}")
    off = 12
    if len(blob) < off + 8 * rank + 1:
        raise ValueError("tensor dump truncated")
    extents = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    (tag,) = struct.unpack_from("<B", blob, off)
    off += 1
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    count = 1
    for e in extents:
        count *= e
    expected = count * dt.itemsize
    if len(blob) - off != expected:
        raise ValueError(f"tensor dump payload length {len(blob) - off}, expected {expected}")
    arr = np.frombuffer(blob[off:], dtype=dt).reshape(extents)
    return arr.astype(np.float32 if tag == 0 else np.float64)  # copy, native order


def write_tensor(arr: np.ndarray | Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_tensor_bytes(fh.read())
