"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`GradTape` is active record a node holding
the output, the inputs and a gradient rule.  Because nodes are appended in
execution order the tape is topologically sorted by construction, and
:func:`backward` simply walks it in reverse.  Unrolling a spiking network over
``T`` timesteps produces an ordinary (longer) tape, so backpropagation through
time needs no extra machinery.

Only two broadcasting forms are supported: identical shapes, and a
single-element tensor combined with any tensor.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, DimensionError, FormatError

DTYPE = np.dtype(np.float32)
_dtype = DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the working dtype.

    Only meant for verification harnesses (finite differences need float64
    headroom); library code always runs in float32.
    """
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = old


def working_dtype() -> np.dtype:
    return _dtype


class Tensor:
    """An N-dimensional array of reals.

    Tensors are treated as immutable once produced; every operation returns a
    new tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor with a gradient buffer of identical shape."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_dtype))


GradRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    output: Tensor
    inputs: tuple
    rule: GradRule
    op: str


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op run inside the block whose inputs
    require gradients is appended to :attr:`nodes`.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_active: list[GradTape] = []


def current_tape() -> Optional[GradTape]:
    return _active[-1] if _active else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, e.g. for evaluation passes."""
    saved = list(_active)
    _active.clear()
    try:
        yield
    finally:
        _active[:] = saved


def record(data: np.ndarray, inputs: Sequence[Tensor], rule: GradRule, op: str = "") -> Tensor:
    """Wrap ``data`` as the output of an op and log it on the active tape.

    ``rule`` maps the upstream gradient to one gradient per input (``None``
    allowed for inputs that need none).  This is the extension point used by
    the neuron models to attach surrogate gradients.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(out, tuple(inputs), rule, op))
    return out


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf.

    The tape is consumed: calling this twice on one tape is an error.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward call")
    if not loss.requires_grad or not tape.nodes or not any(n.output is loss for n in reversed(tape.nodes)):
        raise ContractError("loss was not produced by this tape")

    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                gi = gi.reshape(inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            elif key not in produced:
                inp.grad = gi.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                grads[key] = gi
    tape.consumed = True
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(like.shape)


def _operands(a: Tensor, b: Tensor, op: str):
    _binary_shapes(a, b, op)
    ad, bd = a.data, b.data
    if a.shape != b.shape:
        if a.size == 1 and a.ndim <= b.ndim or b.size != 1:
            ad = ad.reshape(())
        else:
            bd = bd.reshape(())
    return ad, bd


def add(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _operands(a, b, "add")
    return record(ad + bd, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _operands(a, b, "sub")
    return record(ad - bd, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = _operands(a, b, "mul")
    return record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, a), _unbroadcast(g * ad, b)), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = _dtype.type(s)
    return record(a.data * s, (a,), lambda g: (g * s,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(a.data.sum(axis=axis), dtype=a.data.dtype), (a,), rule, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if a.size == 0:
        raise DimensionError("mean of an empty tensor")
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    inv = _dtype.type(1.0 / n)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return record(np.asarray(a.data.mean(axis=axis), dtype=a.data.dtype), (a,), rule, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from None
    return record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis but the first."""
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule, "concat")


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the leading axis."""
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record(a.data[start:stop], (a,), rule, "take_rows")


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` along the leading axis."""
    n = a.shape[0]

    def rule(g):
        return (g.reshape((reps, n) + g.shape[1:]).sum(axis=0),)

    return record(np.concatenate([a.data] * reps, axis=0), (a,), rule, "tile_rows")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def rule(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, rule, "linear")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if span < 0:
        raise ConfigurationError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ConfigurationError(
            f"non-integral output size: ({size} + 2*{padding} - {kernel}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) of NCHW input with OCkk kernels."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows: (n, ho, wo), columns: (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (g2.T @ cols).reshape(kernel.shape)
        gcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record(np.ascontiguousarray(out), inputs, rule, "conv2d")


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ConfigurationError(f"avg_pool2d: {h}x{w} not divisible by pool size {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    inv = _dtype.type(1.0 / (size * size))

    def rule(g):
        return (np.repeat(np.repeat(g * inv, size, axis=2), size, axis=3),)

    return record(out, (x,), rule, "avg_pool2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running statistics are applied.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def rule(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        gxhat = g * gd
        if training:
            m = x.size // x.shape[1]
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, g_gamma, g_beta

    return record(out, (x, gamma, beta), rule, "batch_norm")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return record(np.asarray(loss, dtype=logits.data.dtype), (logits,), rule, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"TSPK"
FORMAT_VERSION = 1


def tensor_to_bytes(t) -> bytes:
    """Encode as ``TSPK``, version u32, rank u32, dims u32..., float32 LE data."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf))
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    end = 12 + 4 * rank
    if len(buf) < end:
        raise FormatError("truncated dimension list", len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) < end + 4 * count:
        raise FormatError(f"truncated data: expected {count} floats", len(buf))
    if len(buf) > end + 4 * count:
        raise FormatError("trailing bytes after data", end + 4 * count)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=end).astype(np.float32).reshape(dims)


def save_tensor(path, t) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
