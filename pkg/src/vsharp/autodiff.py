"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on the active :class:`Tape` only when at least one
input requires a gradient, so inference outside a tape runs on plain numpy
with no bookkeeping.

Complex images are stored as real tensors with a 2-channel axis at position
``-3`` holding (real, imaginary) parts, i.e. ``(..., 2, H, W)``.  This is the
only complex convention used across the package; network inputs and outputs
follow it directly.
"""

from __future__ import annotations

import threading
import weakref
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Parameter",
    "Tape",
    "TapeError",
    "Tensor",
    "abs",
    "add",
    "as_tensor",
    "avg_pool2d",
    "backward",
    "cabs",
    "cmul",
    "concat",
    "conv2d",
    "div",
    "exp",
    "fft2c",
    "from_complex",
    "ifft2c",
    "log",
    "max_abs",
    "mean",
    "mul",
    "neg",
    "power",
    "relu",
    "replication_pad2d",
    "reshape",
    "softplus",
    "sqrt",
    "stack",
    "sub",
    "sum",
    "to_complex",
    "transpose",
    "truncated_normal_init",
    "upsample_bilinear2d",
]

ArrayLike = Union["Tensor", np.ndarray, float, int]


class TapeError(RuntimeError):
    """Raised when a tape cannot be differentiated."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    # The tape is held weakly and the output only by id, so a finished graph
    # has no reference cycles and is freed as soon as its tensors go away.
    __slots__ = ("_tape", "index", "op", "inputs", "output_id", "vjp")

    def __init__(self, tape, index, op, inputs, output, vjp):
        self._tape = weakref.ref(tape)
        self.index = index
        self.op = op
        self.inputs = inputs
        self.output_id = id(output)
        self.vjp = vjp

    @property
    def tape(self):
        return self._tape()

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.op})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside the ``with`` block
    whose inputs require gradients appends one node.  Creation order is a
    topological order, which :func:`backward` relies on.  A tape belongs to
    the thread that entered it.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence["Tensor"], output: "Tensor", vjp: Callable) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), output, vjp)
        self.nodes.append(node)
        output._node = node
        return node


class Tensor:
    """A dense real array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if like is not None and np.ndim(value) == 0:
        return Tensor(np.asarray(value, dtype=like.dtype))
    return Tensor(value)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode accumulation of d(loss)/d(leaf) over ``tape``.

    Gradients are accumulated into ``.grad`` of every leaf tensor that
    requires one.  Returns the gradients of named parameters keyed by name.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._node is None or loss._node.tape is not tape:
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    stop = loss._node.index
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        input_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            src = inp._node
            if src is not None and src.tape is tape:
                if src.index >= node.index:
                    raise TapeError(f"cycle: {node} consumes output of later {src}")
            else:
                leaves[id(inp)] = inp
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi

    named: dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.array(grads[key], dtype=leaf.dtype)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        if leaf.name is not None:
            named[leaf.name] = leaf.grad
    return named


# -- elementwise arithmetic ---------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return _result(
        "power",
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, 0.5 * g / safe, 0),)

    return _result("sqrt", out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    # relu'(0) is taken as 0
    return _result("relu", np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    return _result("softplus", out, (a,), lambda g: (g * sig,))


def _pair(a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- reductions and shape ops -------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def max_abs(a: Tensor) -> Tensor:
    """``max |a|`` over all entries; the gradient is split evenly among ties."""
    mag = np.abs(a.data)
    peak = mag.max()
    hit = mag == peak

    def vjp(g):
        return (g * np.sign(a.data) * hit / hit.sum(),)

    return _result("max_abs", np.asarray(peak), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        out = np.zeros_like(a.data)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _result("getitem", a.data[index], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    n = len(tensors)
    return _result(
        "stack",
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)),
    )


# -- complex images (axis -3 holds real/imag) --------------------------------


def to_complex(arr: np.ndarray) -> np.ndarray:
    if arr.shape[-3] != 2:
        raise ValueError(f"expected a 2-channel complex axis at -3, got shape {arr.shape}")
    return arr[..., 0, :, :] + 1j * arr[..., 1, :, :]


def from_complex(arr: np.ndarray, dtype=None) -> np.ndarray:
    if dtype is None:
        dtype = np.float32 if arr.dtype == np.complex64 else np.float64
    return np.stack([arr.real, arr.imag], axis=-3).astype(dtype, copy=False)


def cmul(a: ArrayLike, b: ArrayLike, conj_b: bool = False) -> Tensor:
    """Elementwise complex product ``a * b`` (or ``a * conj(b)``), broadcasting."""
    a, b = _pair(a, b)
    ac, bc = to_complex(a.data), to_complex(b.data)
    out = ac * (np.conj(bc) if conj_b else bc)
    # the complex shape is the real shape with axis -3 dropped
    a_cshape = a.shape[:-3] + a.shape[-2:]
    b_cshape = b.shape[:-3] + b.shape[-2:]

    def vjp(g):
        gc = to_complex(g)
        if conj_b:
            ga, gb = gc * bc, np.conj(gc) * ac
        else:
            ga, gb = gc * np.conj(bc), gc * np.conj(ac)
        return (
            from_complex(_unbroadcast(ga, a_cshape), a.dtype),
            from_complex(_unbroadcast(gb, b_cshape), b.dtype),
        )

    return _result("cmul", from_complex(out, a.dtype), (a, b), vjp)


def cabs(a: Tensor) -> Tensor:
    """Magnitude of a complex tensor; drops axis -3.  The gradient at 0 is 0."""
    re, im = a.data[..., 0, :, :], a.data[..., 1, :, :]
    out = np.sqrt(re * re + im * im)

    def vjp(g):
        safe = np.where(out > 0, out, 1)
        scale = np.where(out > 0, g / safe, 0)
        return (np.stack([scale * re, scale * im], axis=-3),)

    return _result("cabs", out, (a,), vjp)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: input contains non-finite values")


def fft2c_array(arr: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D DFT over the last two axes of a complex array."""
    _check_finite(arr, "fft2c")
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(arr, axes=axes), norm="ortho"), axes=axes)


def ifft2c_array(arr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c_array`; also its adjoint."""
    _check_finite(arr, "ifft2c")
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(arr, axes=axes), norm="ortho"), axes=axes)


def fft2c(a: Tensor) -> Tensor:
    out = from_complex(fft2c_array(to_complex(a.data)), a.dtype)
    return _result("fft2c", out, (a,), lambda g: (from_complex(ifft2c_array(to_complex(g)), a.dtype),))


def ifft2c(a: Tensor) -> Tensor:
    out = from_complex(ifft2c_array(to_complex(a.data)), a.dtype)
    return _result("ifft2c", out, (a,), lambda g: (from_complex(fft2c_array(to_complex(g)), a.dtype),))


# -- neural network primitives -----------------------------------------------


def _pair_int(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2D cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, kh, kw).

    ``padding`` is zero padding applied on all four sides.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[-2:]
    ho = (Hp - dilation * (kh - 1) - 1) // stride + 1
    wo = (Wp - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel larger than padded input {xp.shape}")

    cols = np.empty((B, C, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r : r + stride * (ho - 1) + 1 : stride, c : c + stride * (wo - 1) + 1 : stride]
    cols = cols.reshape(B, C * kh * kw, ho * wo)
    wm = weight.data.reshape(O, C * kh * kw)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, ho, wo)

    def vjp(g):
        gm = g.reshape(B, O, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, gm).reshape(B, C, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    r, c = i * dilation, j * dilation
                    gxp[:, :, r : r + stride * (ho - 1) + 1 : stride, c : c + stride * (wo - 1) + 1 : stride] += gcols[
                        :, :, i, j
                    ]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, vjp)


def replication_pad2d(x: Tensor, pad) -> Tensor:
    """Edge-replicating pad of the last two axes.  ``pad`` is an int or (left, right, top, bottom)."""
    left, right, top, bottom = (pad,) * 4 if isinstance(pad, int) else pad
    H, W = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, widths, mode="edge")

    def vjp(g):
        g = g.copy()
        if top:
            g[..., top, :] += g[..., :top, :].sum(axis=-2)
        if bottom:
            g[..., top + H - 1, :] += g[..., top + H :, :].sum(axis=-2)
        g = g[..., top : top + H, :]
        if left:
            g[..., :, left] += g[..., :, :left].sum(axis=-1)
        if right:
            g[..., :, left + W - 1] += g[..., :, left + W :].sum(axis=-1)
        return (g[..., left : left + W],)

    return _result("replication_pad2d", out, (x,), vjp)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2d needs even spatial dims, got {(H, W)}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _result("avg_pool2d", out, (x,), vjp)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align_corners=False: output pixel centres mapped back to input coordinates
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear2d(x: Tensor, scale: int = 2) -> Tensor:
    H, W = x.shape[-2:]
    mh = _interp_matrix(H, H * scale, x.dtype)
    mw = _interp_matrix(W, W * scale, x.dtype)
    out = mh @ x.data @ mw.T
    return _result("upsample_bilinear2d", out, (x,), lambda g: (mh.T @ g @ mw,))


def truncated_normal_init(
    shape, lo: float, hi: float, rng: np.random.Generator, dtype=np.float64, max_rounds: int = 10_000
) -> np.ndarray:
    """Standard-normal samples restricted to ``[lo, hi]`` by rejection."""
    if not lo < hi:
        raise ValueError(f"truncated normal needs lo < hi, got [{lo}, {hi}]")
    n = int(np.prod(shape))
    out = np.empty(n, dtype=np.float64)
    filled = 0
    rounds = 0
    while filled < n:
        if rounds == max_rounds:
            raise ValueError(f"rejection sampling on [{lo}, {hi}] did not converge")
        draw = rng.standard_normal(max(2 * (n - filled), 16))
        keep = draw[(draw >= lo) & (draw <= hi)][: n - filled]
        out[filled : filled + keep.size] = keep
        filled += keep.size
        rounds += 1
    return out.reshape(shape).astype(dtype)
