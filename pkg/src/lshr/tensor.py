"""Minimal dense tensor with tape-based reverse-mode differentiation.

Only the operations the reconstruction network needs are provided. Every
differentiable op appends a node to the active :class:`Tape`; calling
:func:`backward` walks the tape in reverse and returns gradients for the leaf
tensors that requested them.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, UsageError

_DTYPES = {"single": np.float32, "double": np.float64}


class _State:
    default_dtype = np.float32
    grad_enabled = True
    check_finite = False
    tape: "Tape"


_state = _State()


def set_default_dtype(precision: str | type) -> None:
    """Select ``"single"`` (float32) or ``"double"`` (float64) for new tensors."""
    _state.default_dtype = _resolve_dtype(precision)


def get_default_dtype():
    return _state.default_dtype


def _resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return _DTYPES[precision]
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    return np.dtype(precision).type


@contextlib.contextmanager
def default_dtype(precision) -> Iterator[None]:
    old = _state.default_dtype
    _state.default_dtype = _resolve_dtype(precision)
    try:
        yield
    finally:
        _state.default_dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape."""
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def verification() -> Iterator[None]:
    """Check every op output for NaN/Inf while active."""
    old = _state.check_finite
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = old


class Tensor:
    """Dense real array plus a flag saying whether gradients are wanted."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _state.default_dtype
        arr = np.asarray(data, dtype=dtype)
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(t: Tensor):
    raise UsageError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Node:
    """One recorded op: its output, inputs and the vector-Jacobian rule."""

    name: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        # detach outputs so node <-> tensor cycles do not pin saved arrays
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


_state.tape = Tape()


def current_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    old = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = old


def record_op(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out_data`` in a tensor and, when needed, record it on the tape.

    ``vjp`` maps the output gradient to one gradient (or ``None``) per input.
    """
    if _state.check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor(out_data, dtype=out_data.dtype)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(name, out, tuple(inputs), vjp)
        out._node = node
        _state.tape.record(node)
    return out


class Gradients(dict):
    """Gradient arrays keyed by tensor identity; index with the tensor itself."""

    def __getitem__(self, key):
        return super().__getitem__(id(key) if isinstance(key, Tensor) else key)

    def __contains__(self, key):
        return super().__contains__(id(key) if isinstance(key, Tensor) else key)

    def get(self, key, default=None):
        return super().get(id(key) if isinstance(key, Tensor) else key, default)


def backward(loss: Tensor, tape: Tape | None = None) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns gradients for every leaf with ``requires_grad``; a leaf used by
    several ops receives the sum of its contributions. The tape is cleared
    afterwards.
    """
    tape = _state.tape if tape is None else tape
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise UsageError("backward called on an empty tape")
    if loss._node is None or loss._node not in tape.nodes:
        raise UsageError("loss was not produced by an op recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = Gradients()
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            target = leaves if inp.is_leaf else pending
            key = id(inp)
            if key in target:
                target[key] = target[key] + gi
            else:
                target[key] = gi
    tape.clear()
    return leaves


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "add")
    return record_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "subtract")
    return record_op(
        "subtract", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "multiply")
    return record_op(
        "multiply", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    return record_op(
        "sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),),
    )


def mean(a: Tensor) -> Tensor:
    n = a.size
    return record_op(
        "mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
    )


def sum_squares(a: Tensor) -> Tensor:
    return record_op(
        "sum_squares", np.asarray(np.sum(a.data * a.data), dtype=a.dtype), (a,),
        lambda g: (2.0 * g * a.data,),
    )


def leaky_relu(x: Tensor, p: float = 0.2) -> Tensor:
    """``max(x, p*x)``; the slope at exactly zero is taken as ``p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"leaky slope must lie in [0, 1), got {p}")
    slope = np.where(x.data > 0, 1.0, p).astype(x.dtype)
    return record_op("leaky_relu", x.data * slope, (x,), lambda g: (g * slope,))


# --------------------------------------------------------------------------
# convolutions


def _check_4d(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise DimensionError(f"{what} must be 4-D, got shape {t.shape}")


def _out_size(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """``[B, C, H, W] -> [B, C*k*k, Ho*Wo]`` patch matrix (a fresh contiguous array)."""
    b, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride), _out_size(w, k, stride)
    if stride == k:
        blocks = x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k)
        return np.ascontiguousarray(blocks.transpose(0, 1, 3, 5, 2, 4)).reshape(b, c * k * k, ho * wo)
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + hi : stride, j : j + wi : stride]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into ``shape``."""
    b, c, h, w = shape
    ho, wo = _out_size(h, k, stride), _out_size(w, k, stride)
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    if stride == k:
        out[:, :, : ho * k, : wo * k] = cols.transpose(0, 1, 4, 2, 5, 3).reshape(b, c, ho * k, wo * k)
        return out
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hi : stride, j : j + wi : stride] += cols[:, :, i, j]
    return out


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation; also returns the patch matrix for reuse."""
    cout, _, k, _ = w.shape
    b, _, h, wd = x.shape
    cols = _im2col(x, k, stride)
    out = np.matmul(w.reshape(cout, -1), cols)
    return out.reshape(b, cout, _out_size(h, k, stride), _out_size(wd, k, stride)), cols


def conv2d(
    x: Tensor,
    kernels: Tensor,
    stride: int = 1,
    bias: Tensor | None = None,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``kernels[Cout,Cin,K,K]``.

    ``padding`` zero-pads both spatial axes symmetrically; with the default of
    zero this is a valid convolution.
    """
    _check_4d(x, "conv2d input")
    _check_4d(kernels, "conv2d kernels")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    cout, cin, kh, kw = kernels.shape
    if kh != kw:
        raise DimensionError(f"conv2d kernels must be square, got {kh}x{kw} (axes 2, 3)")
    if x.shape[1] != cin:
        raise DimensionError(
            f"conv2d channel mismatch: input axis 1 has {x.shape[1]}, kernels axis 1 has {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise DimensionError(
            f"conv2d input spatial axes 2, 3 {xp.shape[2:]} smaller than kernel {kh}x{kw}"
        )
    w = kernels.data
    out, cols = _conv_raw(xp, w, stride)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        g3 = g.reshape(g.shape[0], cout, -1)
        gw = None
        if kernels.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = _col2im(np.matmul(w.reshape(cout, -1).T, g3), xp.shape, kh, stride)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record_op("conv2d", out, inputs, vjp)


def transposed_conv2d(
    x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None
) -> Tensor:
    """Adjoint of :func:`conv2d`: ``x[B,Cin,h,w]`` and ``kernels[Cin,Cout,K,K]``.

    Output spatial size is ``(h - 1) * stride + K``.
    """
    _check_4d(x, "transposed_conv2d input")
    _check_4d(kernels, "transposed_conv2d kernels")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    cin, cout, kh, kw = kernels.shape
    if kh != kw:
        raise DimensionError(f"transposed_conv2d kernels must be square, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise DimensionError(
            f"transposed_conv2d channel mismatch: input axis 1 has {x.shape[1]}, "
            f"kernels axis 0 has {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"transposed_conv2d bias must have shape ({cout},), got {bias.shape}")
    b, _, h, w_ = x.shape
    shape = (b, cout, (h - 1) * stride + kh, (w_ - 1) * stride + kw)
    w2 = kernels.data.reshape(cin, -1)
    x3 = x.data.reshape(b, cin, -1)
    out = _col2im(np.matmul(w2.T, x3), shape, kh, stride)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        need_w = kernels.requires_grad
        gx = gw = None
        if x.requires_grad or need_w:
            gcols = _im2col(g, kh, stride)
            if x.requires_grad:
                gx = np.matmul(w2, gcols).reshape(x.shape)
            if need_w:
                gw = np.matmul(x3, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record_op("transposed_conv2d", out, inputs, vjp)


# --------------------------------------------------------------------------
# sub-pixel rearrangement


def _shuffle(a: np.ndarray, s: int) -> np.ndarray:
    b, c, h, w = a.shape
    c_out = c // (s * s)
    return a.reshape(b, c_out, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c_out, h * s, w * s)


def _unshuffle(a: np.ndarray, s: int) -> np.ndarray:
    b, c, hs, ws = a.shape
    h, w = hs // s, ws // s
    return a.reshape(b, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * s * s, h, w)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """``out[b, c, y*s+i, x*s+j] = in[b, c*s*s + i*s + j, y, x]``."""
    _check_4d(x, "pixel_shuffle input")
    if s < 1:
        raise ValueError(f"upscale factor must be >= 1, got {s}")
    if x.shape[1] % (s * s):
        raise DimensionError(f"pixel_shuffle: channel axis {x.shape[1]} not divisible by {s * s}")
    return record_op("pixel_shuffle", _shuffle(x.data, s), (x,), lambda g: (_unshuffle(g, s),))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    _check_4d(x, "pixel_unshuffle input")
    if x.shape[2] % s or x.shape[3] % s:
        raise DimensionError(f"pixel_unshuffle: spatial axes {x.shape[2:]} not divisible by {s}")
    return record_op("pixel_unshuffle", _unshuffle(x.data, s), (x,), lambda g: (_shuffle(g, s),))


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Per-input worst relative error between analytic and numeric gradients.

    The error for one input is ``max|a - n| / max(max|a|, max|n|, floor)``,
    i.e. scaled by the largest gradient entry of that tensor.
    """

    errors: dict[str, float]
    tolerance: float
    diagnostic: str = ""

    @property
    def passed(self) -> bool:
        return not self.diagnostic and all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def numeric_gradient(
    f: Callable[[], Tensor], t: Tensor, epsilon: float, entries: np.ndarray | None = None
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t``.

    ``entries`` restricts the work to those flat indices; the rest stay zero.
    """
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size) if entries is None else entries:
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f().data.sum())
            flat[i] = orig - epsilon
            lo = float(f().data.sum())
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * epsilon)
    return grad


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor] | dict[str, Tensor],
    epsilon: float = 1e-6,
    tolerance: float = 1e-5,
    floor: float = 1e-12,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare :func:`backward` against central finite differences.

    ``f`` takes no arguments and reads the current values of ``inputs``; it
    must return a scalar tensor (a non-scalar result is reduced by summation).
    With ``max_entries`` only that many randomly chosen entries of each input
    are perturbed, which keeps checks of large models affordable.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {
        (t.name or f"input{i}"): t for i, t in enumerate(inputs)
    }
    rng = np.random.default_rng(seed)
    tape = Tape()
    with use_tape(tape):
        out = f()
        if not np.all(np.isfinite(out.data)):
            return GradCheckReport({}, tolerance, "f returned non-finite values")
        loss = out if out.size == 1 else total(out)
        grads = backward(loss, tape)
    errors = {}
    for name, t in named.items():
        analytic = grads.get(t)
        analytic = np.zeros(t.shape) if analytic is None else np.asarray(analytic, dtype=np.float64)
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        numeric = numeric_gradient(f, t, epsilon, idx)
        if not np.all(np.isfinite(numeric)):
            return GradCheckReport(errors, tolerance, f"non-finite finite difference for {name}")
        a, n = analytic.reshape(-1), numeric.reshape(-1)
        if idx is not None:
            a, n = a[idx], n[idx]
        scale_ = max(np.abs(a).max(), np.abs(n).max(), floor)
        errors[name] = float(np.abs(a - n).max() / scale_)
    return GradCheckReport(errors, tolerance)
