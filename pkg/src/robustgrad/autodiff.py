"""Reverse-mode automatic differentiation over an explicit tape.

A :class:`Tensor` wraps a numpy array. While a :class:`Tape` is active,
every primitive operation involving a tensor that requires gradients
records a node. ``Tape.gradient`` walks the recorded nodes in reverse.
Backward rules are themselves written in terms of primitive operations,
so a sweep run with ``create_graph=True`` records the adjoint
computation too, and the returned gradients can be differentiated
again. That is the mechanism behind every gradient-of-gradient quantity
in this package (input-gradient penalties, Hessian-vector products).

The module also instruments "network passes": model code wraps each
forward evaluation in :func:`forward_pass_scope`, and gradient sweeps
report how many marked graph regions they traversed. Traversing a
forward region costs one pass; traversing a recorded-adjoint region
costs two (one forward-like and one backward-like traversal of the
adjoint structure). :func:`count_passes` collects the tally.

Tapes and their tensors are confined to a single thread while
recording; finished tensors are immutable and may be shared freely.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass

import numpy as np
from scipy import special as _special

__all__ = [
    "Tensor",
    "Tape",
    "GradientRequest",
    "AutodiffError",
    "NonScalarOutputError",
    "ShapeMismatchError",
    "PassCounter",
    "tensor",
    "constant",
    "zeros",
    "ones",
    "zeros_like",
    "ones_like",
    "active_tape",
    "stop_recording",
    "no_grad",
    "forward_pass_scope",
    "count_passes",
    "gradient",
    "hessian_vector_product",
    "finite_difference_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "erf",
    "sigmoid",
    "softplus",
    "abs_",
    "sign",
    "maximum",
    "minimum",
    "max_reduce",
    "min_reduce",
    "sum_",
    "mean",
    "matmul",
    "transpose",
    "reshape",
    "getitem",
    "embed",
    "flip",
    "pad2d",
    "broadcast_to",
    "conv2d",
    "avg_pool2d",
    "softmax",
    "log_softmax",
]

_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_DTYPES = {"f32": np.float32, "f64": np.float64}


class AutodiffError(Exception):
    """Base error for tape/tensor misuse."""


class NonScalarOutputError(AutodiffError):
    """Gradient was requested of a tensor with more than one element."""


class ShapeMismatchError(AutodiffError):
    """Operand shapes are incompatible for the requested operation."""


def _np_dtype(dtype):
    if dtype is None:
        return None
    if isinstance(dtype, str):
        try:
            return _NAME_DTYPES[dtype]
        except KeyError:
            raise AutodiffError(f"unsupported dtype {dtype!r}, expected 'f32' or 'f64'")
    return np.dtype(dtype).type


class Tensor:
    """N-dimensional value container: shape, float dtype, row-major buffer."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        want = _np_dtype(dtype)
        if want is not None:
            arr = arr.astype(want, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def values(self):
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    def numpy(self):
        """The backing array. Treat as read-only; tensors are immutable."""
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def detach(self):
        """A constant leaf sharing this tensor's buffer."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        return t

    def validate(self):
        """Check the container invariants (finite values, packed buffer)."""
        if not np.all(np.isfinite(self.data)):
            raise AutodiffError("tensor contains non-finite values")
        return self

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"


def tensor(data, dtype=None, requires_grad=False):
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def constant(data, dtype=None):
    return Tensor(data, dtype=dtype, requires_grad=False)


def zeros(shape, dtype="f64"):
    return Tensor(np.zeros(shape, dtype=_np_dtype(dtype)))


def ones(shape, dtype="f64"):
    return Tensor(np.ones(shape, dtype=_np_dtype(dtype)))


def zeros_like(t):
    return Tensor(np.zeros_like(t.data))


def ones_like(t):
    return Tensor(np.ones_like(t.data))


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

class _Segment:
    """A marked region of the recorded graph, used only for pass accounting."""

    __slots__ = ("kind",)

    def __init__(self, kind):
        self.kind = kind  # "forward" or "adjoint"

    @property
    def traversal_cost(self):
        return 1 if self.kind == "forward" else 2


class _Node:
    __slots__ = ("name", "inputs", "output", "backward", "segment")

    def __init__(self, name, inputs, output, backward, segment):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.segment = segment


_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = _TLS.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _muted():
    return getattr(_TLS, "mute", 0) > 0


@contextmanager
def stop_recording():
    """Suspend node recording on every tape for the enclosed block."""
    _TLS.mute = getattr(_TLS, "mute", 0) + 1
    try:
        yield
    finally:
        _TLS.mute -= 1


no_grad = stop_recording


@dataclass(frozen=True)
class GradientRequest:
    """A differentiation request: scalar output, targets, graph retention."""

    output: Tensor
    wrt: tuple
    create_graph: bool = False


class Tape:
    """Ordered record of primitive operations; rebuilt per forward pass.

    Node order is the execution order, hence a valid topological order.
    With ``create_graph=True`` the adjoints produced by a gradient sweep
    are recorded onto the same tape and remain differentiable.
    """

    def __init__(self):
        self.nodes = []
        self._segment = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise AutodiffError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @contextmanager
    def _in_segment(self, segment):
        prev = self._segment
        self._segment = segment
        try:
            yield
        finally:
            self._segment = prev

    def gradient(self, output, wrt, create_graph=False):
        """d(output)/d(wrt_i) for a scalar output.

        Targets that do not influence the output get zero tensors, the
        usual convention for disconnected derivatives. With
        ``create_graph=True`` the returned tensors are differentiable.
        """
        if not isinstance(output, Tensor):
            raise TypeError("gradient output must be a Tensor")
        if output.size != 1:
            raise NonScalarOutputError(
                f"gradient needs a scalar output, got shape {output.shape}"
            )
        wrt = list(wrt)
        horizon = len(self.nodes)
        adjoint = {id(output): ones_like(output)}
        touched = set()
        ctx = self._in_segment(_Segment("adjoint")) if create_graph else stop_recording()
        with ctx:
            for node in reversed(self.nodes[:horizon]):
                grad_out = adjoint.get(id(node.output))
                if grad_out is None:
                    continue
                if node.segment is not None:
                    touched.add(node.segment)
                input_grads = node.backward(grad_out)
                for inp, g in zip(node.inputs, input_grads):
                    if g is None or not inp.requires_grad:
                        continue
                    held = adjoint.get(id(inp))
                    adjoint[id(inp)] = g if held is None else add(held, g)
        _emit_backward(sum(seg.traversal_cost for seg in touched))
        results = []
        for target in wrt:
            g = adjoint.get(id(target))
            results.append(zeros_like(target) if g is None else g)
        return results


def gradient(tape, request):
    """Resolve a :class:`GradientRequest` on the given tape."""
    return tape.gradient(request.output, request.wrt, create_graph=request.create_graph)


def hessian_vector_product(tape, output, x, v):
    """(d²output/dx²)·v, as the gradient of <d(output)/dx, v>."""
    if v.shape != x.shape:
        raise ShapeMismatchError(f"v shape {v.shape} != x shape {x.shape}")
    (g,) = tape.gradient(output, [x], create_graph=True)
    inner = sum_(mul(g, v.detach()))
    return tape.gradient(inner, [x])[0]


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, the test oracle."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = x.data
    out = np.zeros(base.shape, dtype=np.float64)
    flat = out.reshape(-1)
    for i in range(base.size):
        bumped = base.astype(np.float64).reshape(-1).copy()
        bumped[i] += h
        f_plus = _as_scalar(f(Tensor(bumped.reshape(base.shape))))
        bumped[i] -= 2 * h
        f_minus = _as_scalar(f(Tensor(bumped.reshape(base.shape))))
        flat[i] = (f_plus - f_minus) / (2 * h)
    return Tensor(out)


def _as_scalar(value):
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


# ---------------------------------------------------------------------------
# Pass accounting
# ---------------------------------------------------------------------------

class PassCounter:
    """Tally of network forward passes and backward traversal units."""

    def __init__(self):
        self.forward = 0
        self.backward = 0

    @property
    def total(self):
        return self.forward + self.backward

    def __repr__(self):
        return f"PassCounter(forward={self.forward}, backward={self.backward})"


def _counter_stack():
    stack = getattr(_TLS, "counters", None)
    if stack is None:
        stack = _TLS.counters = []
    return stack


@contextmanager
def count_passes():
    counter = PassCounter()
    stack = _counter_stack()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _emit_forward():
    for counter in _counter_stack():
        counter.forward += 1


def _emit_backward(units):
    if units:
        for counter in _counter_stack():
            counter.backward += units


@contextmanager
def forward_pass_scope():
    """Mark one network forward evaluation, for pass accounting."""
    _emit_forward()
    tape = active_tape()
    if tape is None or _muted():
        yield
    else:
        with tape._in_segment(_Segment("forward")):
            yield


# ---------------------------------------------------------------------------
# Primitive recording
# ---------------------------------------------------------------------------

def _record(name, inputs, out_data, backward):
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None or _muted():
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    tape.nodes.append(_Node(name, inputs, out, backward, tape._segment))
    return out


def _wrap(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _coerce_pair(a, b):
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    if a.shape != b.shape:
        target = np.broadcast_shapes(a.shape, b.shape)
        if a.shape != target:
            a = broadcast_to(a, target)
        if b.shape != target:
            b = broadcast_to(b, target)
    return a, b


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _coerce_pair(a, b)

    def backward(g):
        return g, g

    return _record("add", (a, b), a.data + b.data, backward)


def sub(a, b):
    a, b = _coerce_pair(a, b)

    def backward(g):
        return g, neg(g)

    return _record("sub", (a, b), a.data - b.data, backward)


def mul(a, b):
    a, b = _coerce_pair(a, b)

    def backward(g):
        return mul(g, b), mul(g, a)

    return _record("mul", (a, b), a.data * b.data, backward)


def div(a, b):
    a, b = _coerce_pair(a, b)

    def backward(g):
        ga = div(g, b)
        gb = neg(mul(g, div(a, mul(b, b))))
        return ga, gb

    return _record("div", (a, b), a.data / b.data, backward)


def neg(a):
    a = _wrap(a)

    def backward(g):
        return (neg(g),)

    return _record("neg", (a,), -a.data, backward)


def pow_(a, exponent):
    """a**c for a constant scalar exponent."""
    a = _wrap(a)
    c = float(exponent)

    def backward(g):
        return (mul(g, mul(constant(np.asarray(c, dtype=a.data.dtype)), pow_(a, c - 1.0))),)

    return _record("pow", (a,), a.data ** c, backward)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        return (mul(g, out),)

    out = _record("exp", (a,), out_data, backward)
    return out


def log(a):
    a = _wrap(a)

    def backward(g):
        return (div(g, a),)

    return _record("log", (a,), np.log(a.data), backward)


def sqrt(a):
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        return (div(mul(g, constant(np.asarray(0.5, dtype=a.data.dtype))), out),)

    out = _record("sqrt", (a,), out_data, backward)
    return out


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward(g):
        return (mul(g, sub(constant(np.asarray(1.0, dtype=a.data.dtype)), mul(out, out))),)

    out = _record("tanh", (a,), out_data, backward)
    return out


def erf(a):
    a = _wrap(a)
    two_over_sqrt_pi = 2.0 / np.sqrt(np.pi)

    def backward(g):
        return (mul(g, mul(constant(np.asarray(two_over_sqrt_pi, dtype=a.data.dtype)),
                           exp(neg(mul(a, a))))),)

    return _record("erf", (a,), _special.erf(a.data), backward)


def sigmoid(a):
    a = _wrap(a)
    out_data = _special.expit(a.data)

    def backward(g):
        one = constant(np.asarray(1.0, dtype=a.data.dtype))
        return (mul(g, mul(out, sub(one, out))),)

    out = _record("sigmoid", (a,), out_data, backward)
    return out


def softplus(a):
    """log(1 + e^a), evaluated stably; derivative is sigmoid(a) everywhere."""
    a = _wrap(a)

    def backward(g):
        return (mul(g, sigmoid(a)),)

    return _record("softplus", (a,), np.logaddexp(0.0, a.data).astype(a.data.dtype), backward)


def abs_(a):
    """|a| with subgradient 0 at 0, so sign(0) = 0 carries through."""
    a = _wrap(a)
    mask = constant(np.sign(a.data))

    def backward(g):
        return (mul(g, mask),)

    return _record("abs", (a,), np.abs(a.data), backward)


def sign(a):
    """Elementwise sign; derivative defined as 0 everywhere."""
    a = _wrap(a)

    def backward(g):
        return (None,)

    return _record("sign", (a,), np.sign(a.data), backward)


def maximum(a, b):
    a, b = _coerce_pair(a, b)
    take_a = constant((a.data >= b.data).astype(a.data.dtype))

    def backward(g):
        one = constant(np.asarray(1.0, dtype=a.data.dtype))
        return mul(g, take_a), mul(g, sub(one, take_a))

    return _record("maximum", (a, b), np.maximum(a.data, b.data), backward)


def minimum(a, b):
    a, b = _coerce_pair(a, b)
    take_a = constant((a.data <= b.data).astype(a.data.dtype))

    def backward(g):
        one = constant(np.asarray(1.0, dtype=a.data.dtype))
        return mul(g, take_a), mul(g, sub(one, take_a))

    return _record("minimum", (a, b), np.minimum(a.data, b.data), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _kept_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else e for i, e in enumerate(shape))


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    in_shape = a.shape

    def backward(g):
        gk = g if keepdims or axis is None and g.ndim == len(in_shape) else None
        if gk is None:
            gk = reshape(g, _kept_shape(in_shape, axis))
        return (broadcast_to(gk, in_shape),)

    return _record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), backward)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    total = a.size if axis is None else int(
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims),
               constant(np.asarray(1.0 / total, dtype=a.data.dtype)))


def max_reduce(a, axis=None, keepdims=False):
    """Max over an axis (or all). Gradient flows to the first max position."""
    a = _wrap(a)
    if axis is None:
        flat_idx = int(np.argmax(a.data))
        mask_np = np.zeros_like(a.data)
        mask_np.reshape(-1)[flat_idx] = 1.0
    else:
        idx = np.argmax(a.data, axis=axis)
        mask_np = np.zeros_like(a.data)
        np.put_along_axis(mask_np, np.expand_dims(idx, axis), 1.0, axis=axis)
    mask = constant(mask_np)
    in_shape = a.shape

    def backward(g):
        gk = g if keepdims else reshape(g, _kept_shape(in_shape, axis))
        return (mul(broadcast_to(gk, in_shape), mask),)

    return _record("max", (a,), np.max(a.data, axis=axis, keepdims=keepdims), backward)


def min_reduce(a, axis=None, keepdims=False):
    return neg(max_reduce(neg(a), axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def broadcast_to(a, shape):
    a = _wrap(a)
    shape = tuple(shape)
    in_shape = a.shape
    extra = len(shape) - len(in_shape)
    if extra < 0:
        raise ShapeMismatchError(f"cannot broadcast {in_shape} to {shape}")

    def backward(g):
        axes = tuple(range(extra)) + tuple(
            i + extra for i, e in enumerate(in_shape) if e == 1 and shape[i + extra] != 1
        )
        reduced = sum_(g, axis=axes) if axes else g
        return (reshape(reduced, in_shape),)

    return _record("broadcast", (a,), np.broadcast_to(a.data, shape).copy(), backward)


def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(shape)
    in_shape = a.shape

    def backward(g):
        return (reshape(g, in_shape),)

    return _record("reshape", (a,), a.data.reshape(shape).copy(), backward)


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (transpose(g, inverse),)

    return _record("transpose", (a,), np.transpose(a.data, axes).copy(), backward)


def getitem(a, key):
    """Basic slicing/indexing; the adjoint scatters back into zeros."""
    a = _wrap(a)
    in_shape = a.shape

    def backward(g):
        return (embed(g, in_shape, key),)

    return _record("getitem", (a,), a.data[key].copy(), backward)


def embed(a, shape, key):
    """Place ``a`` into a zero tensor of ``shape`` at ``key``; inverse of getitem."""
    a = _wrap(a)
    out_data = np.zeros(shape, dtype=a.data.dtype)
    out_data[key] = a.data

    def backward(g):
        return (getitem(g, key),)

    return _record("embed", (a,), out_data, backward)


def flip(a, axis):
    key = [slice(None)] * _wrap(a).ndim
    for ax in (axis if isinstance(axis, tuple) else (axis,)):
        key[ax] = slice(None, None, -1)
    return getitem(a, tuple(key))


def pad2d(a, padding):
    """Zero-pad the two trailing (spatial) axes of a 4-D tensor."""
    a = _wrap(a)
    ph, pw = padding if isinstance(padding, tuple) else (padding, padding)
    if ph == 0 and pw == 0:
        return a
    b, c, h, w = a.shape
    key = (slice(None), slice(None), slice(ph, ph + h), slice(pw, pw + w))
    return embed(a, (b, c, h + 2 * ph, w + 2 * pw), key)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError("matmul supports 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        return matmul(g, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), g)

    return _record("matmul", (a, b), a.data @ b.data, backward)


def _corr2d(x, w):
    """Valid cross-correlation of x[B,C,H,W] with w[O,C,kh,kw], stride 1."""
    kh, kw = w.shape[2], w.shape[3]
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, w, padding=0):
    """2-D cross-correlation, stride 1, symmetric zero padding."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError("conv2d expects x[B,C,H,W] and w[O,C,kh,kw]")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"conv2d channel mismatch: {x.shape} vs {w.shape}")
    ph, pw = padding if isinstance(padding, tuple) else (padding, padding)
    kh, kw = w.shape[2], w.shape[3]
    h, wd = x.shape[2], x.shape[3]
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeMismatchError("conv2d kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    out_data = _corr2d(xp, w.data)

    def backward(g):
        grad_x = grad_w = None
        if x.requires_grad:
            w_swapped = flip(transpose(w, (1, 0, 2, 3)), (2, 3))
            full = conv2d(pad2d(g, (kh - 1, kw - 1)), w_swapped, 0)
            if ph or pw:
                full = getitem(full, (slice(None), slice(None),
                                      slice(ph, ph + h), slice(pw, pw + wd)))
            grad_x = full
        if w.requires_grad:
            x_padded = pad2d(x, (ph, pw))
            gw = conv2d(transpose(x_padded, (1, 0, 2, 3)), transpose(g, (1, 0, 2, 3)), 0)
            grad_w = transpose(gw, (1, 0, 2, 3))
        return grad_x, grad_w

    return _record("conv2d", (x, w), out_data, backward)


def avg_pool2d(x, window):
    """Non-overlapping average pooling; spatial dims must divide evenly."""
    x = _wrap(x)
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeMismatchError(f"pool window {window} does not divide {h}x{w}")
    blocked = reshape(x, (b, c, h // window, window, w // window, window))
    return mean(blocked, axis=(3, 5))


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def log_softmax(z, axis=-1):
    shift = constant(np.max(z.data, axis=axis, keepdims=True))
    centered = sub(z, shift)
    return sub(centered, log(sum_(exp(centered), axis=axis, keepdims=True)))


def softmax(z, axis=-1):
    return exp(log_softmax(z, axis=axis))
