"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a contiguous numpy array,
every operation that sees a gradient-requiring input records its inputs and
a backward rule on the output, and ``backward(loss)`` replays those records
in reverse topological order, accumulating gradients by summation.

Conventions:
  * dtypes are float32 ("f32") or float64 ("f64"); mixing them in one op is
    an error. Model compute is f32, numerical oracles run at f64.
  * Gradients accumulate across fan-out and across repeated backward calls;
    ``zero_grad`` is the explicit reset.
  * Reductions accumulate in float64 internally so results do not depend on
    how the reduced axis was ordered (this is what makes the temporal mean
    permutation-stable at f32).
"""

import contextlib

import numpy as np

from .errors import ConfigError, ShapeError, StateError, UsageError, ValidationError

_DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
    np.float32: np.float32,
    np.float64: np.float64,
    np.dtype(np.float32): np.float32,
    np.dtype(np.float64): np.float64,
}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward results only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _resolve_dtype(dtype):
    try:
        return _DTYPES[dtype]
    except (KeyError, TypeError):
        raise ConfigError(f"unsupported dtype {dtype!r}; use 'f32' or 'f64'") from None


class _Op:
    """One recorded operation: inputs, the output's backward rule, a debug name."""

    __slots__ = ("inputs", "backward", "name")

    def __init__(self, inputs, backward, name):
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        dt = _resolve_dtype(dtype) if dtype is not None else _DTYPES.get(arr.dtype, np.float32)
        arr = np.ascontiguousarray(arr, dtype=dt)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None

    # -- introspection ------------------------------------------------------

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
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._op is None

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient management -------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValidationError(f"dtype mismatch: {dt} vs {t.dtype}; cast explicitly")
    return dt


def make(data, inputs, backward_fn, name):
    """Wrap op output, recording the backward rule when gradients are live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = None
    out.requires_grad = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = _Op(tuple(inputs), backward_fn, name)
    return out


class Tape:
    """The ops behind one output, in forward (topological) order.

    Built by a depth-first walk; replaying ``records`` in reverse visits every
    recorded op exactly once, which is all reverse mode needs.
    """

    def __init__(self, records):
        self.records = records

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        records = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                records.append(node)
                continue
            if node._op is None or id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in reversed(node._op.inputs):
                stack.append((inp, False))
        return cls(records)

    def __len__(self):
        return len(self.records)


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad leaf reachable from ``loss``.

    Gradients sum across fan-out; calling backward twice without zero_grad
    doubles them. A graph with no recorded ops is a no-op (beyond seeding the
    loss tensor itself when it requires a gradient).
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._op is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = Tape.trace(loss)
    pending = {id(loss): seed}
    for node in reversed(tape.records):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node._op.backward(g)
        for inp, gi in zip(node._op.inputs, grads):
            if gi is None:
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(
                    f"backward of {node._op.name} produced grad {gi.shape} for input {inp.data.shape}"
                )
            if inp._op is not None:
                prev = pending.get(id(inp))
                pending[id(inp)] = gi if prev is None else prev + gi
            elif inp.requires_grad:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g)


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make(out, (a, b), bwd, "sub")


def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return make(out, (a, b), bwd, "mul")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return make(out, (x,), bwd, "sigmoid")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return make(out, (x,), bwd, "relu")


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """x where x >= 0 else slope*x; the subgradient at 0 is taken as 1."""
    if not (0.0 < slope < 1.0):
        raise ConfigError(f"leaky_relu slope must be in (0,1), got {slope}")
    d = x.data
    out = np.where(d >= 0, d, d * d.dtype.type(slope))

    def bwd(g):
        return (g * np.where(d >= 0, d.dtype.type(1), d.dtype.type(slope)),)

    return make(out, (x,), bwd, "leaky_relu")


def softmax(x: Tensor, axis: int) -> Tensor:
    d = x.data
    m = d.max(axis=axis, keepdims=True)
    e = np.exp(d - m)
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(d.dtype)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(d.dtype)
        return (out * (g - inner),)

    return make(out, (x,), bwd, "softmax")


# -- shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(x.data.shape)),)

    return make(out, (x,), bwd, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make(out, (x,), bwd, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make(out, tuple(tensors), bwd, "concat")


# -- reductions ------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bwd(g):
        gg = g
        if not keepdims:
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        return (np.ascontiguousarray(np.broadcast_to(gg, x.data.shape)),)

    return make(out, (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    if count == 0:
        raise ShapeError("mean over zero elements")
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def bwd(g):
        gg = g / x.dtype.type(count)
        if not keepdims:
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        return (np.ascontiguousarray(np.broadcast_to(gg, x.data.shape)),)

    return make(out, (x,), bwd, "mean")


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool over the trailing two (spatial) axes."""
    if x.ndim < 3:
        raise ShapeError(f"spatial_mean needs >= 3 dims, got {x.ndim}")
    return mean(x, axis=(-2, -1), keepdims=False)


# -- matmul ----------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when either side carries leading axes.

    Leading axes must match exactly or be absent (the 2-D operand is shared
    across the batch); gradients sum over the shared operand.
    """
    _same_dtype(a, b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError("matmul operands must have >= 2 dims")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {da.shape} @ {db.shape}")
    if da.ndim > 2 and db.ndim > 2 and da.shape[:-2] != db.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {da.shape} @ {db.shape}")
    out = np.matmul(da, db)

    def bwd(g):
        ga = np.matmul(g, db.swapaxes(-1, -2))
        gb = np.matmul(da.swapaxes(-1, -2), g)
        if ga.shape != da.shape:
            ga = _unbroadcast(ga, da.shape)
        if gb.shape != db.shape:
            gb = _unbroadcast(gb, db.shape)
        return np.ascontiguousarray(ga), np.ascontiguousarray(gb)

    return make(out, (a, b), bwd, "matmul")


# -- parameters & optimizer --------------------------------------------------------


class Parameter:
    """A named trainable tensor plus its Adam moment buffers."""

    def __init__(self, tensor: Tensor, name: str = ""):
        tensor.requires_grad = True
        self.name = name
        self.tensor = tensor
        self.adam_m = np.zeros_like(tensor.data)
        self.adam_v = np.zeros_like(tensor.data)
        self.step_count = 0

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def size(self):
        return self.tensor.size

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, steps={self.step_count})"


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over the given parameters."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise StateError(f"adam_step: parameter {p.name!r} has no gradient")
    for p in params:
        g = p.tensor.grad
        t = p.step_count + 1
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        mhat = p.adam_m / (1.0 - beta1**t)
        vhat = p.adam_v / (1.0 - beta2**t)
        p.tensor.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.tensor.dtype, copy=False)
        p.step_count = t


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise StateError(f"{what} contains NaN/Inf")
