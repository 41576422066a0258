"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A single flat tape records every differentiable op in execution order; the
backward pass walks it once in reverse. The op set is deliberately small:
just enough for GRU cells, additive attention, softmax heads and scalar
point-process likelihoods. There is no general broadcasting -- elementwise
ops accept equal shapes, or a scalar paired with an array.

All values are float64. Any op that produces a NaN/Inf raises immediately;
exp() clamps its input to +/-EXP_CLAMP instead of overflowing (a documented,
tested saturation).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

EXP_CLAMP = 50.0


class AutodiffError(ValueError):
    """Shape mismatch, non-finite result, or tape misuse."""


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar; definitions live at module level
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def parameter(data):
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered op records (output, inputs, backward closure), oldest first.

    Topological order holds by construction: an op can only consume tensors
    that already exist when it runs.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape():
    return _TAPE


@contextmanager
def fresh_tape():
    """Swap in an isolated tape (independent graphs, e.g. in tests)."""
    global _TAPE
    saved = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = saved


@contextmanager
def no_grad():
    """Disable recording; outputs inside the block never require grad."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise AutodiffError(f"{op} produced non-finite values")


def _result(op, data, inputs, backward_fn):
    _finite(data, op)
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _TAPE.records.append((out, inputs, backward_fn))
    return out


def _scalar_or_same(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise AutodiffError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not "
                        "conform (equal shapes or scalar-vs-tensor only)")


def _reduce_to(g, tensor):
    # gradient of a scalar operand broadcast against an array
    if tensor.data.ndim == 0 and np.ndim(g) > 0:
        return g.sum()
    return g


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _scalar_or_same(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _scalar_or_same(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _result("sub", a.data - b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _result("neg", -a.data, (a,), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _scalar_or_same(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return _result("mul", ad * bd, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _scalar_or_same(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise AutodiffError("div: zero divisor")

    def backward(g):
        return _reduce_to(g / bd, a), _reduce_to(-g * ad / (bd * bd), b)

    return _result("div", ad / bd, (a, b), backward)


def matmul(a, b):
    """Matrix/vector product for 1-D and 2-D operands (inner dims must match)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise AutodiffError("matmul: operands must be 1-D or 2-D")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else None):
        raise AutodiffError(f"matmul: inner dims {ad.shape} @ {bd.shape} differ")

    def backward(g):
        if ad.ndim == 1 and bd.ndim == 1:          # inner product, g scalar
            return g * bd, g * ad
        if ad.ndim == 1 and bd.ndim == 2:          # (k,) @ (k,n) -> (n,)
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:          # (m,k) @ (k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g                  # (m,k) @ (k,n)

    return _result("matmul", ad @ bd, (a, b), backward)


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = out.reshape(x.shape)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", out, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result("tanh", out, (a,), backward)


def texp(a):
    """exp with input clamped to +/-EXP_CLAMP; gradient is zero where clamped."""
    a = as_tensor(a)
    clipped = np.clip(a.data, -EXP_CLAMP, EXP_CLAMP)
    out = np.exp(clipped)
    inside = (a.data > -EXP_CLAMP) & (a.data < EXP_CLAMP)

    def backward(g):
        return (g * out * inside,)

    return _result("exp", out, (a,), backward)


def tlog(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise AutodiffError("log: non-positive input")
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _result("log", np.log(ad), (a,), backward)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is zero outside the open interval."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        return (g * inside,)

    return _result("clip", out, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors):
    """Concatenate scalars and 1-D tensors into one vector."""
    tensors = [as_tensor(t) for t in tensors]
    parts = [np.atleast_1d(t.data) for t in tensors]
    for t in tensors:
        if t.data.ndim > 1:
            raise AutodiffError("concat: only scalars and 1-D tensors")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)
    scalar = [t.data.ndim == 0 for t in tensors]

    def backward(g):
        grads = []
        for i in range(len(tensors)):
            gi = g[offsets[i]:offsets[i + 1]]
            grads.append(gi[0] if scalar[i] else gi)
        return tuple(grads)

    return _result("concat", np.concatenate(parts), tuple(tensors), backward)


def stack_rows(tensors):
    """Stack equal-length 1-D tensors into a 2-D (n, d) matrix."""
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors:
        if t.data.ndim != 1:
            raise AutodiffError("stack_rows: inputs must be 1-D")

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _result("stack_rows", np.stack([t.data for t in tensors]),
                   tuple(tensors), backward)


def take(a, key):
    """Slice/index (ints, slices, index arrays); scatter-adds on backward."""
    a = as_tensor(a)
    shape = a.data.shape
    out = a.data[key]

    def backward(g):
        buf = np.zeros(shape, dtype=np.float64)
        np.add.at(buf, key, g)
        return (buf,)

    return _result("take", out, (a,), backward)


def take_rows(a, indices):
    """Gather rows of a 2-D tensor by integer index array."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise AutodiffError("take_rows: input must be 2-D")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise AutodiffError("take_rows: index out of range")
    shape = a.data.shape

    def backward(g):
        buf = np.zeros(shape, dtype=np.float64)
        np.add.at(buf, idx, g)
        return (buf,)

    return _result("take_rows", a.data[idx], (a,), backward)


# ---------------------------------------------------------------------------
# reductions and softmax


def tsum(a):
    a = as_tensor(a)
    shape = a.data.shape

    def backward(g):
        return (np.full(shape, g, dtype=np.float64),)

    return _result("sum", np.asarray(a.data.sum()), (a,), backward)


def tmean(a):
    a = as_tensor(a)
    shape = a.data.shape
    n = a.data.size

    def backward(g):
        return (np.full(shape, g / n, dtype=np.float64),)

    return _result("mean", np.asarray(a.data.mean()), (a,), backward)


def softmax_lastdim(a):
    """Numerically stable softmax over the last dimension (1-D or 2-D)."""
    a = as_tensor(a)
    if a.data.ndim not in (1, 2):
        raise AutodiffError("softmax_lastdim: input must be 1-D or 2-D")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax", out, (a,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Populate grads of every requires_grad leaf reachable from `loss`.

    Gradients accumulate into .grad (callers zero them via adam_step or
    zero_grad). The active tape is cleared afterwards, so consecutive
    forward/backward cycles are isolated.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise AutodiffError("backward: loss must be a scalar Tensor")
    if not loss.requires_grad:
        raise AutodiffError("backward: loss was not produced on the tape "
                            "(requires_grad is False)")
    records = _TAPE.records
    produced = {id(out) for out, _, _ in records}
    if id(loss) not in produced:
        raise AutodiffError("backward: loss is not on the current tape")

    flowing = {id(loss): np.ones((), dtype=np.float64)}
    for out, inputs, backward_fn in reversed(records):
        g = flowing.pop(id(out), None)
        if g is None:
            continue
        for tensor, grad in zip(inputs, backward_fn(g)):
            if grad is None or not tensor.requires_grad:
                continue
            if id(tensor) in produced:
                acc = flowing.get(id(tensor))
                flowing[id(tensor)] = grad if acc is None else acc + grad
            else:  # leaf
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad = tensor.grad + grad
    _TAPE.clear()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam with decoupled L2 decay; moments keyed by parameter position."""

    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state):
    """One bias-corrected Adam update over `params`; zeroes their grads."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise AutodiffError("adam_step: parameter list changed size")
    for i, p in enumerate(params):
        if p.grad is None:
            raise AutodiffError(f"adam_step: parameter {i} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                                      + state.weight_decay * p.data)
        p.grad = None


# ---------------------------------------------------------------------------
# initializers


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def gaussian(rng, shape, std):
    return rng.normal(0.0, std, size=shape)
