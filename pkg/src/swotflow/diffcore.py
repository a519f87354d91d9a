"""Tape-based reverse-mode differentiation over dense float64 arrays.

Forward mode (``jvp``) is layered on top: a tensor may carry a tangent, and
every primitive knows how to push tangents through itself using other
primitives. Those tangent computations land on the active tape like any
other op, so a Jacobian-vector product can itself be differentiated in
reverse mode.

Typical use::

    params = ParamStore()
    w = params.add("w", np.ones(3))
    with Tape() as tape:
        loss = sum(square(w))
    backward(tape, loss, params)
    w.grad  # -> array([2., 2., 2.])
"""

from __future__ import annotations

import contextlib
import threading
from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "ParamStore",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "tanh",
    "square",
    "power",
    "absolute",
    "sum",
    "mean",
    "matmul",
    "affine",
    "reshape",
    "transpose",
    "concat",
    "take",
    "permute",
    "backward",
    "finite_diff_check",
    "jvp",
]


class NonFiniteError(FloatingPointError):
    """Raised by the op that first produced a NaN or infinity."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op '{op}'")


class Tensor:
    """A float64 array with an optional gradient slot and tangent."""

    __slots__ = ("value", "grad", "requires_grad", "name", "tangent", "_node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.tangent = None
        self._node = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def item(self):
        return self.value.item()

    def __float__(self):
        return float(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of the primitive ops executed while it is active.

    Use as a context manager. Tapes nest; ops are recorded on the innermost
    active tape only.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: set[int] = set()

    @classmethod
    def _stack(cls):
        stack = getattr(cls._local, "stack", None)
        if stack is None:
            stack = cls._local.stack = []
        return stack

    def __enter__(self):
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, tensor):
        return id(tensor) in self._ids

    def record(self, node):
        self.nodes.append(node)
        self._ids.add(id(node.output))

    @classmethod
    def active(cls):
        stack = cls._stack()
        return stack[-1] if stack else None


class ParamStore:
    """Named parameter tensors, iterated in insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.value)

    def grads(self):
        return OrderedDict((k, p.grad) for k, p in self._params.items())

    def state_dict(self):
        return OrderedDict((k, p.value.copy()) for k, p in self._params.items())

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self._params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {value.shape} vs {p.value.shape}")
            p.value = value.copy()

    def n_values(self):
        return int(np.sum([p.size for p in self._params.values()]))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# op plumbing

_tangents_paused = False


@contextlib.contextmanager
def _no_tangents():
    global _tangents_paused
    prev = _tangents_paused
    _tangents_paused = True
    try:
        yield
    finally:
        _tangents_paused = prev


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(op, value, inputs, vjp, tangent_rule):
    """Wrap an op result: finite check, tape recording, tangent propagation."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    out = Tensor(value)
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, inputs, out, vjp)
        out._node = node
        tape.record(node)
    if not _tangents_paused and any(t.tangent is not None for t in inputs):
        with _no_tangents():
            tangent = tangent_rule([t.tangent for t in inputs], out)
            if tangent.shape != value.shape:
                tangent = add(tangent, Tensor(np.zeros(value.shape)))
        out.tangent = tangent
    return out


def _tsum(parts):
    """Sum of tangent contributions, skipping absent ones."""
    parts = [p for p in parts if p is not None]
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return total


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        lambda t, out: _tsum(t),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        lambda t, out: _tsum([t[0], None if t[1] is None else neg(t[1])]),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        lambda t, out: _tsum([
            None if t[0] is None else mul(t[0], b),
            None if t[1] is None else mul(a, t[1]),
        ]),
    )


def neg(a):
    a = as_tensor(a)
    return _make("neg", -a.value, (a,), lambda g: (-g,), lambda t, out: neg(t[0]))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        v = np.exp(a.value)
    return _make("exp", v, (a,), lambda g: (g * v,), lambda t, out: mul(t[0], out))


def tanh(a):
    a = as_tensor(a)
    v = np.tanh(a.value)
    return _make(
        "tanh",
        v,
        (a,),
        lambda g: (g * (1.0 - v * v),),
        lambda t, out: mul(t[0], sub(1.0, square(out))),
    )


def square(a):
    a = as_tensor(a)
    av = a.value
    return _make(
        "square",
        av * av,
        (a,),
        lambda g: (2.0 * g * av,),
        lambda t, out: mul(mul(2.0, a), t[0]),
    )


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = as_tensor(a)
    c = float(exponent)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        v = av**c
    return _make(
        "power",
        v,
        (a,),
        lambda g: (g * c * av ** (c - 1.0),),
        lambda t, out: mul(mul(c, power(a, c - 1.0)), t[0]),
    )


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.value)
    return _make(
        "abs", np.abs(a.value), (a,), lambda g: (g * sign,), lambda t, out: mul(Tensor(sign), t[0])
    )


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.sum(a.value, axis=axis), (a,), vjp, lambda t, out: sum(t[0], axis=axis))


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(
        "matmul",
        np.matmul(av, bv),
        (a, b),
        vjp,
        lambda t, out: _tsum([
            None if t[0] is None else matmul(t[0], b),
            None if t[1] is None else matmul(a, t[1]),
        ]),
    )


def affine(x, W, b):
    """``x @ W.T + b`` for a batch ``x`` of shape (n, in) and ``W`` of shape (out, in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"affine shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}")
    xv, Wv = x.value, W.value

    def vjp(g):
        return g @ Wv, g.T @ xv, g.sum(axis=0)

    def tangent(t, out):
        tx, tW, tb = t
        parts = []
        if tx is not None:
            parts.append(matmul(tx, transpose(W)))
        if tW is not None:
            parts.append(matmul(x, transpose(tW)))
        if tb is not None:
            parts.append(tb)
        return _tsum(parts)

    return _make("affine", xv @ Wv.T + b.value, (x, W, b), vjp, tangent)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(
        "reshape",
        a.value.reshape(shape),
        (a,),
        lambda g: (g.reshape(old),),
        lambda t, out: reshape(t[0], shape),
    )


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(
        "transpose",
        np.swapaxes(a.value, -1, -2),
        (a,),
        lambda g: (np.swapaxes(g, -1, -2),),
        lambda t, out: transpose(t[0]),
    )


def concat(tensors: Sequence, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    values = [t.value for t in tensors]
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    def tangent(ts, out):
        filled = [
            t if t is not None else Tensor(np.zeros(v.shape)) for t, v in zip(ts, values)
        ]
        return concat(filled, axis=axis)

    return _make("concat", np.concatenate(values, axis=axis), tuple(tensors), vjp, tangent)


def take(a, indices, axis=-1):
    """Select entries along ``axis`` (``numpy.take``); indices may repeat."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        ax = axis % len(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return _make(
        "take", np.take(a.value, idx, axis=axis), (a,), vjp, lambda t, out: take(t[0], idx, axis=axis)
    )


def permute(a, index, axis=0):
    """Gather by a permutation along ``axis`` (``numpy.take_along_axis``).

    Each 1-d slice of ``index`` along ``axis`` must be a permutation, which
    lets the vector-Jacobian product scatter back without accumulation.
    """
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != a.shape:
        raise ValueError(f"permute index shape {idx.shape} != input shape {a.shape}")

    def vjp(g):
        out = np.empty_like(g)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _make(
        "permute",
        np.take_along_axis(a.value, idx, axis=axis),
        (a,),
        vjp,
        lambda t, out: permute(t[0], idx, axis=axis),
    )


# ---------------------------------------------------------------------------
# differentiation drivers


def backward(tape: Tape, root: Tensor, params: ParamStore | None = None):
    """Reverse sweep over ``tape`` seeded at the scalar ``root``.

    Every leaf tensor with ``requires_grad`` that the tape touched gets its
    ``grad`` overwritten with d(root)/d(leaf). Members of ``params`` that the
    tape never touched get a zero gradient. Returns the gradients of
    ``params`` (or of all touched leaves when ``params`` is None).
    """
    if root.size != 1:
        raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
    if root not in tape:
        raise ValueError("backward root was not produced on this tape")

    grads = {id(root): np.ones_like(root.value)}
    leaves: "OrderedDict[int, Tensor]" = OrderedDict()
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, in_grads):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    if params is not None:
        params.zero_grad()
    for key, leaf in leaves.items():
        leaf.grad = np.array(grads.get(key, np.zeros_like(leaf.value)), dtype=np.float64)
    if params is not None:
        return params.grads()
    return OrderedDict((leaf.name or str(key), leaf.grad) for key, leaf in leaves.items())


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    analytic: dict | None = None,
):
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` takes no arguments and reads the current parameter values. The
    error for one parameter tensor is ``|a - c| / max(|a|, |c|, 1e-12)`` with
    Euclidean norms over its entries; the maximum over tensors is returned
    together with the per-tensor errors. ``analytic`` overrides the
    reverse-mode gradients (used to inject faults in tests).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if analytic is None:
        with Tape() as tape:
            root = f()
        analytic = backward(tape, root, params)

    per_param = OrderedDict()
    for name, p in params.items():
        base = p.value.copy()
        numeric = np.zeros_like(base)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().value)
            flat[i] = orig - step
            lo = float(f().value)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError("finite_diff_check", f"non-finite probe for {name}[{i}]")
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)
        p.value = base
        a = np.asarray(analytic[name])
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        per_param[name] = float(np.linalg.norm(a - numeric) / denom)
    worst = max(per_param.values()) if per_param else 0.0
    return worst, per_param


def jvp(f: Callable[[Tensor], Tensor], x, v):
    """Jacobian-vector product ``J_f(x) @ v`` computed in forward mode.

    The tangent computation is recorded on the active tape, so the result
    can be differentiated with ``backward`` with respect to anything ``f``
    closes over (and to ``x`` and ``v`` themselves).
    """
    x, v = as_tensor(x), as_tensor(v)
    if x.shape != v.shape:
        raise ValueError(f"jvp: tangent shape {v.shape} != input shape {x.shape}")
    seeded = add(x, 0.0)
    seeded.tangent = v
    out = f(seeded)
    if out.tangent is None:
        return Tensor(np.zeros(out.shape))
    return out.tangent
