"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything differentiable in this package is built from the primitives
here: a `Tensor` holds values plus an accumulated gradient buffer, ops
executed inside a live `Tape` record closures that replay exact adjoints
in reverse order, and `Adam` / `finite_diff_check` close the loop for
optimization and verification.

Design notes:
  * float64 only; tolerances elsewhere assume it.
  * max/argmax ties are broken toward the lowest index and the gradient
    is routed to that single winner.
  * reductions use numpy's fixed left-to-right summation order, so a
    forward+backward pass is bit-reproducible for identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DiffError(RuntimeError):
    pass


class NonFiniteError(DiffError):
    pass


class DeadTapeError(DiffError):
    pass


_TAPE_STACK: list["Tape"] = []
_FINITE_CHECKS = [True]


def current_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class finite_checks:
    """Context manager toggling per-op non-finite detection."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        _FINITE_CHECKS.append(self.enabled)
        return self

    def __exit__(self, *exc):
        _FINITE_CHECKS.pop()
        return False


class Tensor:
    """Dense float64 array with an accumulated-gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "op", "tape")

    def __init__(self, values, requires_grad=False, op="leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.tape = None

    # -- introspection ------------------------------------------------
    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, values={self.values!r})"

    # -- gradient buffer ----------------------------------------------
    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def grad_or_zeros(self):
        return self.grad if self.grad is not None else np.zeros_like(self.values)

    def detach(self):
        return Tensor(self.values, requires_grad=False, op="detach")

    # -- operator sugar -------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ("op", "out", "parents", "bwd")

    def __init__(self, op, out, parents, bwd):
        self.op = op
        self.out = out
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Ordered record of executed primitives; replayable once in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.alive = True

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False, op="const")


def param(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, op="param")


def custom_op(name, values, parents, bwd) -> Tensor:
    """Record an arbitrary primitive.

    `bwd(out_grad)` must return one gradient array (or None) per parent,
    each already shaped like the parent's values.
    """
    values = np.asarray(values, dtype=np.float64)
    if _FINITE_CHECKS[-1] and not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values.reshape(-1)))[0])
        raise NonFiniteError(f"non-finite output of primitive '{name}' at flat entry {bad}")
    tape = current_tape()
    req = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=req, op=name)
    if req:
        out.tape = tape
        tape.nodes.append(_Node(name, out, tuple(parents), bwd))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic primitives ----------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("add", a.values + b.values, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("sub", a.values - b.values, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("mul", a.values * b.values, (a, b),
                     lambda g: (_unbroadcast(g * b.values, a.shape),
                                _unbroadcast(g * a.values, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("div", a.values / b.values, (a, b),
                     lambda g: (_unbroadcast(g / b.values, a.shape),
                                _unbroadcast(-g * a.values / (b.values * b.values), b.shape)))


def neg(a):
    a = as_tensor(a)
    return custom_op("neg", -a.values, (a,), lambda g: (-g,))


def power(a, p: float):
    a = as_tensor(a)
    p = float(p)
    return custom_op("pow", a.values ** p, (a,),
                     lambda g: (g * p * a.values ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out_v = np.exp(a.values)
    return custom_op("exp", out_v, (a,), lambda g: (g * out_v,))


def log(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out_v = np.log(a.values)
    return custom_op("log", out_v, (a,), lambda g: (g / a.values,))


def sqrt(a):
    a = as_tensor(a)
    out_v = np.sqrt(a.values)
    return custom_op("sqrt", out_v, (a,), lambda g: (g * 0.5 / out_v,))


def sin(a):
    a = as_tensor(a)
    return custom_op("sin", np.sin(a.values), (a,), lambda g: (g * np.cos(a.values),))


def cos(a):
    a = as_tensor(a)
    return custom_op("cos", np.cos(a.values), (a,), lambda g: (-g * np.sin(a.values),))


def tanh(a):
    a = as_tensor(a)
    out_v = np.tanh(a.values)
    return custom_op("tanh", out_v, (a,), lambda g: (g * (1.0 - out_v * out_v),))


def sigmoid(a):
    a = as_tensor(a)
    # stable in both tails
    v = a.values
    out_v = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                     np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return custom_op("sigmoid", out_v, (a,), lambda g: (g * out_v * (1.0 - out_v),))


def softplus(a):
    a = as_tensor(a)
    out_v = np.logaddexp(0.0, a.values)
    sig = np.where(a.values >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.values))),
                   np.exp(-np.abs(a.values)) / (1.0 + np.exp(-np.abs(a.values))))
    return custom_op("softplus", out_v, (a,), lambda g: (g * sig,))


def relu(a):
    a = as_tensor(a)
    return custom_op("relu", np.maximum(a.values, 0.0), (a,),
                     lambda g: (g * (a.values > 0.0),))


def absolute(a):
    a = as_tensor(a)
    return custom_op("abs", np.abs(a.values), (a,),
                     lambda g: (g * np.sign(a.values),))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    out_v = np.clip(a.values, lo, hi)
    mask = np.ones_like(a.values)
    if lo is not None:
        mask = mask * (a.values >= lo)
    if hi is not None:
        mask = mask * (a.values <= hi)
    return custom_op("clamp", out_v, (a,), lambda g: (g * mask,))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    win_a = a.values <= b.values  # tie -> first operand
    return custom_op("minimum", np.minimum(a.values, b.values), (a, b),
                     lambda g: (_unbroadcast(g * win_a, a.shape),
                                _unbroadcast(g * ~win_a, b.shape)))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    win_a = a.values >= b.values  # tie -> first operand
    return custom_op("maximum", np.maximum(a.values, b.values), (a, b),
                     lambda g: (_unbroadcast(g * win_a, a.shape),
                                _unbroadcast(g * ~win_a, b.shape)))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("where", np.where(cond, a.values, b.values), (a, b),
                     lambda g: (_unbroadcast(g * cond, a.shape),
                                _unbroadcast(g * ~cond, b.shape)))


# -- reductions -----------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out_v = np.sum(a.values, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return custom_op("sum", out_v, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_reduce(a, axis=None):
    """Max reduction; gradient routed to the lowest-index winner."""
    a = as_tensor(a)
    out_v = np.max(a.values, axis=axis)
    idx = np.argmax(a.values, axis=axis)

    def bwd(g):
        grad = np.zeros_like(a.values)
        if axis is None:
            grad.reshape(-1)[idx] = g
        else:
            np.put_along_axis(grad, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis)
        return (grad,)

    return custom_op("max", out_v, (a,), bwd)


def min_reduce(a, axis=None):
    return neg(max_reduce(neg(a), axis=axis))


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_v = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out_v, axis=axis, keepdims=True)
        return (out_v * (g - dot),)

    return custom_op("softmax", out_v, (a,), bwd)


def cumsum(a, axis=-1):
    a = as_tensor(a)
    return custom_op("cumsum", np.cumsum(a.values, axis=axis), (a,),
                     lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_v = a.values @ b.values

    def bwd(g):
        av, bv = a.values, b.values
        if av.ndim == 1 and bv.ndim == 1:
            return (g * bv, g * av)
        if av.ndim == 1:  # (k,) @ (k, n); batched right side unsupported
            if bv.ndim != 2:
                raise DiffError("matmul: 1D lhs requires 2D rhs")
            return (g @ bv.T, np.outer(av, g))
        if bv.ndim == 1:  # (..., m, k) @ (k,)
            ga = np.expand_dims(g, -1) * bv  # broadcast to (..., m, k)
            gb = np.expand_dims(g, -1) * av  # (..., m, k)
            gb = gb.sum(axis=tuple(range(gb.ndim - 1)))
            return (_unbroadcast(ga, av.shape), gb.reshape(bv.shape))
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return custom_op("matmul", out_v, (a, b), bwd)


# -- indexing / shaping ---------------------------------------------------

def getitem(a, key):
    a = as_tensor(a)
    out_v = a.values[key]

    def bwd(g):
        grad = np.zeros_like(a.values)
        np.add.at(grad, key, g)
        return (grad,)

    return custom_op("getitem", out_v, (a,), bwd)


def take(a, indices, axis=0):
    """Row gather along axis 0 (duplicate indices allowed)."""
    if axis != 0:
        raise DiffError("take supports axis=0 only")
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out_v = np.take(a.values, indices, axis=0)

    def bwd(g):
        grad = np.zeros_like(a.values)
        np.add.at(grad, indices, g)
        return (grad,)

    return custom_op("take", out_v, (a,), bwd)


def gather(a, indices, axis=-1):
    """np.take_along_axis with scatter-add adjoint."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out_v = np.take_along_axis(a.values, indices, axis=axis)

    def bwd(g):
        grad = np.zeros_like(a.values)
        grids = list(np.indices(indices.shape))
        ax = axis % a.ndim
        grids[ax] = indices
        np.add.at(grad, tuple(grids), g)
        return (grad,)

    return custom_op("gather", out_v, (a,), bwd)


def scatter_rows(base, indices, rows):
    """Copy of `base` with rows at `indices` replaced by `rows` (unique idx)."""
    base, rows = as_tensor(base), as_tensor(rows)
    indices = np.asarray(indices, dtype=np.intp)
    out_v = base.values.copy()
    out_v[indices] = rows.values

    def bwd(g):
        gb = g.copy()
        gb[indices] = 0.0
        return (gb, g[indices])

    return custom_op("scatter_rows", out_v, (base, rows), bwd)


def scatter_add(rows, indices, length):
    """Zeros of leading extent `length` with `rows` added at `indices`."""
    rows = as_tensor(rows)
    indices = np.asarray(indices, dtype=np.intp)
    out_v = np.zeros((length,) + rows.shape[1:], dtype=np.float64)
    np.add.at(out_v, indices, rows.values)
    return custom_op("scatter_add", out_v, (rows,), lambda g: (g[indices],))


def reshape(a, shape):
    a = as_tensor(a)
    return custom_op("reshape", a.values.reshape(shape), (a,),
                     lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return custom_op("transpose", np.transpose(a.values, axes), (a,),
                     lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return custom_op("broadcast", np.broadcast_to(a.values, shape).copy(), (a,),
                     lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_v = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op("concat", out_v, tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_v = np.stack([t.values for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return custom_op("stack", out_v, tuple(tensors), bwd)


# -- recording / backward -------------------------------------------------

def record_and_eval(expr, inputs):
    """Run `expr(*inputs)` on a fresh tape; the result carries that tape."""
    with Tape() as tape:
        out = expr(*inputs)
    if isinstance(out, Tensor) and out.tape is None:
        out.tape = tape  # output independent of all inputs
    return out


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into every requires_grad leaf's .grad."""
    if root.size != 1:
        raise DiffError(f"backward root must be scalar, got shape {root.shape}")
    tape = root.tape
    if tape is None:
        if not root.requires_grad:
            return  # constant root: all gradients are zero
        raise DiffError("root was not recorded on a tape")
    if not tape.alive:
        raise DeadTapeError("backward already ran on this tape")
    tape.alive = False
    root.grad = np.ones_like(root.values)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.bwd(g)
        for p, pg in zip(node.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p.grad is None:
                # First contribution: copy instead of zeros + add. pg may
                # alias the child's grad buffer, so a view is not safe.
                if np.shape(pg) == p.values.shape:
                    p.grad = np.array(pg, dtype=p.values.dtype)
                else:
                    p.grad = np.zeros_like(p.values)
                    p.grad += pg
            else:
                p.grad += pg


def zero_grads(params):
    for p in params:
        p.zero_grad()


# -- optimizer ------------------------------------------------------------

class Adam:
    """Adam with bias correction; moment buffers per parameter.

    Accepts tensors or (tensor, lr) pairs; pairs override the global lr.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._entries = []
        for p in params:
            if isinstance(p, tuple):
                self.add_param(p[0], p[1])
            else:
                self.add_param(p, None)

    def add_param(self, tensor: Tensor, lr=None):
        self._entries.append({
            "p": tensor, "lr": lr,
            "m": np.zeros_like(tensor.values),
            "v": np.zeros_like(tensor.values),
        })

    def remove_param(self, tensor: Tensor):
        self._entries = [e for e in self._entries if e["p"] is not tensor]

    @property
    def params(self):
        return [e["p"] for e in self._entries]

    def zero_grad(self):
        for e in self._entries:
            e["p"].zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for e in self._entries:
            p = e["p"]
            g = p.grad_or_zeros()
            m, v = e["m"], e["v"]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            lr = self.lr if e["lr"] is None else e["lr"]
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            # sums stay finite iff every entry is; cheaper than isfinite().all()
            if not math.isfinite(float(np.sum(update))):
                raise NonFiniteError("non-finite Adam update")
            p.values = p.values - update
            if not math.isfinite(float(np.sum(p.values))):
                raise NonFiniteError("non-finite parameter after Adam step")


def adam_step(params, state: Adam, lr=None):
    if lr is not None:
        state.lr = lr
    state.step()


# -- finite-difference verification ---------------------------------------

@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    entries: list = field(default_factory=list)  # (flat idx, analytic, numeric)

    def ok(self, rel_tol):
        return self.max_rel_err < rel_tol


def finite_diff_check(f, x: Tensor, eps=1e-5, rel_floor=1e-6) -> GradCheckReport:
    """Compare reverse-mode grad of scalar f(x) to central differences.

    Relative error per entry uses max(|analytic|, |numeric|, rel_floor)
    as the denominator so near-zero gradients do not blow up the report.
    """
    if not x.requires_grad:
        raise DiffError("finite_diff_check requires x.requires_grad")
    x.grad = None
    out = record_and_eval(f, [x])
    backward(out)
    analytic = x.grad_or_zeros().copy()

    numeric = np.zeros_like(x.values)
    flat = x.values.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).values)
        flat[i] = orig - eps
        fm = float(f(x).values)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"f non-finite at perturbed entry {i}")
        nflat[i] = (fp - fm) / (2.0 * eps)

    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), rel_floor)
    rel_err = abs_err / denom
    entries = [(int(i), float(analytic.reshape(-1)[i]), float(nflat[i]))
               for i in range(flat.size)]
    return GradCheckReport(float(abs_err.max(initial=0.0)),
                           float(rel_err.max(initial=0.0)), entries)
