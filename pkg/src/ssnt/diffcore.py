"""Small reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Var` holding its forward value plus a closure that
pushes the output adjoint back into the parents. Broadcasting is limited to
what numpy does for ``+``, ``-`` and ``*``; adjoints are summed back to the
operand shape.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

SIGMOID_EPS = 1e-7

_grad_enabled = True


class ContractError(ValueError):
    """Operand shapes or arguments violate an op's contract."""


class NumericalError(FloatingPointError):
    """A forward or backward value turned non-finite."""


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (decoding, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", name=None,
                 requires_grad=False):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = self.name or self.op
        return f"Var({label}, shape={self.value.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def parameter(value, name: str) -> Var:
    return Var(np.array(value), name=name, requires_grad=True)


def const(value, dtype=None) -> Var:
    if isinstance(value, Var):
        return value
    return Var(np.asarray(value, dtype=dtype))


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def _make(value, parents: Sequence[Var], backward_fn: Callable, op: str) -> Var:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Var(value, op=op)
    return Var(value, parents=tuple(parents), backward_fn=backward_fn, op=op,
               requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(var: Var, g: np.ndarray) -> None:
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=var.value.dtype, copy=True)
    else:
        var.grad += g


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))
    return _make(out, (a, b), bw, "mul")


def neg(a) -> Var:
    a = _wrap(a)
    return _make(-a.value, (a,), lambda g: _accumulate(a, -g), "neg")


def matmul(a, b) -> Var:
    """Matrix (or matrix-vector) product without batching."""
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2):
        raise ContractError(f"matmul expects 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def bw(g):
        av, bv = a.value, b.value
        if a.requires_grad:
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv)
            else:
                ga = g @ bv.T
            _accumulate(a, ga)
        if b.requires_grad:
            gb = np.multiply.outer(av, g) if av.ndim == 1 else av.T @ g
            _accumulate(b, gb)
    return _make(out, (a, b), bw, "matmul")


def affine(W, b, x) -> Var:
    """``x @ W.T + b`` for a vector or a row-stacked matrix ``x``."""
    W, b, x = _wrap(W), _wrap(b), _wrap(x)
    if W.value.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ContractError(f"affine shapes W{W.shape} b{b.shape} x{x.shape}")
    out = x.value @ W.value.T + b.value

    def bw(g):
        if W.requires_grad:
            if x.value.ndim == 1:
                _accumulate(W, np.multiply.outer(g, x.value))
            else:
                _accumulate(W, g.T @ x.value)
        if b.requires_grad:
            _accumulate(b, g if g.ndim == 1 else g.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g @ W.value)
    return _make(out, (W, b, x), bw, "affine")


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [_wrap(p) for p in parts]
    ax = axis % parts[0].value.ndim
    for p in parts[1:]:
        if p.value.ndim != parts[0].value.ndim:
            raise ContractError("concat operands must share rank")
    try:
        out = np.concatenate([p.value for p in parts], axis=ax)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])
    return _make(out, parts, bw, "concat")


def stack(parts: Sequence, axis: int = 0) -> Var:
    parts = [_wrap(p) for p in parts]
    try:
        out = np.stack([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ContractError(str(exc)) from None

    def bw(g):
        for n, p in enumerate(parts):
            if p.requires_grad:
                _accumulate(p, np.take(g, n, axis=axis))
    return _make(out, parts, bw, "stack")


def take(a, index) -> Var:
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = _wrap(a)
    out = a.value[index]

    basic = _is_basic(index)

    def bw(g):
        full = np.zeros_like(a.value)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        _accumulate(a, full)
    return _make(np.array(out), (a,), bw, "take")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) for p in parts)


def rows(table, ids) -> Var:
    """Embedding lookup: select rows of ``table`` by integer id."""
    ids = np.asarray(ids, dtype=np.int64)
    return take(table, ids)


def sum_(a, axis=None) -> Var:
    a = _wrap(a)
    out = a.value.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))
    return _make(out, (a,), bw, "sum")


def cast(a, dtype) -> Var:
    a = _wrap(a)
    if a.dtype == dtype:
        return a
    src = a.dtype
    return _make(a.value.astype(dtype), (a,), lambda g: _accumulate(a, g.astype(src)), "cast")


# -- elementwise ---------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    a = _wrap(a)
    s = _sigmoid(np.atleast_1d(a.value)).reshape(a.shape)
    return _make(s, (a,), lambda g: _accumulate(a, g * s * (1.0 - s)), "sigmoid")


def tanh(a) -> Var:
    a = _wrap(a)
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: _accumulate(a, g * (1.0 - t * t)), "tanh")


def exp(a) -> Var:
    a = _wrap(a)
    e = np.exp(a.value)
    return _make(e, (a,), lambda g: _accumulate(a, g * e), "exp")


def log(a) -> Var:
    a = _wrap(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g / a.value), "log")


def clip(a, lo: float, hi: float) -> Var:
    """Clamp values; the adjoint is zero where the clamp is active."""
    a = _wrap(a)
    out = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(out, (a,), lambda g: _accumulate(a, np.where(inside, g, 0.0)), "clip")


def clamped_sigmoid(a, eps: float = SIGMOID_EPS) -> Var:
    return clip(sigmoid(a), eps, 1.0 - eps)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Var:
    """Inverted dropout; identity when ``rate`` is 0 or no rng is given."""
    if rate <= 0.0 or rng is None:
        return a
    a = _wrap(a)
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _make(a.value * keep, (a,), lambda g: _accumulate(a, g * keep), "dropout")


def reshape(a, shape) -> Var:
    a = _wrap(a)
    src = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(src)), "reshape")


def transpose(a) -> Var:
    a = _wrap(a)
    return _make(a.value.T, (a,), lambda g: _accumulate(a, g.T), "transpose")


def lstm_cell(pre, c_prev) -> Var:
    """LSTM nonlinearity on gate pre-activations laid out as ``[i, f, o, g]``.

    Returns ``[h; c]`` along the last axis, with ``c = f*c_prev + i*g`` and
    ``h = o*tanh(c)``.
    """
    pre, c_prev = _wrap(pre), _wrap(c_prev)
    n = c_prev.shape[-1]
    if pre.shape[-1] != 4 * n or pre.shape[:-1] != c_prev.shape[:-1]:
        raise ContractError(f"lstm_cell pre-activations {pre.shape} vs cell {c_prev.shape}")
    x = pre.value
    sig = _sigmoid(np.atleast_1d(x[..., :3 * n]).copy()).reshape(x[..., :3 * n].shape)
    i, f, o = sig[..., :n], sig[..., n:2 * n], sig[..., 2 * n:]
    g = np.tanh(x[..., 3 * n:])
    c = f * c_prev.value + i * g
    tc = np.tanh(c)
    h = o * tc

    def bw(grad):
        gh, gc = grad[..., :n], grad[..., n:]
        dc = gc + gh * o * (1.0 - tc * tc)
        if pre.requires_grad:
            dpre = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev.value * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ], axis=-1)
            _accumulate(pre, dpre)
        if c_prev.requires_grad:
            _accumulate(c_prev, dc * f)
    return _make(np.concatenate([h, c], axis=-1), (pre, c_prev), bw, "lstm_cell")


# -- log-domain reductions -------------------------------------------------------

def _lse(x: np.ndarray, axis) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    return np.squeeze(s, axis=axis) if axis is not None else s.reshape(())


def logsumexp(a, axis=-1) -> Var:
    """``log(sum(exp(a)))`` along ``axis``; all ``-inf`` gives exactly ``-inf``."""
    a = _wrap(a)
    if a.value.size == 0:
        raise ContractError("logsumexp of an empty operand")
    out = _lse(a.value, axis)

    def bw(g):
        o = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(a.value - o)
        w = np.where(np.isfinite(a.value), w, 0.0)
        _accumulate(a, gg * w)
    return _make(out, (a,), bw, "logsumexp")


def log_sum_exp(terms: Iterable) -> Var:
    """Log of the summed exponentials of a list of scalars."""
    terms = list(terms)
    if not terms:
        raise ContractError("log_sum_exp needs at least one term")
    return logsumexp(stack([_wrap(t) for t in terms]), axis=0)


def logcumsumexp(a) -> Var:
    """Running ``log(sum(exp(a[:k+1])))`` over a vector."""
    a = _wrap(a)
    if a.value.ndim != 1:
        raise ContractError("logcumsumexp expects a vector")
    out = np.logaddexp.accumulate(a.value)

    def bw(g):
        # d out[i] / d a[k] = exp(a[k] - out[i]) for k <= i
        with np.errstate(invalid="ignore"):
            w = np.exp(a.value[:, None] - out[None, :])
        w = np.where(np.isfinite(w), w, 0.0)
        _accumulate(a, np.triu(w) @ g)
    return _make(out, (a,), bw, "logcumsumexp")


def log_softmax(a, mask=None) -> Var:
    """Log-softmax along the last axis.

    ``mask`` is a boolean vector over the last axis; masked entries get
    ``-inf`` and take no part in the normaliser.
    """
    a = _wrap(a)
    x = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (x.shape[-1],):
            raise ContractError(f"mask shape {mask.shape} does not match {x.shape}")
        x = np.where(mask, -np.inf, x)
    z = _lse(x, -1)
    out = x - z[..., None]

    def bw(g):
        p = np.exp(out)
        ga = g - p * g.sum(axis=-1, keepdims=True)
        if mask is not None:
            ga = np.where(mask, 0.0, ga)
        _accumulate(a, ga)
    return _make(out, (a,), bw, "log_softmax")


def softmax(a, mask=None) -> Var:
    return exp(log_softmax(a, mask))


def pick_last(a, ids) -> Var:
    """``out[...] = a[..., ids[...]]``: gather one entry along the last axis."""
    a = _wrap(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ContractError(f"ids shape {ids.shape} vs operand {a.shape}")
    out = np.take_along_axis(a.value, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        _accumulate(a, full)
    return _make(out, (a,), bw, "pick_last")


def exclusive_cumsum(a, axis: int = 0) -> Var:
    """``out[i] = sum(a[:i])`` along ``axis`` (first entry is 0)."""
    a = _wrap(a)
    c = np.cumsum(a.value, axis=axis)
    out = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)),
                          np.delete(c, -1, axis=axis)], axis=axis)

    def bw(g):
        # reverse cumulative sum of g, shifted by one
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        ga = np.concatenate([np.delete(rev, 0, axis=axis),
                             np.zeros_like(np.take(rev, [0], axis=axis))], axis=axis)
        _accumulate(a, ga)
    return _make(out, (a,), bw, "exclusive_cumsum")


# -- reverse pass ----------------------------------------------------------------------

def _topo_order(root: Var) -> list[Var]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Var, params: Mapping[str, Var] | None = None) -> dict[str, np.ndarray]:
    """Run the reverse pass from a scalar ``loss``.

    Returns ``{name: gradient}`` for ``params``; parameters the loss does not
    reach get zeros. Leaf ``.grad`` fields are left populated.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.value):
        raise NumericalError(f"non-finite loss {float(loss.value)} produced by op '{loss.op}'")
    params = params or {}
    for p in params.values():
        p.grad = None
    order = _topo_order(loss)
    for node in order:
        if node.backward_fn is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.value, dtype=loss.value.dtype)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        if not math.isfinite(float(np.sum(node.grad))):
            raise NumericalError(f"non-finite adjoint at op '{node.op}'")
        node.backward_fn(node.grad)
        node.grad = None
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in params.items()}


def numerical_grad(f: Callable[[], float], x: np.ndarray, index, step: float = 1e-5) -> float:
    """Central finite difference of ``f`` w.r.t. ``x[index]`` (``x`` mutated in place)."""
    orig = x[index]
    x[index] = orig + step
    hi = f()
    x[index] = orig - step
    lo = f()
    x[index] = orig
    return (hi - lo) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    denom = max(abs(a), abs(b), floor)
    return abs(a - b) / denom


__all__ = [
    "ContractError", "NumericalError", "Var", "add", "affine", "backward", "cast", "clip",
    "clamped_sigmoid", "concat", "const", "dropout", "exclusive_cumsum", "exp", "log",
    "log_softmax", "log_sum_exp", "logcumsumexp", "logsumexp", "lstm_cell", "matmul", "mul", "neg",
    "no_grad", "numerical_grad", "parameter", "pick_last", "relative_error", "rows",
    "reshape", "sigmoid", "softmax", "stack", "sub", "sum_", "take", "tanh", "transpose",
]
