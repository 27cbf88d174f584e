"""
core/autodiff.py
────────────────
Reverse-mode automatic differentiation on a tape of numpy arrays.

A Tape records every operation applied to its Vars; backward() sweeps
the tape once in reverse and leaves gradients on the leaves that asked
for them. Ops live in a registry (forward + adjoint per op kind), so
adding an op is one @_op block.

The functional API (sin, tanh, concat, ...) works on plain numpy input
too: when no Var is involved nothing is recorded and the numpy value
comes straight back. Physics and residual code is written once against
this API and serves both the solver and training.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from core.errors import DomainError, NonFiniteError, NotScalar, ShapeMismatch, TapeConsumed


# ═══════════════════════════════════════════════════════════
#  OP REGISTRY
# ═══════════════════════════════════════════════════════════

@dataclass(frozen=True)
class _Op:
    forward:  callable
    backward: callable      # (g, out, *inputs, **attrs) -> tuple of input grads


_OPS = {}


def _op(kind: str, backward):
    def deco(fn):
        _OPS[kind] = _Op(fn, backward)
        return fn
    return deco


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    g = np.asarray(g, dtype=float)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


# ── Binary ─────────────────────────────────────────────────

_op('add', lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))(
    lambda a, b: a + b)
_op('sub', lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))(
    lambda a, b: a - b)
_op('mul', lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))(
    lambda a, b: a * b)


def _div_fwd(a, b):
    if np.any(b == 0):
        raise DomainError("division by zero")
    return a / b


_op('div', lambda g, out, a, b: (_unbroadcast(g / b, a.shape),
                                 _unbroadcast(-g * a / (b * b), b.shape)))(_div_fwd)


def _matmul_bwd(g, out, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = np.expand_dims(g, -2) if a.ndim == 1 else g
    g2 = np.expand_dims(g2, -1) if b.ndim == 1 else g2
    ga = g2 @ np.swapaxes(b2, -1, -2)
    gb = np.swapaxes(a2, -1, -2) @ g2
    if a.ndim == 1:
        ga = ga[..., 0, :]
    if b.ndim == 1:
        gb = gb[..., :, 0]
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_op('matmul', _matmul_bwd)(lambda a, b: np.matmul(a, b))
_op('scalar_mul', lambda g, out, a, c: (c * g,))(lambda a, c: c * a)


# ── Elementwise ────────────────────────────────────────────

def _sqrt_fwd(a):
    if np.any(a < 0):
        raise DomainError(f"sqrt of negative value {np.min(a):.6g}")
    return np.sqrt(a)


def _arccos_fwd(a):
    if np.any(np.abs(a) > 1):
        raise DomainError(f"arccos argument outside [-1, 1]: {np.max(np.abs(a)):.6g}")
    return np.arccos(a)


_op('sin', lambda g, out, a: (g * np.cos(a),))(np.sin)
_op('cos', lambda g, out, a: (-g * np.sin(a),))(np.cos)
_op('tanh', lambda g, out, a: (g * (1.0 - out * out),))(np.tanh)
_op('square', lambda g, out, a: (2.0 * a * g,))(np.square)
_op('sqrt', lambda g, out, a: (g * np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0),))(
    _sqrt_fwd)
_op('arccos', lambda g, out, a: (-g / np.sqrt(np.maximum(1.0 - a * a, 1e-300)),))(_arccos_fwd)
_op('relu', lambda g, out, a: (g * (a > 0),))(lambda a: np.maximum(a, 0.0))
_op('abs', lambda g, out, a: (g * np.sign(a),))(np.abs)
_op('clamp_min', lambda g, out, a, floor: (g * (a > floor),))(lambda a, floor: np.maximum(a, floor))
_op('softplus', lambda g, out, a: (g * expit(a),))(lambda a: np.logaddexp(0.0, a))
_op('sigmoid', lambda g, out, a: (g * out * (1.0 - out),))(expit)


# ── Reductions ─────────────────────────────────────────────

def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[i] for i in axes]))


_op('sum', lambda g, out, a, axis=None: (_expand(g, a.shape, axis),))(
    lambda a, axis=None: np.sum(a, axis=axis))
_op('mean', lambda g, out, a, axis=None: (_expand(g, a.shape, axis) / max(_count(a.shape, axis), 1),))(
    lambda a, axis=None: np.mean(a, axis=axis) if np.size(a) else np.zeros(np.sum(a, axis=axis).shape))
_op('l1_norm', lambda g, out, a, axis=None: (_expand(g, a.shape, axis) * np.sign(a),))(
    lambda a, axis=None: np.sum(np.abs(a), axis=axis))
_op('l2_norm_sq', lambda g, out, a, axis=None: (_expand(g, a.shape, axis) * 2.0 * a,))(
    lambda a, axis=None: np.sum(a * a, axis=axis))


# ── Structural ─────────────────────────────────────────────

def _concat_bwd(g, out, *parts, axis=0):
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _slice_bwd(g, out, a, key):
    grad = np.zeros(a.shape)
    np.add.at(grad, key, g)
    return (grad,)


def _take_bwd(g, out, a, indices, axis):
    grad = np.zeros(a.shape)
    np.add.at(np.moveaxis(grad, axis, 0), indices, np.moveaxis(np.asarray(g), axis, 0)
              if np.ndim(indices) else g)
    return (grad,)


_op('concat', _concat_bwd)(lambda *parts, axis=0: np.concatenate(parts, axis=axis))
_op('slice', _slice_bwd)(lambda a, key: a[key])
_op('take', _take_bwd)(lambda a, indices, axis: np.take(a, indices, axis=axis))


# ═══════════════════════════════════════════════════════════
#  TAPE
# ═══════════════════════════════════════════════════════════

@dataclass
class _Node:
    op:            str
    inputs:        tuple
    attrs:         dict
    value:         np.ndarray
    requires_grad: bool
    grad:          np.ndarray = None


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.nodes    = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes    = []
        self.consumed = False

    def var(self, value, requires_grad: bool = True) -> 'Var':
        value = np.array(value, dtype=float)
        return self._push('leaf', (), {}, value, requires_grad)

    def const(self, value) -> 'Var':
        return self.var(value, requires_grad=False)

    def _push(self, op, inputs, attrs, value, requires_grad) -> 'Var':
        if self.consumed:
            raise TapeConsumed("tape already differentiated; reset() before recording")
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op, len(self.nodes))
        self.nodes.append(_Node(op, inputs, attrs, value, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def _index(self, x) -> int:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ShapeMismatch("Var belongs to a different tape")
            return x.index
        return self.const(x).index

    def record(self, kind: str, *inputs, **attrs) -> 'Var':
        op = _OPS[kind]
        idx = tuple(self._index(x) for x in inputs)
        vals = [self.nodes[i].value for i in idx]
        try:
            with np.errstate(all='ignore'):
                value = np.asarray(op.forward(*vals, **attrs), dtype=float)
        except ValueError as e:
            shapes = [v.shape for v in vals]
            raise ShapeMismatch(f"{kind}: incompatible shapes {shapes}") from e
        requires = any(self.nodes[i].requires_grad for i in idx)
        return self._push(kind, idx, attrs, value, requires)

    def backward(self, loss: 'Var') -> dict:
        """
        Reverse sweep from a scalar loss. Gradients land on every leaf
        with requires_grad (zeros if the loss does not depend on it).
        Returns {tape index: gradient} for those leaves.
        """
        if self.consumed:
            raise TapeConsumed("backward() already ran on this tape")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise NotScalar("loss must be a Var recorded on this tape")
        if np.size(loss.value) != 1:
            raise NotScalar(f"loss must be scalar, got shape {np.shape(loss.value)}")

        for node in self.nodes:
            if node.op == 'leaf' and node.requires_grad:
                node.grad = np.zeros_like(node.value)

        pending = {loss.index: np.ones_like(loss.value)}
        for i in range(loss.index, -1, -1):
            g = pending.pop(i, None)
            node = self.nodes[i]
            if g is None or not node.requires_grad:
                continue
            if node.op == 'leaf':
                node.grad = node.grad + g
                continue
            vals = [self.nodes[j].value for j in node.inputs]
            with np.errstate(all='ignore'):
                grads = _OPS[node.op].backward(g, node.value, *vals, **node.attrs)
            for j, gj in zip(node.inputs, grads):
                if not self.nodes[j].requires_grad:
                    continue
                gj = np.asarray(gj, dtype=float).reshape(self.nodes[j].value.shape)
                pending[j] = pending[j] + gj if j in pending else gj

        self.consumed = True
        return {i: n.grad for i, n in enumerate(self.nodes) if n.op == 'leaf' and n.requires_grad}


class Var:
    """Handle to one tape entry. Arithmetic on Vars records new entries."""

    __slots__ = ('tape', 'index')
    __array_ufunc__ = None          # ndarray op Var → Var's reflected method

    def __init__(self, tape: Tape, index: int):
        self.tape  = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def grad(self) -> np.ndarray:
        return self.tape.nodes[self.index].grad

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.index].requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape}, op={self.tape.nodes[self.index].op})"

    def __add__(self, other):       return self.tape.record('add', self, other)
    def __radd__(self, other):      return self.tape.record('add', other, self)
    def __sub__(self, other):       return self.tape.record('sub', self, other)
    def __rsub__(self, other):      return self.tape.record('sub', other, self)
    def __truediv__(self, other):   return self.tape.record('div', self, other)
    def __rtruediv__(self, other):  return self.tape.record('div', other, self)
    def __matmul__(self, other):    return self.tape.record('matmul', self, other)
    def __rmatmul__(self, other):   return self.tape.record('matmul', other, self)
    def __neg__(self):              return self.tape.record('scalar_mul', self, c=-1.0)
    def __getitem__(self, key):     return self.tape.record('slice', self, key=key)

    def __mul__(self, other):
        if not isinstance(other, Var) and np.ndim(other) == 0:
            return self.tape.record('scalar_mul', self, c=float(other))
        return self.tape.record('mul', self, other)

    __rmul__ = __mul__

    def __pow__(self, p):
        if p != 2:
            raise DomainError("only square powers are supported")
        return self.tape.record('square', self)


# ═══════════════════════════════════════════════════════════
#  FUNCTIONAL API
# ═══════════════════════════════════════════════════════════

def _apply(kind: str, *inputs, **attrs):
    tape = next((x.tape for x in inputs if isinstance(x, Var)), None)
    if tape is not None:
        return tape.record(kind, *inputs, **attrs)
    with np.errstate(all='ignore'):
        return _OPS[kind].forward(*(np.asarray(x, dtype=float) for x in inputs), **attrs)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def sin(x):                     return _apply('sin', x)
def cos(x):                     return _apply('cos', x)
def tanh(x):                    return _apply('tanh', x)
def sqrt(x):                    return _apply('sqrt', x)
def square(x):                  return _apply('square', x)
def arccos(x):                  return _apply('arccos', x)
def relu(x):                    return _apply('relu', x)
def absolute(x):                return _apply('abs', x)
def softplus(x):                return _apply('softplus', x)
def sigmoid(x):                 return _apply('sigmoid', x)
def clamp_min(x, floor: float): return _apply('clamp_min', x, floor=float(floor))
def matmul(a, b):               return _apply('matmul', a, b)
def scalar_mul(x, c: float):    return _apply('scalar_mul', x, c=float(c))
def reduce_sum(x, axis=None):   return _apply('sum', x, axis=axis)
def reduce_mean(x, axis=None):  return _apply('mean', x, axis=axis)
def l1_norm(x, axis=None):      return _apply('l1_norm', x, axis=axis)
def l2_norm_sq(x, axis=None):   return _apply('l2_norm_sq', x, axis=axis)
def take(x, indices, axis: int): return _apply('take', x, indices=indices, axis=axis)


def concat(parts, axis: int = 0):
    return _apply('concat', *parts, axis=axis)


def backward(loss: Var) -> dict:
    return loss.tape.backward(loss)


# ═══════════════════════════════════════════════════════════
#  GRADIENT CHECK
# ═══════════════════════════════════════════════════════════

@dataclass
class GradCheck:
    max_rel_error: float
    checked:       list = field(default_factory=list)
    skipped:       list = field(default_factory=list)   # coordinates sitting on a kink


def grad_check(f, x, eps: float = 1e-6, coords=None, n_coords: int = None,
               seed: int = 0, kink_tol: float = 1e-2) -> GradCheck:
    """
    Compare the tape gradient of scalar f at x with central differences.
    f must accept either a Var or an ndarray. A coordinate whose one-sided
    slopes disagree (relu / abs kink inside the stencil) is skipped.
    """
    x = np.array(x, dtype=float)
    tape = Tape()
    xv = tape.var(x)
    tape.backward(f(xv))
    analytic = xv.grad

    if coords is None:
        coords = range(x.size)
        if n_coords is not None and n_coords < x.size:
            coords = np.random.default_rng(seed).choice(x.size, size=n_coords, replace=False)

    def _f(z):
        return float(np.asarray(f(z)))

    f0 = _f(x)
    report = GradCheck(0.0)
    for c in (int(c) for c in coords):
        xp = x.copy(); xp.flat[c] += eps
        xm = x.copy(); xm.flat[c] -= eps
        fp, fm = _f(xp), _f(xm)
        central = (fp - fm) / (2 * eps)
        one_sided_gap = abs((fp - f0) - (f0 - fm)) / eps
        if one_sided_gap > kink_tol * max(1.0, abs(central)):
            report.skipped.append(c)
            continue
        err = abs(analytic.flat[c] - central) / max(1.0, abs(central))
        report.checked.append(c)
        report.max_rel_error = max(report.max_rel_error, err)
    if math.isnan(report.max_rel_error):
        report.max_rel_error = float('inf')
    return report
