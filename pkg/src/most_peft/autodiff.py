"""Reverse-mode differentiation over a closed set of tensor operations.

Every operation here returns a :class:`Var` that remembers its parents and a
hand-written vector-Jacobian product for each. There is no tracing of
arbitrary Python: models are written against these functions only.

>>> x = Var(np.ones((2, 3)), requires_grad=True)
>>> y = sum_(mul(x, x))
>>> backward(y)
>>> x.grad
array([[2., 2., 2.],
       [2., 2., 2.]])
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError


class Var:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None,
                 parents: Tuple = ()):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(value)


def _node(value, pairs) -> Var:
    parents = tuple((p, fn) for p, fn in pairs if p.requires_grad)
    return Var(value, requires_grad=bool(parents), parents=parents)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Var, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if root.value.size != 1:
            raise DimensionError("backward() without a cotangent needs a scalar root")
        grad = np.ones_like(root.value)
    order: List[Var] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen or not v.requires_grad:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p, _ in v.parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads: Dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.value.dtype)}
    for v in reversed(order):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if not v.parents:
            v.grad = g if v.grad is None else v.grad + g
            continue
        for p, fn in v.parents:
            pg = fn(g)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def scale(a: Var, c: float) -> Var:
    return _node(a.value * c, [(a, lambda g: g * c)])


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _node(a.value * mask, [(a, lambda g: g * mask)])


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Var) -> Var:
    """Exact GELU, x * Phi(x)."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _node(x * cdf, [(a, lambda g: g * (cdf + x * pdf))])


# --------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.value.ndim == 2 and a.value.ndim > 2:
        # activations @ weight: fold leading axes into one GEMM
        k, n = b.shape
        a2 = a.value.reshape(-1, k)
        return _node((a2 @ b.value).reshape(*a.shape[:-1], n), [
            (a, lambda g: (g.reshape(-1, n) @ b.value.T).reshape(a.shape)),
            (b, lambda g: a2.T @ g.reshape(-1, n)),
        ])
    return _node(a.value @ b.value, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)),
    ])


def block_matmul(x, blocks) -> Var:
    """Apply a stack of blocks ``[b, m, n]`` to ``x[..., b, m]`` -> ``[..., b, n]``."""
    x, blocks = const(x), const(blocks)
    if x.shape[-2:] != blocks.shape[:2]:
        raise DimensionError(f"block_matmul: input {x.shape} vs blocks {blocks.shape}")
    xv, bv = x.value, blocks.value
    lead = xv.shape[:-2]
    nb, m, n = bv.shape
    # (b, P, m) @ (b, m, n): one batched GEMM per block
    xt = np.moveaxis(xv.reshape(-1, nb, m), 1, 0)
    out = np.moveaxis(np.matmul(xt, bv), 0, 1).reshape(*lead, nb, n)

    def gx(g):
        gt = np.moveaxis(g.reshape(-1, nb, n), 1, 0)
        return np.moveaxis(np.matmul(gt, np.swapaxes(bv, 1, 2)), 0, 1).reshape(xv.shape)

    def gb(g):
        gt = np.moveaxis(g.reshape(-1, nb, n), 1, 0)
        return np.matmul(np.swapaxes(xt, 1, 2), gt)

    return _node(out, [(x, gx), (blocks, gb)])


def reshape(a: Var, shape) -> Var:
    return _node(a.value.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), [(a, lambda g: np.transpose(g, inv))])


def permute(a: Var, perm: np.ndarray, axis: int = -1) -> Var:
    """Gather by a permutation; the VJP gathers by its inverse."""
    inv = np.argsort(perm)
    return _node(np.take(a.value, perm, axis=axis), [(a, lambda g: np.take(g, inv, axis=axis))])


def take(a: Var, idx: np.ndarray, axis: int = 0) -> Var:
    axis = axis % a.value.ndim

    def ga(g):
        out = np.zeros_like(a.value)
        sl = [slice(None)] * a.value.ndim
        sl[axis] = idx
        np.add.at(out, tuple(sl), g)
        return out

    return _node(np.take(a.value, idx, axis=axis), [(a, ga)])


def concat(xs: Sequence, axis: int = -1) -> Var:
    xs = [const(x) for x in xs]
    axis = axis % xs[0].value.ndim
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def piece(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _node(np.concatenate([x.value for x in xs], axis=axis),
                 [(x, piece(i)) for i, x in enumerate(xs)])


def index(a: Var, key) -> Var:
    """Basic (slice/int) indexing; no advanced indices."""

    def ga(g):
        out = np.zeros_like(a.value)
        out[key] = g
        return out

    return _node(a.value[key], [(a, ga)])


def broadcast_to(a: Var, shape) -> Var:
    return _node(np.broadcast_to(a.value, shape).copy(), [(a, lambda g: _unbroadcast(g, a.shape))])


# --------------------------------------------------------------------------
# reductions and normalization


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    def ga(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _node(a.value.sum(axis=axis, keepdims=keepdims), [(a, ga)])


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a: Var, axis: int) -> Var:
    """Max over one axis; the gradient goes to the first maximizer."""
    idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
    out = np.take_along_axis(a.value, idx, axis=axis).squeeze(axis)

    def ga(g):
        res = np.zeros_like(a.value)
        np.put_along_axis(res, idx, np.expand_dims(g, axis), axis=axis)
        return res

    return _node(out, [(a, ga)])


def layernorm(a: Var, eps: float = 1e-5) -> Var:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def ga(g):
        return inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True))

    return _node(y, [(a, ga)])


def softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, [(a, lambda g: y * (g - (g * y).sum(axis=axis, keepdims=True)))])


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def gl(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return g * p / n

    return _node(np.asarray(loss), [(logits, gl)])


def mse(pred: Var, target: np.ndarray) -> Var:
    d = pred.value - target
    n = d.size
    return _node(np.asarray((d * d).mean()), [(pred, lambda g: g * 2.0 * d / n)])


# --------------------------------------------------------------------------
# token mixing


def token_mix(x, neighbors, lam) -> Var:
    """``x + lam * (N @ x)`` over the token axis.

    ``neighbors`` is a sparse ``[T, T]`` operator (``T`` = all tokens of the
    batch flattened), ``x`` is ``[..., G, C]`` with ``prod(...) * G == T``
    and ``lam`` is a scalar.
    """
    x, lam = const(x), const(lam)
    xv = x.value
    c = xv.shape[-1]
    x2 = xv.reshape(-1, c)
    if neighbors.shape[1] != x2.shape[0]:
        raise DimensionError(f"token_mix: operator {neighbors.shape} vs {x2.shape[0]} tokens")
    nx = np.asarray(neighbors @ x2).reshape(xv.shape)
    lv = lam.value
    out = xv + lv * nx
    nT = neighbors.T.tocsr()

    def gx(g):
        return g + lv * np.asarray(nT @ g.reshape(-1, c)).reshape(xv.shape)

    def glam(g):
        return np.asarray((g * nx).sum()).reshape(lam.shape)

    return _node(out, [(x, gx), (lam, glam)])


# --------------------------------------------------------------------------
# parameter binding


class Tape:
    """Binds a dict of named arrays to :class:`Var` leaves for one forward pass."""

    def __init__(self, params: Dict[str, np.ndarray], trainable: Iterable[str] = ()):
        self.params = params
        self.trainable = set(trainable)
        self.vars: Dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        v = self.vars.get(name)
        if v is None:
            v = Var(self.params[name], requires_grad=name in self.trainable, name=name)
            self.vars[name] = v
        return v

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, v in self.vars.items():
            if v.requires_grad:
                out[name] = v.grad if v.grad is not None else np.zeros_like(v.value)
        return out


def check_finite(v: Var, what: str) -> Var:
    if not np.all(np.isfinite(v.value)):
        raise NumericError(f"non-finite values after {what}")
    return v


# --------------------------------------------------------------------------
# array-level adapters used by the finite-difference checker


class FunctionOp:
    """Adapts ``fn(*Vars) -> Var`` to the forward/vjp contract on raw arrays."""

    def __init__(self, fn: Callable[..., Var], name: str):
        self.fn = fn
        self.name = name

    def forward(self, *inputs):
        return self.fn(*[Var(x) for x in inputs]).value

    def vjp(self, inputs, g):
        leaves = [Var(np.array(x), requires_grad=True) for x in inputs]
        out = self.fn(*leaves)
        if out.requires_grad:
            backward(out, np.asarray(g, dtype=out.value.dtype))
        return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]
