"""Small dense reverse-mode autodiff engine on top of numpy.

Every differentiable operation records a node (op name, parent tensors, and a
backward closure). Node ids come from a global counter, so parents always have
smaller ids than their children and the recorded graph is topologically ordered
by construction.

Backward closures are written in terms of the same differentiable operations.
With ``create_graph=True`` the backward pass is itself recorded, which is what
makes gradient-of-gradient terms (the critic's gradient penalty) possible.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad(flag=True):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "parents", "_backward", "id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = None
        self.parents = ()
        self._backward = None
        self.id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self.op is None

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _record(data, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return sum_to(g, shape)


# -- shape plumbing -------------------------------------------------------

def sum_to(x, shape) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = as_tensor(x)
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True) if axes else x.data
    data = data.reshape(shape)
    return _record(data, (x,), "sum_to", lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = np.array(np.broadcast_to(x.data, shape))
    return _record(data, (x,), "broadcast_to", lambda g: (sum_to(g, x.shape),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), "reshape", lambda g: (reshape(g, x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _record(x.data.T.copy(), (x,), "transpose", lambda g: (transpose(g),))


# -- arithmetic -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def backward(g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _record(a.data / b.data, (a, b), "div", backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), "neg", lambda g: (neg(g),))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), "scalar_mul", lambda g: (scalar_mul(g, c),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data @ b.data, (a, b), "matmul",
                   lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


# -- elementwise nonlinearities ------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _record(np.exp(a.data), (a,), "exp", backward)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), "log", lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    """Square root whose derivative at 0 is taken as 0 instead of inf."""
    a = as_tensor(a)
    out = None

    def backward(g):
        pos = (out.data > 0).astype(np.float64)
        safe = add(out, Tensor(1.0 - pos))
        return (mul(g, div(Tensor(0.5 * pos), safe)),)

    out = _record(np.sqrt(a.data), (a,), "sqrt", backward)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _record(a.data * mask, (a,), "relu", lambda g: (mul(g, Tensor(mask)),))


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _record(_np_sigmoid(a.data), (a,), "sigmoid", backward)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed stably."""
    a = as_tensor(a)
    return _record(np.logaddexp(0.0, a.data), (a,), "softplus", lambda g: (mul(g, sigmoid(a)),))


def stop_gradient(a) -> Tensor:
    """Same values as ``a``; never propagates gradient."""
    a = as_tensor(a)
    return Tensor(a.data)


# -- reductions and composites ------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.data, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _record(data, (a,), "sum", backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scalar_mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_norm_sq(a) -> Tensor:
    a = as_tensor(a)
    return tsum(mul(a, a))


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    width = a.shape[1]
    return _record(a.data[:, start:stop].copy(), (a,), "slice_cols",
                   lambda g: (pad_cols(g, start, width),))


def pad_cols(a, start: int, width: int) -> Tensor:
    """Place ``a`` at column offset ``start`` of a zero matrix ``width`` wide."""
    a = as_tensor(a)
    out = np.zeros((a.shape[0], width))
    stop = start + a.shape[1]
    out[:, start:stop] = a.data
    return _record(out, (a,), "pad_cols", lambda g: (slice_cols(g, start, stop),))


def concat_cols(*tensors) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1 or any(t.ndim != 2 for t in ts):
        raise ShapeError(f"concat_cols: row mismatch {[t.shape for t in ts]}")
    offsets = np.cumsum([0] + [t.shape[1] for t in ts])

    def backward(g):
        return tuple(slice_cols(g, int(offsets[i]), int(offsets[i + 1])) for i in range(len(ts)))

    return _record(np.concatenate([t.data for t in ts], axis=1), ts, "concat_cols", backward)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {a.shape}")
    # shift invariance makes a constant row max exact
    shifted = sub(a, Tensor(a.data.max(axis=1, keepdims=True)))
    e = exp(shifted)
    return div(e, tsum(e, axis=1, keepdims=True))


COSINE_EPS = 1e-8


def row_norms(a, eps=0.0) -> Tensor:
    """sqrt(sum(a^2) + eps^2) per row; ``eps`` keeps zero rows differentiable."""
    sq = tsum(mul(a, a), axis=1, keepdims=True)
    return sqrt(add(sq, eps * eps) if eps else sq)


def cosine_sim_rows(a, b) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` (n x d) and ``b`` (m x d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_sim_rows: incompatible shapes {a.shape} and {b.shape}")
    dots = matmul(a, transpose(b))
    # the guard sits inside the norms so nonzero rows are exact to rounding
    denom = matmul(row_norms(a, COSINE_EPS), transpose(row_norms(b, COSINE_EPS)))
    return div(dots, denom)


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softmax_rows": softmax_rows,
    "concat_cols": concat_cols,
    "l2_norm_sq": l2_norm_sq,
    "cosine_sim_rows": cosine_sim_rows,
    "mean": mean,
    "sum": tsum,
    "transpose": transpose,
    "stop_gradient": stop_gradient,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- backward pass --------------------------------------------------------

def _collect(root: Tensor):
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        stack.extend(t.parents)
    return seen


def grad(loss: Tensor, inputs: Sequence[Tensor], create_graph=False) -> list[Tensor]:
    """d(loss)/d(input) for each input; unreachable inputs get zeros.

    With ``create_graph`` the returned gradients are graph nodes themselves and
    can be differentiated again.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    inputs = list(inputs)
    wanted = {t.id for t in inputs}
    nodes = _collect(loss)
    # restrict to nodes on some path towards a requested input
    relevant = set()
    for nid in sorted(nodes):
        t = nodes[nid]
        if nid in wanted or any(p.id in relevant for p in t.parents):
            relevant.add(nid)

    grads: dict[int, Tensor] = {}
    found: dict[int, Tensor] = {}
    if loss.id in relevant:
        grads[loss.id] = Tensor(np.ones_like(loss.data))
    with enable_grad(create_graph):
        for nid in sorted(relevant, reverse=True):
            g = grads.pop(nid, None)
            if g is None:
                continue
            t = nodes[nid]
            if nid in wanted:
                found[nid] = g
            if t._backward is None:
                continue
            pgrads = t._backward(g)
            for p, pg in zip(t.parents, pgrads):
                if pg is None or p.id not in relevant:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = found.get(t.id)
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def leaves(loss: Tensor) -> list[Tensor]:
    """Leaves of the recorded graph that require grad, in creation order."""
    nodes = _collect(loss)
    return [nodes[i] for i in sorted(nodes) if nodes[i].is_leaf]


def backward(loss: Tensor, create_graph=False) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``; returns {leaf: grad}."""
    ls = leaves(loss)
    gs = grad(loss, ls, create_graph=create_graph)
    for leaf, g in zip(ls, gs):
        leaf.grad = g if leaf.grad is None else add(leaf.grad, g)
    return dict(zip(ls, gs))


# -- optimizer --------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive-moment optimizer updating parameters in place."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence):
        if len(grads) != len(self.params):
            raise ShapeError(f"expected {len(self.params)} gradients, got {len(grads)}")
        arrays = []
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient for {p.name or i} has shape {g.shape}, expected {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {p.name or i}")
            arrays.append(g)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, arrays, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, params, grads):
    """Functional alias for ``state.step(grads)``; returns the parameters."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("parameters do not match optimizer state")
    state.step(grads)
    return params


# -- test oracle --------------------------------------------------------------

def finite_difference_gradient(f: Callable[[np.ndarray], float], x, step=1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return out
