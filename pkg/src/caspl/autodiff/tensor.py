"""Dense float64 tensors with a reverse-mode tape.

Ops executed while a :class:`Tape` is active, with at least one input that
requires gradients, append a :class:`Node` to that tape. Everything else is
plain numpy evaluation, which is how frozen models (the teacher) run without
recording anything.
"""
from __future__ import annotations

import threading

import numpy as np

from ..errors import ContractError, DomainError, ShapeError
from . import kernels

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # operator sugar
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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Node:
    """One recorded op: kind, input tensors, output and its gradient slot."""

    __slots__ = ("id", "kind", "inputs", "out", "backward_fn", "grad")

    def __init__(self, id, kind, inputs, out, backward_fn):
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def input_ids(self):
        return tuple(t.node.id if t.node is not None else None for t in self.inputs)


class Gradients:
    """Leaf gradients produced by one backward pass, keyed by tensor identity."""

    def __init__(self):
        self._by_id = {}

    def _accumulate(self, tensor, g):
        key = id(tensor)
        if key in self._by_id:
            self._by_id[key][1] += g
        else:
            self._by_id[key] = [tensor, np.array(g, dtype=np.float64, copy=True)]

    def __contains__(self, tensor):
        return id(tensor) in self._by_id

    def __getitem__(self, tensor):
        entry = self._by_id.get(id(tensor))
        if entry is None:
            return np.zeros_like(tensor.data)
        return entry[1]

    def for_params(self, params):
        """Map each parameter's name to its gradient (zeros if unreachable)."""
        return {p.name: self[p] for p in params}


class Tape:
    """Records ops in creation order; node ids therefore form a topological order.

    A tape may be consumed by exactly one :meth:`backward` call. Calling it a
    second time raises :class:`ContractError` instead of silently doubling
    accumulated gradients.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, out, backward_fn):
        node = Node(len(self.nodes), kind, inputs, out, backward_fn)
        self.nodes.append(node)
        out.node = node
        return node

    def backward(self, loss):
        if self.consumed:
            raise ContractError("backward already ran on this tape; build a new tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        self.consumed = True
        grads = Gradients()
        if loss.node is None:
            if loss.requires_grad:
                grads._accumulate(loss, np.ones_like(loss.data))
            return grads
        if loss.node.id >= len(self.nodes) or self.nodes[loss.node.id] is not loss.node:
            raise ContractError("loss was not recorded on this tape")
        loss.node.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes[: loss.node.id + 1]):
            g = node.grad
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is not None and inp.node is self.nodes[inp.node.id]:
                    # first contribution is stored as-is; later ones allocate,
                    # so aliased arrays are never mutated in place
                    if inp.node.grad is None:
                        inp.node.grad = ig
                    else:
                        inp.node.grad = inp.node.grad + ig
                else:
                    grads._accumulate(inp, ig)
        return grads


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind, inputs, data, backward_fn):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, inputs, out, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make("mul", (a, b), ad * bd, backward)


def exp(x):
    y = np.exp(x.data)
    return _make("exp", (x,), y, lambda g: (g * y,))


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log: input must be strictly positive")
    xd = x.data
    return _make("log", (x,), np.log(xd), lambda g: (g / xd,))


def relu(x):
    mask = x.data > 0
    return _make("relu", (x,), x.data * mask, lambda g: (g * mask,))


def tanh(x):
    y = np.tanh(x.data)
    return _make("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def gelu(x):
    """Tanh-approximation GELU."""
    xd = x.data
    y, t = kernels.gelu(xd)
    return _make("gelu", (x,), y, lambda g: (kernels.gelu_backward(xd, t, g),))


# ------------------------------------------------------------------ structure

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim == 2 and a.ndim > 2:
        out = np.empty(a.shape[:-1] + (b.shape[1],))
    else:
        try:
            out = np.matmul(a.data, b.data)
        except ValueError:
            raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        # [..., n, k] @ [k, m]: one flat GEMM instead of a batched loop
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make("matmul", (a, b), (a2 @ bd).reshape(out.shape), backward)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make("matmul", (a, b), out, backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ref, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=ax),
                 backward)


def getitem(x, index):
    """Basic or integer-array indexing; gradients scatter back with ``np.add.at``."""
    shape = x.shape
    try:
        out = x.data[index]
    except IndexError as e:
        raise ShapeError("slice", shape, detail=str(e)) from None

    basic = _is_basic(index)

    def backward(g):
        gx = np.zeros(shape)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _make("slice", (x,), np.array(out, copy=True), backward)


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def take_rows(table, ids):
    """Row lookup ``table[ids]`` (embedding)."""
    ids = np.asarray(ids, dtype=np.intp)
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return _make("take_rows", (table,), table.data[ids], backward)


def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make("reshape", (x,), out, lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", (x,), np.transpose(x.data, axes),
                 lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape):
    shape = tuple(shape)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast", old, shape) from None
    return _make("broadcast", (x,), np.array(out), lambda g: (_unbroadcast(g, old),))


# ----------------------------------------------------------------- reductions

def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), backward)


def mean(x, axis=None, keepdims=False):
    shape = x.shape
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", (x,), np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), backward)


# -------------------------------------------------------- normalisation family

def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def _check_tau(kind, tau):
    if not tau > 0:
        raise DomainError(f"{kind}: temperature must be > 0, got {tau}")


def softmax(x, tau=1.0):
    """Softmax of ``x / tau`` over the last axis (max-subtracted)."""
    _check_tau("softmax", tau)
    shape = x.shape
    inv = 1.0 / tau
    y = kernels.softmax_rows(_rows(x.data), inv)

    def backward(g):
        return (kernels.softmax_rows_backward(y, _rows(g), inv).reshape(shape),)

    return _make("softmax", (x,), y.reshape(shape), backward)


def log_softmax(x, tau=1.0):
    _check_tau("log_softmax", tau)
    shape = x.shape
    inv = 1.0 / tau
    y = kernels.log_softmax_rows(_rows(x.data), inv)

    def backward(g):
        return (kernels.log_softmax_rows_backward(y, _rows(g), inv).reshape(shape),)

    return _make("log_softmax", (x,), y.reshape(shape), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm_rows(_rows(x.data), gamma.data, beta.data, eps)
    gd = gamma.data

    def backward(g):
        dx, dg, db = kernels.layer_norm_rows_backward(_rows(g), xhat, rstd, gd)
        return dx.reshape(shape), dg, db

    return _make("layer_norm", (x, gamma, beta), y.reshape(shape), backward)


def l2_normalize(x, eps=1e-12):
    """Scale each last-axis row to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = xd / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", (x,), y, backward)


def cosine_similarity(a, b, eps=1e-12):
    """Pairwise cosine similarity matrix between rows of ``a`` [n, d] and ``b`` [m, d]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na = np.maximum(np.sqrt((a.data ** 2).sum(axis=1, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((b.data ** 2).sum(axis=1, keepdims=True)), eps)
    ua, ub = a.data / na, b.data / nb
    s = ua @ ub.T

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            gu = g @ ub
            ga = (gu - ua * (gu * ua).sum(axis=1, keepdims=True)) / na
        if b.requires_grad:
            gu = g.T @ ua
            gb = (gu - ub * (gu * ub).sum(axis=1, keepdims=True)) / nb
        return ga, gb

    return _make("cosine_similarity", (a, b), s, backward)


# --------------------------------------------------------------------- losses

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("cross_entropy: label outside the logit range")
    n = logits.shape[0]
    lp = kernels.log_softmax_rows(np.ascontiguousarray(logits.data), 1.0)
    rows = np.arange(n)
    loss = -lp[rows, labels].sum() / n

    def backward(g):
        p = np.exp(lp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _make("cross_entropy", (logits,), np.asarray(loss), backward)


def kl_divergence(p, q):
    """Batch-mean ``KL(p || q)`` between probability rows (last axis).

    ``p`` is the target; terms with ``p == 0`` contribute nothing.
    """
    if p.shape != q.shape:
        raise ShapeError("kl_divergence", p.shape, q.shape)
    if np.any(q.data <= 0) or np.any(p.data < 0):
        raise DomainError("kl_divergence: probabilities must be p >= 0 and q > 0")
    pd, qd = p.data, q.data
    n = int(np.prod(pd.shape[:-1])) if pd.ndim > 1 else 1
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    logq = np.log(qd)
    terms = np.where(pos, pd * (logp - logq), 0.0)
    loss = terms.sum() / n

    def backward(g):
        g = float(g)
        gp = gq = None
        if p.requires_grad:
            gp = np.where(pos, logp - logq + 1.0, 0.0) * (g / n)
        if q.requires_grad:
            gq = -(pd / qd) * (g / n)
        return gp, gq

    return _make("kl_divergence", (p, q), np.asarray(loss), backward)
