"""Dense float tensors with reverse-mode automatic differentiation.

Each ``Tensor`` is both a value and, when it results from an operation, a
record on the computation tape: it keeps its operation name, its parent
tensors and a closure mapping the output gradient to parent gradients.
The tape for a given loss is therefore the graph reachable from it;
``backward`` walks that graph once in reverse topological order and
returns exact gradients for every reachable leaf.  The walk mutates
nothing, so a graph can be backpropagated repeatedly and inspected.

Values are float32 by default.  float64 graphs are supported so that
finite-difference oracles can run at full precision; production code
never needs them.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolation, NumericError

DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "_grad_fn", "name")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), grad_fn=None,
                 name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._grad_fn = grad_fn
        self.name = name

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def parameter(data, name=None, dtype=None) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


def _node(data, op, parents, grad_fn) -> Tensor:
    # Drop the tape record when nothing upstream wants gradients, so plain
    # inference holds no graph.
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), grad_fn=grad_fn)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    for _ in range(extra):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# primitive operations ----------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, "add", (a, b), grad_fn)


def neg(a) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)

    def grad_fn(g):
        return (-g,)

    return _node(-a.data, "neg", (a,), grad_fn)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, "mul", (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    """a @ b with a of rank 2 or 3 and b of rank 2."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    if b.ndim != 2 or a.ndim not in (2, 3):
        raise ContractViolation(f"matmul supports (m,k)@(k,n) or (b,m,k)@(k,n); got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        ga = g @ b.data.T if need_a else None
        if not need_b:
            return ga, None
        if a.ndim == 2:
            gb = a.data.T @ g
        else:
            gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
        return ga, gb

    return _node(out, "matmul", (a, b), grad_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _node(out, "sigmoid", (a,), grad_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _node(out, "tanh", (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def grad_fn(g):
        return (g * (a.data > 0),)

    return _node(out, "relu", (a,), grad_fn)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _node(p, "softmax", (a,), grad_fn)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, "log_softmax", (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _node(out, "log", (a,), grad_fn)


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 1-D convolution over time: (B,T,C) * (K,C,F) + (F,) -> (B,T-K+1,F)."""
    B, T, C = x.shape
    K, Cw, F = w.shape
    if Cw != C:
        raise ContractViolation(f"conv1d channel mismatch: input {C}, kernel {Cw}")
    if K > T:
        raise ContractViolation(f"conv1d kernel {K} longer than sequence {T}")
    To = T - K + 1
    out = np.zeros((B, To, F), dtype=x.data.dtype)
    for k in range(K):
        out += x.data[:, k:k + To, :] @ w.data[k]
    out += b.data

    need_x, need_w = x.requires_grad, w.requires_grad

    def grad_fn(g):
        gx = np.zeros_like(x.data) if need_x else None
        gw = np.zeros_like(w.data) if need_w else None
        for k in range(K):
            if need_x:
                gx[:, k:k + To, :] += g @ w.data[k].T
            if need_w:
                gw[k] = np.tensordot(x.data[:, k:k + To, :], g, axes=([0, 1], [0, 1]))
        gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return _node(out, "conv1d", (x, w, b), grad_fn)


def maxpool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping temporal max pooling; a trailing partial group is dropped."""
    B, T, C = x.shape
    To = T // size
    if To < 1:
        raise ContractViolation(f"maxpool1d: sequence length {T} shorter than pool size {size}")
    xr = x.data[:, :To * size, :].reshape(B, To, size, C)
    idx = xr.argmax(axis=2)  # first maximum on ties, deterministic
    out = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def grad_fn(g):
        gxr = np.zeros((B, To, size, C), dtype=g.dtype)
        np.put_along_axis(gxr, idx[:, :, None, :], g[:, :, None, :], axis=2)
        gx = np.zeros_like(x.data)
        gx[:, :To * size, :] = gxr.reshape(B, To * size, C)
        return (gx,)

    return _node(out, "maxpool1d", (x,), grad_fn)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    fancy = _is_fancy(idx)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        if fancy:
            np.add.at(ga, idx, g)  # duplicate indices must accumulate
        else:
            ga[idx] += g
        return (ga,)

    return _node(out, "getitem", (a,), grad_fn)


def concat(tensors, axis=0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, "concat", tuple(tensors), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _node(out, "reshape", (a,), grad_fn)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)

    return _node(out, "sum", (a,), grad_fn)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype, copy=False),)

    return _node(out, "mean", (a,), grad_fn)


def reduce_max(a: Tensor, axis, keepdims=False) -> Tensor:
    idx = a.data.argmax(axis=axis)  # first maximum on ties
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = out.squeeze(axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return (ga,)

    return _node(out, "max", (a,), grad_fn)


def cross_entropy(logits: Tensor, onehot, reduction: str = "mean") -> Tensor:
    """Categorical cross-entropy of raw logits against one-hot targets.

    Composed from log-softmax, so the gradient wrt logits is exactly
    (softmax - onehot) scaled by the reduction.
    """
    onehot = onehot if isinstance(onehot, Tensor) else Tensor(onehot, dtype=logits.data.dtype)
    nll = neg(reduce_sum(mul(onehot, log_softmax(logits))))
    if reduction == "mean" and logits.ndim > 1:
        return mul(nll, 1.0 / logits.shape[0])
    return nll


def dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout: scales survivors by 1/(1-rate) at train time, identity otherwise."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.uniform(x.shape) < keep).astype(x.data.dtype) / keep
    return mul(x, Tensor(mask, dtype=x.data.dtype))


# backward pass ------------------------------------------------------------

def topo_order(root: Tensor):
    """Iterative post-order over the recorded graph (graphs exceed the recursion limit)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Exact reverse-mode gradients for every leaf reachable from a scalar loss.

    Returns a map {leaf Tensor -> gradient Tensor}.  The graph is left
    untouched; calling backward twice yields identical results.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    owned = set()  # grads we allocated ourselves and may add into in place
    leaf_grads = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient at node '{node.name or node.op}'")
        if node._grad_fn is None:
            leaf_grads[node] = Tensor(g, dtype=node.data.dtype)
            continue
        for parent, pg in zip(node.parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            acc = grads.get(pid)
            if acc is None:
                grads[pid] = pg  # may alias a grad_fn output; never mutated as-is
            elif pid in owned:
                acc += pg
            else:
                grads[pid] = acc + pg
                owned.add(pid)
    return leaf_grads
