"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Node` wraps one f32/f64 array plus the local backward rule of the
operation that produced it. Graphs are built eagerly by the op functions
below and by the layer ops in :mod:`tipspool.nn` and
:mod:`tipspool.pooling`; :func:`backward` then propagates gradients from a
scalar root.

Gradient propagation is bit-deterministic: nodes are processed in reverse
creation order (creation order is always a valid topological order because
ops construct their output after their operands), so the accumulation order
into every ``grad`` buffer never depends on how the graph was discovered.
"""

from __future__ import annotations

import itertools

import numpy as np

_COUNTER = itertools.count()

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (forward-only eval)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Node:
    """One value in an expression graph.

    ``value`` is immutable by convention once the node exists; ``grad`` is
    written only by :func:`backward` (and zeroed by the optimizer).
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_rule", "_seq", "_owns_grad")

    def __init__(self, value, requires_grad=False, parents=(), rule=None, dtype=None):
        arr = np.asarray(value)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(dtype or np.float32)
        if dtype is not None and arr.dtype != np.dtype(dtype):
            arr = arr.astype(dtype)
        self.value = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._rule = rule
        self._seq = next(_COUNTER)
        self._owns_grad = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_node(x, like=None):
    """Wrap plain data as a constant Node; Nodes pass through unchanged."""
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return Node(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def constant(x, dtype=None):
    """A detached constant; gradients never flow into it."""
    return Node(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _needs_grad(*nodes):
    if not _GRAD_ENABLED:
        return False
    return any(n.requires_grad or n._rule is not None for n in nodes)


def _wants_grad(node):
    return node.requires_grad or node._rule is not None


def _check_same_dtype(a, b):
    if a.value.dtype != b.value.dtype:
        raise TypeError(
            f"mixed dtypes in one graph: {a.value.dtype} vs {b.value.dtype}"
        )


def _check_elementwise_shapes(op, a, b):
    # scalar-by-tensor is the only permitted mismatch
    if a.value.shape == b.value.shape:
        return
    if a.value.size == 1 or b.value.size == 1:
        return
    raise ValueError(
        f"{op}: operand shapes {a.value.shape} and {b.value.shape} differ "
        "(only scalar-by-tensor mixing is allowed)"
    )


def _reduce_to(grad, shape):
    """Sum a gradient down to `shape` (only the scalar-operand case)."""
    if grad.shape == tuple(shape):
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def accumulate(node, g):
    """Add a gradient contribution into node.grad.

    The first contribution is kept by reference (it is only ever read); a
    second contribution triggers copy-on-write so aliased buffers are never
    mutated. Contributions to nodes that neither require grad nor propagate
    further are dropped.
    """
    if not _wants_grad(node):
        return
    if node.grad is None:
        node.grad = g
        node._owns_grad = False
    elif node._owns_grad:
        node.grad += g
    else:
        node.grad = node.grad + g
        node._owns_grad = True


# -- elementwise ops ----------------------------------------------------

def add(a, b):
    a = as_node(a)
    b = as_node(b, like=a)
    _check_same_dtype(a, b)
    _check_elementwise_shapes("add", a, b)
    out_val = a.value + b.value

    def rule(g):
        if _wants_grad(a):
            accumulate(a, _reduce_to(g, a.value.shape))
        if _wants_grad(b):
            accumulate(b, _reduce_to(g, b.value.shape))

    if not _needs_grad(a, b):
        return Node(out_val)
    return Node(out_val, parents=(a, b), rule=rule)


def sub(a, b):
    a = as_node(a)
    b = as_node(b, like=a)
    _check_same_dtype(a, b)
    _check_elementwise_shapes("sub", a, b)
    out_val = a.value - b.value

    def rule(g):
        if _wants_grad(a):
            accumulate(a, _reduce_to(g, a.value.shape))
        if _wants_grad(b):
            accumulate(b, _reduce_to(-g, b.value.shape))

    if not _needs_grad(a, b):
        return Node(out_val)
    return Node(out_val, parents=(a, b), rule=rule)


def mul(a, b):
    a = as_node(a)
    b = as_node(b, like=a)
    _check_same_dtype(a, b)
    _check_elementwise_shapes("mul", a, b)
    out_val = a.value * b.value

    def _side(g, this, other):
        if this.value.size == 1 and other.value.size > 1:
            # scalar-by-tensor: contract in one pass instead of temp + sum
            return np.asarray(np.vdot(g, other.value)).reshape(this.value.shape)
        return _reduce_to(g * other.value, this.value.shape)

    def rule(g):
        if _wants_grad(a):
            accumulate(a, _side(g, a, b))
        if _wants_grad(b):
            accumulate(b, _side(g, b, a))

    if not _needs_grad(a, b):
        return Node(out_val)
    return Node(out_val, parents=(a, b), rule=rule)


def relu(a):
    a = as_node(a)
    out_val = np.maximum(a.value, 0)

    def rule(g):
        # subgradient at exactly 0 is 0
        accumulate(a, g * (a.value > 0))

    if not _needs_grad(a):
        return Node(out_val)
    return Node(out_val, parents=(a,), rule=rule)


def square(a):
    a = as_node(a)
    out_val = a.value * a.value

    def rule(g):
        accumulate(a, g * (2.0 * a.value))

    if not _needs_grad(a):
        return Node(out_val)
    return Node(out_val, parents=(a,), rule=rule)


def sqrt(a):
    a = as_node(a)
    out_val = np.sqrt(a.value)

    def rule(g):
        accumulate(a, g * (0.5 / out_val))

    if not _needs_grad(a):
        return Node(out_val)
    return Node(out_val, parents=(a,), rule=rule)


ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "square": square}


def elementwise(op, a, b=None):
    """Dispatch by op name; binary ops require b."""
    if op not in ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    fn = ELEMENTWISE[op]
    if op in ("relu", "square"):
        if b is not None:
            raise ValueError(f"{op} is unary")
        return fn(a)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    return fn(a, b)


# -- reductions and shaping ---------------------------------------------

def reduce_sum(a, axis=None):
    a = as_node(a)
    out_val = a.value.sum(axis=axis)

    def rule(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.value.shape))
        else:
            accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    if not _needs_grad(a):
        return Node(out_val)
    return Node(out_val, parents=(a,), rule=rule)


def reduce_mean(a, axis=None):
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    out = reduce_sum(a, axis=axis)
    return mul(out, 1.0 / count)


def reshape(a, shape):
    a = as_node(a)
    out_val = a.value.reshape(shape)

    def rule(g):
        accumulate(a, g.reshape(a.value.shape))

    if not _needs_grad(a):
        return Node(out_val)
    return Node(out_val, parents=(a,), rule=rule)


# -- backward pass --------------------------------------------------------

def _reachable(root):
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return list(seen.values())


def backward(root):
    """Populate grads of everything reachable from a scalar root.

    Grads of reachable nodes are re-initialized on every call, so calling
    twice on the same graph yields identical grads rather than doubled ones.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    nodes = _reachable(root)
    for n in nodes:
        n.grad = None
    root.grad = np.ones(root.value.shape, dtype=root.value.dtype)
    # reverse creation order: every consumer is processed before its operands
    for node in sorted(nodes, key=lambda n: n._seq, reverse=True):
        if node._rule is None or node.grad is None:
            continue
        node._rule(node.grad)


# -- gradient-check oracle ------------------------------------------------

def finite_diff_grad(f, p, eps=1e-5):
    """Central-difference gradient of scalar f at parameter array p.

    Mutates a float64 copy of p coordinate by coordinate; f is called with
    the whole array each time. This is the independent oracle the autodiff
    tests compare against, so it must never call backward().
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(p, dtype=np.float64)
    g = np.zeros_like(p)
    flat = p.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(p))
        flat[i] = orig - eps
        fm = float(f(p))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


# -- optimizer -------------------------------------------------------------

class SgdState:
    """SGD with momentum and weight decay over a fixed parameter list."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]


def sgd_step(state):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v; zero grads."""
    for p, v in zip(state.params, state.velocity):
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient; run backward() first")
        v *= state.momentum
        v += p.grad
        if state.weight_decay:
            v += state.weight_decay * p.value
        p.value -= state.lr * v
    for p in state.params:
        p.grad = None
