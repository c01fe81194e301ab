"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Node`` wraps a numpy array plus the closure that routes an incoming
gradient to the node's parents. Graphs are built per evaluation
(define-by-run); ``backward`` walks one in reverse topological order and
accumulates gradients, so shared subexpressions and reused parameters
come out right without any bookkeeping by the caller.

All values are 64-bit floats in row-major layout. Broadcasting is
supported for bias-style shapes (trailing or size-1 axes); gradients of
a broadcast operand are summed back to its own shape.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericalError,
)

DTYPE = np.float64

# Debug-mode switch: when on, every op asserts its result is finite.
# Off by default so the release path pays nothing.
_debug_finite_checks = False


def set_debug_checks(enabled):
    """Enable or disable per-op NaN/Inf assertions. Returns prior state."""
    global _debug_finite_checks
    prior = _debug_finite_checks
    _debug_finite_checks = bool(enabled)
    return prior


def _checked(value, op_name):
    if _debug_finite_checks and not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite value produced by op '{op_name}'")
    return value


class Node:
    """One value in the computation graph.

    ``parents`` and ``_backward`` are set by the op that produced the
    node; leaves have neither. ``grad`` is filled by ``backward`` and
    accumulates across calls until cleared.
    """

    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Node{tag}(shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x):
    """Wrap an array or scalar as a constant leaf; pass Nodes through."""
    if isinstance(x, Node):
        return x
    return Node(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, forward, backward_fn, op_name):
    a, b = as_node(a), as_node(b)
    try:
        value = forward(a.value, b.value)
    except ValueError as exc:
        raise DimensionError(
            f"{op_name}: incompatible shapes {a.value.shape} and {b.value.shape}"
        ) from exc

    def _back(g):
        ga, gb = backward_fn(g, a.value, b.value)
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Node(_checked(value, op_name), (a, b), _back)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: (g, g), "add")


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: (g, -g), "sub")


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x), "mul")


def matmul(a, b):
    """Matrix product; operands of rank >= 2, stacked batches broadcast."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for {a.shape} and {b.shape}"
        )
    try:
        value = a.value @ b.value
    except ValueError as exc:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}"
        ) from exc

    def _back(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Node(_checked(value, "matmul"), (a, b), _back)


def _unary(x, value, grad_fn, op_name):
    x = as_node(x) if not isinstance(x, Node) else x

    def _back(g):
        return (grad_fn(g),)

    return Node(_checked(value, op_name), (x,), _back)


def sigmoid(x):
    x = as_node(x)
    v = x.value
    # Two-branch form avoids overflow in exp for large |v|.
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _unary(x, out, lambda g: g * out * (1.0 - out), "sigmoid")


def tanh(x):
    x = as_node(x)
    out = np.tanh(x.value)
    return _unary(x, out, lambda g: g * (1.0 - out * out), "tanh")


def relu(x):
    x = as_node(x)
    out = np.maximum(x.value, 0.0)
    mask = (x.value > 0).astype(DTYPE)
    return _unary(x, out, lambda g: g * mask, "relu")


def exp(x):
    x = as_node(x)
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out, "exp")


def log(x):
    x = as_node(x)
    if np.any(x.value <= 0):
        raise NumericalError("log of a non-positive value")
    out = np.log(x.value)
    return _unary(x, out, lambda g: g / x.value, "log")


def power(x, exponent):
    """Elementwise x**exponent for a constant float exponent.

    Non-integer exponents require strictly positive inputs.
    """
    x = as_node(x)
    exponent = float(exponent)
    if exponent != int(exponent) and np.any(x.value <= 0):
        raise NumericalError(
            f"power with non-integer exponent {exponent} on non-positive input"
        )
    out = x.value ** exponent
    return _unary(x, out, lambda g: g * exponent * x.value ** (exponent - 1.0), "power")


def softmax(x, axis=-1):
    """Softmax along ``axis``, stabilized by max subtraction."""
    x = as_node(x)
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _grad(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - inner)

    return _unary(x, out, _grad, "softmax")


def reshape(x, shape):
    x = as_node(x)
    try:
        value = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    return _unary(x, value, lambda g: g.reshape(x.value.shape), "reshape")


def transpose(x, axes):
    x = as_node(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _unary(x, x.value.transpose(axes),
                  lambda g: g.transpose(inverse), "transpose")


def concat(nodes, axis):
    nodes = [as_node(n) for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat: incompatible shapes {[n.shape for n in nodes]}"
        ) from exc
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def _back(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(nodes))
        )

    return Node(_checked(value, "concat"), tuple(nodes), _back)


def index_axis(x, axis, index):
    """Select one slice along ``axis``, dropping that axis."""
    x = as_node(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"index_axis: axis {axis} out of range for {x.shape}")
    axis = axis % x.ndim
    if not 0 <= index < x.shape[axis]:
        raise DimensionError(
            f"index_axis: index {index} out of range for axis {axis} of {x.shape}"
        )
    value = np.take(x.value, index, axis=axis)

    def _back(g):
        full = np.zeros_like(x.value)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return Node(_checked(value, "index_axis"), (x,), _back)


def sum_all(x):
    x = as_node(x)
    return _unary(x, np.asarray(np.sum(x.value)),
                  lambda g: np.broadcast_to(g, x.value.shape).copy(), "sum")


def sum_axis(x, axis, keepdims=False):
    x = as_node(x)
    axis = axis % x.ndim
    value = np.sum(x.value, axis=axis, keepdims=keepdims)

    def _back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.value.shape).copy(),)

    return _unary(x, value, lambda g: _back(g)[0], "sum")


def mean_all(x):
    x = as_node(x)
    return mul(sum_all(x), 1.0 / x.size)


def mean_axis(x, axis, keepdims=False):
    x = as_node(x)
    n = x.shape[axis % x.ndim]
    return mul(sum_axis(x, axis, keepdims), 1.0 / n)


def backward(loss):
    """Accumulate d(loss)/d(node) into ``grad`` over the whole graph.

    ``loss`` must be scalar. Gradients add onto whatever is already in
    ``grad``, so clear parameters (ParamStore.zero_grad) between steps.
    """
    if not isinstance(loss, Node):
        raise ContractError("backward expects a Node")
    if loss.value.ndim != 0:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.value.shape}"
        )

    order = _toposort(loss)
    grads = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _toposort(root):
    """Iterative post-order walk; recursion would overflow on long chains."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


class ParamStore:
    """Named, ordered collection of trainable leaf nodes.

    Iteration order is creation order, which is what makes seeded runs
    and checkpoints reproducible; every parameter lives in exactly one
    store.
    """

    def __init__(self):
        self._params = {}

    def create(self, name, value):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        node = Node(np.array(value, dtype=DTYPE), name=name)
        self._params[name] = node
        return node

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def nodes(self):
        return self._params.values()

    def n_scalars(self):
        return sum(node.value.size for node in self._params.values())

    def zero_grad(self):
        for node in self._params.values():
            node.grad = None

    def grads(self):
        """Gradient per parameter; zeros for parameters the loss never touched."""
        return {
            name: (node.grad if node.grad is not None
                   else np.zeros_like(node.value))
            for name, node in self._params.items()
        }

    def state_arrays(self):
        return {name: node.value.copy() for name, node in self._params.items()}

    def load_arrays(self, arrays):
        for name, node in self._params.items():
            if name not in arrays:
                raise ConfigError(f"missing parameter '{name}' in state")
            arr = np.asarray(arrays[name], dtype=DTYPE)
            if arr.shape != node.value.shape:
                raise DimensionError(
                    f"parameter '{name}': expected shape {node.value.shape}, "
                    f"got {arr.shape}"
                )
            node.value = arr.copy()


def grad_check(f, params, eps=1e-5):
    """Compare analytic gradients of ``f(params)`` to central differences.

    Returns the maximum relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``
    over every scalar parameter. ``f`` must be a pure function of the
    parameter values.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")

    params.zero_grad()
    loss = f(params)
    if loss.value.ndim != 0:
        raise ContractError("grad_check requires f to return a scalar Node")
    if not np.isfinite(loss.value):
        raise NumericalError("grad_check: f evaluated non-finite at the base point")
    backward(loss)
    analytic = params.grads()

    def evaluate():
        out = float(f(params).value)
        if not np.isfinite(out):
            raise NumericalError("grad_check: f evaluated non-finite")
        return out

    max_rel = 0.0
    for name, node in params.items():
        flat = node.value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-12)
            rel = abs(a_flat[i] - numeric) / denom
            if rel > max_rel:
                max_rel = rel
    return max_rel
