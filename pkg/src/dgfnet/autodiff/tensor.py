"""Dense-tensor reverse-mode autodiff core.

Tensors wrap numpy arrays. Every primitive goes through :func:`apply`, which
validates inputs, runs the registered forward, and records a node so that
:func:`backward` can sweep the implicit DAG in reverse topological order.
Tensors are treated as immutable after forward; gradients accumulate into
``.grad`` on tensors with ``requires_grad``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable

import numpy as np

from dgfnet.errors import ContractError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def is_grad_enabled() -> bool:
    return _grad_enabled()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class OpDef:
    """A registered primitive: forward returns (output_array, ctx); backward
    maps (ctx, grad_out) to per-input gradient arrays (None for no grad)."""

    def __init__(self, name: str, forward: Callable, backward: Callable):
        self.name = name
        self.forward = forward
        self.backward = backward


_REGISTRY: dict[str, OpDef] = {}


def register_op(name: str, forward: Callable, backward: Callable) -> None:
    if name in _REGISTRY:
        raise ValueError(f"primitive {name!r} already registered")
    _REGISTRY[name] = OpDef(name, forward, backward)


def op_names() -> list[str]:
    return sorted(_REGISTRY)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor construction from non-finite data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._node: tuple[OpDef, object] | None = None

    # -- metadata ----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar (each routes through apply) -------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return apply("add", [self, self._coerce(other)])

    def __radd__(self, other):
        return apply("add", [self._coerce(other), self])

    def __sub__(self, other):
        return apply("sub", [self, self._coerce(other)])

    def __rsub__(self, other):
        return apply("sub", [self._coerce(other), self])

    def __mul__(self, other):
        return apply("mul", [self, self._coerce(other)])

    def __rmul__(self, other):
        return apply("mul", [self._coerce(other), self])

    def __truediv__(self, other):
        return apply("div", [self, self._coerce(other)])

    def __rtruediv__(self, other):
        return apply("div", [self._coerce(other), self])

    def __neg__(self):
        return apply("neg", [self])

    def __matmul__(self, other):
        return apply("matmul", [self, self._coerce(other)])

    def __pow__(self, p):
        return apply("pow_scalar", [self], {"power": float(p)})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], {"shape": tuple(int(s) for s in shape)})

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", [self], {"axes": tuple(int(a) for a in axes)})

    def sum(self, axis=None, keepdims: bool = False):
        return apply("sum", [self], {"axis": _norm_axes(axis), "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False):
        return apply("mean", [self], {"axis": _norm_axes(axis), "keepdims": keepdims})

    def exp(self):
        return apply("exp", [self])

    def log(self):
        return apply("log", [self])

    def sqrt(self):
        return apply("sqrt", [self])

    def abs(self):
        return apply("abs", [self])


def _not_scalar(t: Tensor):
    raise ContractError(f"item() on non-scalar tensor of shape {t.shape}")


def _norm_axes(axis):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis,)
    return tuple(int(a) for a in axis)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# -- finite-input checking ---------------------------------------------------

def _finite_checks_enabled() -> bool:
    return getattr(_state, "finite_checks", True)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle per-apply non-finite input detection (on by default)."""
    prev = _finite_checks_enabled()
    _state.finite_checks = enabled
    try:
        yield
    finally:
        _state.finite_checks = prev


# -- apply / backward --------------------------------------------------------

def apply(op_kind: str, inputs: list[Tensor], attrs: dict | None = None) -> Tensor:
    """Run one primitive and record the node for reverse-mode backward.

    Raises ShapeError on signature mismatch (naming the primitive and axes)
    and NumericError on non-finite inputs.
    """
    opdef = _REGISTRY.get(op_kind)
    if opdef is None:
        raise ContractError(f"unknown primitive {op_kind!r}")
    attrs = attrs or {}
    arrays = []
    for i, t in enumerate(inputs):
        if not isinstance(t, Tensor):
            raise ContractError(f"{op_kind}: input {i} is not a Tensor")
        if _finite_checks_enabled() and not np.all(np.isfinite(t.data)):
            raise NumericError(f"{op_kind}: non-finite values in input {i}")
        arrays.append(t.data)
    out_arr, ctx = opdef.forward(attrs, *arrays)
    needs_grad = _grad_enabled() and any(t.requires_grad or t._parents for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_arr
    out.grad = None
    out.requires_grad = False
    if needs_grad:
        out._parents = tuple(inputs)
        out._node = (opdef, ctx)
    else:
        out._parents = ()
        out._node = None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, parameters: Iterable[Tensor] | None = None) -> None:
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar. If ``parameters`` is given, any parameter not
    reached gets a zero gradient, so optimizers see a complete gradient map.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._node is None:
            continue
        opdef, ctx = node._node
        in_grads = opdef.backward(ctx, g)
        for parent, ig in zip(node._parents, in_grads):
            if ig is None:
                continue
            if not (parent.requires_grad or parent._parents):
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = ig if prev is None else prev + ig
    if parameters is not None:
        if isinstance(parameters, dict):
            parameters = parameters.values()
        for p in parameters:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


__all__ = [
    "Tensor",
    "tensor",
    "apply",
    "backward",
    "no_grad",
    "finite_checks",
    "register_op",
    "op_names",
    "is_grad_enabled",
    "ShapeError",
]
