"""
Dense NHWC arrays with reverse-mode differentiation.

A Tensor wraps a numpy array. Operations on tensors that require gradients
record their parents and a backward closure; Tensor.backward() walks the
recorded graph in reverse topological order and accumulates gradients into
leaf tensors (parameters and inputs created with requires_grad=True).

Engine-wide switches:
  - precision("float64")  : 64-bit mode, used for gradient checking
  - no_grad()             : run ops without recording a graph
  - checked_mode(flag)    : reject non-finite inputs and non-binary masks

There is no separate deterministic switch: the engine always runs in
deterministic mode. Every op is a single numpy call on one thread, so each
reduction happens in a fixed order and repeated runs are bitwise equal.
Callers that fan work out (per-image metrics, image loading) collect results
in input order before reducing.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

# ===================== Engine config =====================

_STATE = {
    "dtype": np.float32,
    "grad_enabled": True,
    "checked": os.environ.get("SMARC_CHECKED", "1").strip() != "0",
}

_DTYPES = {"float32": np.float32, "float64": np.float64}


def default_dtype() -> type:
    return _STATE["dtype"]


def grad_enabled() -> bool:
    return _STATE["grad_enabled"]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    if name not in _DTYPES:
        raise ValueError(f"Unknown precision '{name}'. Expected one of {sorted(_DTYPES)}")
    prev = _STATE["dtype"]
    _STATE["dtype"] = _DTYPES[name]
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


@contextlib.contextmanager
def checked_mode(flag: bool = True) -> Iterator[None]:
    prev = _STATE["checked"]
    _STATE["checked"] = bool(flag)
    try:
        yield
    finally:
        _STATE["checked"] = prev


def check_finite(arr: np.ndarray, what: str) -> None:
    if _STATE["checked"] and not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise FloatingPointError(f"Non-finite values in {what}: {bad} of {np.size(arr)} entries")


def check_binary(arr: np.ndarray, what: str) -> None:
    if _STATE["checked"] and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{what} must be exactly binary (0/1); found values {np.unique(arr)[:6]}")


# ===================== Tensor =====================

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    N-dimensional array with optional gradient tracking.

    Images and feature maps are batch x height x width x channels.
    """

    __array_ufunc__ = None  # make `ndarray * Tensor` dispatch to Tensor.__rmul__

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _STATE["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    # ---------- introspection ----------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ---------- graph ----------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(self)/d(leaf) into every reachable leaf with requires_grad.
        Without `grad`, self must hold a single element.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"Seed gradient shape {grad.shape} does not match tensor shape {self.shape}")

        grads = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ---------- operators ----------

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

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self) -> "Tensor":
        return tabs(self)

    def log(self) -> "Tensor":
        return log(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def square(self) -> "Tensor":
        return square(self)


class Parameter(Tensor):
    """Trainable tensor with a unique dotted name, e.g. 'enc2.pconv1.weight'."""

    def __init__(self, data, name: str, weight_decay_eligible: bool = False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data = np.array(self.data, copy=True)
        self.name = name
        self.weight_decay_eligible = bool(weight_decay_eligible)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, values: np.ndarray) -> None:
        """Optimizer / checkpoint entry point; the only way parameter values change."""
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise ValueError(f"Cannot assign shape {values.shape} to parameter '{self.name}' of shape {self.shape}")
        self.data[...] = values

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape}, decay={self.weight_decay_eligible})"


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ===================== Graph helpers =====================

def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap `data` as an op output, recording the graph only when a parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _STATE["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, n in enumerate(shape):
        if n == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


# ===================== Elementwise / structural ops =====================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return result(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return result(-a.data, (a,), lambda g: (-g,))


def tabs(a: Tensor) -> Tensor:
    return result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return result(np.log(a.data), (a,), lambda g: (g / a.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return result(a.data @ b.data, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return result(np.asarray(out, dtype=a.dtype), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=True),)

    return result(np.asarray(out, dtype=a.dtype), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        rest_a = tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]
        rest_b = t.shape[:ax] + t.shape[ax + 1:]
        if rest_a != rest_b:
            raise ValueError(f"concat shape mismatch on axis {axis}: {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)
