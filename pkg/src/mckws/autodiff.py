"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: a Tensor wraps a numpy array, every op records a
backward closure on the active GradTape, and backward() replays the tape
once in reverse order (execution order is already topological). Covers
exactly what the attention/GRU model needs: matmul, elementwise
nonlinearities, softmax, concatenation/slicing, reductions, and dropout
mask application. Everything is 64-bit so finite-difference checks stay
decisive.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special

_ACTIVE_TAPE: "GradTape | None" = None
_NAN_CHECKS = False


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf while debug checks were enabled."""


def set_nan_checks(enabled: bool) -> bool:
    """Toggle per-op finiteness assertions; returns the previous setting."""
    global _NAN_CHECKS
    previous = _NAN_CHECKS
    _NAN_CHECKS = bool(enabled)
    return previous


class Tensor:
    """A numpy float64 array plus grad metadata.

    Leaf tensors (created directly, typically parameters) may carry a name;
    backward() reports gradients for named leaves in its result map and
    stores them on ``.grad`` either way.
    """

    __slots__ = ("data", "requires_grad", "name", "grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; all routed through the module-level ops
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, other):
        return power(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradTape:
    """Ordered record of ops with backward closures.

    Use as a context manager around the forward pass; ops executed while a
    tape is active and touching a requires_grad tensor append themselves.
    A tape can be replayed backward exactly once.
    """

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._produced: set[int] = set()
        self._consumed = False
        self._outer: GradTape | None = None

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False

    def _record(self, inputs: tuple[Tensor, ...], output, backward_fn: Callable):
        self._records.append((inputs, output, backward_fn))
        if isinstance(output, tuple):
            self._produced.update(id(o) for o in output)
        else:
            self._produced.add(id(output))

    def __len__(self) -> int:
        return len(self._records)


def backward(loss: Tensor, tape: GradTape) -> dict[str, Tensor]:
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf on the tape.

    Returns a map from leaf name to gradient Tensor (unnamed leaves only
    get their ``.grad`` attribute set). The tape is consumed; a second call
    without a fresh forward pass raises.
    """
    if tape._consumed:
        raise RuntimeError("tape already replayed; run a new forward pass first")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("loss was not produced on this tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for inputs, output, backward_fn in reversed(tape._records):
        if isinstance(output, tuple):
            gout = [grads.pop(id(o), None) for o in output]
            if all(g is None for g in gout):
                continue
        else:
            gout = grads.pop(id(output), None)
            if gout is None:
                continue
        for tensor, gin in zip(inputs, backward_fn(gout)):
            if gin is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
            if key not in tape._produced:
                leaves[key] = tensor

    named: dict[str, Tensor] = {}
    for key, tensor in leaves.items():
        tensor.grad = grads[key]
        if tensor.name is not None:
            named[tensor.name] = Tensor(grads[key])
    return named


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _NAN_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE._record(inputs, out, backward_fn)
    return out


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ash, bsh = a.shape, b.shape
    return _result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)),
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ash, bsh = a.shape, b.shape
    return _result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)),
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _result(
        "div", a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(a, b) -> Tensor:
    """Elementwise a**b, differentiable in both base and exponent.

    The exponent gradient uses out*log(a) where a > 0 and the limiting
    value 0 elsewhere, so non-negative bases are safe.
    """
    a, b = _coerce(a), _coerce(b)
    out = a.data ** b.data

    def grad(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g * b.data * a.data ** (b.data - 1.0)
            glog = np.where(a.data > 0, np.log(np.where(a.data > 0, a.data, 1.0)), 0.0)
        ga = np.where(a.data == 0, 0.0, ga)
        gb = g * out * glog
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("power", out, (a, b), grad)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul requires [m,k]x[k,n], got {a.shape} and {b.shape}")
    return _result(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def exp(x) -> Tensor:
    x = _coerce(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _coerce(x)
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = _coerce(x)
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    out = special.expit(x.data)  # stable in both tails
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along one axis; output sums to 1 there."""
    x = _coerce(x)
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise ValueError(f"softmax needs a non-empty axis, got shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result("softmax", out, (x,), grad)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", out, (x,), grad)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    old = x.shape
    return _result(
        "reshape", x.data.reshape(shape), (x,),
        lambda g: (g.reshape(old),),
    )


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise ValueError("concat needs at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result("concat", np.concatenate([p.data for p in parts], axis=axis),
                   tuple(parts), grad)


def getitem(x, key) -> Tensor:
    x = _coerce(x)
    shape = x.shape

    def grad(g):
        gin = np.zeros(shape)
        gin[key] = g
        return (gin,)

    return _result("getitem", x.data[key], (x,), grad)


def unbind(x, axis: int = 0) -> list[Tensor]:
    """Split a tensor into per-index tensors along one axis.

    Recorded as a single tape entry so the backward pass scatters all slice
    gradients into one buffer instead of allocating a full-size array per
    slice (the per-frame hot path relies on this).
    """
    x = _coerce(x)
    n = x.shape[axis]
    keys = [(slice(None),) * axis + (i,) for i in range(n)]
    outs = tuple(Tensor(x.data[k]) for k in keys)
    if _NAN_CHECKS and not np.all(np.isfinite(x.data)):
        raise NonFiniteError("unbind produced non-finite values")
    if _ACTIVE_TAPE is not None and x.requires_grad:
        for o in outs:
            o.requires_grad = True

        def grad(gouts):
            buf = np.zeros(x.shape)
            for k, g in zip(keys, gouts):
                if g is not None:
                    buf[k] = g
            return (buf,)

        _ACTIVE_TAPE._record((x,), outs, grad)
    return list(outs)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only strictly inside."""
    x = _coerce(x)
    mask = (x.data > lo) & (x.data < hi)
    return _result(
        "clamp", np.clip(x.data, lo, hi), (x,),
        lambda g: (g * mask,),
    )


def dropout(x, keep_prob: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/keep_prob at train time.

    With training=False or keep_prob=1 this is the identity (same tensor),
    so a keep-everything train pass matches eval bit for bit.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    x = _coerce(x)
    if not training or keep_prob == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return mul(x, Tensor(mask))
