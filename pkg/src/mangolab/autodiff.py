"""Dense float64 tensors with reverse-mode differentiation.

Every operation builds its output eagerly and, when any input needs a
gradient, remembers its inputs together with a local gradient rule.
:func:`backward` orders those records into a :class:`Tape` and replays it
in reverse, adding into the ``grad`` buffer of every leaf that asked for one.
Gradients accumulate across calls until :func:`zero_grads` is used.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_rule", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._rule = rule
    else:
        out._parents = ()
        out._rule = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), rule)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if (ad <= 0).any():
        raise DomainError("log of a non-positive value")
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form saturates cleanly in both directions
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _node(out, (a,), rule)


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= floor
    return _node(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents disagree: {a.shape} @ {b.shape}") from exc

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _node(out, (a, b), rule)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), rule)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index], dtype=DTYPE), (a,), rule)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with a scatter-add gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError(f"row id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def rule(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _node(table.data[ids], (table,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat extents disagree: {[t.shape for t in tensors]}") from exc

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(out, tuple(tensors), rule)


# ---------------------------------------------------------------- row-wise


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), rule)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), rule)


def layer_norm_rows(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Standardize the last axis (population variance), then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise ShapeError("layer_norm_rows needs at least two features")
    if eps <= 0:
        raise DomainError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gx = ggain = gbias = None
        lead = tuple(range(g.ndim - 1))
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), rule)


def scale_to_norm(x, radius: float, snap_ulps: int = 64) -> Tensor:
    """Rescale every last-axis vector to L2 norm ``radius``.

    Zero vectors pass through unchanged. Vectors whose norm already equals
    ``radius`` up to ``snap_ulps`` rounding units are left untouched, which
    makes the map exactly idempotent.
    """
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    zero = norm == 0.0
    safe = np.where(zero, 1.0, norm)
    scale = radius / safe
    settled = np.abs(scale - 1.0) <= snap_ulps * np.finfo(DTYPE).eps
    factor = np.where(zero | settled, 1.0, scale)
    out = xd * factor

    def rule(g):
        unit = xd / safe
        radial = (g * unit).sum(axis=-1, keepdims=True)
        projected = scale * (g - unit * radial)
        return (np.where(zero, g, projected),)

    return _node(out, (x,), rule)


# ---------------------------------------------------------------- losses


def bce_with_logits_loss(logits, targets) -> Tensor:
    """Mean binary cross entropy between sigmoid(logits) and targets."""
    logits = as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and targets {t.shape} differ")
    if (t < 0).any() or (t > 1).any():
        raise DomainError("BCE targets must lie in [0, 1]")
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    count = per.size
    out = np.asarray(per.sum() / count)

    def rule(g):
        return (g * (_sigmoid(x) - t) / count,)

    return _node(out, (logits,), rule)


# ---------------------------------------------------------------- tape


@dataclass
class TapeRecord:
    output: Tensor
    inputs: tuple[Tensor, ...]
    rule: Callable


@dataclass
class Tape:
    """Topologically ordered operation records reaching one scalar."""

    records: list[TapeRecord] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        tape = cls()
        for node in order:
            if node._rule is None:
                tape.leaves.append(node)
            else:
                tape.records.append(TapeRecord(node, node._parents, node._rule))
        return tape

    def replay(self, seed_grad: np.ndarray) -> None:
        if not self.records and not self.leaves:
            return
        out = self.records[-1].output if self.records else self.leaves[-1]
        grads: dict[int, np.ndarray] = {id(out): seed_grad}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            parts = rec.rule(g)
            for parent, pg in zip(rec.inputs, parts):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            g = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad += g


def backward(loss: Tensor) -> None:
    """Add d(loss)/d(leaf) into every gradient-requiring leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_output(loss).replay(np.ones(loss.shape, dtype=DTYPE))


def zero_grads(tensors: Iterable) -> None:
    for t in tensors:
        t = t.tensor if isinstance(t, Parameter) else t
        t.grad = None


def check_finite(t: Tensor, what: str = "tensor") -> None:
    if not t.is_finite():
        raise ContractError(f"{what} holds non-finite values")


# ---------------------------------------------------------------- parameters


class Parameter:
    """A trainable tensor plus the Adam moment buffers that travel with it."""

    __slots__ = ("name", "tensor", "moment1", "moment2", "step_count")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.moment1 = np.zeros_like(self.tensor.data)
        self.moment2 = np.zeros_like(self.tensor.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape

    def reset_optimizer(self) -> None:
        self.moment1 = np.zeros_like(self.tensor.data)
        self.moment2 = np.zeros_like(self.tensor.data)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    valid: bool
    checked: int
    worst: tuple[str, tuple[int, ...]] | None = None
    details: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter | Tensor],
    h: float = 1e-3,
    tol: float = 1e-4,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. Relative error is ``|a - n| / max(|a|, |n|, floor)``. When
    ``samples`` is given that many coordinates are drawn at random across all
    parameters, otherwise every coordinate is checked.
    """
    if not (0 < h <= 1e-1):
        raise DomainError("h must lie in (0, 0.1]")
    tensors = [p.tensor if isinstance(p, Parameter) else p for p in params]
    names = [p.name if isinstance(p, Parameter) else (p.name or f"t{i}") for i, p in enumerate(params)]

    base_a = f().item()
    base_b = f().item()
    if base_a != base_b:
        return GradCheckReport(float("nan"), False, False, 0)

    zero_grads(tensors)
    backward(f())
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    coords: list[tuple[int, tuple[int, ...]]] = []
    if samples is None:
        for i, t in enumerate(tensors):
            coords.extend((i, idx) for idx in np.ndindex(t.shape))
    else:
        rng = rng or np.random.default_rng(0)
        sizes = np.array([t.size for t in tensors], dtype=float)
        picks = rng.choice(len(tensors), size=samples, p=sizes / sizes.sum())
        for i in picks:
            flat = int(rng.integers(tensors[i].size))
            coords.append((int(i), np.unravel_index(flat, tensors[i].shape)))

    worst_err, worst = 0.0, None
    details = []
    for i, idx in coords:
        t = tensors[i]
        orig = t.data[idx]
        t.data[idx] = orig + h
        up = f().item()
        t.data[idx] = orig - h
        down = f().item()
        t.data[idx] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[i][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        details.append((names[i], tuple(int(j) for j in idx), a, numeric))
        if err > worst_err or worst is None:
            worst_err, worst = err, (names[i], tuple(int(j) for j in idx))
    zero_grads(tensors)
    return GradCheckReport(worst_err, worst_err < tol, True, len(coords), worst, details)
