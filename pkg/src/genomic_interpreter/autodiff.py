"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` is a Wengert list: while it is active (``with Tape() as tape``)
every primitive applied to a gradient-enabled tensor appends one node, so the
list is already in topological order and :func:`backward` replays it in
reverse.  The tape also keeps an exact count of scalar multiply-adds performed
by contractions (matmul, attention scores, attention-weighted sums).
Elementwise work is deliberately not counted.

Arrays are numpy ``float64`` unless a ``float32`` array is passed in.
"""

from __future__ import annotations

import contextvars
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)
_MADD_SCOPE: contextvars.ContextVar[str] = contextvars.ContextVar("madd_scope", default="")

_GELU_C = np.sqrt(2.0 / np.pi)


class Rng:
    """Seeded random stream backed by numpy's Philox-4x64 counter generator.

    The Philox key is ``(seed, stream)``, so independent streams (one per
    record, one per parameter tensor, ...) can be derived without sharing
    state.  Philox output is specified bit-for-bit, hence platform independent.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed % 2**64, self.stream % 2**64], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def poisson(self, lam) -> np.ndarray:
        return self.generator.poisson(lam)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive applications plus a multiply-add counter."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.madd_counter = 0
        self.madds: Counter[str] = Counter()
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def count(self, kind: str, n: int) -> None:
        scope = _MADD_SCOPE.get()
        self.madds[f"{scope}.{kind}" if scope else kind] += int(n)
        self.madd_counter += int(n)

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        return backward(loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


@contextmanager
def madd_scope(name: str) -> Iterator[None]:
    """Prefix multiply-add tallies recorded inside the block with ``name``."""
    token = _MADD_SCOPE.set(name)
    try:
        yield
    finally:
        _MADD_SCOPE.reset(token)


def _count(kind: str, n: int) -> None:
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.count(kind, n)


class Tensor:
    """An immutable n-d array, optionally attached to the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float32 else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._tape: Tape | None = None

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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        out._node = _Node(out, parents, backward_fn)
        tape.nodes.append(out._node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse replay of ``loss``'s tape.

    Sets ``.grad`` on every gradient-enabled leaf reached from ``loss`` and
    returns the same gradients as a ``{leaf: array}`` map.  Calling it twice
    yields the same result (gradients are overwritten, never accumulated).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._node is None:
        raise ContractError("loss is not attached to a tape; compute it inside `with Tape():`")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent.is_leaf:
                leaves[key] = parent
            grads[key] = grads[key] + pg if key in grads else pg
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=leaf.dtype)
        result[leaf] = leaf.grad
    return result


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * s, (a,), lambda g: (g * s,))
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor, kind: str = "matmul") -> Tensor:
    """(..., p, q) @ (..., q, r); a 2-d right operand is shared across the batch.

    Adds ``prod(batch) * p * q * r`` to the active tape's counter under ``kind``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    q = a.shape[-1]
    if b.ndim == 2:
        out = (a.data.reshape(-1, q) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, q).T @ g2 if b.requires_grad else None
            return ga, gb

    else:
        out = np.matmul(a.data, b.data)

        def bw(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
            return ga, gb

    _count(kind, out.size * q)
    return _result(out, (a, b), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, key) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        if _is_basic_index(key):
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(x.data[key]), (x,), bw)


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def roll(x: Tensor, t: int, axis: int = -2) -> Tensor:
    """Cyclic shift along the token axis: output row i is input row (i - t) mod n.

    Negative ``t`` is the inverse roll.
    """
    x = as_tensor(x)
    n = x.shape[axis]
    t = int(t) % n if n else 0
    if t == 0:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    return _result(np.roll(x.data, t, axis=axis), (x,), lambda g: (np.roll(g, -t, axis=axis),))


def concat_pairs(x: Tensor) -> Tensor:
    """(..., n, d) -> (..., n/2, 2d); row j is rows 2j and 2j+1 side by side."""
    x = as_tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    if n % 2:
        raise ContractError(f"concat_pairs needs an even token count, got {n}")
    return reshape(x, x.shape[:-2] + (n // 2, 2 * d))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * sig,))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    y = 0.5 * v * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du),)

    return _result(y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each token over its last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last axis {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(y, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence,
    h: float = 1e-5,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` receives one tensor per entry of ``inputs`` and must return a scalar.
    Per entry the error is ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    base = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    with Tape():
        loss = f(*leaves)
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued f, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"f is non-finite at the base point: {loss.item()}")
    if loss.requires_grad:
        backward(loss)

    def evaluate(which: int, arr: np.ndarray) -> float:
        args = [Tensor(arr) if i == which else Tensor(b) for i, b in enumerate(base)]
        return as_tensor(f(*args)).item()

    worst = 0.0
    for i, b in enumerate(base):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(b)
        for idx in np.ndindex(b.shape):
            plus, minus = b.copy(), b.copy()
            plus[idx] += h
            minus[idx] -= h
            fp, fm = evaluate(i, plus), evaluate(i, minus)
            a = float(analytic[idx])
            if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(a)):
                raise NumericalError(
                    f"non-finite value at input {i} entry {idx}: f+={fp}, f-={fm}, analytic={a}"
                )
            c = (fp - fm) / (2.0 * h)
            err = abs(a - c) / max(abs(a), abs(c), 1e-8)
            worst = max(worst, err)
    return worst
