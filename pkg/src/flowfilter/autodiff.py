"""Minimal dense-tensor engine with reverse-mode differentiation.

Operations act on :class:`Tensor` objects wrapping float64 numpy arrays.  When
a :class:`Tape` is active (``with Tape() as tape:``), every primitive records
its inputs and a vector-Jacobian rule; ``tape.backward()`` then replays the
records in reverse and returns gradients keyed by parameter name.  Outside a
tape the same code runs as plain numpy evaluation.

Broadcasting is deliberately narrow: equal shapes, a scalar against a tensor,
or a trailing-axis row vector against a batch.
"""

from __future__ import annotations

import contextvars
from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "TapeConsumedError",
    "Tensor",
    "Tape",
    "ParameterStore",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "tanh",
    "relu",
    "softplus",
    "exp",
    "log",
    "sum",
    "mean",
    "concat",
    "split",
    "reshape",
    "transpose",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "flowfilter_active_tape", default=None
)


class Tensor:
    """A float64 array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "name", "trainable", "__weakref__")

    def __init__(self, data, name: str | None = None, trainable: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return mul(-1.0, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Records primitive operations executed while the tape is active."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def output(self) -> Tensor:
        if not self.records:
            raise ValueError("tape is empty")
        return self.records[-1].output

    def backward(self, output: Tensor | None = None, seed=None) -> dict[str, np.ndarray]:
        return backward(self, seed=seed, output=output)


def _record(inputs: tuple[Tensor, ...], out: np.ndarray, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite value produced by primitive")
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.records.append(_Record(inputs, result, vjp))
    return result


def _is_scalar(a: np.ndarray) -> bool:
    return a.ndim == 0 or a.size == 1 and a.ndim <= 1


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if _is_scalar(a):
        return "scalar_a"
    if _is_scalar(b):
        return "scalar_b"
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return "row_a"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "row_b"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, kind: str, side: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"scalar_{side}":
        return np.reshape(g.sum(), shape)
    if kind == f"row_{side}":
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g


def _binary(a, b, fwd, grad_a, grad_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data
    if kind == "scalar_a":
        ad = ad.reshape(())
    elif kind == "scalar_b":
        bd = bd.reshape(())
    with np.errstate(over="ignore", invalid="ignore"):
        out = fwd(ad, bd)

    def vjp(g):
        return (
            _unbroadcast(grad_a(g, ad, bd), kind, "a", a.shape),
            _unbroadcast(grad_b(g, ad, bd), kind, "b", b.shape),
        )

    return _record((a, b), out, vjp)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record((a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def _unary(x, out: np.ndarray, dfdx: Callable[[], np.ndarray]) -> Tensor:
    return _record((x,), out, lambda g: (g * dfdx(),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _unary(x, out, lambda: 1.0 - out * out)


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(np.float64))


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, v)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, _softplus(x.data), lambda: _sigmoid(x.data))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _unary(x, out, lambda: out)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _record((x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.data.sum(axis=axis)
    return _record((x,), out, lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(1.0 / count, sum(x, axis))


def concat(parts: list, axis: int = -1) -> Tensor:
    if axis != -1:
        raise ShapeError("concat supports the last axis only")
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ShapeError("concat: leading shapes differ")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _record(tuple(parts), out, lambda g: tuple(np.split(g, cuts, axis=-1)))


def split(x, sizes: list[int]) -> list[Tensor]:
    """Split along the last axis into consecutive blocks of the given widths."""
    x = as_tensor(x)
    if np.sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not cover width {x.shape[-1]}")
    pieces = []
    start = 0
    for width in sizes:
        lo, hi = start, start + width

        def vjp(g, lo=lo, hi=hi):
            full = np.zeros(x.shape)
            full[..., lo:hi] = g
            return (full,)

        pieces.append(_record((x,), x.data[..., lo:hi].copy(), vjp))
        start = hi
    return pieces


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return _record((x,), out, lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _record((x,), x.data.T.copy(), lambda g: (g.T,))


def backward(tape: Tape, seed=None, output: Tensor | None = None) -> dict[str, np.ndarray]:
    """Propagate ``seed`` from ``output`` (default: last recorded op) back to
    every trainable leaf, returning gradients keyed by parameter name."""
    if tape.consumed:
        raise TapeConsumedError("tape already consumed; re-record the computation")
    output = tape.output if output is None else output
    seed = np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
    tape.consumed = True

    adjoint: dict[int, np.ndarray] = {id(output): seed}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = adjoint.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            key = id(inp)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gi
            else:
                adjoint[key] = gi
            if inp.trainable:
                leaves[key] = inp

    grads: dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        name = leaf.name if leaf.name is not None else f"<anon:{key}>"
        grads[name] = np.asarray(adjoint[key]).reshape(leaf.shape)
    return grads


class ParameterStore:
    """Named parameter slots with deterministic (insertion) order."""

    def __init__(self):
        self._slots: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._slots:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), name=name, trainable=trainable)
        self._slots[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self) -> Iterator[str]:
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def items(self):
        return self._slots.items()

    def trainable(self) -> list[Tensor]:
        return [t for t in self._slots.values() if t.trainable]

    def set_trainable(self, prefix: str, flag: bool) -> int:
        """Flag every slot whose name starts with ``prefix``; returns the count."""
        n = 0
        for name, t in self._slots.items():
            if name.startswith(prefix):
                t.trainable = flag
                n += 1
        return n

    def num_values(self) -> int:
        return int(np.sum([t.size for t in self._slots.values()]))

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, t.data.copy()) for k, t in self._slots.items())

    def load_state(self, state) -> None:
        for name, value in state.items():
            slot = self._slots[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != slot.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {slot.shape}")
            slot.data[...] = value


def grad_check(
    fn: Callable[[], Tensor], params: ParameterStore, h: float = 1e-5, floor: float = 1e-8
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` must rebuild its scalar result from the current parameter values on
    each call.  Every entry of every trainable slot is probed.  ``floor`` bounds
    the denominator from below so entries that are zero up to roundoff do not
    dominate.
    """
    with Tape() as tape:
        out = fn()
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    analytic = tape.backward(output=out)

    worst = 0.0
    for name, slot in params.items():
        if not slot.trainable:
            continue
        g = analytic.get(name, np.zeros(slot.shape)).ravel()
        flat = slot.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().data)
            flat[i] = orig - h
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(g[i]), abs(numeric), floor)
            worst = max(worst, abs(g[i] - numeric) / denom)
    return worst
