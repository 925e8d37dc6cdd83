"""Dense tensors and the reverse-mode computation tape.

A :class:`Tape` records every differentiable op executed while it is active.
``tape.backward(loss)`` replays the records in exact reverse order and sums
gradients into the ``grad`` field of every leaf tensor that requires them.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.matmul(x, w))
        tape.backward(loss)
    w.grad  # d loss / d w
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand extents are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape: backward twice, loss not recorded, and so on."""


class Tensor:
    """Shape-carrying float array that can participate in a tape.

    ``data`` is always a float32 or float64 ndarray. Integer and boolean inputs
    are promoted to float64.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is not None:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._tape = None
        out._node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operators delegate to drophead.ops; imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class Tape:
    """Ordered record of executed ops.

    Only ops executed while the tape is active (inside ``with tape:``) and
    touching at least one ``requires_grad`` tensor are recorded.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        out.requires_grad = True
        out._tape = self
        out._node = len(self._records)
        self._records.append((out, inputs, backward))

    def reset(self) -> None:
        self._records.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() already ran on this tape; call reset() before reusing it")
        if loss.data.ndim != 0:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records[: loss._node + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(f"internal: gradient shape {gi.shape} != operand shape {t.shape}")
                if t._node is None:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
                    else:
                        t.grad += gi
                else:
                    k = id(t)
                    prev = grads.get(k)
                    grads[k] = gi if prev is None else prev + gi
        self._consumed = True


_ACTIVE: list[Tape] = []


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor) -> None:
    """Backpropagate from ``loss`` through the tape it was recorded on."""
    if loss._tape is None:
        raise TapeError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def check_finite(arr: np.ndarray, what: str = "op") -> None:
    # A full isfinite scan only runs when the cheap reduction is suspicious.
    if arr.size and not np.isfinite(np.add.reduce(arr, axis=None)):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{what} produced non-finite values")


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, what: str) -> Tensor:
    check_finite(data, what)
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
