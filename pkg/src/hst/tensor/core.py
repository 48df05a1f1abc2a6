"""Dense tensors with reverse-mode automatic differentiation.

The engine is a Wengert list: every primitive executed while a tape is
active appends one record, and ``backward`` replays the records in exact
reverse execution order, summing adjoint contributions across fan-out.
Data lives in contiguous row-major numpy arrays (float32 or float64).
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np

from ..errors import GraphError, ShapeError

SUPPORTED_DTYPES = (np.float32, np.float64)

_state = threading.local()

# Debug mode adds a finiteness check after every primitive forward.
_debug_checks = False

# Live-allocation accounting for the profiler's peak-memory column.
_live_bytes = 0
_peak_bytes = 0


def set_debug(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_enabled() -> bool:
    return _debug_checks


def _track_alloc(nbytes: int) -> None:
    global _live_bytes, _peak_bytes
    _live_bytes += nbytes
    if _live_bytes > _peak_bytes:
        _peak_bytes = _live_bytes


def _track_free(nbytes: int) -> None:
    global _live_bytes
    _live_bytes -= nbytes


def live_tensor_bytes() -> int:
    return _live_bytes


def peak_tensor_bytes() -> int:
    return _peak_bytes


def reset_peak_tensor_bytes() -> None:
    """Reset the high-water mark to the current live total."""
    global _peak_bytes
    _peak_bytes = _live_bytes


def _coerce(data, dtype) -> np.ndarray:
    if dtype is not None:
        return np.ascontiguousarray(data, dtype=np.dtype(dtype))
    arr = np.ascontiguousarray(data)
    if arr.dtype in SUPPORTED_DTYPES:
        return arr
    if arr.dtype.kind in "iub":  # ints/bools promote to the training dtype
        return arr.astype(np.float32)
    raise ShapeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")


class Tensor:
    """Row-major dense array plus optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._tape: Tape | None = None
        _track_alloc(self.data.nbytes)
        weakref.finalize(self, _track_free, self.data.nbytes)

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:  # pragma: no cover
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad})"

    # Arithmetic operators are injected by hst.tensor.ops at import time.


class Parameter:
    """Named model weight. ``trainable`` gates gradient tracking entirely:
    frozen parameters never allocate a grad and are never written by a step.
    """

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value: Tensor, trainable: bool):
        self.name = name
        self.value = value
        self.trainable = bool(trainable)
        value.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Tensor | None:
        return self.value.grad

    def set_trainable(self, trainable: bool) -> None:
        self.trainable = bool(trainable)
        self.value.requires_grad = self.trainable
        if not self.trainable:
            self.value.grad = None

    def clear_grad(self) -> None:
        self.value.grad = None

    def num_scalars(self) -> int:
        return self.value.size

    def __repr__(self) -> str:  # pragma: no cover
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}, {kind})"


# A record's backward callback receives the output adjoint and returns
# (input tensor, adjoint contribution) pairs.
BackwardFn = Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray]]]


class _TapeRecord:
    __slots__ = ("out", "backward")

    def __init__(self, out: Tensor, backward: BackwardFn):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed primitives, sufficient to replay adjoints."""

    def __init__(self):
        self._records: list[_TapeRecord] = []
        self._produced: set[int] = set()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward: BackwardFn) -> None:
        out._tape = self
        self._records.append(_TapeRecord(out, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

        Visits records in exact reverse execution order; a tensor consumed by
        k ops receives the sum of its k adjoint contributions. Leaf grads are
        overwritten, not accumulated across calls.
        """
        if loss.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise GraphError("loss was not produced on this tape")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self._records):
            g = adjoints.pop(id(rec.out), None)
            if g is None:
                continue  # not on the path to the loss
            for tensor, contribution in rec.backward(g):
                if contribution is None:
                    continue
                key = id(tensor)
                held = adjoints.get(key)
                adjoints[key] = contribution if held is None else held + contribution
                if key not in self._produced and tensor.requires_grad:
                    leaves[key] = tensor
        for key, tensor in leaves.items():
            tensor.grad = Tensor(adjoints[key])


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def record():
    """Activate a fresh tape for the enclosed forward computation."""
    tape = Tape()
    stack = _tape_stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss."""
    if loss._tape is None:
        raise GraphError("backward: loss was not produced under an active tape")
    loss._tape.backward(loss)
