"""Dense tensors and the reverse-mode tape that records operations on them."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError

MAX_AXES = 3

_active: list["Tape"] = []


class Tensor:
    """A float64 array of at most three axes with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"tensors have at most {MAX_AXES} axes, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal constructor: arr is already a fresh float64 array
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)

    def __getitem__(self, index):
        from .ops import getitem
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed operations plus a named parameter registry.

    Use as a context manager: operations run inside ``with tape:`` whose
    result depends on a tensor with ``requires_grad`` are recorded. Entering
    the context clears the previous record; parameters persist.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.backward_calls = 0

    def __enter__(self) -> "Tape":
        self.records = []
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def param(self, name: str, value) -> Tensor:
        """Register (or fetch, if already present) a trainable tensor."""
        if name in self.params:
            return self.params[name]
        t = Tensor(value, requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def backward(self, loss: Tensor, seed=None) -> None:
        """Accumulate d(loss)/d(leaf) into the ``grad`` of every leaf tensor.

        Records are visited in exact reverse execution order. Gradients add
        onto whatever the leaves already hold.
        """
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss or a seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=np.float64)}
        produced = set()
        for out, inputs, vjp in reversed(self.records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {id(t): t for _, inputs, _ in self.records for t in inputs}
        leaves[id(loss)] = loss
        for key, g in grads.items():
            t = leaves.get(key)
            if t is None or key in produced:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.backward_calls += 1


def active_tape() -> Tape | None:
    return _active[-1] if _active else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, what: str) -> Tensor:
    """Wrap an op result, check it is finite and log it on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{what} produced non-finite values")
    if out_data.ndim > MAX_AXES:
        raise ShapeError(f"{what} result has shape {out_data.shape}; at most {MAX_AXES} axes")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append((out, tuple(inputs), vjp))
    return out
