"""Dense float64 tensor with a record-on-execute gradient tape.

Every differentiable operation is a :class:`Function` subclass. Applying one
runs its ``forward`` on raw numpy arrays and, when any input requires a
gradient, appends an entry to the thread's :class:`GradTape`. :func:`backward`
replays the tape in reverse recording order and clears it afterwards.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from core.exceptions import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


@dataclass
class TapeEntry:
    function: "Function"
    inputs: Tuple["Tensor", ...]
    output: "Tensor"


class GradTape:
    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.enabled = True

    def record(self, function: "Function", inputs: Tuple["Tensor", ...], output: "Tensor") -> None:
        self.entries.append(TapeEntry(function, inputs, output))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_local = threading.local()


def current_tape() -> GradTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = GradTape()
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Run the enclosed block without recording anything on the tape."""
    tape = current_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


class Function:
    """A differentiable operation.

    ``forward`` receives the input arrays and returns the output array; it may
    stash whatever the backward rule needs on ``self``. ``backward`` receives
    dL/d(output) and returns one array (or ``None``) per input.
    """

    name = "function"

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward rule")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward rule")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        function = cls(*tensors)
        out_data = function.forward(*(t.data for t in tensors), **kwargs)
        tape = current_tape()
        requires_grad = tape.enabled and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad)
        if requires_grad:
            tape.record(function, tensors, out)
        return out


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self) -> None:
        backward(self)

    # Arithmetic sugar; the rules themselves live in tensor_core.ops.
    def __add__(self, other):
        from tensor_core import ops
        return ops.add(self, _lift(other, self))

    def __radd__(self, other):
        from tensor_core import ops
        return ops.add(_lift(other, self), self)

    def __sub__(self, other):
        from tensor_core import ops
        return ops.sub(self, _lift(other, self))

    def __rsub__(self, other):
        from tensor_core import ops
        return ops.sub(_lift(other, self), self)

    def __mul__(self, other):
        from tensor_core import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from tensor_core import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, 1.0 / float(other))
        return ops.div(self, other)

    def __neg__(self):
        from tensor_core import ops
        return ops.scale(self, -1.0)

    def __pow__(self, exponent: float):
        from tensor_core import ops
        return ops.power(self, float(exponent))

    def __matmul__(self, other):
        from tensor_core import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from tensor_core import ops
        return ops.index(self, index)

    @property
    def T(self) -> "Tensor":
        from tensor_core import ops
        return ops.transpose(self)

    def transpose(self, *axes: int) -> "Tensor":
        from tensor_core import ops
        return ops.transpose(self, axes or None)

    def reshape(self, *shape: int) -> "Tensor":
        from tensor_core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        from tensor_core import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        from tensor_core import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: Optional[int] = None) -> "Tensor":
        from tensor_core import ops
        return ops.max(self, axis=axis)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)):
        return Tensor(np.full(like.shape, float(value)))
    return Tensor(value)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires one and feeds ``loss``."""
    tape = current_tape()
    if loss.data.size != 1:
        tape.clear()
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        tape.clear()
        raise ContractError("loss was not produced through recorded operations")
    if not np.all(np.isfinite(loss.data)):
        tape.clear()
        raise NumericError(f"loss is not finite: {loss.item()}")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    try:
        for entry in reversed(tape.entries):
            grad = pending.pop(id(entry.output), None)
            if grad is None:
                continue
            entry.output.accumulate_grad(grad)
            input_grads = entry.function.backward(grad)
            for tensor, input_grad in zip(entry.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                pending[key] = pending[key] + input_grad if key in pending else input_grad
                leaves[key] = tensor
        for key, grad in pending.items():
            tensor = leaves.get(key)
            if tensor is not None:
                tensor.accumulate_grad(grad)
    finally:
        tape.clear()
