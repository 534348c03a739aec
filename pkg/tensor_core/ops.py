"""Differentiable operations on :class:`~tensor_core.tensor.Tensor`.

Shapes must match exactly, with two exceptions: a 1-d bias may be added over
the rows of a matrix, and a 0-d tensor may multiply or divide anything.
"""
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from core.exceptions import DimensionError, NumericError
from tensor_core.tensor import Function, Tensor

_GELU_C = math.sqrt(2.0 / math.pi)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _is_bias(a: np.ndarray, b: np.ndarray) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def _is_scalar(a: np.ndarray) -> bool:
    return a.ndim == 0


class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.bias = _is_bias(a, b)
        if not self.bias:
            _same_shape(a, b, self.name)
        return a + b

    def backward(self, grad):
        if self.bias:
            return grad, grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _same_shape(a, b, self.name)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        if not (_is_scalar(a) or _is_scalar(b)):
            _same_shape(a, b, self.name)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        grad_a = grad * self.b
        grad_b = grad * self.a
        if _is_scalar(self.a):
            grad_a = np.asarray(grad_a.sum())
        if _is_scalar(self.b):
            grad_b = np.asarray(grad_b.sum())
        return grad_a, grad_b


class Div(Function):
    name = "div"

    def forward(self, a, b):
        if not _is_scalar(b):
            _same_shape(a, b, self.name)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        if _is_scalar(self.b):
            grad_b = np.asarray(grad_b.sum())
        return grad_a, grad_b


class Scale(Function):
    name = "scale"

    def forward(self, a, factor: float):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Power(Function):
    name = "power"

    def forward(self, a, exponent: float):
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad):
        return (grad * self.exponent * np.power(self.a, self.exponent - 1.0),)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        batched = a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0]
        if not ((a.ndim == 2 and b.ndim == 2) or batched) or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ np.swapaxes(self.b, -1, -2), np.swapaxes(self.a, -1, -2) @ grad


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes: Optional[Tuple[int, ...]] = None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape: Tuple[int, ...]):
        self.original = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.original),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = 0):
        reference = list(arrays[0].shape)
        for arr in arrays[1:]:
            other = list(arr.shape)
            if len(other) != len(reference) or any(
                x != y for i, (x, y) in enumerate(zip(reference, other)) if i != axis % len(reference)
            ):
                raise DimensionError(f"concat: shapes {arrays[0].shape} and {arr.shape} differ off axis {axis}")
        self.axis = axis
        self.bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Index(Function):
    name = "index"

    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return np.array(a[index], dtype=np.float64)

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.index, grad)
        return (full,)


class Embedding(Function):
    name = "embedding"

    def forward(self, weight, ids: np.ndarray):
        self.shape, self.ids = weight.shape, ids
        return weight[ids]

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.ids, grad)
        return (full,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise NumericError("log: input has non-positive entries")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Gelu(Function):
    """Tanh approximation of GELU."""

    name = "gelu"

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a ** 3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        inner = _GELU_C * (1.0 + 3 * 0.044715 * a ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * inner),)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis: Optional[int] = None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis: Optional[int] = None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        self.count = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Max(Function):
    """Maximum reduction; the gradient flows to the first maximal entry."""

    name = "max"

    def forward(self, a, axis: Optional[int] = None):
        self.shape, self.axis = a.shape, axis
        if axis is None:
            self.argmax = np.unravel_index(np.argmax(a), a.shape)
            return np.asarray(a[self.argmax])
        self.argmax = np.expand_dims(np.argmax(a, axis=axis), axis)
        return np.take_along_axis(a, self.argmax, axis=axis).squeeze(axis)

    def backward(self, grad):
        full = np.zeros(self.shape)
        if self.axis is None:
            full[self.argmax] = grad
        else:
            np.put_along_axis(full, self.argmax, np.expand_dims(grad, self.axis), axis=self.axis)
        return (full,)


def _check_softmax_input(a: np.ndarray, axis: int, op: str) -> np.ndarray:
    if np.isnan(a).any() or np.isposinf(a).any():
        raise NumericError(f"{op}: input contains NaN or +inf")
    peak = a.max(axis=axis, keepdims=True)
    if np.isneginf(peak).any():
        raise NumericError(f"{op}: a slice along axis {axis} is entirely -inf")
    return peak


class Softmax(Function):
    name = "softmax"

    def forward(self, a, axis: int = -1):
        peak = _check_softmax_input(a, axis, self.name)
        e = np.exp(a - peak)
        self.axis = axis
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        p = self.out
        return (p * (grad - (grad * p).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a, axis: int = -1):
        peak = _check_softmax_input(a, axis, self.name)
        shifted = a - peak
        self.axis = axis
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.p = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.p * grad.sum(axis=self.axis, keepdims=True),)


class LayerNorm(Function):
    name = "layer_norm"

    def forward(self, x, gain, bias, eps: float = 1e-5):
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise DimensionError(
                f"layer_norm: input {x.shape} needs gain/bias of shape {x.shape[-1:]}, "
                f"got {gain.shape} and {bias.shape}"
            )
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        xhat = self.xhat
        dxhat = grad * self.gain
        dx = self.inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat = grad.reshape(-1, grad.shape[-1])
        dgain = (flat * xhat.reshape(flat.shape)).sum(axis=0)
        dbias = flat.sum(axis=0)
        return dx, dgain, dbias


class MaskedFill(Function):
    name = "masked_fill"

    def forward(self, a, mask: np.ndarray, value: float):
        self.mask = np.broadcast_to(mask, a.shape)
        return np.where(self.mask, value, a)

    def backward(self, grad):
        return (np.where(self.mask, 0.0, grad),)


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer targets under row-wise softmax."""

    name = "cross_entropy"

    def forward(self, logits, targets: np.ndarray):
        if logits.ndim != 2 or targets.shape != (logits.shape[0],):
            raise DimensionError(f"cross_entropy: logits {logits.shape} and targets {targets.shape} disagree")
        peak = _check_softmax_input(logits, -1, self.name)
        shifted = logits - peak
        log_p = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        rows = np.arange(len(targets))
        self.p, self.rows, self.targets = np.exp(log_p), rows, targets
        return np.asarray(-log_p[rows, targets].mean())

    def backward(self, grad):
        d = self.p.copy()
        d[self.rows, self.targets] -= 1.0
        return (grad * d / len(self.targets),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return Div.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def power(a: Tensor, exponent: float) -> Tensor:
    return Power.apply(a, exponent=exponent)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis)


def index(a: Tensor, idx) -> Tensor:
    return Index.apply(a, index=idx)


def embedding(weight: Tensor, ids: Sequence[int]) -> Tensor:
    return Embedding.apply(weight, ids=np.asarray(ids, dtype=np.int64))


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def gelu(a: Tensor) -> Tensor:
    return Gelu.apply(a)


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def max(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return Max.apply(a, axis=axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(a, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    return MaskedFill.apply(a, mask=np.asarray(mask, dtype=bool), value=value)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    return CrossEntropy.apply(logits, targets=np.asarray(targets, dtype=np.int64))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


def eye(n: int, batch: Optional[int] = None) -> Tensor:
    identity = np.eye(n)
    if batch is not None:
        identity = np.tile(identity, (batch, 1, 1))
    return Tensor(identity)
