import math
from collections import OrderedDict
from typing import Iterator, Optional, Tuple

import numpy as np

from core.constants import DEFAULT_LAYER_NORM_EPS
from core.exceptions import DimensionError
from tensor_core import ops
from tensor_core.tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container of named parameters and child modules.

    Parameters are discovered from instance attributes in assignment order,
    descending into child modules and lists of modules, so names such as
    ``encoder.0.attention.w_q`` are stable for a given constructor.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> "OrderedDict[str, Parameter]":
        return OrderedDict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise DimensionError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} vs parameter shape {p.shape}")
            p.data = value.copy()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_bias: bool = False):
        self.weight = Parameter(uniform_fan_in(rng, in_features, (in_features, out_features)))
        if bias:
            initial = np.zeros(out_features) if zero_bias else uniform_fan_in(rng, in_features, (out_features,))
            self.bias = Parameter(initial)
        else:
            self.bias = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear: input {x.shape} does not fit weight {self.weight.shape}")
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = DEFAULT_LAYER_NORM_EPS):
        self.gain = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)
