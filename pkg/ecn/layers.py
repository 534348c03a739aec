"""Expert consultation projection and its single/per-task baselines.

A router scores every patch for every task, the scores are boosted on the
target task row and turned into per-task expert weights, and the weighted
experts are added to the shared projection before it is applied to the bag.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from core.constants import PUBLISHED_BETA, PUBLISHED_GAMMA
from core.exceptions import ConfigError, ContractError, DimensionError, NumericError
from tensor_core import ops
from tensor_core.nn import Linear, Module, Parameter, uniform_fan_in
from tensor_core.tensor import Tensor


def task_indicator(t: int, task_count: int) -> np.ndarray:
    """One-hot vector of length ``task_count`` with the 0-based task ``t`` set."""
    if not 0 <= t < task_count:
        raise ContractError(f"task index {t} is outside [0, {task_count})")
    onehot = np.zeros(task_count)
    onehot[t] = 1.0
    return onehot


class Router(Module):
    """Two stacked linear layers with a ReLU between them."""

    def __init__(self, d_f: int, d_model: int, task_count: int, rng: np.random.Generator, bias: bool = True):
        self.fc1 = Linear(d_f, d_model, rng, bias=bias)
        self.fc2 = Linear(d_model, task_count, rng, bias=bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


def route(x: Tensor, router: Router) -> Tensor:
    """Raw expert weights W, one row per task and one column per patch."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"route: expected a non-empty (N, d_f) bag, got {x.shape}")
    return router(x).T


def scale_weights(weights: Tensor, t: int, gamma: float, literal: bool = False) -> Tensor:
    """Softmax over tasks with the target row's logits multiplied by ``gamma``.

    With ``literal`` the denominator keeps the target term un-exponentiated,
    Σ_{i≠t} exp(W_i) + γ·W_t, which is not guaranteed to normalise.
    """
    task_count, patches = weights.shape
    target = task_indicator(t, task_count)
    factors = np.ones((task_count, patches))
    factors[t] = gamma
    scaled = weights * Tensor(factors)
    if not literal:
        return ops.softmax(scaled, axis=0)

    others = Tensor(np.repeat((1.0 - target)[:, None], patches, axis=1))
    denominator = ops.sum(ops.exp(weights) * others, axis=0) + weights[t] * gamma
    if np.any(denominator.data == 0.0):
        raise NumericError("literal scaling hit a zero denominator")
    expanded = Tensor(np.ones((task_count, 1))) @ denominator.reshape(1, patches)
    return ops.exp(scaled) / expanded


def shift_weights(scaled: Tensor, t: int, beta: float) -> Tensor:
    """Per-task expert weight: patch mean of the scaled weights plus β on the target."""
    return ops.mean(scaled, axis=1) + Tensor(beta * task_indicator(t, scaled.shape[0]))


def consulted_weights(shifted: Tensor, common: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """θ*_p = θ_p + Σ_i w̄_i·τ_i."""
    if len(experts) != shifted.shape[0]:
        raise DimensionError(f"{len(experts)} experts but {shifted.shape[0]} expert weights")
    combined = common
    for i, expert in enumerate(experts):
        combined = combined + shifted[i] * expert
    return combined


def consult(x: Tensor, shifted: Tensor, common: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """v⁰ = x·θ*_p, without a bias."""
    return x @ consulted_weights(shifted, common, experts)


@dataclass
class ExpertWeights:
    raw: Tensor
    scaled: Tensor
    shifted: Tensor


class ExpertConsultation(Module):
    def __init__(
        self,
        d_f: int,
        d_model: int,
        task_count: int,
        rng: np.random.Generator,
        gamma: float = PUBLISHED_GAMMA,
        beta: float = PUBLISHED_BETA,
        literal_scaling: bool = False,
        router_bias: bool = True,
    ):
        if task_count < 1:
            raise ConfigError(f"expert consultation needs at least one task, got {task_count}")
        for label, value in (("gamma", gamma), ("beta", beta)):
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(f"{label} must be finite and positive, got {value}")
        self.experts = [Parameter(uniform_fan_in(rng, d_f, (d_f, d_model))) for _ in range(task_count)]
        self.common = Parameter(uniform_fan_in(rng, d_f, (d_f, d_model)))
        self.router = Router(d_f, d_model, task_count, rng, bias=router_bias)
        self.gamma = gamma
        self.beta = beta
        self.literal_scaling = literal_scaling

    @property
    def task_count(self) -> int:
        return len(self.experts)

    @property
    def d_f(self) -> int:
        return self.common.shape[0]

    def expert_weights(self, x: Tensor, t: int) -> ExpertWeights:
        if x.ndim != 2 or x.shape[1] != self.d_f:
            raise DimensionError(f"bag shape {x.shape} does not match d_f={self.d_f}")
        raw = route(x, self.router)
        scaled = scale_weights(raw, t, self.gamma, literal=self.literal_scaling)
        return ExpertWeights(raw, scaled, shift_weights(scaled, t, self.beta))

    def consulted_projection(self, x: Tensor, t: int) -> Tensor:
        """θ*_p for bag ``x`` and task ``t``."""
        return consulted_weights(self.expert_weights(x, t).shifted, self.common, self.experts)

    def __call__(self, x: Tensor, t: Optional[int]) -> Tensor:
        if t is None:
            raise ContractError("expert consultation needs a task index")
        weights = self.expert_weights(x, t)
        return consult(x, weights.shifted, self.common, self.experts)


class SingleProjection(Module):
    """One d_f→d_model map shared by every task; the task index is ignored."""

    def __init__(self, d_f: int, d_model: int, rng: np.random.Generator):
        self.linear = Linear(d_f, d_model, rng, zero_bias=True)

    def __call__(self, x: Tensor, t: Optional[int] = None) -> Tensor:
        return self.linear(x)


class TaskProjection(Module):
    """Independent d_f→d_model maps, one per task."""

    def __init__(self, d_f: int, d_model: int, task_count: int, rng: np.random.Generator):
        if task_count < 1:
            raise ConfigError(f"per-task projection needs at least one task, got {task_count}")
        self.projections = [Linear(d_f, d_model, rng, zero_bias=True) for _ in range(task_count)]

    def __call__(self, x: Tensor, t: Optional[int] = None) -> Tensor:
        if t is None:
            raise ContractError("per-task projection needs a task index")
        if not 0 <= t < len(self.projections):
            raise ContractError(f"task index {t} is outside [0, {len(self.projections)})")
        return self.projections[t](x)


def project_baseline(x: Tensor, projection: Module, t: Optional[int] = None) -> Tensor:
    if not isinstance(projection, (SingleProjection, TaskProjection)):
        raise ContractError(f"{type(projection).__name__} is not a baseline projection")
    return projection(x, t)


def build_projection(
    kind: str,
    d_f: int,
    d_model: int,
    task_count: int,
    rng: np.random.Generator,
    gamma: float = PUBLISHED_GAMMA,
    beta: float = PUBLISHED_BETA,
    literal_scaling: bool = False,
    router_bias: bool = True,
) -> Module:
    if kind == "ecn":
        return ExpertConsultation(d_f, d_model, task_count, rng, gamma, beta, literal_scaling, router_bias)
    if kind == "p1":
        return SingleProjection(d_f, d_model, rng)
    if kind == "pt":
        return TaskProjection(d_f, d_model, task_count, rng)
    raise ConfigError(f"unknown projection kind {kind!r}")
