"""RAdam and Adam updates with an optional Lookahead wrapper, on numpy buffers."""
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from core.constants import ADAM_BETAS, ADAM_EPS, LOOKAHEAD_ALPHA, LOOKAHEAD_K
from core.exceptions import ConfigError, NumericError
from tensor_core.nn import Parameter

# RAdam takes the rectified adaptive step only once the SMA length reaches this.
RECTIFY_THRESHOLD = 5.0


@dataclass
class Moments:
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray


@dataclass
class OptimizerState:
    step: int = 0
    moments: Dict[str, Moments] = field(default_factory=dict)

    def moments_for(self, name: str, param: Parameter) -> Moments:
        if name not in self.moments:
            self.moments[name] = Moments(np.zeros(param.shape), np.zeros(param.shape))
        return self.moments[name]


def _checked_grad(name: str, param: Parameter) -> Optional[np.ndarray]:
    if param.grad is None:
        return None
    if not np.all(np.isfinite(param.grad)):
        raise NumericError(f"gradient of {name} is not finite")
    return param.grad


def _update_moments(moments: Moments, grad: np.ndarray, betas: Tuple[float, float]) -> None:
    beta1, beta2 = betas
    moments.exp_avg *= beta1
    moments.exp_avg += (1.0 - beta1) * grad
    moments.exp_avg_sq *= beta2
    moments.exp_avg_sq += (1.0 - beta2) * grad * grad


def radam_step(
    params: Mapping[str, Parameter],
    state: OptimizerState,
    lr: float,
    betas: Tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> None:
    """One rectified-Adam update of every parameter holding a gradient."""
    grads = {name: _checked_grad(name, p) for name, p in params.items()}
    state.step += 1
    beta1, beta2 = betas
    step = state.step
    sma_max = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2 ** step
    sma = sma_max - 2.0 * step * beta2_t / (1.0 - beta2_t)
    if sma >= RECTIFY_THRESHOLD:
        rect = math.sqrt(
            (1.0 - beta2_t) * (sma - 4.0) / (sma_max - 4.0) * (sma - 2.0) / sma * sma_max / (sma_max - 2.0)
        )
    else:
        rect = None

    for name, param in params.items():
        grad = grads[name]
        if grad is None:
            continue
        moments = state.moments_for(name, param)
        _update_moments(moments, grad, betas)
        if rect is not None:
            denom = np.sqrt(moments.exp_avg_sq) + eps
            param.data -= lr * rect / (1.0 - beta1 ** step) * moments.exp_avg / denom
        else:
            param.data -= lr / (1.0 - beta1 ** step) * moments.exp_avg


def adam_step(
    params: Mapping[str, Parameter],
    state: OptimizerState,
    lr: float,
    betas: Tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> None:
    grads = {name: _checked_grad(name, p) for name, p in params.items()}
    state.step += 1
    beta1, beta2 = betas
    for name, param in params.items():
        grad = grads[name]
        if grad is None:
            continue
        moments = state.moments_for(name, param)
        _update_moments(moments, grad, betas)
        m_hat = moments.exp_avg / (1.0 - beta1 ** state.step)
        v_hat = moments.exp_avg_sq / (1.0 - beta2 ** state.step)
        param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lookahead_sync(params: Mapping[str, Parameter], slow: Dict[str, np.ndarray], alpha: float) -> None:
    """slow += α·(fast − slow), then the fast weights restart from slow."""
    for name, param in params.items():
        slow[name] += alpha * (param.data - slow[name])
        param.data = slow[name].copy()


class Optimizer:
    """Applies ``step_fn`` every step and, when ``lookahead_k`` is set, syncs slow weights every k steps."""

    def __init__(
        self,
        params: Mapping[str, Parameter],
        lr: float,
        kind: str = "radam_lookahead",
        lookahead_k: int = LOOKAHEAD_K,
        lookahead_alpha: float = LOOKAHEAD_ALPHA,
    ):
        if lr <= 0 or not math.isfinite(lr):
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if kind == "radam_lookahead":
            self.step_fn = radam_step
            if lookahead_k < 1 or not 0.0 <= lookahead_alpha <= 1.0:
                raise ConfigError(f"lookahead needs k >= 1 and alpha in [0, 1], got k={lookahead_k}, "
                                  f"alpha={lookahead_alpha}")
            self.lookahead_k: Optional[int] = lookahead_k
        elif kind == "adam":
            self.step_fn = adam_step
            self.lookahead_k = None
        else:
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.params = dict(params)
        self.lr = lr
        self.kind = kind
        self.lookahead_alpha = lookahead_alpha
        self.state = OptimizerState()
        self.slow = {name: p.data.copy() for name, p in self.params.items()}
        self.syncs = 0

    def step(self) -> None:
        self.step_fn(self.params, self.state, self.lr)
        if self.lookahead_k is not None and self.state.step % self.lookahead_k == 0:
            lookahead_sync(self.params, self.slow, self.lookahead_alpha)
            self.syncs += 1

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()
