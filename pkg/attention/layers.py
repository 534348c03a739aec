"""Exact multi-head attention: masked self-attention and cross-attention."""
import math
from typing import List, Tuple, Union

import numpy as np

from core.exceptions import ConfigError, DimensionError
from tensor_core import ops
from tensor_core.nn import Module, Parameter, uniform_fan_in
from tensor_core.tensor import Tensor


class AttentionParams(Module):
    """Square projections W_Q, W_K, W_V, W_O; heads are column blocks of each."""

    def __init__(self, d_model: int, head_count: int, rng: np.random.Generator):
        if head_count < 1 or d_model % head_count:
            raise ConfigError(f"head_count {head_count} must divide d_model {d_model}")
        self.w_q = Parameter(uniform_fan_in(rng, d_model, (d_model, d_model)))
        self.w_k = Parameter(uniform_fan_in(rng, d_model, (d_model, d_model)))
        self.w_v = Parameter(uniform_fan_in(rng, d_model, (d_model, d_model)))
        self.w_o = Parameter(uniform_fan_in(rng, d_model, (d_model, d_model)))
        self.head_count = head_count

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.head_count


def split_heads(x: Tensor, head_count: int) -> Tensor:
    """(S, d_model) -> (heads, S, d_model / heads)."""
    length, width = x.shape
    return x.reshape(length, head_count, width // head_count).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    """(heads, S, d_h) -> (S, heads * d_h)."""
    heads, length, head_dim = x.shape
    return x.transpose(1, 0, 2).reshape(length, heads * head_dim)


def future_mask(length: int) -> np.ndarray:
    """True above the diagonal, i.e. where a query would see a future key."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def _check_width(x: Tensor, params: AttentionParams, role: str) -> None:
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise DimensionError(f"{role}: expected (*, {params.d_model}), got {x.shape}")


def scaled_dot_product(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray = None
) -> Tuple[Tensor, Tensor]:
    """Per-head attention on (heads, S, d_h) blocks; returns (context, weights)."""
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = ops.masked_fill(scores, mask, -np.inf)
    weights = ops.softmax(scores, axis=-1)
    return weights @ v, weights


def exact_mhsa(
    x: Tensor, params: AttentionParams, causal_mask: bool = False, return_weights: bool = False
) -> Union[Tensor, Tuple[Tensor, List[np.ndarray]]]:
    _check_width(x, params, "self-attention")
    h = params.head_count
    q = split_heads(x @ params.w_q, h)
    k = split_heads(x @ params.w_k, h)
    v = split_heads(x @ params.w_v, h)
    mask = future_mask(x.shape[0]) if causal_mask else None
    context, weights = scaled_dot_product(q, k, v, mask)
    out = merge_heads(context) @ params.w_o
    if return_weights:
        return out, list(weights.data)
    return out


def mhca(h: Tensor, v: Tensor, params: AttentionParams) -> Tensor:
    """Queries from the decoder tokens ``h``, keys and values from visual tokens ``v``."""
    _check_width(h, params, "cross-attention queries")
    _check_width(v, params, "cross-attention keys")
    heads = params.head_count
    q = split_heads(h @ params.w_q, heads)
    k = split_heads(v @ params.w_k, heads)
    values = split_heads(v @ params.w_v, heads)
    context, _ = scaled_dot_product(q, k, values)
    return merge_heads(context) @ params.w_o
