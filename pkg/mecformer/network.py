"""The full multi-task model: projection, visual encoder and language decoder."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from attention.layers import AttentionParams, exact_mhsa, mhca
from attention.nystrom import NystromConfig, nystrom_attention
from attention.positional import sinusoidal_pe
from core.constants import BOS_ID, EOS_ID
from core.exceptions import ContractError, DimensionError, VocabularyError
from ecn.layers import build_projection
from mecformer.config import ModelConfig
from tensor_core import ops
from tensor_core.nn import LayerNorm, Linear, Module, Parameter, uniform_fan_in
from tensor_core.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.attention = AttentionParams(cfg.d_model, cfg.heads, rng)

    def __call__(self, v: Tensor, cfg: ModelConfig) -> Tensor:
        normed = self.norm(v)
        if cfg.use_exact_attention:
            return v + exact_mhsa(normed, self.attention)
        nystrom = NystromConfig.for_length(v.shape[0], cfg.heads, cfg.num_landmarks, cfg.pinv_iterations)
        return v + nystrom_attention(normed, nystrom, self.attention)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.self_attention = AttentionParams(cfg.d_model, cfg.heads, rng)
        self.cross_norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.cross_attention = AttentionParams(cfg.d_model, cfg.heads, rng)
        self.ff_in = Linear(cfg.d_model, cfg.pwff_hidden, rng)
        self.ff_out = Linear(cfg.pwff_hidden, cfg.d_model, rng)

    def __call__(self, h: Tensor, v: Tensor, cfg: ModelConfig) -> Tensor:
        h = h + exact_mhsa(self.self_norm(h), self.self_attention, causal_mask=True)
        h = h + mhca(self.cross_norm(h), v, self.cross_attention)
        fed = self.ff_out(ops.gelu(self.ff_in(h)))
        # printed block has no residual around the feed-forward network
        return h + fed if cfg.pwff_residual else fed


@dataclass
class Generation:
    token_ids: List[int]
    truncated: bool
    step_logits: List[np.ndarray]
    words: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def steps(self) -> int:
        return len(self.step_logits)

    @property
    def term(self) -> str:
        return " ".join(self.words)


class Mecformer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.projection = build_projection(
            cfg.projection_kind, cfg.d_f, cfg.d_model, cfg.task_count, rng,
            gamma=cfg.gamma, beta=cfg.beta,
            literal_scaling=cfg.ecn_literal_scaling, router_bias=cfg.router_bias,
        )
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.encoder_layers)]
        if cfg.use_decoder:
            self.embedding = Parameter(uniform_fan_in(rng, cfg.d_model, (cfg.vocab_size, cfg.d_model)))
            self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.decoder_layers)]
            self.classifier = Linear(cfg.d_model, cfg.vocab_size, rng, zero_bias=True)
        else:
            self.head = Linear(cfg.d_model, cfg.category_count, rng, zero_bias=True)
        logger.debug("built model with %d parameters", self.parameter_count())

    def project(self, x: Tensor, t: Optional[int]) -> Tensor:
        if x.ndim != 2 or x.shape[0] < 1:
            raise DimensionError(f"expected a non-empty (N, d_f) bag, got {x.shape}")
        if x.shape[1] != self.config.d_f:
            raise DimensionError(f"bag has d_f={x.shape[1]}, model expects d_f={self.config.d_f}")
        return self.projection(x, t)

    def encode(self, x: Tensor, t: Optional[int]) -> Tensor:
        v = self.project(x, t)
        for layer in self.encoder:
            v = layer(v, self.config)
        return v

    def _require_decoder(self) -> None:
        if not self.config.use_decoder:
            raise ContractError("this model was built without a decoder")

    def decode_step(self, tokens: Sequence[int], v: Tensor) -> Tensor:
        """Logits over the vocabulary for every position of ``tokens``."""
        self._require_decoder()
        if len(tokens) == 0:
            raise ContractError("decoding needs at least one token")
        ids = np.asarray(tokens, dtype=np.int64)
        bad = [int(i) for i in ids if not 0 <= i < self.config.vocab_size]
        if bad:
            raise VocabularyError(f"token ids {bad} are outside the vocabulary of {self.config.vocab_size}")
        h = ops.embedding(self.embedding, ids) + sinusoidal_pe(len(ids), self.config.d_model)
        for layer in self.decoder:
            h = layer(h, v, self.config)
        return self.classifier(h)

    def generate(self, x: Tensor, t: Optional[int], vocabulary=None) -> Generation:
        """Greedy decoding from <BOS> until <EOS> or ``max_decode_len`` steps."""
        self._require_decoder()
        tokens = [BOS_ID]
        trace = []
        with no_grad():
            v = self.encode(x, t)
            for _ in range(self.config.max_decode_len):
                logits = self.decode_step(tokens, v).data[-1]
                trace.append(logits.copy())
                next_id = int(np.argmax(logits))
                if next_id == EOS_ID:
                    return self._finish(tokens[1:], False, trace, vocabulary)
                tokens.append(next_id)
        return self._finish(tokens[1:], True, trace, vocabulary)

    @staticmethod
    def _finish(ids: List[int], truncated: bool, trace: List[np.ndarray], vocabulary) -> Generation:
        words = tuple(vocabulary.decode(ids)) if vocabulary is not None else ()
        return Generation(token_ids=ids, truncated=truncated, step_logits=trace, words=words)

    def teacher_forced_loss(self, x: Tensor, t: Optional[int], target: Sequence[int]) -> Tensor:
        """Mean cross-entropy of positions 0..k predicting tokens 1..k+1."""
        self._require_decoder()
        if len(target) < 2:
            raise ContractError(f"target needs <BOS> and <EOS> at least, got {list(target)}")
        if target[0] != BOS_ID or target[-1] != EOS_ID:
            raise ContractError(f"target must run from <BOS> to <EOS>, got {list(target)}")
        logits = self.decode_step(target[:-1], self.encode(x, t))
        return ops.cross_entropy(logits, target[1:])

    def classify_headonly(self, x: Tensor, t: Optional[int]) -> Tensor:
        """Logits over every category of every task from the patch-mean embedding."""
        if self.config.use_decoder:
            raise ContractError("head-only classification needs a model built with use_decoder=False")
        pooled = ops.mean(self.encode(x, t), axis=0)
        return self.head(pooled.reshape(1, self.config.d_model)).reshape(self.config.category_count)

    def loss(self, x: Tensor, t: Optional[int], target: Sequence[int], category: int) -> Tensor:
        if self.config.use_decoder:
            return self.teacher_forced_loss(x, t, target)
        logits = self.classify_headonly(x, t)
        return ops.cross_entropy(logits.reshape(1, self.config.category_count), [category])
