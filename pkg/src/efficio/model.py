"""Decoder-only transformer with factorized embeddings and cross-layer sharing.

A layer never owns its weights. The :class:`SharingPlan` maps each layer to an
attention group and an FFN group, and :class:`ModelParams` stores exactly one
parameter set per group. Layers in the same group therefore read the very same
:class:`~efficio.numerics.Tensor` objects, and the tape sums their gradients.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError
from .numerics import Tensor

SHARING_MODES = ("none", "all", "attn_only", "ffn_only", "grouped")
ACTIVATIONS = ("relu", "gelu")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    embedding_size: int = 64
    hidden_size: int = 128
    num_layers: int = 4
    num_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 128
    sharing_mode: str = "grouped"
    group_count: int = 2
    factorize_embedding: bool = True
    tie_output_head: bool = True
    activation: str = "gelu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "embedding_size", "hidden_size", "num_layers",
                     "num_heads", "d_ff", "max_seq_len", "group_count"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        for name in ("vocab_size", "embedding_size", "hidden_size", "num_layers",
                     "num_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"num_heads={self.num_heads} must divide hidden_size={self.hidden_size}")
        if not 1 <= self.group_count <= self.num_layers:
            raise ConfigError(
                f"group_count={self.group_count} must be in [1, num_layers={self.num_layers}]")
        if self.sharing_mode not in SHARING_MODES:
            raise ConfigError(f"sharing_mode must be one of {SHARING_MODES}, got {self.sharing_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        for name in ("factorize_embedding", "tie_output_head"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.factorize_embedding and self.embedding_size > self.hidden_size:
            raise ConfigError(
                f"embedding_size={self.embedding_size} must not exceed "
                f"hidden_size={self.hidden_size} when factorize_embedding is set")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig field(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SharingPlan:
    layer_to_attn_group: Tuple[int, ...]
    layer_to_ffn_group: Tuple[int, ...]

    @property
    def num_layers(self) -> int:
        return len(self.layer_to_attn_group)

    @property
    def unique_attn_groups(self) -> int:
        return len(set(self.layer_to_attn_group))

    @property
    def unique_ffn_groups(self) -> int:
        return len(set(self.layer_to_ffn_group))


def build_sharing_plan(num_layers: int, mode: str, group_count: int = 1) -> SharingPlan:
    """Assign every layer an attention group and an FFN group.

    In ``grouped`` mode layer ``i`` goes to group ``floor(i * G / L)``, giving
    ``G`` contiguous runs of layers.
    """
    L = num_layers
    if L < 1:
        raise ConfigError(f"num_layers must be positive, got {L}")
    identity = tuple(range(L))
    zeros = (0,) * L
    if mode == "none":
        return SharingPlan(identity, identity)
    if mode == "all":
        return SharingPlan(zeros, zeros)
    if mode == "attn_only":
        return SharingPlan(zeros, identity)
    if mode == "ffn_only":
        return SharingPlan(identity, zeros)
    if mode == "grouped":
        if not 1 <= group_count <= L:
            raise ConfigError(f"group_count={group_count} must be in [1, num_layers={L}]")
        groups = tuple(i * group_count // L for i in range(L))
        return SharingPlan(groups, groups)
    raise ConfigError(f"sharing_mode must be one of {SHARING_MODES}, got {mode!r}")


def plan_for(config: ModelConfig) -> SharingPlan:
    return build_sharing_plan(config.num_layers, config.sharing_mode, config.group_count)


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamReport:
    embedding_params: int
    positional_params: int
    block_params_unique: int
    block_params_logical: int
    final_norm_params: int
    head_params: int
    total_unique: int
    total_logical: int
    reduction_ratio: float
    unique_tensors: int

    def to_dict(self) -> dict:
        return asdict(self)


ATTN_TENSORS = 10  # q/k/v/o weights + biases, pre-attention norm gain/bias
FFN_TENSORS = 6  # two weights + biases, pre-ffn norm gain/bias


def attn_set_size(H: int) -> int:
    return 4 * H * H + 4 * H + 2 * H


def ffn_set_size(H: int, d_ff: int) -> int:
    return H * d_ff + d_ff + d_ff * H + H + 2 * H


def param_count(config: ModelConfig) -> ParamReport:
    """Exact integer parameter counts from the config alone (nothing allocated)."""
    V, E, H, L = config.vocab_size, config.embedding_size, config.hidden_size, config.num_layers
    plan = plan_for(config)
    embedding = V * E + E * H if config.factorize_embedding else V * H
    positional = config.max_seq_len * H
    a, f = attn_set_size(H), ffn_set_size(H, config.d_ff)
    unique_blocks = plan.unique_attn_groups * a + plan.unique_ffn_groups * f
    logical_blocks = L * (a + f)
    final_norm = 2 * H
    head = 0 if config.tie_output_head else H * V
    fixed = embedding + positional + final_norm + head
    tensors = ((2 if config.factorize_embedding else 1) + 1 + 2
               + (0 if config.tie_output_head else 1)
               + plan.unique_attn_groups * ATTN_TENSORS
               + plan.unique_ffn_groups * FFN_TENSORS)
    total_unique = fixed + unique_blocks
    total_logical = fixed + logical_blocks
    return ParamReport(
        embedding_params=embedding,
        positional_params=positional,
        block_params_unique=unique_blocks,
        block_params_logical=logical_blocks,
        final_norm_params=final_norm,
        head_params=head,
        total_unique=total_unique,
        total_logical=total_logical,
        reduction_ratio=total_logical / total_unique,
        unique_tensors=tensors,
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class AttnParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    def named(self) -> Iterator[Tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    def named(self) -> Iterator[Tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class ModelParams:
    word_embed: Tensor
    embed_proj: Optional[Tensor]
    pos_embed: Tensor
    attn_groups: List[AttnParams]
    ffn_groups: List[FFNParams]
    final_ln_gain: Tensor
    final_ln_bias: Tensor
    head: Optional[Tensor]

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        """Every stored tensor exactly once, in a fixed order."""
        out = [("word_embed", self.word_embed)]
        if self.embed_proj is not None:
            out.append(("embed_proj", self.embed_proj))
        out.append(("pos_embed", self.pos_embed))
        for g, group in enumerate(self.attn_groups):
            out.extend((f"attn.{g}.{k}", t) for k, t in group.named())
        for g, group in enumerate(self.ffn_groups):
            out.extend((f"ffn.{g}.{k}", t) for k, t in group.named())
        out.append(("final_ln.gain", self.final_ln_gain))
        out.append(("final_ln.bias", self.final_ln_bias))
        if self.head is not None:
            out.append(("head", self.head))
        return out

    def tensors(self) -> List[Tensor]:
        return [t for _, t in self.named_tensors()]

    def block(self, layer: int, plan: SharingPlan) -> Tuple[AttnParams, FFNParams]:
        return (self.attn_groups[plan.layer_to_attn_group[layer]],
                self.ffn_groups[plan.layer_to_ffn_group[layer]])


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Weights ~ N(0, 0.02) from a PCG64 generator; biases 0, norm gains 1."""
    rng = np.random.Generator(np.random.PCG64(seed))
    V, E, H, F = config.vocab_size, config.embedding_size, config.hidden_size, config.d_ff
    plan = plan_for(config)

    def w(*shape):
        return _param(rng.normal(0.0, INIT_STD, size=shape))

    def zeros(n):
        return _param(np.zeros(n))

    def ones(n):
        return _param(np.ones(n))

    if config.factorize_embedding:
        word_embed, embed_proj = w(V, E), w(E, H)
    else:
        word_embed, embed_proj = w(V, H), None
    pos_embed = w(config.max_seq_len, H)
    attn = [
        AttnParams(w(H, H), zeros(H), w(H, H), zeros(H), w(H, H), zeros(H),
                   w(H, H), zeros(H), ones(H), zeros(H))
        for _ in range(plan.unique_attn_groups)
    ]
    ffn = [
        FFNParams(w(H, F), zeros(F), w(F, H), zeros(H), ones(H), zeros(H))
        for _ in range(plan.unique_ffn_groups)
    ]
    head = None if config.tie_output_head else w(H, V)
    return ModelParams(word_embed, embed_proj, pos_embed, attn, ffn, ones(H), zeros(H), head)


def count_enumerated(params: ModelParams) -> int:
    """Element count over distinct stored tensors (identity, not name)."""
    seen = {}
    for _, t in params.named_tensors():
        seen[id(t)] = t.size
    return sum(seen.values())


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def embed(params: ModelParams, tokens: np.ndarray) -> Tensor:
    """Token embedding (through the projection when factorized) plus positions."""
    x = nx.embedding(params.word_embed, tokens)
    if params.embed_proj is not None:
        x = nx.matmul(x, params.embed_proj)
    pos = nx.embedding(params.pos_embed, np.arange(tokens.shape[-1]))
    return nx.add(x, pos)


def attention(x: Tensor, p: AttnParams, num_heads: int) -> Tensor:
    """Causal multi-head self-attention on an already-normalised input [B, T, H]."""
    ctx = nx.causal_self_attention(x, p.w_q, p.b_q, p.w_k, p.b_k, p.w_v, p.b_v, num_heads)
    return nx.linear(ctx, p.w_o, p.b_o)


def feed_forward(x: Tensor, p: FFNParams, kind: str) -> Tensor:
    return nx.linear(nx.activation(nx.linear(x, p.w1, p.b1), kind), p.w2, p.b2)


def decoder_block(x: Tensor, attn: AttnParams, ffn: FFNParams, config: ModelConfig,
                  training: bool = False, rng=None) -> Tensor:
    rate = config.dropout_rate
    h = nx.layer_norm(x, attn.ln_gain, attn.ln_bias)
    x = nx.add(x, nx.dropout(attention(h, attn, config.num_heads), rate, rng, training))
    h = nx.layer_norm(x, ffn.ln_gain, ffn.ln_bias)
    return nx.add(x, nx.dropout(feed_forward(h, ffn, config.activation), rate, rng, training))


def output_logits(params: ModelParams, h: Tensor) -> Tensor:
    if params.head is not None:
        return nx.matmul(h, params.head)
    if params.embed_proj is not None:
        h = nx.matmul(h, nx.transpose(params.embed_proj))
    return nx.matmul(h, nx.transpose(params.word_embed))


def check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise DataError(f"tokens must be a [B, T] id array, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise DataError("token ids must be integers")
    if tokens.shape[1] > config.max_seq_len:
        raise DataError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise DataError(f"token id out of range [0, {config.vocab_size})")
    return tokens


def forward(params: ModelParams, plan: SharingPlan, config: ModelConfig, tokens,
            training: bool = False, rng=None,
            layer_outputs: Optional[list] = None) -> Tensor:
    """Logits [B, T, V] for token ids [B, T] (a 1-D array is treated as B=1).

    When ``layer_outputs`` is a list, the residual stream after each layer is
    appended to it.
    """
    tokens = check_tokens(tokens, config)
    if plan.num_layers != config.num_layers:
        raise ConfigError(f"plan covers {plan.num_layers} layers, config has {config.num_layers}")
    x = nx.dropout(embed(params, tokens), config.dropout_rate, rng, training)
    for i in range(config.num_layers):
        attn, ffn = params.block(i, plan)
        x = decoder_block(x, attn, ffn, config, training, rng)
        if layer_outputs is not None:
            layer_outputs.append(x)
    h = nx.layer_norm(x, params.final_ln_gain, params.final_ln_bias)
    return output_logits(params, h)
