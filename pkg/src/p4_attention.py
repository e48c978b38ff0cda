# p4_attention.py
"""
The CSTF block: channel cross-attention across stages (CA) and spatial
cross-attention within each stage (SCA), fused residually onto the block input.
Block order is LN -> CA -> SCA -> fuse -> LN -> GeLU.

Attention is single-head. The softmax scale uses C~ = projection output width.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from p1_config import ConfigError, ContractError, FusionMode, ShapeError
from p2_tensor_core import ParameterSet, Tensor, concat, gelu, layer_norm, linear, matmul, softmax, swap_last
from p3_patching import PatchTokens

__all__ = [
    "AttentionParams",
    "BlockState",
    "FusionMode",
    "channel_cross_attention",
    "cstf_block",
    "fuse",
    "init_attention_params",
    "scaled_attention",
    "spatial_cross_attention",
]


@dataclass
class AttentionParams:
    """Per-stage CSTF weights. Linear weights are stored (out, in)."""

    stage_index: int
    ln_in_gain: Tensor
    ln_in_bias: Tensor
    ca_query: Tensor  # W_Q: C_i -> d
    ca_key: Tensor  # W_K
    ca_value: Tensor  # W_V
    ca_out: Tensor  # d -> C_i, projects the cross-stage sum back to stage width
    sca_query: Tensor  # W_Q'
    sca_key: Tensor  # W_K'
    sca_value: Tensor  # W_V'
    sca_up: Tensor  # W_up^i: d -> C_i
    cat_weight: Tensor  # 2C_i -> C_i
    cat_bias: Tensor
    ln_out_gain: Tensor
    ln_out_bias: Tensor

    @property
    def attention_dim(self) -> int:
        return self.ca_query.shape[0]

    @property
    def channels(self) -> int:
        return self.ca_query.shape[1]

    @classmethod
    def from_parameter_set(cls, params: ParameterSet, stage: int) -> "AttentionParams":
        p = f"cstf.{stage}"
        return cls(
            stage_index=stage,
            ln_in_gain=params[f"{p}.ln_in.gain"],
            ln_in_bias=params[f"{p}.ln_in.bias"],
            ca_query=params[f"{p}.ca.query"],
            ca_key=params[f"{p}.ca.key"],
            ca_value=params[f"{p}.ca.value"],
            ca_out=params[f"{p}.ca.out"],
            sca_query=params[f"{p}.sca.query"],
            sca_key=params[f"{p}.sca.key"],
            sca_value=params[f"{p}.sca.value"],
            sca_up=params[f"{p}.sca.up"],
            cat_weight=params[f"{p}.cat.weight"],
            cat_bias=params[f"{p}.cat.bias"],
            ln_out_gain=params[f"{p}.ln_out.gain"],
            ln_out_bias=params[f"{p}.ln_out.bias"],
        )


def init_attention_params(
    params: ParameterSet, stage: int, channels: int, attention_dim: int, rng: np.random.Generator
) -> AttentionParams:
    p = f"cstf.{stage}"
    params.ones(f"{p}.ln_in.gain", (channels,))
    params.zeros(f"{p}.ln_in.bias", (channels,))
    for branch in ("ca", "sca"):
        for role in ("query", "key", "value"):
            params.uniform(f"{p}.{branch}.{role}", (attention_dim, channels), channels, rng)
    params.uniform(f"{p}.ca.out", (channels, attention_dim), attention_dim, rng)
    params.uniform(f"{p}.sca.up", (channels, attention_dim), attention_dim, rng)
    params.uniform(f"{p}.cat.weight", (channels, 2 * channels), 2 * channels, rng)
    params.zeros(f"{p}.cat.bias", (channels,))
    params.ones(f"{p}.ln_out.gain", (channels,))
    params.zeros(f"{p}.ln_out.bias", (channels,))
    return AttentionParams.from_parameter_set(params, stage)


@dataclass
class BlockState:
    """Intermediate values of one cstf_block call."""

    inputs: List[PatchTokens]  # Z^{L-1}
    normalized: List[PatchTokens] = field(default_factory=list)
    enriched: List[Optional[PatchTokens]] = field(default_factory=list)  # T^'
    spatial: List[Optional[PatchTokens]] = field(default_factory=list)  # SCA output
    fused: List[PatchTokens] = field(default_factory=list)  # T^''
    outputs: List[PatchTokens] = field(default_factory=list)
    attention_weights: List[Tensor] = field(default_factory=list)


def scaled_attention(
    query: Tensor, key: Tensor, value: Tensor, weights_out: Optional[List[Tensor]] = None
) -> Tensor:
    """Softmax(Q K^T / sqrt(C~)) V over (..., P, C~) inputs."""
    if query.shape[-2] == 0 or key.shape[-2] == 0:
        raise ShapeError(f"attention needs at least one token, got Q {query.shape} K {key.shape}")
    if query.shape[-1] != key.shape[-1] or key.shape[-2] != value.shape[-2]:
        raise ShapeError(f"attention shapes do not agree: Q {query.shape} K {key.shape} V {value.shape}")
    width = query.shape[-1]
    if width < 1:
        raise ShapeError(f"attention width must be >= 1, got {query.shape}")
    scores = matmul(query, swap_last(key)) / math.sqrt(width)
    weights = softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(weights)
    return matmul(weights, value)


def _check_stage_alignment(tokens: Sequence[PatchTokens], params: Sequence[AttentionParams]) -> None:
    if len(tokens) != len(params):
        raise ContractError(f"{len(tokens)} token stages but {len(params)} parameter stages")
    counts = {t.num_tokens for t in tokens}
    if len(counts) != 1:
        raise ContractError(f"token counts differ across stages: {[t.num_tokens for t in tokens]}")
    dims = {p.attention_dim for p in params}
    if len(dims) != 1:
        raise ContractError(f"projection widths differ across stages: {sorted(dims)}")


def channel_cross_attention(
    tokens: Sequence[PatchTokens],
    params: Sequence[AttentionParams],
    weights_out: Optional[List[Tensor]] = None,
) -> List[PatchTokens]:
    """CA: per-stage attention outputs are summed over stages and projected back to each width."""
    _check_stage_alignment(tokens, params)
    total = None
    for stage_tokens, p in zip(tokens, params):
        x = stage_tokens.tokens
        if x.shape[-1] != p.channels:
            raise ShapeError(f"stage {p.stage_index} tokens {x.shape} vs projection {p.ca_query.shape}")
        attended = scaled_attention(
            linear(x, p.ca_query), linear(x, p.ca_key), linear(x, p.ca_value), weights_out
        )
        total = attended if total is None else total + attended
    return [PatchTokens(t.stage_index, linear(total, p.ca_out)) for t, p in zip(tokens, params)]


def spatial_cross_attention(
    tokens: PatchTokens, params: AttentionParams, weights_out: Optional[List[Tensor]] = None
) -> PatchTokens:
    """SCA: new Q', K', V' from the stage's own tokens, attention, then W_up back to C_i."""
    x = tokens.tokens
    if x.shape[-1] != params.channels:
        raise ShapeError(f"SCA tokens {x.shape} do not match projection {params.sca_query.shape}")
    attended = scaled_attention(
        linear(x, params.sca_query), linear(x, params.sca_key), linear(x, params.sca_value), weights_out
    )
    return PatchTokens(tokens.stage_index, linear(attended, params.sca_up))


def _mode(mode: Union[str, FusionMode]) -> FusionMode:
    try:
        return FusionMode(mode)
    except ValueError as err:
        raise ConfigError(f"unknown fusion mode: {mode!r}") from err


def fuse(
    ca_out: Optional[PatchTokens],
    sca_out: Optional[PatchTokens],
    original: PatchTokens,
    mode: Union[str, FusionMode],
    params: AttentionParams,
) -> PatchTokens:
    """Residual fusion onto the original tokens.

    sequential expects sca_out to already be SCA(ca_out).
    """
    mode = _mode(mode)
    needs_ca = mode in (FusionMode.CA_ONLY, FusionMode.SUM, FusionMode.CONCAT)
    needs_sca = mode is not FusionMode.CA_ONLY
    if (needs_ca and ca_out is None) or (needs_sca and sca_out is None):
        raise ContractError(f"fusion mode {mode.value} is missing a branch output")
    base = original.tokens
    for branch in (ca_out, sca_out):
        if branch is not None and branch.tokens.shape != base.shape:
            raise ShapeError(f"branch {branch.tokens.shape} does not match original {base.shape}")

    if mode is FusionMode.CA_ONLY:
        fused = base + ca_out.tokens
    elif mode in (FusionMode.SCA_ONLY, FusionMode.SEQUENTIAL):
        fused = base + sca_out.tokens
    elif mode is FusionMode.SUM:
        fused = base + ca_out.tokens + sca_out.tokens
    else:
        joined = concat([ca_out.tokens, sca_out.tokens], axis=-1)
        fused = base + linear(joined, params.cat_weight, params.cat_bias)
    return PatchTokens(original.stage_index, fused)


def cstf_block(
    stages: Sequence[PatchTokens],
    params: Sequence[AttentionParams],
    mode: Union[str, FusionMode] = FusionMode.CONCAT,
    state: Optional[BlockState] = None,
) -> List[PatchTokens]:
    """LN -> CA -> SCA -> fuse -> LN -> GeLU over every stage; output shapes equal input shapes."""
    mode = _mode(mode)
    _check_stage_alignment(stages, params)
    state = state if state is not None else BlockState(inputs=list(stages))
    state.inputs = list(stages)
    weights = state.attention_weights

    normalized = [
        PatchTokens(t.stage_index, layer_norm(t.tokens, p.ln_in_gain, p.ln_in_bias)) for t, p in zip(stages, params)
    ]
    enriched: List[Optional[PatchTokens]] = [None] * len(stages)
    if mode is not FusionMode.SCA_ONLY:
        enriched = channel_cross_attention(normalized, params, weights)

    spatial: List[Optional[PatchTokens]] = [None] * len(stages)
    if mode is FusionMode.SEQUENTIAL:
        spatial = [spatial_cross_attention(e, p, weights) for e, p in zip(enriched, params)]
    elif mode is not FusionMode.CA_ONLY:
        spatial = [spatial_cross_attention(t, p, weights) for t, p in zip(normalized, params)]

    fused = [fuse(e, s, t, mode, p) for e, s, t, p in zip(enriched, spatial, stages, params)]
    outputs = [
        PatchTokens(f.stage_index, gelu(layer_norm(f.tokens, p.ln_out_gain, p.ln_out_bias)))
        for f, p in zip(fused, params)
    ]
    state.normalized, state.enriched, state.spatial = normalized, enriched, spatial
    state.fused, state.outputs = fused, outputs
    return outputs
