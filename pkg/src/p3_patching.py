# p3_patching.py
"""
Turns encoder stage features into a fixed number of patch tokens and embeds them.

Every stage is pooled to the same g x g token grid, so P = g^2 is identical
across stages. The progressive reduction factor P_i^s = P^s / 2^((i-1)/2) is
kept as a formula (stage_patch_size) for the patch-size sweep.
"""
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from p1_config import PatchConfig, PatchMode, ShapeError
from p2_tensor_core import (
    ParameterSet,
    Tensor,
    adaptive_avg_pool2d,
    conv2d,
    linear,
    reshape,
    swap_last,
)


@dataclass
class StageFeatures:
    """Encoder output for 1-based stage i: (..., C_i, H/2^(i-1), W/2^(i-1))."""

    stage_index: int
    values: Tensor

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


@dataclass
class PatchTokens:
    """Token matrix (..., P, C_i) for one stage."""

    stage_index: int
    tokens: Tensor

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]


def stage_patch_size(base_patch_size: int, stage: int) -> int:
    """Progressive reduction factor: round-half-up of P^s / 2^((i-1)/2), never below 1."""
    value = base_patch_size / 2.0 ** ((stage - 1) / 2.0)
    return max(1, int(math.floor(value + 0.5)))


def conv_patch_kernel(height: int, width: int, grid: int):
    """Kernel (= stride) of the patchifying convolution that yields a grid x grid output."""
    return height // grid, width // grid


def partition(features: StageFeatures, cfg: PatchConfig, params: Optional[ParameterSet] = None) -> PatchTokens:
    """Pools a stage map to a g x g grid and flattens it row-major into P = g^2 tokens."""
    g = cfg.token_grid
    if g > features.height or g > features.width:
        raise ShapeError(
            f"token grid {g} exceeds stage {features.stage_index} map {features.height}x{features.width}"
        )
    x = features.values
    if PatchMode(cfg.mode) is PatchMode.CONVOLUTIONAL:
        if params is None:
            raise ShapeError("convolutional partition needs patch parameters")
        prefix = f"patch.{features.stage_index}"
        kh, kw = conv_patch_kernel(features.height, features.width, g)
        if (features.height, features.width) != (g * kh, g * kw):
            x = x[..., : g * kh, : g * kw]
        grid = conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=(kh, kw))
    else:
        grid = adaptive_avg_pool2d(x, g, g)

    lead = grid.shape[:-3]
    flat = reshape(grid, (*lead, features.channels, g * g))
    return PatchTokens(features.stage_index, swap_last(flat))


def embed(tokens: PatchTokens, params: ParameterSet) -> PatchTokens:
    """Pointwise (1x1) channel-mixing projection: tokens @ W^T + b."""
    prefix = f"embed.{tokens.stage_index}"
    weight, bias = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
    if weight.shape[-1] != tokens.channels or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"embed weight {weight.shape} / bias {bias.shape} do not fit tokens {tokens.tokens.shape}"
        )
    return PatchTokens(tokens.stage_index, linear(tokens.tokens, weight, bias))


def patch_embed(features: StageFeatures, cfg: PatchConfig, params: ParameterSet) -> PatchTokens:
    """partition followed by embed, in the mode configured by cfg."""
    return embed(partition(features, cfg, params), params)


def init_patching_params(
    params: ParameterSet,
    stage_shapes: List[tuple],
    cfg: PatchConfig,
    rng: np.random.Generator,
) -> None:
    """Adds embedding (and, in convolutional mode, patch conv) weights for each (C_i, h_i, w_i)."""
    embed_dims = cfg.embed_dims or [shape[0] for shape in stage_shapes]
    for stage, ((channels, height, width), dim) in enumerate(zip(stage_shapes, embed_dims), start=1):
        if PatchMode(cfg.mode) is PatchMode.CONVOLUTIONAL:
            kh, kw = conv_patch_kernel(height, width, cfg.token_grid)
            params.uniform(f"patch.{stage}.weight", (channels, channels, kh, kw), channels * kh * kw, rng)
            params.zeros(f"patch.{stage}.bias", (channels,))
        params.uniform(f"embed.{stage}.weight", (dim, channels), channels, rng)
        params.zeros(f"embed.{stage}.bias", (dim,))
