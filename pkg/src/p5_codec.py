# p5_codec.py
"""
The fully convolutional encoder-decoder around the CSTF skip pathway.

Encoder (n+1 stages) -> patch tokens for stages 1..n -> cstf_block ->
tokens_to_map -> skips Z_i = E_i + map_i -> decoder chain (upsample, conv
block, skip residual) -> 1x1 output head with a per-pixel softmax.

CSTFModel bundles a ModelConfig with its ParameterSet and handles the
.npz checkpoint format.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

import p1_config as config
from p1_config import ConfigError, ContractError, ModelConfig, ShapeError
from p2_tensor_core import (
    ArrayLike,
    ParameterSet,
    Tensor,
    as_tensor,
    conv2d,
    gelu,
    layer_norm,
    no_grad,
    reshape,
    resize_nearest,
    softmax,
    swap_last,
    upsample_nearest,
)
from p3_patching import PatchTokens, StageFeatures, init_patching_params, patch_embed
from p4_attention import AttentionParams, BlockState, cstf_block, init_attention_params

logger = logging.getLogger(__name__)


@dataclass
class DecoderState:
    """D~_i per decoder stage (index 0 is stage 1), the skips Z_i, and the class map O."""

    decoded: List[Tensor] = field(default_factory=list)
    skips: List[Tensor] = field(default_factory=list)
    probabilities: Optional[Tensor] = None


@dataclass
class ModelOutput:
    probabilities: Tensor  # (..., K, H, W)
    logits: Tensor
    features: List[StageFeatures]
    tokens: List[PatchTokens]  # cstf_block outputs, stages 1..n
    block: BlockState
    decoder: DecoderState


# --- 1. PARAMETERS ---
def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> ParameterSet:
    """Fan-in scaled uniform weights, zero biases, unit LN gains."""
    params = ParameterSet()
    n, widths = cfg.stages, cfg.channels

    params.uniform("encoder.1.conv.weight", (widths[0], cfg.in_channels, 3, 3), cfg.in_channels * 9, rng)
    params.zeros("encoder.1.conv.bias", (widths[0],))
    for stage in range(2, n + 2):
        c_in, c_out = widths[stage - 2], widths[stage - 1]
        params.uniform(f"encoder.{stage}.down.weight", (c_out, c_in, 3, 3), c_in * 9, rng)
        params.zeros(f"encoder.{stage}.down.bias", (c_out,))
        params.uniform(f"encoder.{stage}.conv.weight", (c_out, c_out, 3, 3), c_out * 9, rng)
        params.zeros(f"encoder.{stage}.conv.bias", (c_out,))

    init_patching_params(params, [cfg.stage_shape(i) for i in range(1, n + 1)], cfg.patch, rng)
    for stage in range(1, n + 1):
        init_attention_params(params, stage, widths[stage - 1], cfg.attention_dim, rng)

    for stage in range(1, n + 1):
        c_in, c_out = widths[stage], widths[stage - 1]
        params.uniform(f"decoder.{stage}.conv.weight", (c_out, c_in, 3, 3), c_in * 9, rng)
        params.zeros(f"decoder.{stage}.conv.bias", (c_out,))
        params.ones(f"decoder.{stage}.ln.gain", (c_out,))
        params.zeros(f"decoder.{stage}.ln.bias", (c_out,))

    params.uniform("head.weight", (cfg.num_classes, widths[0], 1, 1), widths[0], rng)
    params.zeros("head.bias", (cfg.num_classes,))
    return params


def attention_params(params: ParameterSet, cfg: ModelConfig) -> List[AttentionParams]:
    return [AttentionParams.from_parameter_set(params, stage) for stage in range(1, cfg.stages + 1)]


# --- 2. ENCODER ---
def encoder_forward(image: ArrayLike, params: ParameterSet, cfg: ModelConfig) -> List[StageFeatures]:
    """Stage 1 is conv3x3 -> GeLU at full resolution; each later stage downsamples with a
    stride-2 conv3x3 -> GeLU, then conv3x3 -> GeLU."""
    image = as_tensor(image)
    expected = (cfg.in_channels, cfg.height, cfg.width)
    if image.ndim < 3 or image.shape[-3:] != expected:
        raise ShapeError(f"image shape {image.shape} does not match configured {expected}")

    x = gelu(conv2d(image, params["encoder.1.conv.weight"], params["encoder.1.conv.bias"], padding=1))
    stages = [StageFeatures(1, x)]
    for stage in range(2, cfg.stages + 2):
        p = f"encoder.{stage}"
        x = gelu(conv2d(x, params[f"{p}.down.weight"], params[f"{p}.down.bias"], stride=2, padding=1))
        x = gelu(conv2d(x, params[f"{p}.conv.weight"], params[f"{p}.conv.bias"], padding=1))
        stages.append(StageFeatures(stage, x))

    for features in stages:
        shape = cfg.stage_shape(features.stage_index)
        if features.values.shape[-3:] != shape:
            raise ShapeError(f"stage {features.stage_index} produced {features.values.shape}, expected {shape}")
    return stages


# --- 3. TOKENS BACK TO MAPS ---
def tokens_to_map(tokens: PatchTokens, height: int, width: int) -> Tensor:
    """(..., P, C) tokens -> (..., C, g, g) grid -> nearest upsample to (..., C, height, width)."""
    num = tokens.num_tokens
    g = int(math.isqrt(num))
    if g * g != num or num == 0:
        raise ContractError(f"token count {num} is not a square grid")
    if height < g or width < g:
        raise ShapeError(f"target {height}x{width} is smaller than token grid {g}x{g}")

    t = tokens.tokens
    grid = reshape(swap_last(t), (*t.shape[:-2], tokens.channels, g, g))
    if (height, width) == (g, g):
        return grid
    if height % g == 0 and width % g == 0 and height // g == width // g:
        return upsample_nearest(grid, height // g)
    return resize_nearest(grid, height, width)


# --- 4. DECODER ---
def decoder_stage(deeper: Tensor, skip: Tensor, params: ParameterSet, stage: int) -> Tensor:
    """D~_i = GeLU(LN_c(conv3x3(UpSample(D_{i+1})))) + Z_i."""
    p = f"decoder.{stage}"
    weight = params[f"{p}.conv.weight"]
    up = upsample_nearest(deeper, 2)
    expected = (*up.shape[:-3], weight.shape[0], *up.shape[-2:])
    if skip.shape != expected:
        raise ShapeError(f"decoder stage {stage}: skip {skip.shape} does not match upsampled output {expected}")
    x = conv2d(up, weight, params[f"{p}.conv.bias"], padding=1)
    x = layer_norm(x, params[f"{p}.ln.gain"], params[f"{p}.ln.bias"], axis=-3)
    return gelu(x) + skip


def head_logits(decoded: Tensor, params: ParameterSet) -> Tensor:
    return conv2d(decoded, params["head.weight"], params["head.bias"])


def output_head(decoded: Tensor, params: ParameterSet) -> Tensor:
    """1x1 conv followed by a softmax over the class axis."""
    if params["head.weight"].shape[0] < 2:
        raise ConfigError(f"output head needs at least 2 classes, got {params['head.weight'].shape[0]}")
    return softmax(head_logits(decoded, params), axis=-3)


# --- 5. FULL MODEL ---
def encode_tokens(
    image: ArrayLike, params: ParameterSet, cfg: ModelConfig, state: Optional[BlockState] = None
):
    """Encoder, patch embedding and the CSTF block. Returns (features, block outputs, state)."""
    features = encoder_forward(image, params, cfg)
    tokens = [patch_embed(features[i], cfg.patch, params) for i in range(cfg.stages)]
    state = state if state is not None else BlockState(inputs=tokens)
    enhanced = cstf_block(tokens, attention_params(params, cfg), cfg.fusion_mode, state)
    return features, enhanced, state


def model_forward(
    image: ArrayLike, params: ParameterSet, cfg: ModelConfig, state: Optional[BlockState] = None
) -> ModelOutput:
    features, enhanced, state = encode_tokens(image, params, cfg, state)
    decoder = DecoderState()
    for stage_features, stage_tokens in zip(features[: cfg.stages], enhanced):
        token_map = tokens_to_map(stage_tokens, stage_features.height, stage_features.width)
        decoder.skips.append(stage_features.values + token_map)

    d = features[cfg.stages].values
    for stage in range(cfg.stages, 0, -1):
        d = decoder_stage(d, decoder.skips[stage - 1], params, stage)
        decoder.decoded.insert(0, d)

    logits = head_logits(d, params)
    decoder.probabilities = softmax(logits, axis=-3)
    return ModelOutput(decoder.probabilities, logits, features, enhanced, state, decoder)


class CSTFModel:
    """
    A ModelConfig with its parameters. Forward passes accept (C, H, W) or (N, C, H, W).
    """

    def __init__(self, cfg: ModelConfig, seed: int = config.DEFAULT_SEED, params: Optional[ParameterSet] = None):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else init_model_params(cfg, np.random.default_rng(seed))

    def forward(self, images: ArrayLike, state: Optional[BlockState] = None) -> ModelOutput:
        return model_forward(images, self.params, self.cfg, state)

    def predict(self, images: ArrayLike) -> np.ndarray:
        """Class probabilities without recording a graph."""
        with no_grad():
            return self.forward(images).probabilities.numpy()

    def parameter_count(self) -> int:
        return self.params.count()

    # --- Checkpoints ---
    def save(self, path: str) -> Path:
        """Writes an .npz with one array per parameter plus a JSON `__header__` entry."""
        file_path = Path(path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "format": config.CHECKPOINT_FORMAT,
            "version": config.CHECKPOINT_VERSION,
            "model": self.cfg.model_dump(mode="json"),
            "seed": self.seed,
        }
        arrays = self.params.as_arrays()
        with open(file_path, "wb") as handle:
            np.savez(handle, __header__=np.array(json.dumps(header)), **arrays)
        logger.info("Saved %d parameters (%d values) to %s", len(arrays), self.parameter_count(), file_path)
        return file_path

    @classmethod
    def load(cls, path: str) -> "CSTFModel":
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"Checkpoint not found: {file_path}")
        with np.load(file_path, allow_pickle=False) as archive:
            if "__header__" not in archive.files:
                raise ConfigError(f"{file_path} has no __header__ entry")
            header = json.loads(str(archive["__header__"]))
            if header.get("format") != config.CHECKPOINT_FORMAT or header.get("version") != config.CHECKPOINT_VERSION:
                raise ConfigError(
                    f"Unsupported checkpoint {file_path}: format={header.get('format')!r} "
                    f"version={header.get('version')!r}"
                )
            try:
                cfg = ModelConfig.model_validate(header["model"])
            except ValidationError as err:
                raise ConfigError(f"Checkpoint {file_path} has an invalid model config: {err}") from err
            model = cls(cfg, seed=header.get("seed", config.DEFAULT_SEED))
            stored = set(archive.files) - {"__header__"}
            expected = set(model.params)
            if stored != expected:
                missing, extra = sorted(expected - stored), sorted(stored - expected)
                raise ConfigError(f"Checkpoint {file_path} parameter mismatch: missing={missing} extra={extra}")
            for name in model.params:
                model.params.assign(name, archive[name])
        logger.info("Loaded checkpoint %s (%d parameters)", file_path, len(model.params))
        return model
