# p1_config.py
"""
Central configuration file for model defaults, run settings, output file names,
and the error types shared by every stage of the pipeline.
"""
import json
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator


# --- ERRORS ---
class CSTFError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CSTFError, ValueError):
    """Tensor shapes or dimensions do not fit the operation."""


class ConfigError(CSTFError, ValueError):
    """A configuration value is invalid or a config file cannot be used."""


class ContractError(CSTFError, RuntimeError):
    """A call contract was violated (e.g. non-scalar loss, empty ground truth)."""


class DivergenceError(CSTFError, RuntimeError):
    """Training produced a non-finite loss."""


# --- MODEL DEFAULTS (desk scale) ---
DEFAULT_SEED = 7
DEFAULT_STAGES = 3
DEFAULT_CHANNELS = (8, 16, 32, 32)  # n+1 encoder widths; CSTF runs on the first n
DEFAULT_IMAGE_SIZE = 32
DEFAULT_IN_CHANNELS = 1
DEFAULT_NUM_CLASSES = 2
DEFAULT_TOKEN_GRID = 4  # P = 16 tokens per stage
DEFAULT_BASE_PATCH_SIZE = 21
DEFAULT_ATTENTION_DIM = 16
DEFAULT_PRECISION = 64

# --- LAYER CONSTANTS ---
LAYER_NORM_EPS = 1e-5
GELU_FORM = "erf"

# --- MATCHING ---
DEFAULT_TEMPERATURE = 0.1
DEFAULT_MATCH_THRESHOLD = 0.2
DEFAULT_MATCH_LEARNING_RATE = 0.01

# --- OUTPUT FILES ---
DEFAULT_OUTPUT_DIR = "../outputs"
METRICS_CSV = "metrics.csv"
LOSS_CSV = "loss.csv"
ABLATION_CSV = "ablation.csv"
SWEEP_CSV = "sweep.csv"
GRADCHECK_CSV = "gradcheck.csv"
MATCHES_CSV = "matches.csv"
RUN_CONFIG_FILE = "run_config.json"
CHECKPOINT_FILE = "params.npz"
PR_CURVE_PNG = "pr_curve.png"
SWEEP_PNG = "sweep.png"
CHECKPOINT_FORMAT = "cstf-parameters"
CHECKPOINT_VERSION = 1

# --- PATCH-SIZE SWEEP ---
SWEEP_PATCH_SIZES = (9, 13, 17, 21)
SWEEP_REFERENCE_SIZE = 64  # nominal patch side P maps to P^s * H / SWEEP_REFERENCE_SIZE pixels

# --- PUBLISHED REFERENCE VALUES (annotations only, never asserted) ---
REFERENCE_SWEEP_MAP = {
    9: {"hrsc2016": 88.12, "dota": 87.64},
    13: {"hrsc2016": 89.38, "dota": 89.62},
    17: {"hrsc2016": 90.12, "dota": 90.21},
    21: {"hrsc2016": 90.99, "dota": 90.86},
}
REFERENCE_ABLATION_MAP = {
    "CSTF-(CA)": {"hrsc2016": 89.32, "dota": 89.64},
    "CSTF-(SCA)": {"hrsc2016": 89.86, "dota": 90.01},
    "CSTF-CA+SCA": {"hrsc2016": 91.33, "dota": 91.02},
    "CSTF-CA||SCA": {"hrsc2016": 92.42, "dota": 92.16},
    "CSTF-Conv": {"hrsc2016": 89.31, "dota": 89.25},
    "CSTF-AP": {"hrsc2016": 89.42, "dota": 89.31},
}
REFERENCE_EFFICIENCY = {"params_m": 42.98, "flops_g": 168.09, "fps": 12.5}


class FusionMode(str, Enum):
    """How the CA and SCA branches are combined inside a CSTF block."""

    CA_ONLY = "ca_only"
    SCA_ONLY = "sca_only"
    SUM = "sum"
    CONCAT = "concat"
    SEQUENTIAL = "sequential"


class PatchMode(str, Enum):
    AVERAGE_POOL = "average_pool"
    CONVOLUTIONAL = "convolutional"


# --- CONFIG MODELS ---
class PatchConfig(BaseModel):
    """Token grid and embedding settings shared by every CSTF stage."""

    base_patch_size: int = Field(default=DEFAULT_BASE_PATCH_SIZE, ge=1)
    token_grid: int = Field(default=DEFAULT_TOKEN_GRID, ge=1)
    embed_dims: Optional[List[int]] = None
    mode: PatchMode = PatchMode.AVERAGE_POOL

    @field_validator("embed_dims")
    @classmethod
    def _positive_dims(cls, value):
        if value is not None and any(d < 1 for d in value):
            raise ValueError(f"embed_dims must be positive, got {value}")
        return value

    @property
    def num_tokens(self) -> int:
        return self.token_grid * self.token_grid


class ModelConfig(BaseModel):
    """Encoder-decoder shape settings. `channels` has one width per encoder stage (n+1)."""

    stages: int = Field(default=DEFAULT_STAGES, ge=1)
    channels: List[int] = Field(default_factory=lambda: list(DEFAULT_CHANNELS))
    in_channels: int = Field(default=DEFAULT_IN_CHANNELS, ge=1)
    height: int = Field(default=DEFAULT_IMAGE_SIZE, ge=1)
    width: int = Field(default=DEFAULT_IMAGE_SIZE, ge=1)
    num_classes: int = Field(default=DEFAULT_NUM_CLASSES, ge=2)
    fusion_mode: FusionMode = FusionMode.CONCAT
    attention_dim: int = Field(default=DEFAULT_ATTENTION_DIM, ge=1)
    patch: PatchConfig = Field(default_factory=PatchConfig)

    @model_validator(mode="after")
    def _check_shapes(self):
        n = self.stages
        if len(self.channels) != n + 1:
            raise ValueError(f"channels needs {n + 1} widths for {n} CSTF stages, got {self.channels}")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel widths must be positive, got {self.channels}")
        if self.height % (2**n) or self.width % (2**n):
            raise ValueError(f"input {self.height}x{self.width} must be divisible by 2^{n}")
        deepest = min(self.stage_shape(n)[1:])
        if self.patch.token_grid > deepest:
            raise ValueError(
                f"token_grid {self.patch.token_grid} exceeds stage {n} resolution {self.stage_shape(n)[1:]}"
            )
        dims = self.patch.embed_dims
        if dims is not None and list(dims) != list(self.channels[:n]):
            raise ValueError(f"embed_dims {dims} must equal the CSTF stage widths {self.channels[:n]}")
        return self

    def stage_shape(self, stage: int) -> Tuple[int, int, int]:
        """Encoder feature shape C_i x H/2^(i-1) x W/2^(i-1) for 1-based stage i."""
        scale = 2 ** (stage - 1)
        return (self.channels[stage - 1], self.height // scale, self.width // scale)


class OptimizerConfig(BaseModel):
    learning_rate: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    steps: int = Field(default=300, ge=1)
    target_loss: Optional[float] = None
    log_every: int = Field(default=50, ge=1)


class MetricConfig(BaseModel):
    iou_threshold: Literal[0.5, 0.7] = 0.5
    interpolation: Literal["11pt", "all"] = "all"
    score_threshold: float = Field(default=0.5, ge=0, lt=1)


class DataConfig(BaseModel):
    n_train: int = Field(default=8, ge=1)
    n_eval: int = Field(default=8, ge=1)
    density: float = Field(default=3.0, ge=0)
    min_side: int = Field(default=4, ge=1)
    max_side: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def _side_order(self):
        if self.min_side > self.max_side:
            raise ValueError(f"min_side {self.min_side} > max_side {self.max_side}")
        return self


class MatchingConfig(BaseModel):
    """Matching head settings. `learning_rate` replaces the optimizer step size in matching runs."""

    temperature: float = Field(default=DEFAULT_TEMPERATURE, gt=0)
    threshold: float = Field(default=DEFAULT_MATCH_THRESHOLD, ge=0, lt=1)
    learning_rate: float = Field(default=DEFAULT_MATCH_LEARNING_RATE, gt=0)
    shift_cells: Tuple[int, int] = (1, 2)


class RunConfig(BaseModel):
    """Everything a CLI run needs. JSON config files use these field names."""

    seed: int = DEFAULT_SEED
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    metric: MetricConfig = Field(default_factory=MetricConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    matching: MatchingConfig = Field(default_factory=MatchingConfig)
    output_dir: str = DEFAULT_OUTPUT_DIR
    precision: Literal[32, 64] = DEFAULT_PRECISION


def load_run_config(path: str) -> RunConfig:
    """Loads a RunConfig from a JSON file."""
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigError(f"Config file not found: {file_path}")
    try:
        return RunConfig.model_validate_json(file_path.read_text(encoding="utf-8"))
    except ValidationError as err:
        raise ConfigError(f"Invalid config {file_path}: {err}") from err


def dump_run_config(cfg: RunConfig, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2), encoding="utf-8")


def make_config(**overrides) -> ModelConfig:
    """Builds a ModelConfig, turning pydantic validation failures into ConfigError."""
    try:
        return ModelConfig(**overrides)
    except ValidationError as err:
        raise ConfigError(str(err)) from err
