# p6_matching.py
"""
Dual-softmax matching head: descriptor similarity, matching confidence,
the classification-style matching loss, and mutual-nearest-neighbor
extraction. Descriptors are the unit-normalized stage-1 CSTF tokens.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import p1_config as config
from p1_config import ConfigError, ContractError, ShapeError
from p2_tensor_core import (
    ArrayLike,
    Tensor,
    as_tensor,
    index,
    l2_normalize,
    log,
    log_softmax,
    matmul,
    softmax,
    swap_last,
)
from p5_codec import CSTFModel, encode_tokens

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]


@dataclass
class ScoreMatrix:
    """S[a, b] = <desc_a[a], desc_b[b]> / temperature."""

    scores: Tensor
    temperature: float

    @property
    def shape(self) -> Tuple[int, int]:
        return self.scores.shape[-2], self.scores.shape[-1]


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    confidence: float


@dataclass
class MatchSet:
    """A partial one-to-one matching between A and B descriptors."""

    num_a: int
    num_b: int
    threshold: float
    temperature: float
    matches: List[Match] = field(default_factory=list)

    def __post_init__(self):
        rows = [m.index_a for m in self.matches]
        cols = [m.index_b for m in self.matches]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ContractError("a match set may use each index at most once per side")

    def __len__(self) -> int:
        return len(self.matches)

    def pairs(self) -> List[Pair]:
        return [(m.index_a, m.index_b) for m in self.matches]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(m.index_a, m.index_b, m.confidence) for m in self.matches],
            columns=["index_a", "index_b", "confidence"],
        )


def similarity_matrix(
    desc_a: ArrayLike, desc_b: ArrayLike, temperature: float = config.DEFAULT_TEMPERATURE
) -> ScoreMatrix:
    desc_a, desc_b = as_tensor(desc_a), as_tensor(desc_b)
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if desc_a.ndim != 2 or desc_b.ndim != 2 or desc_a.shape[1] != desc_b.shape[1]:
        raise ShapeError(f"descriptor widths differ: {desc_a.shape} vs {desc_b.shape}")
    return ScoreMatrix(matmul(desc_a, swap_last(desc_b)) / temperature, temperature)


def dual_softmax(scores: ScoreMatrix) -> Tensor:
    """Row softmax times column softmax, elementwise."""
    s = scores.scores
    return softmax(s, axis=-1) * softmax(s, axis=-2)


def _gt_index(gt_pairs: Sequence[Pair], shape: Tuple[int, int]):
    if len(gt_pairs) == 0:
        raise ContractError("matching_loss needs at least one ground-truth pair")
    rows = np.array([a for a, _ in gt_pairs], dtype=np.int64)
    cols = np.array([b for _, b in gt_pairs], dtype=np.int64)
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= shape[0] or cols.max() >= shape[1]:
        raise ShapeError(f"ground-truth pairs fall outside a {shape[0]}x{shape[1]} score matrix")
    if len(set(rows.tolist())) != rows.size or len(set(cols.tolist())) != cols.size:
        raise ContractError("ground truth may hold at most one pair per row and per column")
    return rows, cols


def matching_loss(confidence: Union[Tensor, ScoreMatrix], gt_pairs: Sequence[Pair]) -> Tensor:
    """Mean negative log confidence over the ground-truth cells.

    Given a ScoreMatrix the log of the dual softmax is taken as the sum of the
    two log-softmaxes, which stays finite when the softmaxes saturate.
    """
    if isinstance(confidence, ScoreMatrix):
        s = confidence.scores
        rows, cols = _gt_index(gt_pairs, confidence.shape)
        log_p = log_softmax(s, axis=-1) + log_softmax(s, axis=-2)
    else:
        confidence = as_tensor(confidence)
        rows, cols = _gt_index(gt_pairs, confidence.shape[-2:])
        log_p = log(confidence)
    picked = index(log_p, (rows, cols))
    return -picked.mean()


def mutual_nn(
    confidence: ArrayLike,
    threshold: float = config.DEFAULT_MATCH_THRESHOLD,
    temperature: float = float("nan"),
) -> MatchSet:
    """Keeps (a, b) when each is the other's argmax and P[a, b] > threshold. Ties go to the lowest index."""
    if not 0.0 <= threshold < 1.0:
        raise ConfigError(f"match threshold must be in [0, 1), got {threshold}")
    p = confidence.numpy() if isinstance(confidence, Tensor) else np.asarray(confidence, dtype=float)
    if p.ndim != 2:
        raise ShapeError(f"mutual_nn expects an A x B matrix, got {p.shape}")
    num_a, num_b = p.shape
    matches = []
    if p.size:
        best_b = np.argmax(p, axis=1)
        best_a = np.argmax(p, axis=0)
        for a in range(num_a):
            b = int(best_b[a])
            if best_a[b] == a and p[a, b] > threshold:
                matches.append(Match(a, b, float(p[a, b])))
    return MatchSet(num_a, num_b, threshold, temperature, matches)


def descriptors(model: CSTFModel, images: ArrayLike) -> Tensor:
    """Unit-normalized stage-1 block output tokens, (..., P, C_1)."""
    _, enhanced, _ = encode_tokens(images, model.params, model.cfg)
    return l2_normalize(enhanced[0].tokens, axis=-1)


def token_keypoints(grid: int, height: int, width: int) -> np.ndarray:
    """Pixel (x, y) center of each cell of a grid x grid token layout, row-major."""
    ys = (np.arange(grid) + 0.5) * height / grid
    xs = (np.arange(grid) + 0.5) * width / grid
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)


def recovery_rate(matches: MatchSet, planted: Sequence[Pair]) -> float:
    if not planted:
        raise ContractError("recovery_rate needs at least one planted pair")
    found = set(matches.pairs())
    return sum(1 for pair in planted if tuple(pair) in found) / len(planted)


def write_matches(matches: MatchSet, path: str) -> Path:
    """First line: A, B, threshold, temperature. Then one `index_a,index_b,confidence` row per match."""
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, "w", encoding="utf-8", newline="") as handle:
        handle.write(
            f"# A={matches.num_a},B={matches.num_b},"
            f"threshold={matches.threshold},temperature={matches.temperature}\n"
        )
        matches.to_frame().to_csv(handle, index=False, float_format="%.6f")
    logger.info("Wrote %d matches to %s", len(matches), file_path)
    return file_path
