# p8_synthetic.py
"""
Desk-scale stand-in data: bright axis-aligned rectangles on a noise
background for detection, and a textured image with a whole-cell circular
shift of itself for matching.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from p1_config import ConfigError
from p7_evaluation import Box, GroundTruth

logger = logging.getLogger(__name__)

BACKGROUND_RANGE = (0.0, 0.3)
OBJECT_RANGE = (0.5, 1.0)
MAX_COVERAGE = 0.5
PLACEMENT_ATTEMPTS = 100


@dataclass
class SceneObject:
    box: Box
    label: int


@dataclass
class SyntheticScene:
    """Grayscale image (1, H, W) in [0, 1] and its labelled boxes."""

    image: np.ndarray
    objects: List[SceneObject] = field(default_factory=list)

    @property
    def size(self) -> Tuple[int, int]:
        return self.image.shape[-2], self.image.shape[-1]

    def label_map(self) -> np.ndarray:
        """Per-pixel class index, 0 for background."""
        target = np.zeros(self.size, dtype=np.int64)
        for obj in self.objects:
            x0, y0, x1, y1 = (int(v) for v in obj.box)
            target[y0:y1, x0:x1] = obj.label
        return target


@dataclass
class MatchingPair:
    image_a: np.ndarray
    image_b: np.ndarray
    grid: int
    planted: List[Tuple[int, int]]  # (token index in A, token index in B)

    def stacked(self) -> np.ndarray:
        return np.stack([self.image_a, self.image_b])


def _class_band(label: int, num_classes: int) -> Tuple[float, float]:
    lo, hi = OBJECT_RANGE
    width = (hi - lo) / (num_classes - 1)
    return lo + (label - 1) * width, lo + label * width


def _overlaps(box: Box, placed: Sequence[Box], gap: int = 1) -> bool:
    for other in placed:
        if (
            box.x0 < other.x1 + gap
            and other.x0 < box.x1 + gap
            and box.y0 < other.y1 + gap
            and other.y0 < box.y1 + gap
        ):
            return True
    return False


def gen_synthetic(
    seed: int,
    n_images: int,
    size: int,
    density: float,
    min_side: int = 4,
    max_side: int = 8,
    num_classes: int = 2,
    stages: Optional[int] = None,
) -> List[SyntheticScene]:
    """Object counts are Poisson(density); rectangles never overlap or touch."""
    if stages is not None and size % (2**stages):
        raise ConfigError(f"image size {size} is not divisible by 2^{stages}")
    if density < 0:
        raise ConfigError(f"density must be >= 0, got {density}")
    if not 1 <= min_side <= max_side <= size:
        raise ConfigError(f"object sides [{min_side}, {max_side}] do not fit a {size}x{size} image")
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    mean_area = ((min_side + max_side) / 2.0 + 1) ** 2
    if density * mean_area > MAX_COVERAGE * size * size:
        raise ConfigError(
            f"density {density} with sides [{min_side}, {max_side}] cannot fit in a {size}x{size} image"
        )

    rng = np.random.default_rng(seed)
    scenes = []
    dropped = 0
    for _ in range(n_images):
        image = rng.uniform(*BACKGROUND_RANGE, size=(size, size))
        placed: List[Box] = []
        objects = []
        for _ in range(int(rng.poisson(density))):
            for _ in range(PLACEMENT_ATTEMPTS):
                w, h = (int(v) for v in rng.integers(min_side, max_side + 1, size=2))
                x0 = int(rng.integers(0, size - w + 1))
                y0 = int(rng.integers(0, size - h + 1))
                box = Box(x0, y0, x0 + w, y0 + h)
                if not _overlaps(box, placed):
                    break
            else:
                dropped += 1
                continue
            label = int(rng.integers(1, num_classes))
            image[y0 : y0 + h, x0 : x0 + w] = rng.uniform(*_class_band(label, num_classes))
            placed.append(box)
            objects.append(SceneObject(box, label))
        scenes.append(SyntheticScene(np.clip(image, 0.0, 1.0)[None], objects))
    if dropped:
        logger.warning("Dropped %d objects that found no free space", dropped)
    return scenes


def stack_images(scenes: Sequence[SyntheticScene]) -> np.ndarray:
    return np.stack([s.image for s in scenes])


def scene_targets(scenes: Sequence[SyntheticScene]) -> np.ndarray:
    """(N, H, W) integer class targets."""
    return np.stack([s.label_map() for s in scenes])


def ground_truth(scenes: Sequence[SyntheticScene]) -> List[GroundTruth]:
    return [GroundTruth(i, obj.box, obj.label) for i, scene in enumerate(scenes) for obj in scene.objects]


def dataset_hash(scenes: Sequence[SyntheticScene]) -> str:
    """Short sha256 over image bytes and boxes, for checking that runs share a split."""
    digest = hashlib.sha256()
    for scene in scenes:
        digest.update(np.ascontiguousarray(scene.image, dtype=np.float64).tobytes())
        for obj in scene.objects:
            digest.update(repr((tuple(obj.box), obj.label)).encode("utf-8"))
    return digest.hexdigest()[:16]


def gen_matching_pair(seed: int, size: int, grid: int, shift_cells: Tuple[int, int] = (1, 2)) -> MatchingPair:
    """Image B is image A rolled by whole token cells (dy, dx); token r*g+c in A
    corresponds to ((r+dy) % g)*g + (c+dx) % g in B."""
    if grid < 1 or size % grid:
        raise ConfigError(f"image size {size} is not a multiple of token grid {grid}")
    rng = np.random.default_rng(seed)
    cell = size // grid
    coarse = np.kron(rng.uniform(0.0, 0.6, size=(grid, grid)), np.ones((cell, cell)))
    image_a = np.clip(coarse + rng.uniform(0.0, 0.4, size=(size, size)), 0.0, 1.0)[None]
    dy, dx = shift_cells
    image_b = np.roll(image_a, (dy * cell, dx * cell), axis=(1, 2))
    planted = [
        (r * grid + c, ((r + dy) % grid) * grid + (c + dx) % grid) for r in range(grid) for c in range(grid)
    ]
    return MatchingPair(image_a, image_b, grid, planted)
