# p9_training.py
"""
Training loops: SGD with momentum on per-pixel cross-entropy (detection) or
on the dual-softmax matching loss (matching).
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

from p1_config import (
    ConfigError,
    ContractError,
    DivergenceError,
    MatchingConfig,
    OptimizerConfig,
    RunConfig,
    ShapeError,
)
from p2_tensor_core import ParameterSet, Tensor, backward, current_graph, index, log_softmax
from p5_codec import CSTFModel
from p6_matching import descriptors, matching_loss, similarity_matrix
from p8_synthetic import MatchingPair, SyntheticScene, scene_targets, stack_images

logger = logging.getLogger(__name__)


class SGDMomentum:
    """v <- momentum * v + grad; p <- p - lr * v. Parameters without a grad are skipped."""

    def __init__(self, params: ParameterSet, learning_rate: float, momentum: float = 0.9):
        if learning_rate < 0:
            raise ConfigError(f"learning rate must be >= 0, got {learning_rate}")
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += tensor.grad
            tensor.data -= self.learning_rate * v

    def zero_grad(self) -> None:
        self.params.zero_grad()


def pixel_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target]; logits (N, K, H, W), targets (N, H, W)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 4 or targets.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} do not line up")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ShapeError(f"target classes must lie in [0, {logits.shape[1]}), got {targets.min()}..{targets.max()}")
    n, h, w = np.indices(targets.shape)
    picked = index(log_softmax(logits, axis=1), (n, targets, h, w))
    return -picked.mean()


@dataclass
class TrainResult:
    model: CSTFModel
    losses: pd.DataFrame  # columns: step, loss
    steps_run: int
    reached_target: bool

    @property
    def final_loss(self) -> float:
        return float(self.losses["loss"].iloc[-1])


def _optimize(
    model: CSTFModel,
    loss_fn: Callable[[], Tensor],
    opt_cfg: OptimizerConfig,
    learning_rate: Optional[float],
    label: str,
) -> TrainResult:
    lr = opt_cfg.learning_rate if learning_rate is None else learning_rate
    optimizer = SGDMomentum(model.params, lr, opt_cfg.momentum)
    rows: List[dict] = []
    reached = False
    for step in range(1, opt_cfg.steps + 1):
        optimizer.zero_grad()
        loss = loss_fn()
        value = loss.item()
        if not np.isfinite(value):
            current_graph().reset()
            raise DivergenceError(f"{label} loss became {value} at step {step} (learning rate {lr})")
        backward(loss)
        optimizer.step()
        rows.append({"step": step, "loss": value})
        if step == 1 or step % opt_cfg.log_every == 0:
            logger.info("%s step %d loss %.6f", label, step, value)
        if opt_cfg.target_loss is not None and value < opt_cfg.target_loss:
            reached = True
            logger.info("%s reached loss %.6f < %.4g at step %d", label, value, opt_cfg.target_loss, step)
            break
    return TrainResult(model, pd.DataFrame(rows, columns=["step", "loss"]), len(rows), reached)


def train(
    cfg: RunConfig,
    scenes: Sequence[SyntheticScene],
    model: Optional[CSTFModel] = None,
    learning_rate: Optional[float] = None,
) -> TrainResult:
    """Full-batch detection training. `learning_rate` overrides the config (0 is allowed)."""
    if not scenes:
        raise ContractError("train needs at least one scene")
    model = model if model is not None else CSTFModel(cfg.model, seed=cfg.seed)
    images = Tensor(stack_images(scenes))
    targets = scene_targets(scenes)

    def loss_fn() -> Tensor:
        return pixel_cross_entropy(model.forward(images).logits, targets)

    return _optimize(model, loss_fn, cfg.optimizer, learning_rate, "detection")


def train_matching(
    cfg: RunConfig,
    pair: MatchingPair,
    model: Optional[CSTFModel] = None,
    learning_rate: Optional[float] = None,
    matching: Optional[MatchingConfig] = None,
) -> TrainResult:
    """Trains the shared backbone so the dual softmax picks the planted correspondences.

    The step size is `matching.learning_rate` unless `learning_rate` is given.
    """
    matching = matching or cfg.matching
    learning_rate = matching.learning_rate if learning_rate is None else learning_rate
    model = model if model is not None else CSTFModel(cfg.model, seed=cfg.seed)
    images = Tensor(pair.stacked())

    def loss_fn() -> Tensor:
        desc = descriptors(model, images)
        scores = similarity_matrix(desc[0], desc[1], matching.temperature)
        return matching_loss(scores, pair.planted)

    return _optimize(model, loss_fn, cfg.optimizer, learning_rate, "matching")


def write_loss_csv(result: TrainResult, path: str) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    result.losses.to_csv(file_path, index=False)
    return file_path
