# p10_experiments.py
"""
Experiment runners behind the CLI: detector evaluation, the fusion/embedding
ablation grid, the patch-size sweep, the gradient-check suite, the matching
run and a local parameter/FPS profile. Every runner returns a pandas table
(or a small report) and leaves file output to the write_* helpers.
"""
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd

import p1_config as config
from p1_config import ConfigError, FusionMode, MetricConfig, ModelConfig, PatchMode, RunConfig
from p2_tensor_core import (
    ParameterSet,
    Tensor,
    backward,
    current_graph,
    finite_diff_grad,
    gradient_check,
    no_grad,
    precision,
    relative_error,
    tensor_sum,
)
from p3_patching import PatchTokens, embed, stage_patch_size
from p4_attention import (
    AttentionParams,
    channel_cross_attention,
    fuse,
    init_attention_params,
    spatial_cross_attention,
)
from p5_codec import CSTFModel, decoder_stage, model_forward, output_head
from p6_matching import (
    MatchSet,
    descriptors,
    dual_softmax,
    matching_loss,
    mutual_nn,
    recovery_rate,
    similarity_matrix,
)
from p7_evaluation import (
    Detection,
    GroundTruth,
    extract_detections,
    mean_average_precision,
    precision_recall_curve,
    recall_at,
)
from p8_synthetic import (
    SyntheticScene,
    dataset_hash,
    gen_matching_pair,
    gen_synthetic,
    ground_truth,
    stack_images,
)
from p9_training import TrainResult, train, train_matching

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["variant", "map", "recall", "iou", "interp", "seed"]
GRADCHECK_TOLERANCE = {64: 1e-6, 32: 1e-3}
GRADCHECK_STEP = 1e-4


class Variant(NamedTuple):
    name: str
    fusion_mode: FusionMode
    patch_mode: PatchMode


ABLATION_VARIANTS = (
    Variant("CSTF-(CA)", FusionMode.CA_ONLY, PatchMode.AVERAGE_POOL),
    Variant("CSTF-(SCA)", FusionMode.SCA_ONLY, PatchMode.AVERAGE_POOL),
    Variant("CSTF-CA+SCA", FusionMode.SUM, PatchMode.AVERAGE_POOL),
    Variant("CSTF-CA||SCA", FusionMode.CONCAT, PatchMode.AVERAGE_POOL),
    Variant("CSTF-Conv", FusionMode.CONCAT, PatchMode.CONVOLUTIONAL),
    Variant("CSTF-AP", FusionMode.CONCAT, PatchMode.AVERAGE_POOL),
)
SEQUENTIAL_VARIANT = Variant("CSTF-CA-SCA", FusionMode.SEQUENTIAL, PatchMode.AVERAGE_POOL)


def variant_name(model_cfg: ModelConfig) -> str:
    for variant in ABLATION_VARIANTS + (SEQUENTIAL_VARIANT,):
        if variant.fusion_mode == model_cfg.fusion_mode and variant.patch_mode == model_cfg.patch.mode:
            return variant.name
    return f"CSTF-{model_cfg.fusion_mode.value}"


# --- 1. DATA & EVALUATION ---
def make_splits(cfg: RunConfig) -> Tuple[List[SyntheticScene], List[SyntheticScene]]:
    """Train split from `seed`, evaluation split from `seed + 1`."""
    data, model = cfg.data, cfg.model
    common = dict(
        size=model.height,
        density=data.density,
        min_side=data.min_side,
        max_side=data.max_side,
        num_classes=model.num_classes,
        stages=model.stages,
    )
    return (
        gen_synthetic(cfg.seed, data.n_train, **common),
        gen_synthetic(cfg.seed + 1, data.n_eval, **common),
    )


@dataclass
class Evaluation:
    map: float
    recall: float
    detections: List[Detection]
    ground_truth: List[GroundTruth]


def evaluate_detector(model: CSTFModel, scenes: Sequence[SyntheticScene], metric: MetricConfig) -> Evaluation:
    probs = model.predict(stack_images(scenes))
    detections = extract_detections(probs, metric.score_threshold)
    gts = ground_truth(scenes)
    return Evaluation(
        mean_average_precision(detections, gts, metric.iou_threshold, metric.interpolation),
        recall_at(detections, gts, metric.iou_threshold),
        detections,
        gts,
    )


def metrics_row(name: str, evaluation: Evaluation, cfg: RunConfig) -> Dict:
    return {
        "variant": name,
        "map": evaluation.map,
        "recall": evaluation.recall,
        "iou": cfg.metric.iou_threshold,
        "interp": cfg.metric.interpolation,
        "seed": cfg.seed,
    }


# --- 2. ABLATION ---
def _with_model(cfg: RunConfig, **updates) -> RunConfig:
    patch_updates = updates.pop("patch", {})
    model_data = cfg.model.model_dump()
    model_data.update(updates)
    model_data["patch"].update(patch_updates)
    return cfg.model_copy(update={"model": config.make_config(**model_data)})


def run_variant(
    cfg: RunConfig, variant: Variant, train_scenes: Sequence[SyntheticScene], eval_scenes: Sequence[SyntheticScene]
) -> Dict:
    """Trains one variant from the shared seed and evaluates it."""
    variant_cfg = _with_model(cfg, fusion_mode=variant.fusion_mode, patch={"mode": variant.patch_mode})
    result = train(variant_cfg, train_scenes)
    evaluation = evaluate_detector(result.model, eval_scenes, cfg.metric)
    logger.info(
        "%s: mAP %.4f recall %.4f (final loss %.4f)",
        variant.name,
        evaluation.map,
        evaluation.recall,
        result.final_loss,
    )
    row = metrics_row(variant.name, evaluation, cfg)
    row.update({"final_loss": result.final_loss, "steps": result.steps_run})
    return row


def run_ablation(cfg: RunConfig, sequential: bool = False, workers: int = 1) -> pd.DataFrame:
    """One row per variant, all trained on the same split and seed.

    Variants sharing a configuration (CSTF-AP and CSTF-CA||SCA) are trained
    once and reported under each name. With workers > 1 the distinct runs go
    to a thread pool; rows keep variant order.
    """
    variants = list(ABLATION_VARIANTS) + ([SEQUENTIAL_VARIANT] if sequential else [])
    train_scenes, eval_scenes = make_splits(cfg)
    split_hash = dataset_hash(train_scenes + eval_scenes)

    distinct: Dict[Tuple[FusionMode, PatchMode], Variant] = {}
    for variant in variants:
        distinct.setdefault((variant.fusion_mode, variant.patch_mode), variant)
    runs = list(distinct.values())
    logger.info("Ablation over %d variants (%d runs), data hash %s", len(variants), len(runs), split_hash)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_variant, cfg, v, train_scenes, eval_scenes) for v in runs]
            results = [f.result() for f in futures]
    else:
        results = [run_variant(cfg, v, train_scenes, eval_scenes) for v in runs]
    by_config = {(v.fusion_mode, v.patch_mode): row for v, row in zip(runs, results)}

    rows = [dict(by_config[(v.fusion_mode, v.patch_mode)], variant=v.name) for v in variants]
    table = pd.DataFrame(rows)
    table["data_hash"] = split_hash
    reference = config.REFERENCE_ABLATION_MAP
    table["ref_hrsc2016"] = [reference.get(v.name, {}).get("hrsc2016", np.nan) for v in variants]
    table["ref_dota"] = [reference.get(v.name, {}).get("dota", np.nan) for v in variants]
    return table


# --- 3. PATCH-SIZE SWEEP ---
def sweep_grid(patch_size: int, model_cfg: ModelConfig) -> Optional[int]:
    """Token grid for a reference patch side: side = P * H / 64 pixels, g = round(H / side),
    capped at the deepest CSTF stage resolution. None when no valid grid exists."""
    if patch_size < 1:
        return None
    side = patch_size * model_cfg.height / config.SWEEP_REFERENCE_SIZE
    grid = int(np.floor(model_cfg.height / side + 0.5))
    deepest = min(model_cfg.stage_shape(model_cfg.stages)[1:])
    grid = min(grid, deepest)
    return grid if grid >= 1 else None


def patch_size_sweep(cfg: RunConfig, sizes: Sequence[int] = config.SWEEP_PATCH_SIZES) -> pd.DataFrame:
    train_scenes, eval_scenes = make_splits(cfg)
    rows = []
    for size in sizes:
        grid = sweep_grid(size, cfg.model)
        try:
            if grid is None:
                raise ConfigError(f"no token grid for patch size {size}")
            size_cfg = _with_model(cfg, patch={"token_grid": grid, "base_patch_size": size})
        except ConfigError as err:
            message = f"Skipping patch size {size}: {err}"
            logger.warning(message)
            warnings.warn(message, RuntimeWarning)
            continue
        result = train(size_cfg, train_scenes)
        evaluation = evaluate_detector(result.model, eval_scenes, cfg.metric)
        reference = config.REFERENCE_SWEEP_MAP.get(size, {})
        rows.append(
            {
                "patch_size": size,
                "token_grid": grid,
                "num_tokens": grid * grid,
                "stage_patch_sizes": "/".join(
                    str(stage_patch_size(size, i)) for i in range(1, cfg.model.stages + 1)
                ),
                "map": evaluation.map,
                "recall": evaluation.recall,
                "final_loss": result.final_loss,
                "ref_hrsc2016": reference.get("hrsc2016", np.nan),
                "ref_dota": reference.get("dota", np.nan),
            }
        )
        logger.info("Patch size %d (g=%d): mAP %.4f", size, grid, evaluation.map)
    return pd.DataFrame(
        rows,
        columns=[
            "patch_size",
            "token_grid",
            "num_tokens",
            "stage_patch_sizes",
            "map",
            "recall",
            "final_loss",
            "ref_hrsc2016",
            "ref_dota",
        ],
    )


# --- 4. GRADIENT CHECKS ---
def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(out * weights)


def _gradcheck_cases(seed: int) -> List[Tuple[str, object, Dict[str, Tensor]]]:
    """(operation, scalar loss closure, tensors to check) on small random inputs."""
    rng = np.random.default_rng(seed)
    cases = []
    num_tokens, widths, dim = 4, (3, 5), 4

    params = ParameterSet()
    params.uniform("embed.1.weight", (4, 3), 3, rng)
    params.uniform("embed.1.bias", (4,), 3, rng)
    raw = Tensor(rng.normal(size=(num_tokens, 3)), requires_grad=True)
    w = rng.normal(size=(num_tokens, 4))
    cases.append(
        (
            "embed",
            lambda: _weighted_sum(embed(PatchTokens(1, raw), params).tokens, w),
            {"tokens": raw, "weight": params["embed.1.weight"], "bias": params["embed.1.bias"]},
        )
    )

    attn = ParameterSet()
    stage_params = [init_attention_params(attn, i + 1, c, dim, rng) for i, c in enumerate(widths)]
    for name in attn.names("cstf."):
        if name.endswith("bias") or name.endswith("gain"):
            attn.assign(name, rng.normal(size=attn[name].shape))
    tokens = [Tensor(rng.normal(size=(num_tokens, c)), requires_grad=True) for c in widths]
    stages = [PatchTokens(i + 1, t) for i, t in enumerate(tokens)]
    w_ca = [rng.normal(size=(num_tokens, c)) for c in widths]

    def ca_loss():
        out = channel_cross_attention(stages, stage_params)
        return sum((_weighted_sum(o.tokens, wi) for o, wi in zip(out, w_ca)), Tensor(0.0))

    p1: AttentionParams = stage_params[0]
    cases.append(
        (
            "channel_cross_attention",
            ca_loss,
            {"T1": tokens[0], "T2": tokens[1], "W_Q1": p1.ca_query, "W_V2": stage_params[1].ca_value},
        )
    )
    cases.append(
        (
            "spatial_cross_attention",
            lambda: _weighted_sum(spatial_cross_attention(stages[0], p1).tokens, w_ca[0]),
            {"T1": tokens[0], "W_Q'": p1.sca_query, "W_K'": p1.sca_key, "W_up": p1.sca_up},
        )
    )
    ca_in = Tensor(rng.normal(size=(num_tokens, 3)), requires_grad=True)
    sca_in = Tensor(rng.normal(size=(num_tokens, 3)), requires_grad=True)
    for mode in FusionMode:
        checked = {"original": tokens[0]}
        if mode is not FusionMode.SCA_ONLY and mode is not FusionMode.SEQUENTIAL:
            checked["ca"] = ca_in
        if mode is not FusionMode.CA_ONLY:
            checked["sca"] = sca_in
        if mode is FusionMode.CONCAT:
            checked["cat.weight"] = p1.cat_weight

        def fuse_loss(mode=mode):
            out = fuse(PatchTokens(1, ca_in), PatchTokens(1, sca_in), stages[0], mode, p1)
            return _weighted_sum(out.tokens, w_ca[0])

        cases.append((f"fuse[{mode.value}]", fuse_loss, checked))

    dec = ParameterSet()
    dec.uniform("decoder.1.conv.weight", (2, 3, 3, 3), 27, rng)
    dec.uniform("decoder.1.conv.bias", (2,), 27, rng)
    dec.add("decoder.1.ln.gain", rng.normal(size=2))
    dec.add("decoder.1.ln.bias", rng.normal(size=2))
    dec.uniform("head.weight", (3, 2, 1, 1), 2, rng)
    dec.uniform("head.bias", (3,), 2, rng)
    deeper = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    skip = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    w_dec = rng.normal(size=(2, 4, 4))
    w_head = rng.normal(size=(3, 4, 4))
    cases.append(
        (
            "decoder_stage",
            lambda: _weighted_sum(decoder_stage(deeper, skip, dec, 1), w_dec),
            {
                "D_next": deeper,
                "skip": skip,
                "conv.weight": dec["decoder.1.conv.weight"],
                "ln.gain": dec["decoder.1.ln.gain"],
            },
        )
    )
    cases.append(
        (
            "output_head",
            lambda: _weighted_sum(output_head(skip, dec), w_head),
            {"D1": skip, "head.weight": dec["head.weight"], "head.bias": dec["head.bias"]},
        )
    )

    desc_a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    desc_b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    gt = [(0, 1), (2, 0), (3, 4)]
    cases.append(
        (
            "matching_loss",
            lambda: matching_loss(dual_softmax(similarity_matrix(desc_a, desc_b, 0.5)), gt),
            {"desc_a": desc_a, "desc_b": desc_b},
        )
    )

    model_cfg = config.make_config(
        stages=2, channels=[3, 4, 5], height=16, width=16, attention_dim=4, patch={"token_grid": 2}
    )
    model = CSTFModel(model_cfg, seed=seed)
    image = Tensor(rng.uniform(size=(1, 16, 16)), requires_grad=True)
    w_out = rng.normal(size=(2, 16, 16))
    cases.append(
        (
            "model_forward",
            lambda: _weighted_sum(model_forward(image, model.params, model_cfg).probabilities, w_out),
            {
                "image": image,
                "encoder.1.conv.weight": model.params["encoder.1.conv.weight"],
                "embed.2.weight": model.params["embed.2.weight"],
                "cstf.1.ca.query": model.params["cstf.1.ca.query"],
                "cstf.2.sca.up": model.params["cstf.2.sca.up"],
                "decoder.1.conv.weight": model.params["decoder.1.conv.weight"],
                "head.weight": model.params["head.weight"],
            },
        )
    )
    return cases


def _low_precision_errors(seed: int, bits: int) -> List[Tuple[str, str, float]]:
    """backward() at `bits` against a 64-bit central-difference oracle on the same seeded case."""
    with precision(64):
        oracle_cases = _gradcheck_cases(seed)
    with precision(bits):
        cases = _gradcheck_cases(seed)
    results = []
    for (operation, loss_fn, tensors), (_, oracle_fn, oracle_tensors) in zip(cases, oracle_cases):
        with precision(bits):
            for tensor in tensors.values():
                tensor.zero_grad()
            current_graph().reset()
            backward(loss_fn())
        with precision(64):
            for name, tensor in oracle_tensors.items():
                numeric = finite_diff_grad(lambda _: oracle_fn(), tensor, GRADCHECK_STEP)
                results.append((operation, name, relative_error(tensors[name].grad, numeric.data)))
    return results


def run_gradient_checks(seeds: Sequence[int] = range(5), bits: int = 64) -> pd.DataFrame:
    """backward() against central differences for every parameterized operation."""
    if bits not in GRADCHECK_TOLERANCE:
        raise ConfigError(f"gradient checks run at 32 or 64 bits, got {bits}")
    rows = []
    for seed in seeds:
        if bits == 64:
            with precision(64):
                results = [
                    (operation, name, error)
                    for operation, loss_fn, tensors in _gradcheck_cases(seed)
                    for name, error in gradient_check(loss_fn, tensors, GRADCHECK_STEP).items()
                ]
        else:
            results = _low_precision_errors(seed, bits)
        for operation, name, error in results:
            rows.append(
                {
                    "operation": operation,
                    "seed": seed,
                    "tensor": name,
                    "bits": bits,
                    "rel_error": error,
                    "passed": error < GRADCHECK_TOLERANCE[bits],
                }
            )
    return pd.DataFrame(rows, columns=["operation", "seed", "tensor", "bits", "rel_error", "passed"])


# --- 5. MATCHING ---
@dataclass
class MatchingReport:
    matches: MatchSet
    recovery: float
    planted: List[Tuple[int, int]]
    training: TrainResult


def run_matching(cfg: RunConfig) -> MatchingReport:
    """Trains on a planted-shift pair and extracts mutual nearest neighbors."""
    grid = cfg.model.patch.token_grid
    pair = gen_matching_pair(cfg.seed, cfg.model.height, grid, tuple(cfg.matching.shift_cells))
    result = train_matching(cfg, pair)
    with no_grad():
        desc = descriptors(result.model, pair.stacked())
        confidence = dual_softmax(similarity_matrix(desc[0], desc[1], cfg.matching.temperature))
    matches = mutual_nn(confidence, cfg.matching.threshold, cfg.matching.temperature)
    recovery = recovery_rate(matches, pair.planted)
    logger.info("Matching: %d mutual matches, %.1f%% of planted pairs recovered", len(matches), 100 * recovery)
    return MatchingReport(matches, recovery, pair.planted, result)


# --- 6. PROFILE ---
def profile_model(model: CSTFModel, batch: int = 1, repeats: int = 5) -> Dict:
    """Parameter count and wall-clock forward FPS of the local model; not comparable to benchmark numbers."""
    cfg = model.cfg
    images = np.random.default_rng(0).uniform(size=(batch, cfg.in_channels, cfg.height, cfg.width))
    model.predict(images)
    start = time.perf_counter()
    for _ in range(repeats):
        model.predict(images)
    elapsed = time.perf_counter() - start
    return {
        "params": model.parameter_count(),
        "fps": batch * repeats / elapsed if elapsed > 0 else float("inf"),
        "ref_params_m": config.REFERENCE_EFFICIENCY["params_m"],
        "ref_fps": config.REFERENCE_EFFICIENCY["fps"],
        "comparable": False,
    }


# --- 7. FILE OUTPUT ---
def write_table(table: pd.DataFrame, path: str, columns: Optional[Sequence[str]] = None) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    (table[list(columns)] if columns else table).to_csv(file_path, index=False)
    logger.info("Wrote %s", file_path)
    return file_path


def write_metrics_csv(table: pd.DataFrame, path: str) -> Path:
    """metrics.csv: exactly variant,map,recall,iou,interp,seed."""
    return write_table(table, path, METRIC_COLUMNS)


def plot_sweep(table: pd.DataFrame, path: str) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(table["patch_size"], 100 * table["map"], marker="o", label="synthetic (this run)")
    ax.plot(table["patch_size"], table["ref_hrsc2016"], marker="s", linestyle="--", label="reference HRSC2016")
    ax.set_xlabel("patch size P^s")
    ax.set_ylabel("mAP (%)")
    ax.set_title("Patch size sweep")
    ax.legend()
    fig.tight_layout()
    fig.savefig(file_path)
    plt.close(fig)
    return file_path


def plot_pr_curve(evaluation: Evaluation, iou_threshold: float, path: str) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for label in sorted({g.label for g in evaluation.ground_truth}):
        precision_values, recall_values = precision_recall_curve(
            [d for d in evaluation.detections if d.label == label],
            [g for g in evaluation.ground_truth if g.label == label],
            iou_threshold,
        )
        ax.step(recall_values, precision_values, where="post", label=f"class {label}")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR curve @ IoU {iou_threshold}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(file_path)
    plt.close(fig)
    return file_path
