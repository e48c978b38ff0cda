# run_cstf.py
"""
CSTF DESK HARNESS
Command-line entry point: train / eval / ablate / sweep / gradcheck / match.

Examples:
    python run_cstf.py train --seed 7 --out ../outputs
    python run_cstf.py ablate --iou 0.7 --interp 11pt --workers 3
    python run_cstf.py gradcheck --precision 32
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

import pandas as pd

# --- 1. SETUP IMPORTS ---
try:
    import p1_config as config
except ImportError:
    print("Error: Could not import p1_config.py.")
    sys.exit(1)

from p1_config import ConfigError, CSTFError, RunConfig, dump_run_config, load_run_config
from p2_tensor_core import set_precision
from p5_codec import CSTFModel
from p6_matching import token_keypoints, write_matches
from p8_synthetic import dataset_hash
from p9_training import train, write_loss_csv
from p10_experiments import (
    evaluate_detector,
    make_splits,
    metrics_row,
    patch_size_sweep,
    plot_pr_curve,
    plot_sweep,
    profile_model,
    run_ablation,
    run_gradient_checks,
    run_matching,
    variant_name,
    write_metrics_csv,
    write_table,
)

# Get the base directory of the current script to resolve relative paths reliably
BASE_DIR = os.path.dirname(os.path.abspath(__file__))

COMMANDS = ("train", "eval", "ablate", "sweep", "gradcheck", "match")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="CSTF encoder-decoder desk harness")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None, help="JSON file with RunConfig fields")
    parser.add_argument("--iou", type=float, choices=(0.5, 0.7), default=None)
    parser.add_argument("--interp", choices=("11pt", "all"), default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--precision", type=int, choices=(32, 64), default=None)
    parser.add_argument("--checkpoint", default=None, help="parameter file for eval (default <out>/params.npz)")
    parser.add_argument("--sequential", action="store_true", help="add the CSTF-CA-SCA row to ablate")
    parser.add_argument("--workers", type=int, default=1, help="threads for ablate")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then CLI flags on top."""
    cfg = load_run_config(args.config) if args.config else RunConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.precision is not None:
        updates["precision"] = args.precision
    metric_updates = {}
    if args.iou is not None:
        metric_updates["iou_threshold"] = args.iou
    if args.interp is not None:
        metric_updates["interpolation"] = args.interp
    if metric_updates:
        updates["metric"] = cfg.metric.model_copy(update=metric_updates)
    cfg = cfg.model_copy(update=updates)
    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1, got {args.workers}")
    return cfg


def output_path(cfg: RunConfig, name: str) -> str:
    out_dir = cfg.output_dir
    if not os.path.isabs(out_dir):
        out_dir = os.path.normpath(os.path.join(BASE_DIR, out_dir))
    return os.path.join(out_dir, name)


def save_resolved_config(cfg: RunConfig) -> None:
    """Keeps the effective settings next to the outputs they produced."""
    dump_run_config(cfg, output_path(cfg, config.RUN_CONFIG_FILE))


# --- 2. COMMANDS ---
def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> None:
    print("\n--- 1. Generating Synthetic Scenes ---")
    train_scenes, eval_scenes = make_splits(cfg)
    print(f"Train: {len(train_scenes)} scenes, Eval: {len(eval_scenes)} scenes, hash {dataset_hash(train_scenes)}")

    print("\n--- 2. Training ---")
    result = train(cfg, train_scenes)
    print(f"Steps: {result.steps_run}, final loss: {result.final_loss:.6f}")
    loss_file = write_loss_csv(result, output_path(cfg, config.LOSS_CSV))
    checkpoint = result.model.save(args.checkpoint or output_path(cfg, config.CHECKPOINT_FILE))

    print("\n--- 3. Evaluating ---")
    evaluation = evaluate_detector(result.model, eval_scenes, cfg.metric)
    table = pd.DataFrame([metrics_row(variant_name(cfg.model), evaluation, cfg)])
    write_metrics_csv(table, output_path(cfg, config.METRICS_CSV))
    print(table.to_string(index=False))
    print(f"\nLoss log: {loss_file}\nCheckpoint: {checkpoint}")


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> None:
    print("\n--- 1. Loading Checkpoint ---")
    model = CSTFModel.load(args.checkpoint or output_path(cfg, config.CHECKPOINT_FILE))
    cfg = cfg.model_copy(update={"model": model.cfg})
    save_resolved_config(cfg)

    print("\n--- 2. Evaluating ---")
    _, eval_scenes = make_splits(cfg)
    evaluation = evaluate_detector(model, eval_scenes, cfg.metric)
    table = pd.DataFrame([metrics_row(variant_name(cfg.model), evaluation, cfg)])
    write_metrics_csv(table, output_path(cfg, config.METRICS_CSV))
    plot_pr_curve(evaluation, cfg.metric.iou_threshold, output_path(cfg, config.PR_CURVE_PNG))
    print(table.to_string(index=False))

    print("\n--- 3. Local Profile (NOT comparable with published Params/FLOPs/FPS) ---")
    profile = profile_model(model)
    print(f"Parameters: {profile['params']:,}  |  Forward FPS: {profile['fps']:.1f}")
    print(f"(Published reference: {profile['ref_params_m']}M params, {profile['ref_fps']} FPS)")


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> None:
    print("\n--- 1. Training All Variants ---")
    table = run_ablation(cfg, sequential=args.sequential, workers=args.workers)
    write_metrics_csv(table, output_path(cfg, config.METRICS_CSV))
    write_table(table, output_path(cfg, config.ABLATION_CSV))

    print("\n--- 2. Ablation Results (reference columns are annotations only) ---")
    print(table[["variant", "map", "recall", "final_loss", "ref_hrsc2016", "ref_dota"]].to_string(index=False))
    print(f"Data split hash: {table['data_hash'].iloc[0]}")


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> None:
    print("\n--- 1. Sweeping Patch Sizes ---")
    table = patch_size_sweep(cfg)
    write_table(table, output_path(cfg, config.SWEEP_CSV))
    if not table.empty:
        plot_sweep(table, output_path(cfg, config.SWEEP_PNG))

    print("\n--- 2. Sweep Results (reference columns are annotations only) ---")
    print(table.to_string(index=False))


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> None:
    print(f"\n--- 1. Gradient Checks ({cfg.precision}-bit) ---")
    table = run_gradient_checks(bits=cfg.precision)
    write_table(table, output_path(cfg, config.GRADCHECK_CSV))
    summary = table.groupby("operation")["rel_error"].max().reset_index(name="max_rel_error")
    print(summary.to_string(index=False))
    failed = table[~table["passed"]]
    if not failed.empty:
        raise CSTFError(f"{len(failed)} gradient checks exceeded tolerance")
    print("\nAll gradient checks passed.")


def cmd_match(cfg: RunConfig, args: argparse.Namespace) -> None:
    print("\n--- 1. Training Matching Head ---")
    report = run_matching(cfg)
    write_loss_csv(report.training, output_path(cfg, "matching_" + config.LOSS_CSV))
    path = write_matches(report.matches, output_path(cfg, config.MATCHES_CSV))

    print("\n--- 2. Mutual Nearest Neighbors ---")
    grid = cfg.model.patch.token_grid
    points = token_keypoints(grid, cfg.model.height, cfg.model.width)
    frame = report.matches.to_frame()
    if not frame.empty:
        frame["dx"] = points[frame["index_b"], 0] - points[frame["index_a"], 0]
        frame["dy"] = points[frame["index_b"], 1] - points[frame["index_a"], 1]
    print(frame.to_string(index=False))
    print(f"\nRecovered {100 * report.recovery:.1f}% of {len(report.planted)} planted pairs -> {path}")


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "match": cmd_match,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution function for the harness."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        set_precision(cfg.precision)

        print("=" * 50)
        print(f"🚀 CSTF harness: {args.command}")
        print(f"Seed: {cfg.seed} | Precision: {cfg.precision}-bit | Output: {output_path(cfg, '')}")
        print("=" * 50)

        save_resolved_config(cfg)
        HANDLERS[args.command](cfg, args)
    except CSTFError as e:
        print(f"[ERROR] {e}")
        return 1
    except Exception as e:  # pylint: disable=broad-exception-caught
        print(f"[CRITICAL ERROR] {type(e).__name__}: {e}")
        return 2

    print("\n" + "=" * 50)
    print(f"✅ {args.command} complete.")
    print("=" * 50)
    return 0


if __name__ == "__main__":
    sys.exit(main())
