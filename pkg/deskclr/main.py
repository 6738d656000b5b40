"""
Desk-scale Contrastive Learning (DeskCLR)

Main entry point: wires configuration, data, training, evaluation and the
ablation studies into reproducible command-line runs.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 I/O or file-format error.
"""
import argparse
import csv
import json
import os
import sys
import logging
from dataclasses import replace

from deskclr import __version__
from deskclr.ablation import AXES, run_ablation
from deskclr.checkpoint import load_checkpoint
from deskclr.configuration import Configuration
from deskclr.datasets import load_dataset, save_dataset
from deskclr.errors import ConfigurationError, DeskCLRError
from deskclr.runner import evaluate_encoder, obtain_dataset, run_training, split_dataset

logger = logging.getLogger(__name__)

THREADS_ENV = "ICLR_THREADS"
EXIT_IO_ERROR = 4

DATASET_NAME = "dataset.bin"
EVAL_NAME = "eval.json"
PCA_NAME = "pca_2d.csv"
NEIGHBORS_NAME = "neighbors.json"


def setup_logging(out_dir, level="INFO"):
    """Configure logging for the application."""
    # Create logs directory if it doesn't exist
    log_dir = os.path.join(out_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)

    # Configure logging to file and console
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(log_dir, "deskclr.log")),
            logging.StreamHandler()
        ],
        force=True,
    )
    return logging.getLogger(__name__)


def parse_bool(value):
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"Expected a boolean, got '{value}'")


def thread_cap():
    """Worker count from ICLR_THREADS, default 1."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got '{raw}'") from e
    if threads < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be >= 1, got {threads}")
    return threads


def load_run_config(args):
    """
    Read the configuration file and apply command-line overrides.

    Returns:
        RunConfig: Validated configuration
    """
    config = Configuration(args.config) if getattr(args, "config", None) else Configuration()
    if getattr(args, "seed", None) is not None:
        config.set("run", "seed", args.seed)
    if getattr(args, "out", None):
        config.set("run", "out_dir", args.out)
    if getattr(args, "deterministic", None) is not None:
        config.set("train", "deterministic", args.deterministic)
    run_cfg = config.to_run_config()
    return replace(run_cfg, train=replace(run_cfg.train, threads=thread_cap()))


def cmd_generate_data(args):
    """Generate the synthetic benchmark (or validate an IDX pair) and save it with a JSON sidecar."""
    run_cfg = load_run_config(args)
    setup_logging(run_cfg.out_dir, run_cfg.log_level)
    data_cfg = replace(run_cfg.data, path=None)
    dataset = obtain_dataset(data_cfg, run_cfg.seed)
    dataset.params["seed"] = run_cfg.seed
    path = os.path.join(run_cfg.out_dir, DATASET_NAME)
    save_dataset(dataset, path)
    logger.info(f"Saved {len(dataset)} samples of dimension {dataset.dim} to {path}")
    return 0


def cmd_train(args):
    """Train one run; checkpoints every epoch plus a final one, metrics as JSONL."""
    run_cfg = load_run_config(args)
    setup_logging(run_cfg.out_dir, run_cfg.log_level)
    result, _, _ = run_training(run_cfg, out_dir=run_cfg.out_dir)
    final = result.metrics[-1]
    logger.info(f"Training finished after {final.epoch + 1} epochs, final loss {final.loss_total:.4f}")
    return 0


def _write_pca_csv(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=("id", "pc1", "pc2", "label"))
        writer.writeheader()
        writer.writerows(rows)


def cmd_eval(args):
    """Evaluate a checkpoint on the train/test splits of its dataset."""
    run_cfg = load_run_config(args)
    setup_logging(run_cfg.out_dir, run_cfg.log_level)
    params, bank, state = load_checkpoint(args.checkpoint, omega=run_cfg.train.omega)
    dataset = load_dataset(args.dataset) if args.dataset else obtain_dataset(run_cfg.data, run_cfg.seed)
    train_set, test_set = split_dataset(dataset, run_cfg)

    results = evaluate_encoder(params, bank, state, train_set, test_set, run_cfg.eval)
    os.makedirs(run_cfg.out_dir, exist_ok=True)
    _write_pca_csv(results.pop("pca"), os.path.join(run_cfg.out_dir, PCA_NAME))
    with open(os.path.join(run_cfg.out_dir, NEIGHBORS_NAME), "w") as f:
        json.dump(results.pop("neighbors"), f, indent=4)
    with open(os.path.join(run_cfg.out_dir, EVAL_NAME), "w") as f:
        json.dump(results, f, indent=4, sort_keys=True)
    print(json.dumps(results, sort_keys=True))
    return 0


def cmd_ablate(args):
    """Run one ablation study over the configured seed list."""
    if args.axis not in AXES:
        raise ConfigurationError(f"Unknown ablation axis '{args.axis}', expected one of {', '.join(AXES)}")
    run_cfg = load_run_config(args)
    setup_logging(run_cfg.out_dir, run_cfg.log_level)
    summary = run_ablation(args.axis, run_cfg, run_cfg.out_dir, workers=run_cfg.train.threads)
    for name, mean in summary["means"].items():
        logger.info(f"{args.axis} {name}: mean knn {mean:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="deskclr", description="Desk-scale contrastive representation learning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="Run seed (overrides run.seed)")
        p.add_argument("--out", help="Output directory (overrides run.out_dir)")
        p.add_argument("--deterministic", type=parse_bool, default=None,
                       help="Fixed-order reduction and no wall-clock fields (default true)")

    p = sub.add_parser("generate-data", help="Write the synthetic benchmark or convert an IDX pair")
    common(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="Train an encoder")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="Checkpoint written by 'train'")
    p.add_argument("--dataset", help="Dataset file written by 'generate-data' (default: from config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Run an ablation study")
    common(p)
    p.add_argument("--axis", required=True, help=f"One of: {', '.join(AXES)}")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    """Main entry point for the DeskCLR command line."""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DeskCLRError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=e.exit_code == 1)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
