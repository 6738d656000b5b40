"""
Ablation Module for DeskCLR

Runs the four studies over a seed list: pseudo-label maintenance (online vs
offline), negative sampling strategy, decision margins, and the intra/inter
weight. Each study pins the factors it does not vary:

    labels   -> random sampling, zero margins
    sampling -> online labels, zero margins
    margin   -> online labels, semi-hard sampling, the other branch at 0
    lambda   -> online labels, random sampling, zero margins
"""
import json
import os
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from deskclr.configuration import STRATEGIES, RunConfig
from deskclr.errors import ConfigurationError
from deskclr.evaluation import write_curve_rows
from deskclr.runner import evaluate_encoder, run_training

logger = logging.getLogger(__name__)

AXES = ("labels", "sampling", "margin", "lambda")

INTER_MARGINS = (-0.75, -0.5, -0.25, 0.0, 0.25, 0.5)
INTRA_MARGINS = (-0.5, -0.25, 0.0, 0.25, 0.5)
LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)

FINAL_METRIC = "knn_acc"
CURVE_METRICS = ("loss_total", "loss_intra", "loss_inter", "label_churn", "knn_acc", "nmi")


def _with(run_cfg, strategy=None, label_mode=None, m_intra=None, m_inter=None, lam=None):
    train = run_cfg.train
    loss = replace(
        train.loss,
        m_intra=train.loss.m_intra if m_intra is None else m_intra,
        m_inter=train.loss.m_inter if m_inter is None else m_inter,
        lam=train.loss.lam if lam is None else lam,
    )
    sampling = train.sampling if strategy is None else replace(train.sampling, strategy=strategy)
    train = replace(
        train,
        loss=loss,
        sampling=sampling,
        label_mode=train.label_mode if label_mode is None else label_mode,
    )
    return replace(run_cfg, train=train)


def variants(axis, base: RunConfig):
    """
    The variant grid of one study.

    Args:
        axis (str): labels | sampling | margin | lambda
        base (RunConfig): Configuration supplying everything the study does not pin

    Returns:
        list: (variant name, RunConfig) pairs in report order
    """
    if axis == "labels":
        pinned = _with(base, strategy="random", m_intra=0.0, m_inter=0.0)
        cadence = base.train.offline_cadence_epochs
        return [
            ("online", _with(pinned, label_mode="online")),
            (f"offline_E{cadence}", _with(pinned, label_mode="offline")),
        ]
    if axis == "sampling":
        pinned = _with(base, label_mode="online", m_intra=0.0, m_inter=0.0)
        return [(strategy, _with(pinned, strategy=strategy)) for strategy in STRATEGIES]
    if axis == "margin":
        pinned = _with(base, label_mode="online", strategy="semi_hard")
        grid = [(f"m_inter={m:g}", _with(pinned, m_intra=0.0, m_inter=m)) for m in INTER_MARGINS]
        grid += [(f"m_intra={m:g}", _with(pinned, m_intra=m, m_inter=0.0)) for m in INTRA_MARGINS]
        return grid
    if axis == "lambda":
        pinned = _with(base, label_mode="online", strategy="random", m_intra=0.0, m_inter=0.0)
        return [(f"lambda={lam:g}", _with(pinned, lam=lam)) for lam in LAMBDAS]
    raise ConfigurationError(f"Unknown ablation axis '{axis}', expected one of {', '.join(AXES)}")


def run_cell(variant, run_cfg):
    """
    Train and evaluate one (variant, seed) cell.

    Returns:
        dict: variant, seed, per-epoch curve rows and the final evaluation scores
    """
    result, train_set, test_set = run_training(run_cfg)
    scores = evaluate_encoder(result.params, result.bank, result.state, train_set, test_set, run_cfg.eval)
    curves = [
        {"epoch": record.epoch, "metric": metric, "value": getattr(record, metric),
         "variant": variant, "seed": run_cfg.seed}
        for record in result.metrics
        for metric in CURVE_METRICS
    ]
    return {
        "variant": variant,
        "seed": run_cfg.seed,
        "final_epoch": result.metrics[-1].epoch,
        "scores": {key: scores[key] for key in ("knn_acc", "linear_probe_acc", "nmi")},
        "curves": curves,
    }


def _run_cell_args(args):
    return run_cell(*args)


def _mean(cells, variant):
    values = [c["scores"][FINAL_METRIC] for c in cells if c["variant"] == variant]
    return float(np.mean(values)) if values else None


def directional_checks(axis, cells, base):
    """
    Compare variant means against the expected ordering for an axis.

    Gated checks pass or fail on the ordering of means; the sampling check is
    reported and flagged only.
    """
    means = {name: _mean(cells, name) for name in dict.fromkeys(c["variant"] for c in cells)}
    checks = []

    def compare(name, better, worse, gated=True):
        left, right = means.get(better), means.get(worse)
        if left is None or right is None:
            return
        checks.append({"check": name, "better": better, "worse": worse, "better_mean": left,
                       "worse_mean": right, "passed": left >= right, "gated": gated})

    if axis == "lambda":
        compare("intra_inter_vs_intra_only", "lambda=0.75", "lambda=1")
    elif axis == "labels":
        compare("online_vs_offline", "online", f"offline_E{base.train.offline_cadence_epochs}")
    elif axis == "margin":
        compare("negative_vs_positive_inter_margin", "m_inter=-0.5", "m_inter=0.5")
    elif axis == "sampling":
        ranking = sorted(means, key=lambda name: -means[name])
        checks.append({"check": "semi_hard_ranked_first", "ranking": ranking,
                       "means": means, "passed": ranking[0] == "semi_hard", "gated": False})
    return means, checks


def run_ablation(axis, base: RunConfig, out_dir, workers=1):
    """
    Run one study over every configured seed and write its reports.

    Writes ``ablation_<axis>.csv`` (one final-metric row per variant and seed),
    ``ablation_<axis>_curves.csv`` (per-epoch rows) and
    ``ablation_<axis>_summary.json`` (variant configs, means and checks).

    Returns:
        dict: The summary written to JSON
    """
    grid = variants(axis, base)
    jobs = [(name, cfg.with_seed(seed)) for name, cfg in grid for seed in base.seeds]
    logger.info(f"Ablation '{axis}': {len(grid)} variants x {len(base.seeds)} seeds")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell_args, jobs))
    else:
        cells = [run_cell(name, cfg) for name, cfg in jobs]

    os.makedirs(out_dir, exist_ok=True)
    final_rows = [
        {"epoch": c["final_epoch"], "metric": FINAL_METRIC, "value": c["scores"][FINAL_METRIC],
         "variant": c["variant"], "seed": c["seed"]}
        for c in cells
    ]
    write_curve_rows(final_rows, os.path.join(out_dir, f"ablation_{axis}.csv"))
    write_curve_rows([row for c in cells for row in c["curves"]],
                     os.path.join(out_dir, f"ablation_{axis}_curves.csv"))

    means, checks = directional_checks(axis, cells, base)
    for check in checks:
        if not check["passed"]:
            level = logging.WARNING if check["gated"] else logging.INFO
            logger.log(level, f"Ablation check '{check['check']}' did not hold")
    summary = {
        "axis": axis,
        "seeds": list(base.seeds),
        "variants": {name: cfg.to_dict() for name, cfg in grid},
        "means": means,
        "scores": [{"variant": c["variant"], "seed": c["seed"], **c["scores"]} for c in cells],
        "checks": checks,
    }
    with open(os.path.join(out_dir, f"ablation_{axis}_summary.json"), "w") as f:
        json.dump(summary, f, indent=4, sort_keys=True)
    return summary
