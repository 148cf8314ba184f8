"""End-to-end experiment orchestration shared by the CLI and the test suite.

Every entry point is a pure function of (config, input artifacts): model
construction, data synthesis, stage ordering, and evaluation all derive
their randomness from the config seed, so identical inputs give
byte-identical outputs.

Singleton branch sets degenerate gracefully: there is nothing to route, so
the classifier is omitted and stages 1 and 3 are skipped; the training
budget is kept comparable by folding the stage-3 epochs into stage 2.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .classifier import Classifier
from .config import ExperimentConfig
from .datasynth import Dataset, read_dataset, read_pnm, synthesize_splits, write_dataset
from .errors import ContractError
from .evalbench import EvalReport, evaluate, write_line_svg, write_report_csv, write_scatter_svg
from .restoration import RestorationNet
from .training import (
    StageConfig,
    classifier_accuracy,
    save_checkpoint,
    stage1_pretrain,
    stage2_train,
    stage3_finetune,
    train_from_scratch,
    write_log_csv,
)


def build_models(cfg: ExperimentConfig) -> tuple[Classifier | None, RestorationNet]:
    """Fresh models from the config seed (classifier omitted for one branch)."""
    rng = np.random.default_rng([cfg.seed, 100])
    branches = cfg.branches()
    net = RestorationNet(
        rng=rng,
        depth=cfg.net.depth,
        width=cfg.net.width,
        in_channels=cfg.data.channels,
        kernel_size=cfg.net.kernel_size,
        branches=branches,
        residual=cfg.net.residual,
        mask_first_last=cfg.net.mask_first_last,
        shared_bn=cfg.shared_bn,
    )
    classifier = None
    if len(branches) > 1:
        classifier = Classifier(cfg.classifier_config(), rng=np.random.default_rng([cfg.seed, 101]))
    return classifier, net


def synth_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    clean_images = None
    if cfg.data.cleans_dir:
        paths = sorted(Path(cfg.data.cleans_dir).glob("*.p[gpn]m"))
        if not paths:
            raise ContractError(f"no PGM/PPM images found in {cfg.data.cleans_dir}")
        clean_images = [read_pnm(p) for p in paths]
    return synthesize_splits(
        seed=cfg.seed,
        sigmas=cfg.data.sigmas,
        num_classes=cfg.num_classes(),
        train_samples=cfg.data.train_samples,
        test_samples=cfg.data.test_samples,
        patch_size=cfg.data.patch_size,
        stride=cfg.data.stride,
        source_size=cfg.data.source_size,
        channels=cfg.data.channels,
        clean_images=clean_images,
    )


def write_splits(directory, train: Dataset, test: Dataset) -> None:
    d = Path(directory)
    write_dataset(d / "train", train)
    write_dataset(d / "test", test)


def read_splits(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    return read_dataset(d / "train"), read_dataset(d / "test")


def run_stage1(cfg: ExperimentConfig, classifier: Classifier, train: Dataset, log: list) -> None:
    rng = np.random.default_rng([cfg.seed, 1])
    stage1_pretrain(classifier, train, cfg.stage1, cfg.optim, rng, log)


def run_stage2(cfg: ExperimentConfig, classifier: Classifier | None, net: RestorationNet,
               train: Dataset, log: list, stage: StageConfig | None = None) -> None:
    rng = np.random.default_rng([cfg.seed, 2])
    stage2_train(classifier, net, train, stage or cfg.stage2, cfg.optim, cfg.loss.lambda_w, rng, log)


def run_stage3(cfg: ExperimentConfig, classifier: Classifier, net: RestorationNet,
               train: Dataset, log: list) -> None:
    rng = np.random.default_rng([cfg.seed, 3])
    stage3_finetune(
        classifier, net, train, cfg.stage3, cfg.optim, cfg.loss.weights(), cfg.loss.lambda_w, rng, log
    )


def run_training(cfg: ExperimentConfig, train: Dataset, *, from_scratch: bool = False,
                 stages: str = "all") -> tuple[Classifier | None, RestorationNet, list[dict]]:
    """Train per config; ``stages`` is "all" or a subset like "23" (stage 1
    must then be restored from a checkpoint by the caller)."""
    classifier, net = build_models(cfg)
    log: list[dict] = []
    if from_scratch:
        if classifier is None:
            raise ContractError("from-scratch training needs a multi-branch config")
        rng = np.random.default_rng([cfg.seed, 4])
        train_from_scratch(classifier, net, train, cfg.scratch_stage(), cfg.optim,
                           cfg.loss.weights(), cfg.loss.lambda_w, rng, log)
        return classifier, net, log
    if classifier is None:
        # singleton branch set: no routing to learn, fold the stage-3 budget in
        merged = StageConfig(cfg.stage2.epochs + cfg.stage3.epochs, cfg.stage2.lr_max,
                             cfg.stage2.lr_min, cfg.stage2.batch_size)
        run_stage2(cfg, None, net, train, log, stage=merged)
        return None, net, log
    if "1" in stages or stages == "all":
        run_stage1(cfg, classifier, train, log)
    if "2" in stages or stages == "all":
        run_stage2(cfg, classifier, net, train, log)
    if "3" in stages or stages == "all":
        run_stage3(cfg, classifier, net, train, log)
    return classifier, net, log


def full_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Synth + train + eval in one sweep; returns summary paths and numbers."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = synth_datasets(cfg)
    write_splits(out / "data", train, test)
    classifier, net, log = run_training(cfg, train)
    write_log_csv(out / "train_log.csv", log, cfg.num_classes())
    save_checkpoint(out / "checkpoint", net=net, classifier=classifier,
                    meta={"stages": "all", "seed": cfg.seed})
    report = evaluate(classifier, net, test)
    write_report_csv(out / "eval_report.csv", report)
    summary = {
        "stage1_holdout_accuracy": classifier_accuracy(classifier, test) if classifier else 1.0,
        "routed_psnr": report.metrics["routed"]["all"][0],
        "flops_fraction": report.flops_fraction,
        "routing_fractions": report.routing_fractions,
    }
    return summary


def emit_probability_curves(log_rows: list[dict], num_classes: int, path) -> None:
    series = {}
    for i in range(num_classes):
        key = f"mean_p_{i}"
        vals = [row[key] for row in log_rows if row.get(key) is not None]
        if vals:
            series[f"p_{i}"] = vals
    write_line_svg(path, series, "Mean routing probability per epoch", "epoch", "mean p_i")


def emit_flops_psnr_scatter(report: EvalReport, path) -> None:
    points = {}
    dense = report.dense_flops
    for i, name in enumerate(report.branch_names):
        points[name] = (report.branch_flops[i] / dense, report.metrics[f"branch_{name}"]["all"][0])
    points["routed"] = (report.flops_fraction, report.metrics["routed"]["all"][0])
    write_scatter_svg(path, points, "Quality vs compute", "FLOPs fraction of dense", "PSNR (dB)")
