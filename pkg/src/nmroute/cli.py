"""Command-line entry point: synth, pretrain, train, eval, bench, ablate.

Every command resolves its configuration from an optional JSON file plus
flag overrides (flags win), echoes the resolved config, and writes a copy
into the output directory so results stay reproducible. All randomness
funnels through the single config seed. Commands never modify their input
directories; concurrent runs must target distinct outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import pipeline
from .config import (
    ExperimentConfig,
    apply_override,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .errors import ContractError, FormatError, NmRouteError, ShapeError
from .evalbench import bench_kernels, evaluate, write_bench_csv, write_report_csv
from .training import classifier_accuracy, load_checkpoint, save_checkpoint, write_log_csv


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output directory (created; never an input dir)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--branches", help='branch set, e.g. "1&2&4" or "2:8&4:8"')
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. --set stage2.epochs=10 (repeatable)",
    )


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    d = config_to_dict(cfg)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "branches", None):
        d["branch_set"] = args.branches
    for kv in args.set:
        if "=" not in kv:
            raise FormatError(f"--set expects KEY=VALUE, got {kv!r}")
        key, val = kv.split("=", 1)
        apply_override(d, key, val)
    return config_from_dict(d)


def _prepare_out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.json", cfg)
    print(f"resolved config (seed={cfg.seed}):")
    print(json.dumps(config_to_dict(cfg), sort_keys=True))
    return out


def _load_splits(data_dir):
    d = Path(data_dir)
    if not (d / "train" / "manifest.json").exists():
        raise FileNotFoundError(f"{data_dir}: no dataset found (expected train/manifest.json)")
    return pipeline.read_splits(d)


def _check_dataset_matches(cfg: ExperimentConfig, train) -> None:
    want = cfg.num_classes()
    have = train.manifest.get("num_classes")
    if want > 1 and have != want:
        raise ShapeError(
            f"dataset has {have} difficulty classes but the branch set {cfg.branch_set!r} needs {want}"
        )
    if list(train.degraded.shape[1:2]) != [cfg.data.channels]:
        raise ShapeError(
            f"dataset has {train.degraded.shape[1]} channels, config expects {cfg.data.channels}"
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    train, test = pipeline.synth_datasets(cfg)
    pipeline.write_splits(out / "data", train, test)
    hist = train.manifest["class_histogram"]
    print(f"wrote {len(train)} train / {len(test)} test samples to {out / 'data'}")
    print(f"train class histogram: {hist}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    train, test = _load_splits(args.data)
    _check_dataset_matches(cfg, train)
    classifier, _net = pipeline.build_models(cfg)
    if classifier is None:
        raise ContractError("singleton branch set has no classifier to pretrain")
    log: list = []
    pipeline.run_stage1(cfg, classifier, train, log)
    write_log_csv(out / "train_log.csv", log, cfg.num_classes())
    save_checkpoint(out / "checkpoint", classifier=classifier, meta={"stages": "1", "seed": cfg.seed})
    acc = classifier_accuracy(classifier, test)
    print(f"stage-1 held-out pseudo-label accuracy: {acc:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    train, test = _load_splits(args.data)
    _check_dataset_matches(cfg, train)

    if args.from_scratch:
        classifier, net, log = pipeline.run_training(cfg, train, from_scratch=True)
    elif args.all_stages or cfg.num_classes() == 1:
        classifier, net, log = pipeline.run_training(cfg, train, stages="all")
    else:
        if not args.stage1_ckpt:
            raise ContractError("need --stage1-ckpt (or --all-stages) for stages 2-3")
        ck = Path(args.stage1_ckpt)
        if not (ck / "manifest.json").exists():
            raise FileNotFoundError(f"{args.stage1_ckpt}: checkpoint not found")
        loaded_cls, _n, _o, _r, _m = load_checkpoint(ck)
        if loaded_cls is None:
            raise FormatError(f"{args.stage1_ckpt}: checkpoint holds no classifier")
        classifier, net = pipeline.build_models(cfg)
        classifier.load_state_dict(loaded_cls.state_dict())
        log = []
        pipeline.run_stage2(cfg, classifier, net, train, log)
        pipeline.run_stage3(cfg, classifier, net, train, log)

    write_log_csv(out / "train_log.csv", log, cfg.num_classes())
    save_checkpoint(out / "checkpoint", net=net, classifier=classifier, meta={"seed": cfg.seed})
    if args.svg and cfg.num_classes() > 1:
        pipeline.emit_probability_curves(log, cfg.num_classes(), out / "probability_curves.svg")
    if classifier is not None:
        print(f"final train-set routing accuracy vs pseudo labels: {classifier_accuracy(classifier, train):.4f}")
    print(f"checkpoint written to {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    _train, test = _load_splits(args.data)
    ck = Path(args.ckpt)
    if not (ck / "manifest.json").exists():
        raise FileNotFoundError(f"{args.ckpt}: checkpoint not found")
    classifier, net, _opt, _rng, _meta = load_checkpoint(ck)
    if net is None:
        raise FormatError(f"{args.ckpt}: checkpoint holds no restoration network")
    report = evaluate(classifier, net, test, forced_branch=args.force_branch)
    write_report_csv(out / "eval_report.csv", report)
    if args.svg:
        pipeline.emit_flops_psnr_scatter(report, out / "flops_psnr.svg")
    routed = report.metrics["routed"]["all"]
    print(f"routed PSNR {routed[0]:.3f} dB, SSIM {routed[1]:.4f} over {routed[2]} samples")
    print(f"average FLOPs: {report.average_flops:.3e} ({100 * report.flops_fraction:.1f}% of dense)")
    print(f"routing fractions: {[round(f, 4) for f in report.routing_fractions]}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    sizes = [int(s) for s in args.sizes.split(",")]
    patterns = [tuple(int(v) for v in tok.split(":")) for tok in args.patterns.split(",")]
    rows = bench_kernels(sizes, patterns, repeats=args.repeats, rng=np.random.default_rng(cfg.seed))
    write_bench_csv(out / "bench.csv", rows)
    print(f"wrote {len(rows)} benchmark rows to {out / 'bench.csv'} (equivalence gates passed)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg)
    type_sets = [tok.strip() for tok in args.type_sets.split(",") if tok.strip()]
    sigmas = list(cfg.data.sigmas)
    rows = []
    for tset in type_sets:
        sub = config_from_dict({**config_to_dict(cfg), "branch_set": tset})
        train, test = pipeline.synth_datasets(sub)
        classifier, net, _log = pipeline.run_training(sub, train)
        report = evaluate(classifier, net, test)
        per_sigma = {}
        ps = report.per_sample
        routed_psnr = ps["branch_psnr"][ps["routed_idx"], np.arange(len(test))]
        for s in sigmas:
            sel = test.sigma == s
            per_sigma[s] = float(routed_psnr[sel].mean()) if sel.any() else float("nan")
        rows.append(
            {
                "type": tset,
                **{f"psnr_sigma{int(s)}": per_sigma[s] for s in sigmas},
                "psnr_avg": float(routed_psnr.mean()),
                "flops": report.average_flops,
                "flops_pct": 100.0 * report.flops_fraction,
            }
        )
        print(f"type {tset}: avg PSNR {rows[-1]['psnr_avg']:.3f} dB, FLOPs {rows[-1]['flops_pct']:.1f}%")
    cols = ["type"] + [f"psnr_sigma{int(s)}" for s in sigmas] + ["psnr_avg", "flops", "flops_pct"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(row[c] if isinstance(row[c], str) else f"{row[c]:.6f}" for c in cols))
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmroute",
        description="Difficulty-routed image restoration with dynamic N:M structured sparsity.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a pseudo-labeled degradation dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="stage 1: classifier pretraining on pseudo labels")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from `synth`")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="stages 2-3 from a stage-1 checkpoint (or --all-stages)")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stage1-ckpt", help="checkpoint directory from `pretrain`")
    p.add_argument("--all-stages", action="store_true", help="run stages 1-3 in one go")
    p.add_argument("--from-scratch", action="store_true", help="ablation: combined loss from random init")
    p.add_argument("--svg", action="store_true", help="emit probability-curve SVG")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="routed evaluation report on the test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint directory from `train`")
    p.add_argument("--force-branch", type=int, default=None, help="bypass routing with a fixed branch")
    p.add_argument("--svg", action="store_true", help="emit FLOPs/PSNR scatter SVG")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock kernel benchmark with equivalence gates")
    _add_common(p)
    p.add_argument("--sizes", default="64,128,256")
    p.add_argument("--patterns", default="1:4,2:4,4:4")
    p.add_argument("--repeats", type=int, default=11)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="train/evaluate a sweep of branch sets")
    _add_common(p)
    p.add_argument("--type-sets", default="1,2,4,1&2,1&4,2&4,1&2&4")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as e:
        print(f"error (malformed input): {e}", file=sys.stderr)
        return 2
    except (ContractError, ShapeError) as e:
        print(f"error (invalid configuration or data): {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error (missing file): {e}", file=sys.stderr)
        return 4
    except NmRouteError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
