"""
Command-line driver: ``ncnn <command> [options]``.

Commands
--------
generate-data  write a synthetic dataset (PNG images + manifest.jsonl)
train          train every fold, keep the lowest-test-loss checkpoint per fold
sweep          vary one hyperparameter against the baseline, report mean F1 and delta
evaluate       classification metrics per fold, optionally paired against a second run
calibrate      reliability curve, confidence histogram and ECE
explain        Grad-CAM and Integrated Gradients maps for held-out images
report         side-by-side metrics and ECE for several runs

Options can also come from a JSON file given with ``--config``; keys are the
long option names with dashes replaced by underscores, and explicit flags win.
``NCNN_OUTPUT_DIR`` sets the default output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import export_attribution, grad_cam, integrated_gradients
from .data import AugmentationConfig, generate_synthetic, load_manifest, make_folds, write_manifest
from .errors import NcnnError
from .labels import NO_PAIN, PAIN
from .metrics import (
    calibration_curve,
    classification_metrics,
    confidence_histogram,
    paired_t_test,
    read_records,
    write_curve_csv,
    write_histogram_csv,
    write_records,
)
from .model import ModelConfig, classify, load_checkpoint, save_checkpoint
from .training import PRESETS, SWEEPABLE, prediction_records, sweep, train

logger = logging.getLogger("ncnn")

DEFAULT_CANDIDATES = {
    "image_size": "64,120,224",
    "optimizer": "adam,adagrad,rmsprop,sgd",
    "epochs": "50,60,70,80,90,100,110,120",
    "label_smoothing": "0.1,0.3,0.5,nfcs",
    "scheduler": "step,exponential,cosine_annealing",
}
METRIC_NAMES = ("accuracy", "f1", "precision", "recall")


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _default_output(name: str) -> Path:
    return Path(os.environ.get("NCNN_OUTPUT_DIR", "ncnn-runs")) / name


def _sidecar(out: Path, argv, started: float):
    with (out / "run.log").open("a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} ncnn {__version__} argv={argv!r} elapsed={time.time() - started:.1f}s\n")


# ---------------------------------------------------------------------------
# shared option groups


def _add_data_options(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", default="synthetic", help="'synthetic' or a manifest.jsonl path")
    g.add_argument("--subjects", type=int, default=30, help="synthetic subjects")
    g.add_argument("--per-subject", type=int, default=12, help="synthetic images per subject")
    g.add_argument("--image-size", type=int, default=120, help="model input side in pixels")
    g.add_argument("--channels", type=int, choices=(1, 3), default=1)
    g.add_argument("--marker-radius", type=float, default=0.06, help="synthetic marker radius (fraction of side)")
    g.add_argument("--folds", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)


def _add_train_options(p, preset_default="original"):
    g = p.add_argument_group("training")
    g.add_argument("--preset", choices=("original", "tuned", "custom"), default=preset_default)
    g.add_argument("--arch", choices=("reference", "compact"), default="reference")
    g.add_argument("--epochs", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--optimizer", choices=("adam", "adagrad", "rmsprop", "sgd"))
    g.add_argument("--scheduler", choices=("none", "step", "exponential", "cosine_annealing"))
    g.add_argument("--label-smoothing", help="epsilon in [0,1) or 'nfcs'")
    g.add_argument("--dropout", type=float)
    g.add_argument("--augment-count", type=int, default=20, help="augmented copies per training image")
    g.add_argument("--parallel-folds", type=int, default=1)


def _model_config(args) -> ModelConfig:
    build = ModelConfig.reference if args.arch == "reference" else ModelConfig.compact
    mc = build(args.image_size, args.channels)
    if args.dropout is not None:
        mc = mc.replace(dropout_rate=args.dropout)
    mc.geometry()
    return mc


def _train_config(args):
    base = PRESETS["original" if args.preset == "custom" else args.preset]
    changes = {"seed": args.seed}
    for name in ("epochs", "learning_rate", "batch_size", "optimizer", "scheduler"):
        value = getattr(args, name)
        if value is not None:
            changes[name] = value
    if args.label_smoothing is not None:
        text = str(args.label_smoothing).lower()
        if text in ("nfcs", "nfcs_soft"):
            changes.update(label_mode="nfcs_soft", epsilon=0.0)
        else:
            eps = float(text)
            changes.update(label_mode="lsr" if eps > 0 else "hard", epsilon=eps)
    overrides = sorted(k for k in changes if k != "seed")
    return base.replace(**changes), overrides


def _data_spec(args) -> dict:
    if args.data == "synthetic":
        return {
            "kind": "synthetic",
            "subjects": args.subjects,
            "per_subject": args.per_subject,
            "size": args.image_size,
            "channels": args.channels,
            "marker_radius": args.marker_radius,
            "seed": args.seed,
        }
    return {"kind": "manifest", "path": str(args.data), "size": args.image_size, "channels": args.channels}


def _load_data(spec: dict):
    if spec["kind"] == "synthetic":
        return generate_synthetic(spec["subjects"], spec["per_subject"], spec["seed"], spec["size"],
                                  spec["channels"], spec["marker_radius"])
    return load_manifest(spec["path"], spec["size"], spec["channels"])


def _augment_config(args) -> AugmentationConfig:
    return AugmentationConfig(count=args.augment_count)


def _fold_metrics(results_records):
    return [classification_metrics(recs) for recs in results_records]


def _summary(per_fold):
    out = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(m, name) for m in per_fold])
        out[name] = {"mean": float(values.mean()), "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0}
    return out


def _write_run(out: Path, results, manifest: dict, plan):
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "history").mkdir(exist_ok=True)
    records = []
    for r in results:
        save_checkpoint(r.checkpoint, out / "checkpoints" / f"fold_{r.fold:02d}.ckpt")
        with (out / "history" / f"fold_{r.fold:02d}.jsonl").open("w") as fh:
            for h in r.history:
                fh.write(json.dumps(h, sort_keys=True) + "\n")
        records.extend(r.records)
    write_records(records, out / "predictions.jsonl")
    per_fold = _fold_metrics([r.records for r in results])
    metrics = {
        "per_fold": [m.as_dict() for m in per_fold],
        "summary": _summary(per_fold),
        "pooled": classification_metrics(records).as_dict(),
        "checkpoints": [{"fold": r.fold, "epoch": r.checkpoint.epoch, "test_loss": r.checkpoint.test_loss} for r in results],
    }
    (out / "metrics.json").write_text(_dump(metrics))
    (out / "folds.json").write_text(_dump(plan.to_dict()))
    (out / "run_manifest.json").write_text(_dump(manifest))
    return metrics


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(args):
    out = Path(args.output or _default_output("data"))
    samples = generate_synthetic(args.subjects, args.per_subject, args.seed, args.image_size, args.channels, args.marker_radius)
    manifest = write_manifest(samples, out)
    load_manifest(manifest, args.image_size, args.channels)  # must ingest cleanly
    (out / "run_manifest.json").write_text(_dump({"command": "generate-data", "data": _data_spec(args), "images": len(samples)}))
    print(f"wrote {len(samples)} images and {manifest}")
    return out


def cmd_train(args):
    out = Path(args.output or _default_output(f"train-{args.preset}"))
    out.mkdir(parents=True, exist_ok=True)
    mc = _model_config(args)
    tc, overrides = _train_config(args)
    spec = _data_spec(args)
    samples = _load_data(spec)
    plan = make_folds(samples, args.folds, args.seed)
    logger.info("training %d folds, preset %s", plan.fold_count, args.preset)
    results = train(samples, plan, mc, tc, _augment_config(args), args.parallel_folds, {"preset": args.preset})
    manifest = {
        "command": "train",
        "preset": args.preset,
        "overrides": overrides,
        "train_config": tc.as_dict(),
        "model_config": asdict(mc),
        "augmentation": asdict(_augment_config(args)),
        "data": spec,
        "folds": args.folds,
        "seed": args.seed,
        "version": __version__,
    }
    metrics = _write_run(out, results, manifest, plan)
    f1 = metrics["summary"]["f1"]
    print(f"preset={args.preset} epochs={tc.epochs} label_mode={tc.label_mode} epsilon={tc.epsilon} "
          f"scheduler={tc.scheduler} optimizer={tc.optimizer} lr={tc.learning_rate}")
    print(f"mean F1 {f1['mean']:.4f} +/- {f1['std']:.4f} over {plan.fold_count} folds -> {out}")
    return out


def _format_candidate(value):
    return value if isinstance(value, str) else repr(value)


def cmd_sweep(args):
    out = Path(args.output or _default_output(f"sweep-{args.hyperparameter}"))
    out.mkdir(parents=True, exist_ok=True)
    mc = _model_config(args)
    tc, overrides = _train_config(args)
    spec = _data_spec(args)
    samples = _load_data(spec)
    plan = make_folds(samples, args.folds, args.seed)
    candidates = [c for c in (args.candidates or DEFAULT_CANDIDATES[args.hyperparameter]).split(",") if c.strip()]

    def persist(value, results):
        sub = out / "runs" / re.sub(r"[^A-Za-z0-9_.-]", "_", _format_candidate(value))
        sub.mkdir(parents=True, exist_ok=True)
        _write_run(sub, results, {"command": "sweep", "hyperparameter": args.hyperparameter,
                                  "candidate": value, "data": spec, "seed": args.seed}, plan)

    result = sweep(samples, plan, mc, tc, args.hyperparameter, candidates, _augment_config(args),
                   args.parallel_folds, on_result=persist)
    table = result.table()
    summary = {
        "hyperparameter": result.hyperparameter,
        "baseline_value": result.baseline_value,
        "baseline_f1": result.baseline_f1,
        "selected": result.selected_value,
        "rows": [dict(row, per_fold_f1=r.per_fold_f1) for row, r in zip(table, result.rows)],
        "train_config": tc.as_dict(),
        "overrides": overrides,
        "model_config": asdict(mc),
        "augmentation": asdict(_augment_config(args)),
        "data": spec,
        "folds": plan.to_dict(),
    }
    (out / "sweep.json").write_text(_dump(summary))
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["candidate", "f1", "delta_f1", "selected"])
        for row in table:
            w.writerow([_format_candidate(row["candidate"]), f"{row['f1']:.6f}", f"{row['delta_f1']:+.6f}", "yes" if row["selected"] else ""])
    print(f"{args.hyperparameter} (baseline {_format_candidate(result.baseline_value)}, F1 {result.baseline_f1:.4f})")
    print(f"{'candidate':>12} {'F1':>8} {'dF1':>8}  selected")
    for row in table:
        print(f"{_format_candidate(row['candidate']):>12} {row['f1']:8.4f} {row['delta_f1']:+8.4f}  {'*' if row['selected'] else ''}")
    return out


# ----- commands that read a finished run


def _load_run(run_dir):
    run_dir = Path(run_dir)
    manifest_path = run_dir / "run_manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{manifest_path} not found; is {run_dir} a train output?")
    manifest = json.loads(manifest_path.read_text())
    plan_dict = json.loads((run_dir / "folds.json").read_text())
    checkpoints = sorted((run_dir / "checkpoints").glob("fold_*.ckpt"))
    if len(checkpoints) != plan_dict["fold_count"]:
        raise FileNotFoundError(f"{run_dir}: expected {plan_dict['fold_count']} checkpoints, found {len(checkpoints)}")
    return manifest, plan_dict, checkpoints


def _run_records(run_dir):
    """Test-set predictions recomputed from the stored checkpoints, one list per fold."""
    manifest, plan_dict, checkpoints = _load_run(run_dir)
    samples = _load_data(manifest["data"])
    per_fold = []
    for fold, path in enumerate(checkpoints):
        model = load_checkpoint(path)
        test_ids = set(plan_dict["test_subjects"][fold])
        test = [s for s in samples if s.subject_id in test_ids]
        per_fold.append(prediction_records(model, test, fold))
    return per_fold, samples, plan_dict, checkpoints


def cmd_evaluate(args):
    out = Path(args.output or Path(args.run) / "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    fold_records, _, plan_a, _ = _run_records(args.run)
    metrics_a = _fold_metrics(fold_records)
    report = {"run": str(args.run), "per_fold": [m.as_dict() for m in metrics_a], "summary": _summary(metrics_a)}
    rows = [["run", "fold"] + list(METRIC_NAMES)]
    rows += [["a", i] + [repr(getattr(m, n)) for n in METRIC_NAMES] for i, m in enumerate(metrics_a)]
    if args.compare:
        fold_records_b, _, plan_b, _ = _run_records(args.compare)
        if plan_a["test_subjects"] != plan_b["test_subjects"]:
            raise NcnnError("runs were trained on different fold plans; a paired test needs identical folds")
        metrics_b = _fold_metrics(fold_records_b)
        tests = {}
        for name in METRIC_NAMES:
            a = [getattr(m, name) for m in metrics_a]
            b = [getattr(m, name) for m in metrics_b]
            t = paired_t_test(b, a)
            tests[name] = {"delta_mean": float(np.mean(b) - np.mean(a)), **asdict(t)}
        report.update(compare=str(args.compare), compare_per_fold=[m.as_dict() for m in metrics_b],
                      compare_summary=_summary(metrics_b), paired_t_test=tests)
        rows += [["b", i] + [repr(getattr(m, n)) for n in METRIC_NAMES] for i, m in enumerate(metrics_b)]
    (out / "evaluation.json").write_text(_dump(report))
    with (out / "metrics.csv").open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    for name in METRIC_NAMES:
        s = report["summary"][name]
        line = f"{name:>10} {s['mean']:.4f} +/- {s['std']:.4f}"
        if args.compare:
            t = report["paired_t_test"][name]
            line += f"  delta {t['delta_mean']:+.4f}  t={t['t_statistic']:.3f} p={t['p_value']:.4g}"
        print(line)
    return out


def cmd_calibrate(args):
    out = Path(args.output or Path(args.run) / "calibration")
    out.mkdir(parents=True, exist_ok=True)
    fold_records, *_ = _run_records(args.run)
    pooled = [r for recs in fold_records for r in recs]
    report = calibration_curve(pooled, args.bins)
    report.per_fold_ece = {str(i): calibration_curve(recs, args.bins).ece for i, recs in enumerate(fold_records)}
    (out / "calibration.json").write_text(report.to_json() + "\n")
    write_curve_csv(report, out / "calibration_curve.csv")
    write_histogram_csv(confidence_histogram(pooled, args.bins), out / "confidence_histogram.csv", args.bins)
    write_records(pooled, out / "predictions.jsonl")
    print(f"ECE (K={args.bins}, pooled over {len(pooled)} predictions): {report.ece:.4f}")
    return out


def cmd_explain(args):
    out = Path(args.output or Path(args.run) / "explain")
    out.mkdir(parents=True, exist_ok=True)
    _, plan_dict, checkpoints = _load_run(args.run)
    manifest = json.loads((Path(args.run) / "run_manifest.json").read_text())
    samples = _load_data(manifest["data"])
    folds = range(len(checkpoints)) if args.fold is None else [args.fold]
    index = []
    for fold in folds:
        model = load_checkpoint(checkpoints[fold])
        test_ids = set(plan_dict["test_subjects"][fold])
        test = [s for s in samples if s.subject_id in test_ids][: args.count]
        for s in test:
            dist = model.predict(s.image)
            target = classify(dist) if args.target == "predicted" else args.target
            stem = re.sub(r"[^A-Za-z0-9_.-]", "_", s.key or s.subject_id)
            for method, amap in (
                ("gradcam", grad_cam(model, s.image, target)),
                ("ig", integrated_gradients(model, s.image, target, steps=args.steps)),
            ):
                name = f"fold{fold:02d}_{stem}_{method}_{target}_conf{float(dist[1]):.4f}"
                paths = export_attribution(amap, s.image, out / name)
                index.append({
                    "fold": fold, "key": s.key, "method": method, "target_class": target,
                    "true_label": s.hard_label, "confidence_pain": float(dist[1]),
                    "flag": amap.flag, "files": sorted(p.name for p in paths.values()),
                })
    (out / "explain_index.json").write_text(_dump(index))
    print(f"wrote {len(index)} attribution maps to {out}")
    return out


def cmd_report(args):
    out = Path(args.output or _default_output("report"))
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for run in args.runs:
        fold_records, *_ = _run_records(run)
        pooled = [r for recs in fold_records for r in recs]
        per_fold = _fold_metrics(fold_records)
        runs.append({"run": str(run), "summary": _summary(per_fold), "ece": calibration_curve(pooled, args.bins).ece,
                     "_f": per_fold})
    lines = ["| run | accuracy | F1 | precision | recall | ECE |", "|---|---|---|---|---|---|"]
    for r in runs:
        cells = [f"{r['summary'][n]['mean'] * 100:.2f}% +/- {r['summary'][n]['std'] * 100:.0f}%" for n in METRIC_NAMES]
        lines.append(f"| {r['run']} | " + " | ".join(cells) + f" | {r['ece']:.3f} |")
    if len(runs) >= 2:
        a, b = runs[0]["_f"], runs[1]["_f"]
        deltas = []
        for n in METRIC_NAMES:
            t = paired_t_test([getattr(m, n) for m in b], [getattr(m, n) for m in a])
            deltas.append(f"{(runs[1]['summary'][n]['mean'] - runs[0]['summary'][n]['mean']) * 100:+.2f}% (p={t.p_value:.3g})")
        lines.append("| delta | " + " | ".join(deltas) + f" | {runs[1]['ece'] - runs[0]['ece']:+.3f} |")
    for r in runs:
        r.pop("_f")
    (out / "report.json").write_text(_dump(runs))
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return out


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="ncnn", description="Train and audit N-CNN-style pain classifiers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--output", "-o", help="output directory")
        p.set_defaults(func=func)
        commands[name] = p
        return p

    p = add("generate-data", cmd_generate_data, "write a synthetic dataset")
    _add_data_options(p)

    p = add("train", cmd_train, "train all folds")
    _add_data_options(p)
    _add_train_options(p)

    p = add("sweep", cmd_sweep, "one-at-a-time hyperparameter sweep")
    _add_data_options(p)
    _add_train_options(p)
    p.add_argument("--hyperparameter", required=True, choices=SWEEPABLE)
    p.add_argument("--candidates", help="comma-separated values; default is the full search space")

    p = add("evaluate", cmd_evaluate, "classification metrics and paired t-test")
    p.add_argument("--run", required=True)
    p.add_argument("--compare", help="second run directory for a paired comparison")

    p = add("calibrate", cmd_calibrate, "reliability curve, histogram and ECE")
    p.add_argument("--run", required=True)
    p.add_argument("--bins", type=int, default=10)

    p = add("explain", cmd_explain, "Grad-CAM and Integrated Gradients maps")
    p.add_argument("--run", required=True)
    p.add_argument("--fold", type=int)
    p.add_argument("--count", type=int, default=3, help="test images per fold")
    p.add_argument("--steps", type=int, default=256, help="Integrated Gradients steps")
    p.add_argument("--target", choices=("predicted", PAIN, NO_PAIN), default=PAIN)

    p = add("report", cmd_report, "compare runs side by side")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--bins", type=int, default=10)
    return parser, commands


def parse_args(argv):
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            defaults = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        sub = commands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            sub.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        out = args.func(args)
    except (NcnnError, OSError, ValueError) as exc:
        print(f"ncnn {args.command}: error: {exc}", file=sys.stderr)
        return 1
    _sidecar(Path(out), argv, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
