"""Command-line entry point: ``evicvr <command> [flags]``.

Exit codes: 0 success, 1 runtime failure (divergence, bad data, IO),
2 usage error. JSON payloads go to stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import plotting, runs
from .data import DataError, FieldSchema, SyntheticConfig, calibrate_shifts, generate_synthetic, load_log, save_log, split
from .losses import PRESETS
from .model import load_checkpoint
from .trainer import (
    ABLATION_ROWS,
    METHODS,
    RunCache,
    TrainConfig,
    TrainingDiverged,
    aggregate,
    evaluate_model,
    run_ablation,
    run_bias_study,
    run_sweep,
    train,
)

log = logging.getLogger("evicvr")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# training options shared by train and the study commands

TRAIN_FLAGS = {
    # flag -> (config key, type, help)
    "--epochs": ("epochs", int, "training epochs (default 5)"),
    "--batch-size": ("batch_size", int, "records per batch (default 8000)"),
    "--lr": ("learning_rate", float, "Adam learning rate (default 1e-3)"),
    "--weight-decay": ("weight_decay", float, "decoupled weight decay (default 1e-6)"),
    "--clip": ("propensity_clip", float, "propensity clip epsilon in (0, 0.5) (default 0.05)"),
    "--transfer-layers": ("transfer_layers", int, "number of teacher/student layer pairs for VIE, 1-3 (default 3)"),
    "--lambda-c": ("lambda_c", float, "CTR loss weight"),
    "--lambda-t": ("lambda_t", float, "teacher CVR loss weight"),
    "--lambda-r": ("lambda_r", float, "student CVR loss weight"),
    "--lambda-i": ("lambda_i", float, "VIE loss weight"),
    "--lambda-g": ("lambda_g", float, "CTCVR loss weight"),
}


def _add_train_options(p: argparse.ArgumentParser, with_method: bool = True, many: bool = False) -> None:
    if many:
        p.add_argument("--data", required=True, type=Path, nargs="+", help="one or more impression log CSVs")
    else:
        p.add_argument("--data", required=True, type=Path, help="impression log CSV")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    if with_method:
        p.add_argument("--method", default=None, help=f"one of {', '.join(METHODS)} (default evi)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="loss-weight preset (default ali-ccp)")
    p.add_argument("--config", type=Path, default=None, help="key=value file with TrainConfig fields; flags override it")
    p.add_argument("--split", type=float, default=0.8, help="train fraction of the log; the rest is held out (default 0.8)")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the train/holdout split (default 0)")
    for flag, (_, kind, text) in TRAIN_FLAGS.items():
        p.add_argument(flag, type=kind, default=None, help=text)


def _train_config(args, **extra) -> TrainConfig:
    if args.config and not args.config.is_file():
        raise UsageError(f"no such config file: {args.config}")
    try:
        values = runs.read_config(args.config) if args.config else {}
    except runs.ConfigError as exc:
        raise UsageError(str(exc)) from None
    if args.preset:
        values.update(PRESETS[args.preset].as_dict())
    for flag, (key, _, _) in TRAIN_FLAGS.items():
        v = getattr(args, flag[2:].replace("-", "_"))
        if v is not None:
            values[key] = v
    if getattr(args, "method", None):
        values["method"] = args.method
    values.update(extra)
    try:
        return runs.config_from_dict(values)
    except runs.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _load(path: Path, schema: FieldSchema | None = None):
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    return load_log(path, schema)


def _split(args):
    ds = _load(args.data)
    tr, ev = split(ds, args.split, args.split_seed)
    meta = {"data": str(args.data), "dataset": ds.name, "split": args.split, "split_seed": args.split_seed}
    return tr, ev, meta


def _run_label(cfg: TrainConfig, kind: str) -> str:
    if kind == "sweep":
        return f"evi[lambda_i={cfg.loss_weights.lambda_i:g},K={cfg.transfer_layers}]"
    return cfg.method


def _write_runs(result_runs, out: Path, meta: dict, kind: str, dataset: str | None = None) -> None:
    seen = set()
    for run in result_runs:
        label = _run_label(run.config, kind)
        key = (label, run.seed)
        if key in seen:
            continue
        seen.add(key)
        sub = out / "runs"
        if dataset:
            sub = sub / dataset
        run_dir = sub / label.replace("[", "-").replace("]", "").replace(",", "-").replace("=", "") / f"seed-{run.seed}"
        runs.write_run(run, run_dir, meta, label=label if kind == "sweep" else None)


# commands

def cmd_gen_data(args) -> int:
    if not (0 < args.ctr < 1 and 0 < args.cvr < 1):
        raise UsageError("--ctr and --cvr must lie strictly inside (0, 1)")
    if args.n < 1:
        raise UsageError("--n must be positive")
    cfg = SyntheticConfig(
        n_records=args.n,
        n_fields=args.fields,
        cardinalities=(args.cardinality,) * args.fields,
        confounder_dim=args.confounder_dim,
        confounder_strength_ctr=args.confounding,
        confounder_strength_cvr=args.confounding,
        seed=args.seed,
    )
    try:
        cfg.validate()
    except DataError as exc:
        raise UsageError(str(exc)) from None
    cfg = calibrate_shifts(cfg, args.ctr, args.cvr)
    ds = generate_synthetic(cfg, name=args.out.stem)
    save_log(ds, args.out)
    summary = ds.summary()
    summary.update(
        {
            "path": str(args.out),
            "seed": args.seed,
            "base_ctr_logit_shift": cfg.base_ctr_logit_shift,
            "base_cvr_logit_shift": cfg.base_cvr_logit_shift,
        }
    )
    log.info("wrote %d records to %s: click rate %.4f, CVR given click %.4f, MNAR gap %.4f",
             len(ds), args.out, summary["click_rate"], summary["conversion_rate_given_click"], summary["mnar_gap"])
    _emit(summary)
    return 0


def cmd_train(args) -> int:
    if args.seed is not None and args.seeds is not None:
        raise UsageError("give either --seed or --seeds")
    cfg = _train_config(args)
    tr, ev, meta = _split(args)
    if args.seeds is None:
        seed = args.seed if args.seed is not None else cfg.seed
        run = train(tr, ev, replace(cfg, seed=seed))
        _emit(runs.write_run(run, args.out, meta))
        return 0
    reports = []
    for seed in args.seeds:
        run = train(tr, ev, replace(cfg, seed=seed))
        reports.append(runs.write_run(run, args.out / f"seed-{seed}", meta))
    agg = aggregate(reports)
    runs.write_json(agg, args.out / "aggregate.json")
    _emit(agg)
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint.is_file():
        raise UsageError(f"no such checkpoint: {args.checkpoint}")
    try:
        model, meta = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = _load(args.data, FieldSchema(model.config.cardinalities))
    if args.holdout:
        if "split" not in meta:
            raise UsageError("checkpoint carries no split information; drop --holdout")
        _, ds = split(ds, meta["split"], meta["split_seed"])
    rep = evaluate_model(model, ds, seed=meta.get("seed", 0), method=meta.get("method", ""))
    _emit({k: runs._clean(v) for k, v in rep.to_dict().items()})
    return 0


def _study_setup(args):
    if not args.seeds:
        raise UsageError("--seeds must list at least one seed")
    return _train_config(args, method="evi")


def cmd_ablation(args) -> int:
    cfg = _study_setup(args)
    datasets, metas = {}, {}
    for path in args.data:
        ds = _load(path)
        if ds.name in datasets:
            raise UsageError(f"dataset name {ds.name!r} given twice")
        datasets[ds.name] = split(ds, args.split, args.split_seed)
        metas[ds.name] = {"data": str(path), "dataset": ds.name, "split": args.split, "split_seed": args.split_seed}
    table, all_runs = run_ablation(datasets, cfg, args.seeds, RunCache())
    for name in datasets:
        _write_runs([r for r in all_runs if r.report.dataset == name], args.out, metas[name], "ablation", name)
    # rows as a list so the variant order survives key sorting
    rows = [{"variant": label, "method": method, "auc": table[label]} for label, method in ABLATION_ROWS]
    study = {"kind": "ablation", "seeds": args.seeds, "rows": rows}
    runs.write_json(study, args.out / "study.json")
    _emit(study)
    return 0


def cmd_bias_study(args) -> int:
    cfg = _study_setup(args)
    tr, ev, meta = _split(args)
    if not ev.has_oracle:
        raise UsageError("bias-study needs a log with oracle columns")
    result, all_runs = run_bias_study(tr, ev, cfg, args.seeds, RunCache())
    _write_runs(all_runs, args.out, meta, "bias")
    study = {"kind": "bias", "seeds": args.seeds, **result}
    runs.write_json(study, args.out / "study.json")
    _emit(study)
    return 0


def cmd_sweep(args) -> int:
    cfg = _study_setup(args)
    if any(k < 1 or k > len(cfg.tower_dims) for k in args.layers):
        raise UsageError(f"--layers values must lie in 1..{len(cfg.tower_dims)}")
    tr, ev, meta = _split(args)
    cells, all_runs = run_sweep(tr, ev, cfg, args.vie_ratios, args.layers, args.seeds, RunCache())
    _write_runs(all_runs, args.out, meta, "sweep")
    study = {"kind": "sweep", "seeds": args.seeds, "cells": cells}
    runs.write_json(study, args.out / "study.json")
    _emit(study)
    return 0


RUN_COLUMNS = ("path", "label", "method", "dataset", "seed", "auc", "nll", "mean_bias",
               "teacher_nonclick_logloss", "scope", "n_eval", "lambda_i", "transfer_layers")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (format(v, ".10g") if isinstance(v, float) else v) for v in row])


def cmd_report(args) -> int:
    if not args.runs.is_dir():
        raise UsageError(f"no such directory: {args.runs}")
    reports = runs.find_reports(args.runs)
    if not reports:
        raise UsageError(f"no runs found under {args.runs}")
    for rep in reports:
        rep.setdefault("label", rep["method"])
    studies = runs.find_studies(args.runs)
    formats = set(args.format or ["csv", "json", "svg"])
    args.out.mkdir(parents=True, exist_ok=True)
    agg = aggregate(reports)
    written = []

    if "csv" in formats:
        _write_csv(args.out / "runs.csv", RUN_COLUMNS, ([r.get(c) for c in RUN_COLUMNS] for r in reports))
        header = ["label", "n_seeds", "auc_mean", "auc_std", "nll_mean", "mean_bias_mean", "teacher_nonclick_logloss_mean"]
        rows = []
        for label, m in agg["methods"].items():
            rows.append([label, m["auc"]["n"], m["auc"]["mean"], m["auc"]["std"], m["nll"]["mean"],
                         m["mean_bias"]["mean"], m["teacher_nonclick_logloss"]["mean"]])
        _write_csv(args.out / "methods.csv", header, rows)
        written += ["runs.csv", "methods.csv"]
        for study in studies:
            if study["kind"] == "ablation":
                names = sorted({d for row in study["rows"] for d in row["auc"]})
                _write_csv(args.out / "ablation.csv", ["variant", "method"] + names,
                           ([row["variant"], row["method"]] + [row["auc"].get(n) for n in names] for row in study["rows"]))
                written.append("ablation.csv")
            elif study["kind"] == "bias":
                rows = [["teacher_nonclick_logloss", k, v["method"], v["mean"], v["std"]] for k, v in study["teacher_nonclick_logloss"].items()]
                rows += [["student_mean_bias", k, v["method"], v["mean"], v["std"]] for k, v in study["student_mean_bias"].items()]
                _write_csv(args.out / "bias.csv", ["metric", "variant", "method", "mean", "std"], rows)
                written.append("bias.csv")
            elif study["kind"] == "sweep":
                _write_csv(args.out / "sweep.csv", ["lambda_i", "transfer_layers", "auc"],
                           ([c["lambda_i"], c["transfer_layers"], c["auc"]] for c in study["cells"]))
                written.append("sweep.csv")
    if "json" in formats:
        runs.write_json({"runs": reports, "aggregate": agg, "studies": studies}, args.out / "summary.json")
        written.append("summary.json")
    if "svg" in formats:
        labels = list(agg["methods"])
        plotting.bar_chart(args.out / "auc.svg", labels, [agg["methods"][k]["auc"]["mean"] for k in labels],
                           [agg["methods"][k]["auc"]["std"] for k in labels], "AUC", "CVR AUC by run group")
        written.append("auc.svg")
        for study in studies:
            if study["kind"] == "bias":
                plotting.bias_figure(args.out / "bias.svg", study)
                written.append("bias.svg")
            elif study["kind"] == "sweep":
                plotting.sweep_figure(args.out / "sweep.svg", study["cells"])
                written.append("sweep.svg")
    _emit({"runs": len(reports), "written": written})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evicvr", description="Entire-space CVR estimation with a click-conditioned teacher.")
    parser.add_argument("--quiet", action="store_true", help="only warnings on stderr; stdout keeps the JSON payload")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic impression log with oracle columns")
    p.add_argument("--out", required=True, type=Path, help="CSV path to write")
    p.add_argument("--n", type=int, default=100_000, help="number of impressions (default 100000)")
    p.add_argument("--seed", type=int, default=0, help="world and sample seed (default 0)")
    p.add_argument("--ctr", type=float, default=0.04, help="target click rate (default 0.04)")
    p.add_argument("--cvr", type=float, default=0.02, help="target conversion rate among clicks (default 0.02)")
    p.add_argument("--confounding", type=float, default=1.1, help="shared-confounder strength in both logits; 0 gives MAR data (default 1.1)")
    p.add_argument("--fields", type=int, default=8, help="number of categorical fields (default 8)")
    p.add_argument("--cardinality", type=int, default=50, help="categories per field (default 50)")
    p.add_argument("--confounder-dim", type=int, default=4, help="latent confounder dimension, at least 3 (default 4)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method on a log; writes a run directory")
    _add_train_options(p)
    p.add_argument("--seed", type=int, default=None, help="single run seed (default 0)")
    p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds; writes seed-N/ dirs plus aggregate.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a log; prints metrics JSON")
    p.add_argument("--checkpoint", required=True, type=Path, help="checkpoint.bin of a run")
    p.add_argument("--data", required=True, type=Path, help="impression log CSV")
    p.add_argument("--holdout", action="store_true", help="evaluate only the held-out part recorded in the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="EVI, EVI without VIE, and EVI without VIE and conditioning")
    _add_train_options(p, with_method=False, many=True)
    p.set_defaults(func=cmd_ablation)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="comma-separated seeds (default 0,1,2,3,4)")

    p = sub.add_parser("bias-study", help="teacher non-click log loss and student mean bias; needs oracle columns")
    _add_train_options(p, with_method=False)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="comma-separated seeds (default 0,1,2,3,4)")
    p.set_defaults(func=cmd_bias_study)

    p = sub.add_parser("sweep", help="EVI AUC over VIE weights x transfer-layer counts")
    _add_train_options(p, with_method=False)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4], help="comma-separated seeds (default 0,1,2,3,4)")
    p.add_argument("--vie-ratios", type=_float_list, default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], help="VIE weights (default 0,0.2,...,1.0)")
    p.add_argument("--layers", type=_int_list, default=[1, 2, 3], help="transfer-layer counts (default 1,2,3)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run directories into CSV/JSON tables and SVG figures")
    p.add_argument("--runs", required=True, type=Path, help="directory searched recursively for report.json")
    p.add_argument("--out", required=True, type=Path, help="directory for tables and figures")
    p.add_argument("--format", choices=["csv", "json", "svg"], action="append", help="output format; repeat for several (default all)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return 1
    except (DataError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
