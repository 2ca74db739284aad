"""Command-line entry point.

Subcommands: ``prepare`` (dataset adapters -> canonical CSV -> window
cache), ``train`` (one run), ``compare`` (the full method comparison),
``sweep-lambda``, ``sweep-ratio`` and ``report`` (re-emit reports from an
archive). Configuration lives in an INI file (see README for the
grammar); ``--seed``, ``--epochs``, ``--lambda``, ``--alpha``, ``--beta``
and ``--tau`` override it. The dataset root can come from the
``MTDISTILL_DATA_ROOT`` environment variable. Outputs land in a
run-stamped directory unless ``--out`` pins one.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime
import json
import os
import sys
from pathlib import Path

from .data import adapt_public_dataset, save_windows, schema_for, windows_from_csv
from .distill import DistillConfig
from .errors import MTDistillError
from .experiments import (
    DatasetSpec,
    ExperimentConfig,
    LAMBDA_SWEEP_VALUES,
    ModelSpec,
    RATIO_SWEEP_VALUES,
    _archive_run,
    make_cv_splits,
    make_ratio_splits,
    resolve_dataset,
    run_comparison,
    run_id,
    sweep_lambda,
    sweep_train_ratio,
)
from .data import split_and_fold
from .experiments import emit_reports
from .training import METHODS, RunResult, run_training

ENV_DATA_ROOT = "MTDISTILL_DATA_ROOT"


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------


def _parse_trunk(text: str) -> tuple:
    blocks = []
    for part in text.split(","):
        dims = part.strip().split("x")
        if len(dims) != 3:
            raise MTDistillError(f"trunk block must be CHxKxP, got {part!r}")
        blocks.append(tuple(int(v) for v in dims))
    return tuple(blocks)


def load_config(path) -> ExperimentConfig:
    """Read an experiment config from a flat INI file with sections
    [dataset], [model], [train], [distill] and [experiment]."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise MTDistillError(f"config file not found: {path}")

    ds = parser["dataset"] if parser.has_section("dataset") else {}
    dataset = DatasetSpec(
        kind=ds.get("kind", "synth"),
        n_per_class=int(ds.get("n_per_class", 20)),
        num_classes1=int(ds.get("num_classes1", 3)),
        num_classes2=int(ds.get("num_classes2", 2)),
        window_len=int(ds.get("window_len", 100)),
        difficulty=float(ds.get("difficulty", 0.5)),
        data_seed=int(ds.get("data_seed", 0)),
        path=ds.get("path") or None,
        schema_kind=ds.get("schema_kind") or None,
        step=int(ds.get("step", 60)),
    )

    md = parser["model"] if parser.has_section("model") else {}
    model = ModelSpec(
        proj_channels=int(md.get("proj_channels", 32)),
        trunk=_parse_trunk(md.get("trunk", "32x5x2,64x5x2,128x5x2")),
        hidden=int(md.get("hidden", 256)),
        dropout_p=float(md.get("dropout_p", 0.3)),
    )

    tr = parser["train"] if parser.has_section("train") else {}
    di = parser["distill"] if parser.has_section("distill") else {}
    distill = DistillConfig(
        alpha=float(di.get("alpha", 0.5)),
        lam=float(di.get("lambda", 0.5)),
        tau=float(di.get("tau", 3.0)),
        beta=float(di.get("beta", 0.999)),
    )

    ex = parser["experiment"] if parser.has_section("experiment") else {}
    methods = tuple(m.strip() for m in ex.get("methods", ",".join(METHODS)).split(",") if m.strip())
    seeds = tuple(int(s) for s in ex.get("seeds", "0,1,2,3,4").split(","))

    return ExperimentConfig(
        dataset=dataset,
        model=model,
        methods=methods,
        seeds=seeds,
        cv=ex.get("cv", "true").strip().lower() in ("1", "true", "yes"),
        train_ratio=float(ex.get("train_ratio", 0.8)),
        val_share=float(ex.get("val_share", 0.1)),
        split_seed=int(ex.get("split_seed", 0)),
        learning_rate=float(tr.get("learning_rate", 0.001)),
        batch_size=int(tr.get("batch_size", 64)),
        epochs=int(tr.get("epochs", 300)),
        distill=distill,
        sd_dropout_p=float(ex.get("sd_dropout_p", 0.5)),
        out_dir=ex.get("out_dir") or None,
    )


def apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    distill = config.distill
    for name, attr in (("lambda_", "lam"), ("alpha", "alpha"), ("beta", "beta"), ("tau", "tau")):
        value = getattr(args, name, None)
        if value is not None:
            distill = dataclasses.replace(distill, **{attr: value})
    updates = {"distill": distill}
    if getattr(args, "epochs", None) is not None:
        updates["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        updates["batch_size"] = args.batch_size
    if getattr(args, "lr", None) is not None:
        updates["learning_rate"] = args.lr
    if getattr(args, "seed", None) is not None:
        updates["seeds"] = (args.seed,)
    if getattr(args, "methods", None):
        updates["methods"] = tuple(m.strip() for m in args.methods.split(","))
    return dataclasses.replace(config, **updates)


def _out_dir(args, config: ExperimentConfig) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%d-%H%M%S")
        out = Path(config.out_dir or "runs") / stamp
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment config")
    p.add_argument("--seed", type=int, help="replace the seed list with one seed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float, help="distillation weight")
    p.add_argument("--alpha", type=float, help="task weight")
    p.add_argument("--beta", type=float, help="teacher smoothing coefficient")
    p.add_argument("--tau", type=float, help="distillation temperature")
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--out", help="output directory (defaults to a run-stamped one)")


def _config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig(dataset=DatasetSpec())
    return apply_overrides(config, args)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    root = args.root or os.environ.get(ENV_DATA_ROOT)
    if not root:
        print(f"prepare: give --root or set {ENV_DATA_ROOT}", file=sys.stderr)
        return 2
    out = Path(args.out)
    canonical = out / "canonical"
    files = adapt_public_dataset(args.kind, root, canonical, phone_only=args.phone_only)
    print(f"wrote {len(files)} canonical file(s) under {canonical}")
    if not args.no_cache:
        kind = "wisdm-phone" if (args.kind == "wisdm" and args.phone_only) else args.kind
        ds = windows_from_csv(files, schema_for(kind), args.window_len, args.step)
        cache = out / "windows.awc"
        save_windows(ds, cache)
        print(f"cached {len(ds)} windows of length {ds.window_len} to {cache}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    out = _out_dir(args, config)
    env_root = os.environ.get(ENV_DATA_ROOT)
    ds = resolve_dataset(config.dataset, env_root)
    spec = split_and_fold(len(ds), config.split_seed)
    if config.cv:
        splits = make_cv_splits(ds, spec, args.fold)
        fold = args.fold
    else:
        splits = make_ratio_splits(ds, spec, config.train_ratio, config.val_share, config.split_seed)
        fold = None
    seed = config.seeds[0]
    cfg = config.train_config(args.method, seed)
    model_cfg = config.model.config_for(ds)
    rid = run_id(args.method, seed, fold)
    with open(out / f"{rid}.log", "w") as log_stream:
        result = run_training(args.method, model_cfg, splits, cfg, fold=fold, log_stream=log_stream)
    _archive_run(result, model_cfg, out)
    emit_reports([result], out, methods=(args.method,))
    print(f"{rid}: best epoch {result.best_epoch + 1}, test metrics {result.test_metrics}")
    print(f"outputs under {out}")
    return 0


def cmd_compare(args) -> int:
    config = _config_from_args(args)
    out = _out_dir(args, config)
    table, results, failures = run_comparison(config, out_dir=out, env_root=os.environ.get(ENV_DATA_ROOT))
    print(table.to_csv())
    print(f"outputs under {out}")
    if failures:
        print(f"{len(failures)} run(s) failed:", file=sys.stderr)
        for f in failures:
            print(f"  {f['run']}: {f['error']}", file=sys.stderr)
        return 1
    return 0


def cmd_sweep_lambda(args) -> int:
    config = _config_from_args(args)
    out = _out_dir(args, config)
    values = tuple(float(v) for v in args.values.split(",")) if args.values else LAMBDA_SWEEP_VALUES
    rows, _, failures = sweep_lambda(config, values, out_dir=out, env_root=os.environ.get(ENV_DATA_ROOT))
    for row in rows:
        print(row)
    print(f"outputs under {out}")
    return 1 if failures else 0


def cmd_sweep_ratio(args) -> int:
    config = _config_from_args(args)
    out = _out_dir(args, config)
    ratios = tuple(float(v) for v in args.ratios.split(",")) if args.ratios else RATIO_SWEEP_VALUES
    rows, _, failures = sweep_train_ratio(config, ratios, out_dir=out, env_root=os.environ.get(ENV_DATA_ROOT))
    for row in rows:
        print(row)
    print(f"outputs under {out}")
    return 1 if failures else 0


def cmd_report(args) -> int:
    archive = Path(args.archive)
    run_files = sorted((archive / "runs").glob("*.json"))
    if not run_files:
        print(f"report: no run files under {archive / 'runs'}", file=sys.stderr)
        return 2
    results = [RunResult.from_dict(json.loads(f.read_text())) for f in run_files]
    written = emit_reports(results, archive)
    print(f"re-emitted {len(written)} file(s) under {archive}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="adapt a public dataset and cache windows")
    p.add_argument("--kind", required=True, choices=["mhealth", "wisdm", "sleep"])
    p.add_argument("--root", help=f"dataset root (default: ${ENV_DATA_ROOT})")
    p.add_argument("--out", required=True)
    p.add_argument("--phone-only", action="store_true", help="WISDM: keep only the phone stream")
    p.add_argument("--window-len", dest="window_len", type=int, default=100)
    p.add_argument("--step", type=int, default=60)
    p.add_argument("--no-cache", action="store_true", help="skip the window cache")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="one training run")
    p.add_argument("--method", required=True, choices=list(METHODS))
    p.add_argument("--fold", type=int, default=0, help="validation fold when cv is on")
    _add_override_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="methods x seeds (x folds) comparison")
    _add_override_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-lambda", help="sweep the distillation weight")
    p.add_argument("--values", help="comma-separated lambda values")
    _add_override_flags(p)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("sweep-ratio", help="sweep the training fraction (cv off)")
    p.add_argument("--ratios", help="comma-separated training ratios")
    _add_override_flags(p)
    p.set_defaults(func=cmd_sweep_ratio)

    p = sub.add_parser("report", help="re-emit reports from an archive")
    p.add_argument("--archive", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MTDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
