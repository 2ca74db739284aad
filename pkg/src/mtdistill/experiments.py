"""Experiment orchestration: method comparisons over seeds and folds,
hyperparameter sweeps and report emission.

Every aggregate written to disk is backed by a per-run JSON file in the
same archive, so each table cell can be traced to the runs behind it.
All emitted files are deterministic: re-running a finished experiment
re-emits byte-identical reports.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DataSplits, SplitSpec, WindowedDataset, load_windows, split_and_fold, synth_generate, windows_from_csv
from .distill import DistillConfig
from .errors import ConfigError, DataError
from .metrics import paired_t_test
from .models import MTLNetConfig, save_checkpoint
from .training import METHODS, RunResult, TrainConfig, build_model, run_training

_RATIO_STREAM = 4


@dataclass(frozen=True)
class DatasetSpec:
    """Where the windows come from: a synthetic corpus, a window cache
    file, or a directory of canonical CSVs."""

    kind: str = "synth"  # synth | cache | csv
    n_per_class: int = 20
    num_classes1: int = 3
    num_classes2: int = 2
    window_len: int = 100
    difficulty: float = 0.5
    data_seed: int = 0
    path: Optional[str] = None
    schema_kind: Optional[str] = None
    step: int = 60

    def __post_init__(self):
        if self.kind not in ("synth", "cache", "csv"):
            raise ConfigError(f"dataset kind must be synth, cache or csv, got {self.kind!r}")
        if self.kind in ("cache", "csv") and not self.path:
            raise ConfigError(f"dataset kind {self.kind!r} needs a path")
        if self.kind == "csv" and not self.schema_kind:
            raise ConfigError("csv datasets need a schema_kind (mhealth, wisdm, wisdm-phone, sleep)")


def resolve_dataset(spec: DatasetSpec, env_root: Optional[str] = None) -> WindowedDataset:
    if spec.kind == "synth":
        return synth_generate(
            spec.n_per_class, spec.num_classes1, spec.num_classes2,
            window_len=spec.window_len, seed=spec.data_seed, difficulty=spec.difficulty,
        )
    path = Path(spec.path)
    if not path.is_absolute() and env_root:
        path = Path(env_root) / path
    if spec.kind == "cache":
        return load_windows(path)
    from .data import schema_for

    files = sorted(path.glob("*.csv"))
    if not files:
        raise DataError(f"no canonical CSV files under {path}")
    return windows_from_csv(files, schema_for(spec.schema_kind), spec.window_len, spec.step)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture knobs; class counts and window length come from data."""

    proj_channels: int = 32
    trunk: tuple = ((32, 5, 2), (64, 5, 2), (128, 5, 2))
    hidden: int = 256
    dropout_p: float = 0.3

    def config_for(self, ds: WindowedDataset) -> MTLNetConfig:
        return MTLNetConfig(
            num_classes_task1=ds.num_classes1,
            num_classes_task2=ds.num_classes2,
            window_len=ds.window_len,
            in_rows=ds.windows.shape[2],
            proj_channels=self.proj_channels,
            trunk=self.trunk,
            hidden=self.hidden,
            dropout_p=self.dropout_p,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    methods: tuple = METHODS
    seeds: tuple = (0, 1, 2, 3, 4)
    cv: bool = True
    train_ratio: float = 0.8
    val_share: float = 0.1
    split_seed: int = 0
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 300
    distill: DistillConfig = field(default_factory=DistillConfig)
    sd_dropout_p: float = 0.5
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; valid: {list(METHODS)}")
        if not 0.0 < self.train_ratio <= 1.0:
            raise ConfigError(f"train_ratio must be in (0, 1], got {self.train_ratio}")
        if not 0.0 < self.val_share < 1.0:
            raise ConfigError(f"val_share must be in (0, 1), got {self.val_share}")

    def train_config(self, method: str, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=seed,
            distill=self.distill,
            method=method,
            sd_dropout_p=self.sd_dropout_p,
        )


# ---------------------------------------------------------------------------
# split construction
# ---------------------------------------------------------------------------


def make_cv_splits(ds: WindowedDataset, spec: SplitSpec, fold: int) -> DataSplits:
    """Fold ``fold`` is validation, the other folds train, holdout tests."""
    val_idx = spec.folds[fold]
    train_idx = np.sort(np.concatenate([f for k, f in enumerate(spec.folds) if k != fold]))
    return DataSplits(ds.subset(train_idx), ds.subset(val_idx), ds.subset(spec.test_idx))


def make_ratio_splits(
    ds: WindowedDataset, spec: SplitSpec, train_ratio: float, val_share: float, split_seed: int
) -> DataSplits:
    """Fixed split inside the training pool: ``val_share`` of the pool is
    validation, ``train_ratio`` of the pool is training, rest unused."""
    pool = spec.train_idx
    n_pool = len(pool)
    n_val = int(np.floor(val_share * n_pool))
    n_train = int(np.floor(train_ratio * n_pool))
    if n_val < 1:
        raise DataError(f"validation share {val_share} yields no samples from pool of {n_pool}")
    if n_train < 2:
        raise DataError(f"train_ratio {train_ratio} yields fewer than one batch from pool of {n_pool}")
    if n_val + n_train > n_pool:
        raise ConfigError(
            f"train_ratio {train_ratio} leaves no room for the {val_share:.0%} validation share"
        )
    rng = np.random.default_rng([int(split_seed), _RATIO_STREAM])
    shuffled = rng.permutation(pool)
    val_idx = np.sort(shuffled[:n_val])
    train_idx = np.sort(shuffled[n_val : n_val + n_train])
    return DataSplits(ds.subset(train_idx), ds.subset(val_idx), ds.subset(spec.test_idx))


# ---------------------------------------------------------------------------
# comparison runs
# ---------------------------------------------------------------------------


def run_id(method: str, seed: int, fold: Optional[int]) -> str:
    tag = f"fold{fold}" if fold is not None else "holdout"
    return f"{method}_seed{seed}_{tag}"


@dataclass
class ComparisonTable:
    """Mean +/- std of accuracy and macro-F1 per method, task and split."""

    cells: dict  # (method, task, split) -> dict(acc_mean, acc_std, f1_mean, f1_std, n)
    methods: tuple
    n_runs: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "task", "split", "acc_mean", "acc_std", "f1_mean", "f1_std", "n_runs"])

        def cell(v):
            return "" if v is None else f"{v:.6f}"

        for method in self.methods:
            for task in (1, 2):
                for split in ("val", "test"):
                    c = self.cells.get((method, task, split))
                    if c is None:
                        writer.writerow([method, task, split, "", "", "", "", 0])
                    else:
                        writer.writerow(
                            [method, task, split, cell(c["acc_mean"]), cell(c["acc_std"]),
                             cell(c["f1_mean"]), cell(c["f1_std"]), c["n"]]
                        )
        return buf.getvalue()

    def mean_test_acc(self, method: str, task: int) -> Optional[float]:
        c = self.cells.get((method, task, "test"))
        return None if c is None else c["acc_mean"]


def _aggregate(results: Sequence[RunResult], methods) -> ComparisonTable:
    cells = {}
    for method in methods:
        mine = [r for r in results if r.method == method]
        for task in (1, 2):
            for split in ("val", "test"):
                metrics = [r.val_metrics if split == "val" else r.test_metrics for r in mine]
                accs = [m[f"acc{task}"] for m in metrics if f"acc{task}" in m]
                f1s = [m[f"f1_{task}"] for m in metrics if f"f1_{task}" in m]
                if not accs:
                    continue
                cells[(method, task, split)] = {
                    "acc_mean": float(np.mean(accs)),
                    "acc_std": float(np.std(accs, ddof=1)) if len(accs) >= 2 else None,
                    "f1_mean": float(np.mean(f1s)),
                    "f1_std": float(np.std(f1s, ddof=1)) if len(f1s) >= 2 else None,
                    "n": len(accs),
                }
    return ComparisonTable(cells, tuple(methods), len(results))


def run_comparison(config: ExperimentConfig, out_dir=None, env_root=None):
    """Train every (method, seed[, fold]) combination and aggregate.

    Returns ``(table, results, failures)``; a failed run lands in
    ``failures`` with its cause and leaves its table cells to the
    surviving runs instead of aborting the sweep.
    """
    ds = resolve_dataset(config.dataset, env_root)
    spec = split_and_fold(len(ds), config.split_seed)
    folds = list(range(len(spec.folds))) if config.cv else [None]
    out_dir = Path(out_dir) if out_dir else (Path(config.out_dir) if config.out_dir else None)

    model_cfg = config.model.config_for(ds)
    results: list[RunResult] = []
    failures: list[dict] = []
    for method in config.methods:
        for seed in config.seeds:
            for fold in folds:
                if fold is None:
                    splits = make_ratio_splits(ds, spec, config.train_ratio, config.val_share, config.split_seed)
                else:
                    splits = make_cv_splits(ds, spec, fold)
                cfg = config.train_config(method, seed)
                try:
                    result = run_training(method, model_cfg, splits, cfg, fold=fold)
                except Exception as exc:  # recorded, not fatal: the sweep goes on
                    failures.append({"run": run_id(method, seed, fold), "error": f"{type(exc).__name__}: {exc}"})
                    continue
                results.append(result)
                if out_dir is not None:
                    _archive_run(result, model_cfg, out_dir)

    table = _aggregate(results, config.methods)
    if out_dir is not None:
        emit_reports(results, out_dir, methods=config.methods, failures=failures)
    return table, results, failures


def _archive_run(result: RunResult, model_cfg: MTLNetConfig, out_dir: Path) -> None:
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    rid = run_id(result.method, result.seed, result.fold)
    record = result.to_dict()
    if result.best_state is not None:
        model = build_model(result.method, model_cfg, result.seed)
        model.load_state_dict(result.best_state)
        ckpt = runs_dir / f"{rid}.ckpt"
        save_checkpoint(model, ckpt, role="student")
        record["checkpoint"] = ckpt.name
    (runs_dir / f"{rid}.json").write_text(json.dumps(record, sort_keys=True, indent=2))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

LAMBDA_SWEEP_VALUES = (0.001, 0.1, 0.5, 1.0)
RATIO_SWEEP_VALUES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def sweep_lambda(config: ExperimentConfig, values=LAMBDA_SWEEP_VALUES, out_dir=None, env_root=None):
    """One smooth-distill comparison per distillation weight."""
    base = dataclasses.replace(config, methods=("smooth_distill",))
    rows = []
    tables = {}
    failures_all = []
    for lam in values:
        cfg = dataclasses.replace(base, distill=dataclasses.replace(base.distill, lam=float(lam)))
        sub_dir = Path(out_dir) / f"lambda_{lam}" if out_dir else None
        table, results, failures = run_comparison(cfg, out_dir=sub_dir, env_root=env_root)
        tables[lam] = (table, results)
        failures_all.extend(failures)
        rows.append(_sweep_row("lambda", lam, table, "smooth_distill"))
    if out_dir is not None:
        _write_sweep_csv(Path(out_dir) / "lambda_sweep.csv", "lambda", rows)
    return rows, tables, failures_all


def sweep_train_ratio(config: ExperimentConfig, ratios=RATIO_SWEEP_VALUES, out_dir=None, env_root=None):
    """Fixed-split runs with the training fraction varied; cv is disabled."""
    for r in ratios:
        if r + config.val_share > 1.0 + 1e-9:
            raise ConfigError(f"ratio {r} leaves no room for the validation share {config.val_share}")
    base = dataclasses.replace(config, cv=False)
    rows = []
    tables = {}
    failures_all = []
    for ratio in ratios:
        cfg = dataclasses.replace(base, train_ratio=float(ratio))
        sub_dir = Path(out_dir) / f"ratio_{ratio}" if out_dir else None
        table, results, failures = run_comparison(cfg, out_dir=sub_dir, env_root=env_root)
        tables[ratio] = (table, results)
        failures_all.extend(failures)
        for method in cfg.methods:
            rows.append(_sweep_row("train_ratio", ratio, table, method))
    if out_dir is not None:
        _write_sweep_csv(Path(out_dir) / "ratio_sweep.csv", "train_ratio", rows)
    return rows, tables, failures_all


def _sweep_row(key: str, value, table: ComparisonTable, method: str) -> dict:
    row = {key: value, "method": method}
    for task in (1, 2):
        c = table.cells.get((method, task, "test"))
        row[f"task{task}_test_acc_mean"] = None if c is None else c["acc_mean"]
        row[f"task{task}_test_acc_std"] = None if c is None else c["acc_std"]
    return row


def _write_sweep_csv(path: Path, key: str, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([key, "method", "task1_test_acc_mean", "task1_test_acc_std",
                     "task2_test_acc_mean", "task2_test_acc_std"])
    for row in rows:
        writer.writerow(
            [row[key], row["method"]]
            + ["" if row[k] is None else f"{row[k]:.6f}"
               for k in ("task1_test_acc_mean", "task1_test_acc_std",
                         "task2_test_acc_mean", "task2_test_acc_std")]
        )
    path.write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def emit_reports(results: Sequence[RunResult], out_dir, methods=None, failures=None) -> list:
    """Write the comparison table, per-run JSON/curves/confusions and the
    significance tables. Returns the list of written paths."""
    if not results:
        raise DataError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = tuple(methods) if methods else tuple(dict.fromkeys(r.method for r in results))
    written = []

    table = _aggregate(results, methods)
    comparison = out_dir / "comparison.csv"
    comparison.write_text(table.to_csv())
    written.append(comparison)

    runs_dir = out_dir / "runs"
    curves_dir = out_dir / "curves"
    conf_dir = out_dir / "confusion"
    for d in (runs_dir, curves_dir, conf_dir):
        d.mkdir(exist_ok=True)

    for r in results:
        rid = run_id(r.method, r.seed, r.fold)
        run_file = runs_dir / f"{rid}.json"
        if not run_file.exists():
            run_file.write_text(json.dumps(r.to_dict(), sort_keys=True, indent=2))
        written.append(run_file)

        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc1", "train_acc2",
                         "val_loss", "val_acc1", "val_acc2", "seconds"])
        for e in range(len(r.train_loss)):
            writer.writerow(
                [e + 1] + [f"{v:.6f}" for v in
                           (r.train_loss[e], r.train_acc1[e], r.train_acc2[e],
                            r.val_loss[e], r.val_acc1[e], r.val_acc2[e])]
                + [f"{r.epoch_seconds[e]:.3f}"]
            )
        curve_file = curves_dir / f"{rid}_curve.csv"
        curve_file.write_text(buf.getvalue())
        written.append(curve_file)

        for task, cm in ((1, r.test_confusion1), (2, r.test_confusion2)):
            if cm is None:
                continue
            cbuf = io.StringIO()
            cwriter = csv.writer(cbuf, lineterminator="\n")
            for row in cm:
                cwriter.writerow([int(v) for v in row])
            cfile = conf_dir / f"{rid}_task{task}_confusion.csv"
            cfile.write_text(cbuf.getvalue())
            written.append(cfile)

    written.extend(_emit_significance(results, methods, out_dir))

    if failures:
        fail_file = out_dir / "failures.json"
        fail_file.write_text(json.dumps(sorted(failures, key=lambda f: f["run"]), indent=2))
        written.append(fail_file)
    return written


def _fold_means(results, method: str, task: int, metric: str):
    """Per-fold mean over seeds of a test metric; None unless every fold
    has at least one run."""
    mine = [r for r in results if r.method == method and r.fold is not None
            and f"{metric}{task}" in r.test_metrics]
    if not mine:
        return None
    folds = sorted({r.fold for r in mine})
    if len(folds) < 2:
        return None
    means = []
    for f in folds:
        vals = [r.test_metrics[f"{metric}{task}"] for r in mine if r.fold == f]
        means.append(float(np.mean(vals)))
    return np.array(means)


def _emit_significance(results, methods, out_dir: Path) -> list:
    """Pairwise paired t-tests over per-fold mean accuracy and F1."""
    written = []
    for task in (1, 2):
        for metric, label in (("acc", "accuracy"), ("f1_", "f1")):
            series = {m: _fold_means(results, m, task, metric) for m in methods}
            avail = [m for m in methods if series[m] is not None]
            if len(avail) < 2:
                continue
            n = min(len(series[m]) for m in avail)
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(["method"] + list(avail))
            for a in avail:
                row = [a]
                for b in avail:
                    if a == b:
                        row.append("1")
                    else:
                        _, p = paired_t_test(series[a][:n], series[b][:n])
                        row.append(f"{p:.6f}")
                writer.writerow(row)
            path = out_dir / f"significance_task{task}_{label}.csv"
            path.write_text(buf.getvalue())
            written.append(path)
    return written
