"""The five training procedures and the Adam optimizer.

All trainers share one epoch/batch loop so that methods differing only in
their per-batch loss (multitask vs. smooth-distill at lam=0, for example)
consume randomness identically and produce bitwise-identical parameter
trajectories. Per run there are two RNG streams derived from the seed:
stream 0 initializes parameters, stream 1 drives epoch shuffling and
dropout. Checkpoint selection keeps the epoch with the highest mean
validation accuracy over the trained tasks (first epoch wins ties), and
test metrics always come from that checkpoint, never the last epoch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import DataSplits
from .distill import (
    DistillConfig,
    cross_entropy,
    ema_update,
    kd_loss,
    make_teacher,
    multitask_ce_loss,
    smooth_total,
)
from .errors import ConfigError, ContractError, DataError
from .layers import dropout
from .metrics import confusion, report
from .models import MTLNet, MTLNetConfig, SingleHeadNet
from .tensor import backward, no_grad

METHODS = ("singletask1", "singletask2", "multitask", "sd_dropout", "born_again", "smooth_distill")

_INIT_STREAM = 0
_TRAIN_STREAM = 1


def seeded_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream); streams keep parameter
    init, shuffling and data synthesis from sharing draws."""
    return np.random.default_rng([int(seed), int(stream)])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 300
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    method: str = "multitask"
    sd_dropout_p: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.sd_dropout_p < 1.0:
            raise ConfigError(f"sd_dropout_p must be in [0, 1), got {self.sd_dropout_p}")


class Adam:
    """Adam with bias correction; moments live per registered parameter."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, named_params):
        self._names = [name for name, _ in named_params]
        self._params = [p for _, p in named_params]
        self._m = [np.zeros_like(p.data) for p in self._params]
        self._v = [np.zeros_like(p.data) for p in self._params]
        self.t = 0

    @property
    def param_ids(self) -> tuple:
        return tuple(id(p) for p in self._params)

    def step(self, grads: dict, lr: float, context: str = "") -> None:
        """One update; a parameter missing from ``grads`` is skipped.

        Raises ``ContractError`` (with the parameter name and any caller
        context) when a gradient is not finite.
        """
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        lr = float(lr)
        for name, p, m, v in zip(self._names, self._params, self._m, self._v):
            g = grads.get(p)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                where = f" ({context})" if context else ""
                raise ContractError(f"non-finite gradient for parameter {name!r}{where}")
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            p.data[...] = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class RunResult:
    """Per-run record: epoch curves, selected checkpoint, final metrics."""

    method: str
    seed: int
    fold: Optional[int]
    train_loss: np.ndarray
    train_acc1: np.ndarray
    train_acc2: np.ndarray
    val_loss: np.ndarray
    val_acc1: np.ndarray
    val_acc2: np.ndarray
    epoch_seconds: np.ndarray
    best_epoch: int
    val_metrics: dict
    test_metrics: dict
    wall_seconds: float
    test_confusion1: Optional[np.ndarray] = None
    test_confusion2: Optional[np.ndarray] = None
    best_state: Optional[dict] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        """JSON-ready form (weights and in-memory diagnostics excluded)."""

        def arr(a):
            return [None if math.isnan(v) else float(v) for v in a]

        return {
            "method": self.method,
            "seed": self.seed,
            "fold": self.fold,
            "train_loss": arr(self.train_loss),
            "train_acc1": arr(self.train_acc1),
            "train_acc2": arr(self.train_acc2),
            "val_loss": arr(self.val_loss),
            "val_acc1": arr(self.val_acc1),
            "val_acc2": arr(self.val_acc2),
            "epoch_seconds": [float(v) for v in self.epoch_seconds],
            "best_epoch": self.best_epoch,
            "val_metrics": self.val_metrics,
            "test_metrics": self.test_metrics,
            "wall_seconds": self.wall_seconds,
            "test_confusion1": None if self.test_confusion1 is None else self.test_confusion1.tolist(),
            "test_confusion2": None if self.test_confusion2 is None else self.test_confusion2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        def arr(v):
            return np.array([math.nan if x is None else x for x in v], dtype=np.float64)

        return cls(
            method=d["method"],
            seed=d["seed"],
            fold=d["fold"],
            train_loss=arr(d["train_loss"]),
            train_acc1=arr(d["train_acc1"]),
            train_acc2=arr(d["train_acc2"]),
            val_loss=arr(d["val_loss"]),
            val_acc1=arr(d["val_acc1"]),
            val_acc2=arr(d["val_acc2"]),
            epoch_seconds=np.asarray(d["epoch_seconds"], dtype=np.float64),
            best_epoch=d["best_epoch"],
            val_metrics=d["val_metrics"],
            test_metrics=d["test_metrics"],
            wall_seconds=d["wall_seconds"],
            test_confusion1=None if d["test_confusion1"] is None else np.asarray(d["test_confusion1"]),
            test_confusion2=None if d["test_confusion2"] is None else np.asarray(d["test_confusion2"]),
        )


def progress_log_lines(result: RunResult):
    """Tab-separated epoch lines: epoch, train_loss, train_acc1,
    train_acc2, val_loss, val_acc1, val_acc2, seconds."""
    for e in range(len(result.train_loss)):
        yield (
            f"{e + 1}\t{result.train_loss[e]:.6f}\t{result.train_acc1[e]:.6f}\t"
            f"{result.train_acc2[e]:.6f}\t{result.val_loss[e]:.6f}\t{result.val_acc1[e]:.6f}\t"
            f"{result.val_acc2[e]:.6f}\t{result.epoch_seconds[e]:.3f}\n"
        )


# ---------------------------------------------------------------------------
# batching and evaluation
# ---------------------------------------------------------------------------


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Seeded shuffle cut into batches; a trailing singleton is folded into
    the previous batch so batch statistics never degenerate."""
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _sequential_batches(n: int, batch_size: int) -> list:
    idx = np.arange(n)
    return [idx[i : i + batch_size] for i in range(0, n, batch_size)]


def _eval_dual(model: MTLNet, ds, alpha: float, batch_size: int):
    """Eval-mode pass; returns (loss, acc1, acc2, pred1, pred2)."""
    loss_sum, correct1, correct2 = 0.0, 0, 0
    preds1, preds2 = [], []
    with no_grad():
        for idx in _sequential_batches(len(ds), batch_size):
            out = model.forward(ds.windows[idx], train=False)
            loss = multitask_ce_loss(out.z1, ds.y1[idx], out.z2, ds.y2[idx], alpha)
            loss_sum += float(loss.data) * len(idx)
            p1 = out.z1.data.argmax(axis=1)
            p2 = out.z2.data.argmax(axis=1)
            correct1 += int((p1 == ds.y1[idx]).sum())
            correct2 += int((p2 == ds.y2[idx]).sum())
            preds1.append(p1)
            preds2.append(p2)
    n = len(ds)
    return loss_sum / n, correct1 / n, correct2 / n, np.concatenate(preds1), np.concatenate(preds2)


def _eval_single(model: SingleHeadNet, ds, task_id: int, batch_size: int):
    loss_sum, correct = 0.0, 0
    preds = []
    labels = ds.y1 if task_id == 1 else ds.y2
    with no_grad():
        for idx in _sequential_batches(len(ds), batch_size):
            z = model.forward(ds.windows[idx], train=False)
            loss = cross_entropy(z, labels[idx])
            loss_sum += float(loss.data) * len(idx)
            p = z.data.argmax(axis=1)
            correct += int((p == labels[idx]).sum())
            preds.append(p)
    n = len(ds)
    return loss_sum / n, correct / n, np.concatenate(preds)


# ---------------------------------------------------------------------------
# shared loop
# ---------------------------------------------------------------------------


def _train_loop(
    model,
    splits: DataSplits,
    cfg: TrainConfig,
    step_fn: Callable,
    *,
    method: str,
    tasks: tuple,
    teacher=None,
    ema_beta: Optional[float] = None,
    epoch_callback: Optional[Callable] = None,
    log_stream=None,
    fold: Optional[int] = None,
) -> RunResult:
    train, val, test = splits.train, splits.val, splits.test
    for name, part in (("train", train), ("val", val), ("test", test)):
        if len(part) == 0:
            raise DataError(f"{name} split is empty")

    rng = seeded_rng(cfg.seed, _TRAIN_STREAM)
    adam = Adam(model.named_parameters())
    nan = math.nan
    E = cfg.epochs
    curves = {k: np.full(E, nan) for k in
              ("train_loss", "train_acc1", "train_acc2", "val_loss", "val_acc1", "val_acc2")}
    epoch_seconds = np.zeros(E)
    best_mean, best_epoch, best_state = -math.inf, -1, None
    dual = isinstance(model, MTLNet)
    task_id = tasks[0] if len(tasks) == 1 else None

    t_start = time.perf_counter()
    for epoch in range(E):
        e0 = time.perf_counter()
        loss_sum, correct1, correct2 = 0.0, 0, 0
        for bi, idx in enumerate(_batch_indices(len(train), cfg.batch_size, rng)):
            xb = train.windows[idx]
            loss, logits = step_fn(xb, train.y1[idx], train.y2[idx], rng)
            grads = backward(loss)
            adam.step(grads, cfg.learning_rate, context=f"epoch {epoch + 1}, batch {bi + 1}")
            if ema_beta is not None:
                ema_update(teacher, model, ema_beta)
            loss_sum += float(loss.data) * len(idx)
            if 1 in logits:
                correct1 += int((logits[1].argmax(axis=1) == train.y1[idx]).sum())
            if 2 in logits:
                correct2 += int((logits[2].argmax(axis=1) == train.y2[idx]).sum())

        n = len(train)
        curves["train_loss"][epoch] = loss_sum / n
        if 1 in tasks:
            curves["train_acc1"][epoch] = correct1 / n
        if 2 in tasks:
            curves["train_acc2"][epoch] = correct2 / n

        if dual:
            vloss, vacc1, vacc2, _, _ = _eval_dual(model, val, cfg.distill.alpha, cfg.batch_size)
            curves["val_loss"][epoch] = vloss
            curves["val_acc1"][epoch] = vacc1
            curves["val_acc2"][epoch] = vacc2
            mean_acc = 0.5 * (vacc1 + vacc2)
        else:
            vloss, vacc, _ = _eval_single(model, val, task_id, cfg.batch_size)
            curves["val_loss"][epoch] = vloss
            curves[f"val_acc{task_id}"][epoch] = vacc
            mean_acc = vacc

        if mean_acc > best_mean:
            best_mean, best_epoch = mean_acc, epoch
            best_state = model.state_dict()

        epoch_seconds[epoch] = time.perf_counter() - e0
        if log_stream is not None:
            log_stream.write(
                f"{epoch + 1}\t{curves['train_loss'][epoch]:.6f}\t{curves['train_acc1'][epoch]:.6f}\t"
                f"{curves['train_acc2'][epoch]:.6f}\t{curves['val_loss'][epoch]:.6f}\t"
                f"{curves['val_acc1'][epoch]:.6f}\t{curves['val_acc2'][epoch]:.6f}\t"
                f"{epoch_seconds[epoch]:.3f}\n"
            )
        if epoch_callback is not None:
            epoch_callback(epoch, model)

    wall = time.perf_counter() - t_start

    best_model = model.clone()
    best_model.load_state_dict(best_state)
    val_metrics, test_metrics = {}, {}
    conf1 = conf2 = None
    if dual:
        _, vacc1, vacc2, vp1, vp2 = _eval_dual(best_model, val, cfg.distill.alpha, cfg.batch_size)
        _, tacc1, tacc2, tp1, tp2 = _eval_dual(best_model, test, cfg.distill.alpha, cfg.batch_size)
        cm1v = confusion(val.y1, vp1, val.num_classes1)
        cm2v = confusion(val.y2, vp2, val.num_classes2)
        cm1 = confusion(test.y1, tp1, test.num_classes1)
        cm2 = confusion(test.y2, tp2, test.num_classes2)
        val_metrics = {"acc1": vacc1, "f1_1": report(cm1v).macro_f1,
                       "acc2": vacc2, "f1_2": report(cm2v).macro_f1}
        test_metrics = {"acc1": tacc1, "f1_1": report(cm1).macro_f1,
                        "acc2": tacc2, "f1_2": report(cm2).macro_f1}
        conf1, conf2 = cm1.counts, cm2.counts
    else:
        _, vacc, vp = _eval_single(best_model, val, task_id, cfg.batch_size)
        _, tacc, tp = _eval_single(best_model, test, task_id, cfg.batch_size)
        y_val = val.y1 if task_id == 1 else val.y2
        y_test = test.y1 if task_id == 1 else test.y2
        n_cls = val.num_classes1 if task_id == 1 else val.num_classes2
        cmv = confusion(y_val, vp, n_cls)
        cmt = confusion(y_test, tp, n_cls)
        val_metrics = {f"acc{task_id}": vacc, f"f1_{task_id}": report(cmv).macro_f1}
        test_metrics = {f"acc{task_id}": tacc, f"f1_{task_id}": report(cmt).macro_f1}
        if task_id == 1:
            conf1 = cmt.counts
        else:
            conf2 = cmt.counts

    diagnostics = {
        "optimizer_param_ids": adam.param_ids,
        "student_param_ids": tuple(id(p) for _, p in model.named_parameters()),
        "teacher_param_ids": tuple(id(p) for _, p in teacher.named_parameters()) if teacher is not None else (),
        "optimizer_steps": adam.t,
    }

    return RunResult(
        method=method,
        seed=cfg.seed,
        fold=fold,
        train_loss=curves["train_loss"],
        train_acc1=curves["train_acc1"],
        train_acc2=curves["train_acc2"],
        val_loss=curves["val_loss"],
        val_acc1=curves["val_acc1"],
        val_acc2=curves["val_acc2"],
        epoch_seconds=epoch_seconds,
        best_epoch=best_epoch,
        val_metrics=val_metrics,
        test_metrics=test_metrics,
        wall_seconds=wall,
        test_confusion1=conf1,
        test_confusion2=conf2,
        best_state=best_state,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# the five trainers
# ---------------------------------------------------------------------------


def train_multitask(model: MTLNet, splits: DataSplits, cfg: TrainConfig, **hooks) -> RunResult:
    """Jointly minimize the weighted two-task cross entropy."""
    alpha = cfg.distill.alpha

    def step(xb, y1b, y2b, rng):
        out = model.forward(xb, train=True, rng=rng)
        loss = multitask_ce_loss(out.z1, y1b, out.z2, y2b, alpha)
        return loss, {1: out.z1.data, 2: out.z2.data}

    return _train_loop(model, splits, cfg, step, method="multitask", tasks=(1, 2), **hooks)


def train_singletask(model: SingleHeadNet, splits: DataSplits, task_id: int, cfg: TrainConfig, **hooks) -> RunResult:
    """Plain cross-entropy training of a single-head model on one task."""
    if task_id not in (1, 2):
        raise ConfigError(f"task_id must be 1 or 2, got {task_id}")

    def step(xb, y1b, y2b, rng):
        yb = y1b if task_id == 1 else y2b
        z = model.forward(xb, train=True, rng=rng)
        return cross_entropy(z, yb), {task_id: z.data}

    return _train_loop(model, splits, cfg, step, method=f"singletask{task_id}", tasks=(task_id,), **hooks)


def train_sd_dropout(model: MTLNet, splits: DataSplits, cfg: TrainConfig, **hooks) -> RunResult:
    """Self-distillation between two dropout views of the shared features.

    Per batch the shared features are computed once, two independent masks
    produce views A and B, both heads run on each view, and the loss mixes
    the two-view mean cross entropy with symmetric per-task distillation
    (each direction's target detached).
    """
    d = cfg.distill
    p = cfg.sd_dropout_p

    def step(xb, y1b, y2b, rng):
        feats = model.features(xb, train=True)
        va = model.apply_heads(dropout(feats, p, rng, True))
        vb = model.apply_heads(dropout(feats, p, rng, True))
        ce1 = 0.5 * (cross_entropy(va.z1, y1b) + cross_entropy(vb.z1, y1b))
        ce2 = 0.5 * (cross_entropy(va.z2, y2b) + cross_entropy(vb.z2, y2b))
        kd1 = 0.5 * (kd_loss(va.z1.data, vb.z1, d.tau) + kd_loss(vb.z1.data, va.z1, d.tau))
        kd2 = 0.5 * (kd_loss(va.z2.data, vb.z2, d.tau) + kd_loss(vb.z2.data, va.z2, d.tau))
        loss = smooth_total(ce1, kd1, ce2, kd2, d.alpha, d.lam)
        logits = {1: 0.5 * (va.z1.data + vb.z1.data), 2: 0.5 * (va.z2.data + vb.z2.data)}
        return loss, logits

    return _train_loop(model, splits, cfg, step, method="sd_dropout", tasks=(1, 2), **hooks)


def train_smooth_distill(model: MTLNet, splits: DataSplits, cfg: TrainConfig, **hooks) -> RunResult:
    """Online self-distillation against a smoothed copy of the student.

    Teacher and student start identical; each batch runs the student in
    train mode and the teacher in eval mode, minimizes the combined
    objective, steps Adam on the student only, then smooths the teacher
    toward the student.
    """
    d = cfg.distill
    teacher = make_teacher(model)

    def step(xb, y1b, y2b, rng):
        out = model.forward(xb, train=True, rng=rng)
        with no_grad():
            t_out = teacher.forward(xb, train=False)
        ce1 = cross_entropy(out.z1, y1b)
        ce2 = cross_entropy(out.z2, y2b)
        kd1 = kd_loss(t_out.z1, out.z1, d.tau)
        kd2 = kd_loss(t_out.z2, out.z2, d.tau)
        loss = smooth_total(ce1, kd1, ce2, kd2, d.alpha, d.lam)
        return loss, {1: out.z1.data, 2: out.z2.data}

    return _train_loop(
        model, splits, cfg, step, method="smooth_distill", tasks=(1, 2),
        teacher=teacher, ema_beta=d.beta, **hooks,
    )


def train_born_again(model: MTLNet, splits: DataSplits, cfg: TrainConfig, **hooks) -> RunResult:
    """Two-stage distillation: train a teacher with the multitask loss,
    freeze its best checkpoint, then retrain a fresh student (same initial
    parameters, fresh RNG/optimizer) against it.

    The returned result describes stage 2; stage-1 time is included in
    ``wall_seconds``.
    """
    d = cfg.distill
    theta0 = model.state_dict()
    t0 = time.perf_counter()

    stage1 = train_multitask(model, splits, cfg)
    teacher = model.clone()
    teacher.load_state_dict(stage1.best_state)
    model.load_state_dict(theta0)

    def step(xb, y1b, y2b, rng):
        out = model.forward(xb, train=True, rng=rng)
        with no_grad():
            t_out = teacher.forward(xb, train=False)
        ce1 = cross_entropy(out.z1, y1b)
        ce2 = cross_entropy(out.z2, y2b)
        kd1 = kd_loss(t_out.z1, out.z1, d.tau)
        kd2 = kd_loss(t_out.z2, out.z2, d.tau)
        loss = smooth_total(ce1, kd1, ce2, kd2, d.alpha, d.lam)
        return loss, {1: out.z1.data, 2: out.z2.data}

    result = _train_loop(
        model, splits, cfg, step, method="born_again", tasks=(1, 2), teacher=teacher, **hooks
    )
    result.wall_seconds = time.perf_counter() - t0
    result.diagnostics["stage1_wall_seconds"] = stage1.wall_seconds
    result.diagnostics["stage1_best_epoch"] = stage1.best_epoch
    return result


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def build_model(method: str, model_cfg: MTLNetConfig, seed: int, dtype=np.float32):
    """Fresh model for a run; initialization draws come from stream 0."""
    rng = seeded_rng(seed, _INIT_STREAM)
    if method == "singletask1":
        return SingleHeadNet(model_cfg, 1, rng, dtype=dtype)
    if method == "singletask2":
        return SingleHeadNet(model_cfg, 2, rng, dtype=dtype)
    return MTLNet(model_cfg, rng, dtype=dtype)


def run_training(method: str, model_cfg: MTLNetConfig, splits: DataSplits, cfg: TrainConfig, **hooks) -> RunResult:
    """Build the right model for ``method`` and train it."""
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    model = build_model(method, model_cfg, cfg.seed)
    if method == "singletask1":
        return train_singletask(model, splits, 1, cfg, **hooks)
    if method == "singletask2":
        return train_singletask(model, splits, 2, cfg, **hooks)
    if method == "multitask":
        return train_multitask(model, splits, cfg, **hooks)
    if method == "sd_dropout":
        return train_sd_dropout(model, splits, cfg, **hooks)
    if method == "smooth_distill":
        return train_smooth_distill(model, splits, cfg, **hooks)
    return train_born_again(model, splits, cfg, **hooks)
