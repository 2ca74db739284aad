"""Loss functions for multitask training and self-distillation, plus the
exponentially smoothed teacher update.

The combined objectives implemented here:

* weighted two-task cross entropy:  alpha*CE1 + (1-alpha)*CE2
* temperature-softened KL distillation with the tau^2 factor
* two-stage ("born-again") mix:     (1-lambda)*CE + lambda*KD
* per-task smoothed-teacher mix:    alpha*(CE1 + lambda*KD1)
                                    + (1-alpha)*(CE2 + lambda*KD2)
* teacher parameter smoothing:      t <- beta*t + (1-beta)*s

Teacher logits are always treated as constants: no gradient ever reaches
the teacher through a distillation loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError, ContractError, DataError, ShapeError
from .tensor import Tensor, div, exp, log_softmax, mul

Logits = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class DistillConfig:
    """Weights for the combined objectives.

    alpha: task balance in [0, 1]; lam: distillation weight in [0, 1];
    tau: softening temperature > 0; beta: teacher smoothing in [0, 1).
    """

    alpha: float = 0.5
    lam: float = 0.5
    tau: float = 3.0
    beta: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must be in [0, 1], got {self.lam}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")


def _as_const_array(z: Logits) -> np.ndarray:
    return z.data if isinstance(z, Tensor) else np.asarray(z)


def _log_softmax_np(z: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softened_probs(z: Logits, tau: float) -> Tensor:
    """Row-wise softmax of z/tau, stabilized by row-max subtraction."""
    if tau <= 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")
    z = z if isinstance(z, Tensor) else Tensor(z)
    return exp(log_softmax(div(z, float(tau)), axis=1))


def kd_loss(teacher_logits: Logits, student_logits: Tensor, tau: float) -> Tensor:
    """Distillation loss tau^2 * (1/N) sum_n sum_k pT*(log pT - log pS).

    The teacher side is detached: the result only carries gradient with
    respect to the student logits.
    """
    if tau <= 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")
    zt = _as_const_array(teacher_logits)
    if zt.shape != student_logits.shape:
        raise ShapeError(f"kd_loss: teacher {zt.shape} vs student {student_logits.shape}")
    log_pt = _log_softmax_np(zt / float(tau), axis=1)
    pt = np.exp(log_pt)
    log_ps = log_softmax(div(student_logits, float(tau)), axis=1)
    # pT*log pT is a constant; only pT*log pS needs the graph.
    kl_rows = (Tensor(pt * log_pt) - mul(Tensor(pt), log_ps)).sum(axis=1)
    return kl_rows.mean() * (float(tau) * float(tau))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the true class."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise DataError(f"labels must lie in [0, {c}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = mul(log_softmax(logits, axis=1), Tensor(onehot)).sum(axis=1)
    return -picked.mean()


def multitask_ce_loss(z1: Tensor, y1, z2: Tensor, y2, alpha: float) -> Tensor:
    """Weighted sum of both tasks' cross entropies."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return float(alpha) * cross_entropy(z1, y1) + (1.0 - float(alpha)) * cross_entropy(z2, y2)


def born_again_total(ce, distill, lam: float):
    """Two-stage distillation mix (1-lam)*ce + lam*distill."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must be in [0, 1], got {lam}")
    return (1.0 - float(lam)) * ce + float(lam) * distill


def smooth_total(ce1, kd1, ce2, kd2, alpha: float, lam: float):
    """Combined per-task supervised + distillation objective."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must be in [0, 1], got {lam}")
    a, l = float(alpha), float(lam)
    return a * (ce1 + l * kd1) + (1.0 - a) * (ce2 + l * kd2)


# ---------------------------------------------------------------------------
# smoothed teacher
# ---------------------------------------------------------------------------


def make_teacher(student):
    """A teacher starts as an exact copy of the student (same class, same
    parameters and batch-norm statistics)."""
    return student.clone()


def ema_update(teacher, student, beta: float) -> None:
    """In-place smoothing step: every teacher scalar moves to
    beta*teacher + (1-beta)*student.

    Covers all trainable parameters and batch-norm running statistics, so
    the teacher stays a coherent network. Runs once per optimizer step.
    """
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"beta must be in [0, 1), got {beta}")
    t_params = teacher.named_parameters()
    s_params = student.named_parameters()
    if len(t_params) != len(s_params):
        raise ContractError("teacher and student expose different parameter sets")
    pairs = [(tn, tp.data, sp.data) for (tn, tp), (_, sp) in zip(t_params, s_params)]
    pairs += [(tn, tb, sb) for (tn, tb), (_, sb) in zip(teacher.named_buffers(), student.named_buffers())]
    for name, t_arr, s_arr in pairs:
        if t_arr.shape != s_arr.shape:
            raise ContractError(f"shape mismatch for {name}: {t_arr.shape} vs {s_arr.shape}")
        # Cast beta once per array dtype; 1-b is exact in that dtype, so the
        # update is a clean componentwise contraction by beta.
        b = t_arr.dtype.type(beta)
        one_minus_b = t_arr.dtype.type(1.0) - b
        t_arr[...] = b * t_arr + one_minus_b * s_arr
