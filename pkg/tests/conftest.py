"""Shared test helpers: a finite-difference gradient oracle and small
model/dataset fixtures.

Gradient checks run the engine in float64 so the central-difference
oracle at h=1e-3 is meaningful; training-path tests use the default
float32.
"""

import numpy as np
import pytest

from mtdistill.data import DataSplits, split_and_fold, synth_generate
from mtdistill.models import MTLNetConfig
from mtdistill.tensor import backward

GRAD_H = 1e-3
GRAD_TOL = 1e-3


def finite_diff(scalar_fn, arrays, h=GRAD_H):
    """Central finite differences of ``scalar_fn()`` w.r.t. each array.

    The arrays are perturbed in place; ``scalar_fn`` must recompute the
    scalar from their current contents.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar_fn()
            flat[i] = orig - h
            fm = scalar_fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, fd):
    """max |a - f| / max(|a|, |f|, 1e-3): relative for healthy gradients,
    absolute at the 1e-3 floor below which h=1e-3 differences are noise."""
    err = 0.0
    for a, f in zip(analytic, fd):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-3)
        err = max(err, float(np.max(np.abs(a - f) / denom)))
    return err


def gradcheck(build, arrays, h=GRAD_H, tol=GRAD_TOL):
    """``build()`` returns (loss Tensor, [tensors wrapping ``arrays``]).

    Compares reverse-mode gradients against central differences and
    returns the worst relative error (asserting it is within ``tol``).
    """
    loss, tensors = build()
    grads = backward(loss)
    analytic = [grads[t] for t in tensors]
    fd = finite_diff(lambda: float(build()[0].data), arrays, h)
    err = max_rel_err(analytic, fd)
    assert err < tol, f"gradient mismatch: max rel err {err:.3e} >= {tol}"
    return err


@pytest.fixture
def small_config():
    return MTLNetConfig(
        num_classes_task1=3,
        num_classes_task2=2,
        window_len=32,
        proj_channels=8,
        trunk=((8, 3, 2), (16, 3, 2)),
        hidden=32,
        dropout_p=0.1,
    )


def make_splits(ds, split_seed=0):
    spec = split_and_fold(len(ds), split_seed)
    train_idx = np.sort(np.concatenate(spec.folds[1:]))
    return DataSplits(ds.subset(train_idx), ds.subset(spec.folds[0]), ds.subset(spec.test_idx))


@pytest.fixture
def tiny_splits():
    ds = synth_generate(12, 3, 2, window_len=32, seed=7, difficulty=0.3)
    return make_splits(ds)
