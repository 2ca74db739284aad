"""Dual-head CNN for joint activity and sensor-placement classification.

The network takes windows shaped (N, 1, rows, L) where the ``rows`` axis
holds the three acceleration axes and L is the window length. A (rows x 1)
projection convolution mixes the axes into channels, a stack of
(1 x k) conv blocks (batch norm, ReLU, (1 x pool) max-pool) works along
the time axis, and a shared dense layer feeds either two classification
heads (:class:`MTLNet`) or one (:class:`SingleHeadNet`).

Checkpoints are a self-describing binary container: a magic string, a
JSON header (version, role, config, parameter manifest) and a payload of
little-endian 32-bit floats in manifest order.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .layers import BatchNorm2D, Conv2D, Dropout, Linear, MaxPool2D, relu
from .tensor import DEFAULT_DTYPE, Tensor

CHECKPOINT_MAGIC = b"MTLCKPT1"


@dataclass(frozen=True)
class MTLNetConfig:
    """Architecture hyperparameters.

    ``trunk`` lists conv blocks as (out_channels, kernel_time, pool_time);
    kernel_time must be odd so 'same' padding preserves the time length.
    """

    num_classes_task1: int
    num_classes_task2: int
    window_len: int = 100
    in_rows: int = 3
    proj_channels: int = 32
    trunk: tuple = ((32, 5, 2), (64, 5, 2), (128, 5, 2))
    hidden: int = 256
    dropout_p: float = 0.3

    def __post_init__(self):
        if self.num_classes_task1 < 2 or self.num_classes_task2 < 2:
            raise ConfigError("both tasks need at least 2 classes")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        for out_ch, k, pool in self.trunk:
            if k % 2 == 0:
                raise ConfigError(f"kernel_time must be odd for same-padding, got {k}")
            if out_ch < 1 or pool < 1:
                raise ConfigError("trunk entries must be positive")
        if self.feature_time() < 1:
            raise ConfigError(
                f"window_len {self.window_len} collapses below 1 after pooling {self.pool_factors()}"
            )

    def pool_factors(self):
        return tuple(pool for _, _, pool in self.trunk)

    def feature_time(self) -> int:
        t = self.window_len
        for _, _, pool in self.trunk:
            t = t // pool
        return t

    def feature_width(self) -> int:
        return self.trunk[-1][0] * self.feature_time()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trunk"] = [list(b) for b in self.trunk]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MTLNetConfig":
        d = dict(d)
        d["trunk"] = tuple(tuple(b) for b in d["trunk"])
        return cls(**d)


@dataclass
class DualLogits:
    """Unnormalized scores for both tasks, row-aligned to the same windows."""

    z1: Tensor
    z2: Tensor


class _TrunkNet:
    """Shared trunk + dense neck; subclasses attach classification heads."""

    def __init__(self, config: MTLNetConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.config = config
        self.dtype = dtype
        c = config
        self.proj = Conv2D(1, c.proj_channels, (c.in_rows, 1), rng=rng, dtype=dtype)
        self.proj_bn = BatchNorm2D(c.proj_channels, dtype=dtype)
        self.blocks = []
        in_ch = c.proj_channels
        for out_ch, k, pool in c.trunk:
            conv = Conv2D(in_ch, out_ch, (1, k), padding=(0, k // 2), rng=rng, dtype=dtype)
            bn = BatchNorm2D(out_ch, dtype=dtype)
            self.blocks.append((conv, bn, MaxPool2D((1, pool))))
            in_ch = out_ch
        self.fc = Linear(c.feature_width(), c.hidden, rng=rng, dtype=dtype)
        self.drop = Dropout(c.dropout_p)

    # -- forward pieces -----------------------------------------------------

    def _check_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        expected = (1, self.config.in_rows, self.config.window_len)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"input must be (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        return x

    def features(self, x, train: bool = False) -> Tensor:
        """Shared penultimate features, before the model dropout and heads."""
        x = self._check_input(x)
        h = relu(self.proj_bn(self.proj(x), train))
        for conv, bn, pool in self.blocks:
            h = pool(relu(bn(conv(h), train)))
        h = h.reshape(h.shape[0], self.config.feature_width())
        return relu(self.fc(h))

    # -- parameter plumbing ---------------------------------------------------

    def _trunk_modules(self):
        mods = [("proj", self.proj), ("proj_bn", self.proj_bn)]
        for i, (conv, bn, _) in enumerate(self.blocks):
            mods.append((f"block{i + 1}.conv", conv))
            mods.append((f"block{i + 1}.bn", bn))
        mods.append(("fc", self.fc))
        return mods

    def _head_modules(self):
        raise NotImplementedError

    def named_parameters(self):
        out = []
        for prefix, mod in self._trunk_modules() + self._head_modules():
            for name, p in mod.parameters():
                out.append((f"{prefix}.{name}", p))
        return out

    def named_buffers(self):
        out = []
        for prefix, mod in self._trunk_modules():
            if isinstance(mod, BatchNorm2D):
                for name, b in mod.buffers():
                    out.append((f"{prefix}.{name}", b))
        return out

    def param_count(self) -> int:
        return sum(int(p.size) for _, p in self.named_parameters())

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise ContractError(f"state dict is missing parameter {name!r}")
            src = state[name]
            if src.shape != p.data.shape:
                raise ContractError(f"shape mismatch for {name}: {src.shape} vs {p.data.shape}")
            p.data[...] = src
        for name, b in self.named_buffers():
            if name not in state:
                raise ContractError(f"state dict is missing buffer {name!r}")
            src = state[name]
            if src.shape != b.shape:
                raise ContractError(f"shape mismatch for {name}: {src.shape} vs {b.shape}")
            b[...] = src

    def clone(self) -> "_TrunkNet":
        twin = type(self)(*self._ctor_args(), dtype=self.dtype)
        twin.load_state_dict(self.state_dict())
        return twin

    def _ctor_args(self):
        raise NotImplementedError


class MTLNet(_TrunkNet):
    """Shared trunk with two linear classification heads."""

    def __init__(self, config: MTLNetConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__(config, rng, dtype)
        self.head1 = Linear(config.hidden, config.num_classes_task1, rng=rng, dtype=dtype)
        self.head2 = Linear(config.hidden, config.num_classes_task2, rng=rng, dtype=dtype)

    def _head_modules(self):
        return [("head1", self.head1), ("head2", self.head2)]

    def _ctor_args(self):
        return (self.config, np.random.default_rng(0))

    def apply_heads(self, feats: Tensor) -> DualLogits:
        return DualLogits(self.head1(feats), self.head2(feats))

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None) -> DualLogits:
        feats = self.features(x, train)
        return self.apply_heads(self.drop(feats, train, rng))

    __call__ = forward


class SingleHeadNet(_TrunkNet):
    """Same trunk as MTLNet with a single head, for single-task baselines."""

    def __init__(self, config: MTLNetConfig, task_id: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        if task_id not in (1, 2):
            raise ConfigError(f"task_id must be 1 or 2, got {task_id}")
        super().__init__(config, rng, dtype)
        self.task_id = task_id
        n_out = config.num_classes_task1 if task_id == 1 else config.num_classes_task2
        self.head = Linear(config.hidden, n_out, rng=rng, dtype=dtype)

    def _head_modules(self):
        return [("head", self.head)]

    def _ctor_args(self):
        return (self.config, self.task_id, np.random.default_rng(0))

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        feats = self.features(x, train)
        return self.head(self.drop(feats, train, rng))

    __call__ = forward


def param_count(config: MTLNetConfig, heads: str = "dual", task_id: int = 1) -> int:
    """Exact number of trainable scalars for a config (kernels, biases,
    batch-norm affine, dense weights)."""
    rng = np.random.default_rng(0)
    if heads == "dual":
        return MTLNet(config, rng).param_count()
    if heads == "single":
        return SingleHeadNet(config, task_id, rng).param_count()
    raise ConfigError(f"heads must be 'dual' or 'single', got {heads!r}")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(model: _TrunkNet, path, role: str = "student") -> None:
    """Write the model to ``path`` in the binary checkpoint format."""
    path = Path(path)
    state = model.state_dict()
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in state.items()]
    header = {
        "version": 1,
        "role": role,
        "arch": "mtlnet" if isinstance(model, MTLNet) else "singlehead",
        "task_id": getattr(model, "task_id", None),
        "config": model.config.to_dict(),
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name, arr in state.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=DEFAULT_DTYPE):
    """Read a checkpoint; returns ``(model, role)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not a model checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = MTLNetConfig.from_dict(header["config"])
        rng = np.random.default_rng(0)
        if header["arch"] == "mtlnet":
            model = MTLNet(config, rng, dtype=dtype)
        else:
            model = SingleHeadNet(config, header["task_id"], rng, dtype=dtype)
        state = {}
        for entry in header["manifest"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            state[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
        model.load_state_dict(state)
    return model, header["role"]
