"""Data pipeline: raw tri-axial recordings, sliding-window segmentation,
deterministic splits/folds, dataset adapters and a synthetic generator.

The canonical interchange format is a CSV with one sample per row:

    subject_id, placement_label, activity_label, x, y, z, sample_index

where the label columns are strings from a dataset-specific vocabulary
and sample_index increases monotonically within a recording (a reset
starts a new recording). Windowed datasets can be cached in a small
binary container (JSON header + little-endian float32 payload).
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError

CACHE_MAGIC = b"AWCACHE1"

# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------


@dataclass
class RawRecording:
    """One uninterrupted stream of tri-axial samples from one placement."""

    subject_id: str
    placement_label: int
    samples: np.ndarray  # (n, 3) float32, g units
    activity_labels: np.ndarray  # (n,) int
    sampling_rate_hz: Optional[float] = None
    source: str = ""

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.activity_labels = np.ascontiguousarray(self.activity_labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise ShapeError(f"samples must be (n, 3), got {self.samples.shape}")
        if len(self.activity_labels) != len(self.samples):
            raise DataError(
                f"activity stream length {len(self.activity_labels)} != sample count {len(self.samples)}"
            )

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Window:
    """A segmented window plus its labels and provenance."""

    data: np.ndarray  # (3, L) float32
    y1: int
    y2: int
    subject_id: str
    source: str
    start: int


@dataclass
class WindowedDataset:
    """Stacked windows shaped (N, 1, 3, L) with per-window labels."""

    windows: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    num_classes1: int
    num_classes2: int
    provenance: list = field(default_factory=list)  # (subject, source, start)
    activity_names: Optional[list] = None
    placement_names: Optional[list] = None

    def __post_init__(self):
        self.windows = np.ascontiguousarray(self.windows, dtype=np.float32)
        self.y1 = np.ascontiguousarray(self.y1, dtype=np.int64)
        self.y2 = np.ascontiguousarray(self.y2, dtype=np.int64)
        if self.windows.ndim != 4 or self.windows.shape[1] != 1:
            raise ShapeError(f"windows must be (N, 1, rows, L), got {self.windows.shape}")
        n = len(self.windows)
        if len(self.y1) != n or len(self.y2) != n:
            raise DataError("label arrays must match the number of windows")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_len(self) -> int:
        return self.windows.shape[3]

    def subset(self, indices) -> "WindowedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return WindowedDataset(
            self.windows[idx],
            self.y1[idx],
            self.y2[idx],
            self.num_classes1,
            self.num_classes2,
            [self.provenance[i] for i in idx] if self.provenance else [],
            self.activity_names,
            self.placement_names,
        )


@dataclass
class DataSplits:
    """Train/validation/test views used by the trainers."""

    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset


@dataclass
class SplitSpec:
    """Sorted, duplicate-free index lists for an 80:20 split plus folds."""

    train_idx: np.ndarray
    test_idx: np.ndarray
    folds: list  # list of sorted index arrays partitioning train_idx
    seed: int


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def window_slide(rec: RawRecording, window_len: int = 100, step: int = 60) -> list:
    """Cut a recording into windows starting at 0, step, 2*step, ...

    Each window's activity label is the most frequent per-sample label in
    it (ties break to the smallest label id); the placement label is the
    recording's. A recording shorter than ``window_len`` yields no windows.
    """
    if window_len < 1 or step < 1:
        raise ConfigError(f"window_len and step must be >= 1, got {window_len}, {step}")
    n = len(rec)
    out = []
    for start in range(0, n - window_len + 1, step):
        chunk = rec.activity_labels[start : start + window_len]
        y1 = int(np.bincount(chunk).argmax())
        out.append(
            Window(
                data=rec.samples[start : start + window_len].T.copy(),
                y1=y1,
                y2=int(rec.placement_label),
                subject_id=rec.subject_id,
                source=rec.source,
                start=start,
            )
        )
    return out


def assemble(
    windows: Sequence[Window],
    num_classes1: Optional[int] = None,
    num_classes2: Optional[int] = None,
    activity_names: Optional[list] = None,
    placement_names: Optional[list] = None,
) -> WindowedDataset:
    """Stack windows (in the given order) into an (N, 1, 3, L) dataset."""
    if not windows:
        c1 = num_classes1 or (len(activity_names) if activity_names else 2)
        c2 = num_classes2 or (len(placement_names) if placement_names else 2)
        return WindowedDataset(
            np.zeros((0, 1, 3, 1), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            c1,
            c2,
            [],
            activity_names,
            placement_names,
        )
    lengths = {w.data.shape for w in windows}
    if len(lengths) != 1:
        raise ShapeError(f"windows have mixed shapes: {sorted(lengths)}")
    stack = np.stack([w.data for w in windows])[:, None, :, :]
    y1 = np.array([w.y1 for w in windows], dtype=np.int64)
    y2 = np.array([w.y2 for w in windows], dtype=np.int64)
    c1 = num_classes1 or (len(activity_names) if activity_names else int(y1.max()) + 1)
    c2 = num_classes2 or (len(placement_names) if placement_names else int(y2.max()) + 1)
    prov = [(w.subject_id, w.source, w.start) for w in windows]
    return WindowedDataset(stack, y1, y2, c1, c2, prov, activity_names, placement_names)


# ---------------------------------------------------------------------------
# splits and folds
# ---------------------------------------------------------------------------


def split_and_fold(n: int, seed: int, train_frac: float = 0.8, n_folds: int = 5) -> SplitSpec:
    """Seeded shuffle, then floor(train_frac*n) train / rest test, with the
    train part cut into ``n_folds`` near-equal folds (sizes differ by <= 1,
    larger folds first)."""
    if n < 10:
        raise DataError(f"need at least 10 windows to split, got {n}")
    rng = np.random.default_rng([int(seed), 2])
    perm = rng.permutation(n)
    n_train = int(np.floor(train_frac * n))
    train_shuffled = perm[:n_train]
    test_idx = np.sort(perm[n_train:])
    base, extra = divmod(n_train, n_folds)
    folds = []
    pos = 0
    for k in range(n_folds):
        size = base + (1 if k < extra else 0)
        folds.append(np.sort(train_shuffled[pos : pos + size]))
        pos += size
    return SplitSpec(np.sort(train_shuffled), test_idx, folds, int(seed))


# ---------------------------------------------------------------------------
# canonical CSV
# ---------------------------------------------------------------------------

CANONICAL_COLUMNS = ["subject_id", "placement_label", "activity_label", "x", "y", "z", "sample_index"]


@dataclass(frozen=True)
class CanonicalSchema:
    """Label vocabularies for one dataset; string -> id via list position."""

    activity_names: tuple
    placement_names: tuple

    def activity_id(self, name: str, where: str = "") -> int:
        try:
            return self.activity_names.index(name)
        except ValueError:
            raise DataError(
                f"unknown activity label {name!r}{where}; valid: {list(self.activity_names)}"
            ) from None

    def placement_id(self, name: str, where: str = "") -> int:
        try:
            return self.placement_names.index(name)
        except ValueError:
            raise DataError(
                f"unknown placement label {name!r}{where}; valid: {list(self.placement_names)}"
            ) from None


def ingest_csv(path, schema: CanonicalSchema) -> list:
    """Parse one canonical CSV into recordings.

    Rows group by (subject, placement); a non-increasing sample_index
    starts a new recording within a group, so sessions survive the
    round trip. Sample order is preserved.
    """
    path = Path(path)
    recordings = []
    current_key = None
    samples, labels = [], []
    last_index = None

    def flush():
        if current_key is not None and samples:
            subject, placement = current_key
            recordings.append(
                RawRecording(
                    subject_id=subject,
                    placement_label=placement,
                    samples=np.array(samples, dtype=np.float32),
                    activity_labels=np.array(labels, dtype=np.int64),
                    source=str(path),
                )
            )

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != CANONICAL_COLUMNS:
            raise DataError(f"{path}: expected header {CANONICAL_COLUMNS}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f" ({path}:{lineno})"
            if len(row) != len(CANONICAL_COLUMNS):
                raise DataError(f"malformed row with {len(row)} fields{where}")
            subject, placement_s, activity_s = row[0], row[1], row[2]
            try:
                x, y, z = float(row[3]), float(row[4]), float(row[5])
                sample_index = int(row[6])
            except ValueError as exc:
                raise DataError(f"malformed row: {exc}{where}") from None
            placement = schema.placement_id(placement_s, where)
            activity = schema.activity_id(activity_s, where)
            key = (subject, placement)
            if key != current_key or (last_index is not None and sample_index <= last_index):
                flush()
                current_key = key
                samples, labels = [], []
            samples.append((x, y, z))
            labels.append(activity)
            last_index = sample_index
        flush()
    return recordings


def write_canonical_csv(recordings: Iterable[RawRecording], path, schema: CanonicalSchema) -> None:
    """Emit recordings in canonical CSV form; output is deterministic, so
    re-running an adapter produces byte-identical files."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    for rec in recordings:
        placement = schema.placement_names[rec.placement_label]
        for i, ((x, y, z), act) in enumerate(zip(rec.samples, rec.activity_labels)):
            writer.writerow(
                [rec.subject_id, placement, schema.activity_names[act],
                 repr(float(x)), repr(float(y)), repr(float(z)), i]
            )
    path.write_text(buf.getvalue())


def windows_from_csv(path, schema: CanonicalSchema, window_len: int = 100, step: int = 60) -> WindowedDataset:
    """Ingest one or more canonical CSVs and window them in file order."""
    paths = [Path(path)] if isinstance(path, (str, Path)) else [Path(p) for p in path]
    wins = []
    for p in sorted(paths):
        for rec in ingest_csv(p, schema):
            wins.extend(window_slide(rec, window_len, step))
    return assemble(
        wins,
        num_classes1=len(schema.activity_names),
        num_classes2=len(schema.placement_names),
        activity_names=list(schema.activity_names),
        placement_names=list(schema.placement_names),
    )


# ---------------------------------------------------------------------------
# public dataset adapters
# ---------------------------------------------------------------------------

MHEALTH_ACTIVITIES = (
    "null", "standing_still", "sitting_relaxing", "lying_down", "walking",
    "climbing_stairs", "waist_bends_forward", "frontal_elevation_arms",
    "knees_bending", "cycling", "jogging", "running", "jump_front_back",
)
MHEALTH_PLACEMENTS = ("chest", "wrist", "ankle")
# column offsets of the accelerometer triples in the 24-column log files
_MHEALTH_ACC_COLS = {"chest": 0, "ankle": 5, "wrist": 14}
_MHEALTH_LABEL_COL = 23

WISDM_ACTIVITIES = (
    "walking", "jogging", "stairs", "sitting", "standing", "typing",
    "brushing_teeth", "eating_soup", "eating_chips", "eating_pasta",
    "drinking_from_cup", "eating_sandwich", "kicking_soccer_ball",
    "playing_catch_tennis_ball", "dribbling_basketball", "writing",
    "clapping", "folding_clothes",
)
_WISDM_CODES = dict(zip("ABCDEFGHIJKLMOPQRS", range(18)))  # N is unused upstream
WISDM_PLACEMENTS = ("phone-pocket", "watch-wrist")

SLEEP_POSTURES = (
    "up_supine", "up_right", "right_up", "right_lateral", "right_down",
    "down_right", "down_prone", "down_left", "left_down", "left_lateral",
    "left_up", "up_left",
)
SLEEP_ABBREVIATIONS = ("U", "UR", "RU", "R", "RD", "DR", "D", "DL", "LD", "L", "LU", "UL")
SLEEP_PLACEMENTS = ("chest", "neck", "abdomen")


def schema_for(kind: str) -> CanonicalSchema:
    if kind == "mhealth":
        return CanonicalSchema(MHEALTH_ACTIVITIES, MHEALTH_PLACEMENTS)
    if kind == "wisdm":
        return CanonicalSchema(WISDM_ACTIVITIES, WISDM_PLACEMENTS)
    if kind == "wisdm-phone":
        return CanonicalSchema(WISDM_ACTIVITIES, ("phone-pocket",))
    if kind == "sleep":
        return CanonicalSchema(SLEEP_POSTURES, SLEEP_PLACEMENTS)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _require_files(paths: list, what: str) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise DataError(f"missing {what} files: {missing}")


def _adapt_mhealth(root: Path, out_dir: Path) -> list:
    """Per-subject logs -> canonical CSV, accelerometer columns only."""
    subject_files = sorted(root.glob("mHealth_subject*.log"))
    if not subject_files:
        _require_files([root / "mHealth_subject1.log"], "MHealth")
    schema = schema_for("mhealth")
    written = []
    for f in subject_files:
        subject = f.stem.replace("mHealth_", "")
        raw = np.loadtxt(f)
        if raw.ndim == 1:
            raw = raw[None, :]
        labels = raw[:, _MHEALTH_LABEL_COL].astype(np.int64)
        recs = []
        for placement in MHEALTH_PLACEMENTS:
            col = _MHEALTH_ACC_COLS[placement]
            recs.append(
                RawRecording(
                    subject_id=subject,
                    placement_label=schema.placement_id(placement),
                    samples=raw[:, col : col + 3],
                    activity_labels=labels,
                    sampling_rate_hz=50.0,
                    source=str(f),
                )
            )
        out = out_dir / f"mhealth_{subject}.csv"
        write_canonical_csv(recs, out, schema)
        written.append(out)
    return written


def _adapt_wisdm(root: Path, out_dir: Path, phone_only: bool = False) -> list:
    """WISDM raw accelerometer logs -> canonical CSV, one file per subject.

    Placement is phone-pocket or watch-wrist; ``phone_only`` keeps just the
    phone stream (the second task degenerates to one class there).
    """
    devices = [("phone", "phone-pocket")] + ([] if phone_only else [("watch", "watch-wrist")])
    schema = schema_for("wisdm-phone" if phone_only else "wisdm")
    by_subject: dict = {}
    found_any = False
    for device, placement in devices:
        folder = root / "raw" / device / "accel"
        for f in sorted(folder.glob("data_*_accel_*.txt")):
            found_any = True
            subject = f.stem.split("_")[1]
            samples: list = []
            acts: list = []
            for lineno, line in enumerate(f.read_text().splitlines(), start=1):
                line = line.strip().rstrip(";")
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 6:
                    raise DataError(f"malformed row with {len(parts)} fields ({f}:{lineno})")
                code = parts[1]
                if code not in _WISDM_CODES:
                    raise DataError(
                        f"unknown activity code {code!r} ({f}:{lineno}); valid: {sorted(_WISDM_CODES)}"
                    )
                samples.append((float(parts[3]), float(parts[4]), float(parts[5])))
                acts.append(_WISDM_CODES[code])
            if samples:
                # one continuous recording per file; the activity stream
                # varies inside it and majority vote settles window labels
                by_subject.setdefault(subject, []).append(
                    RawRecording(
                        subject_id=subject,
                        placement_label=schema.placement_id(placement),
                        samples=np.array(samples, dtype=np.float32),
                        activity_labels=np.array(acts, dtype=np.int64),
                        sampling_rate_hz=20.0,
                        source=str(f),
                    )
                )
    if not found_any:
        _require_files([root / "raw" / "phone" / "accel"], "WISDM")
    written = []
    for subject in sorted(by_subject):
        out = out_dir / f"wisdm_{subject}.csv"
        write_canonical_csv(by_subject[subject], out, schema)
        written.append(out)
    return written


def _adapt_sleep(root: Path, out_dir: Path) -> list:
    """Sleep posture recordings -> canonical CSV.

    Expects ``root/<subject>/<POSTURE>_<placement>.csv`` where POSTURE is
    one of the 12 posture names or abbreviations (U, UR, ..., UL) and each
    file holds an x,y,z header plus one sample per row at 50 Hz.
    """
    schema = schema_for("sleep")
    subjects = sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []
    if not subjects:
        _require_files([root], "Sleep")
    label_of = {abbr: i for i, abbr in enumerate(SLEEP_ABBREVIATIONS)}
    label_of.update({name: i for i, name in enumerate(SLEEP_POSTURES)})
    written = []
    for subject_dir in subjects:
        recs = []
        for f in sorted(subject_dir.glob("*.csv")):
            stem_parts = f.stem.rsplit("_", 1)
            if len(stem_parts) != 2:
                raise DataError(f"cannot parse posture/placement from file name {f.name!r}")
            posture_s, placement_s = stem_parts
            if posture_s not in label_of:
                raise DataError(
                    f"unknown posture {posture_s!r} in {f.name}; valid: {list(SLEEP_ABBREVIATIONS)}"
                )
            placement = schema.placement_id(placement_s, f" ({f})")
            table = np.genfromtxt(f, delimiter=",", names=True)
            samples = np.stack(
                [np.atleast_1d(table["x"]), np.atleast_1d(table["y"]), np.atleast_1d(table["z"])],
                axis=1,
            )
            recs.append(
                RawRecording(
                    subject_id=subject_dir.name,
                    placement_label=placement,
                    samples=samples,
                    activity_labels=np.full(len(samples), label_of[posture_s], dtype=np.int64),
                    sampling_rate_hz=50.0,
                    source=str(f),
                )
            )
        out = out_dir / f"sleep_{subject_dir.name}.csv"
        write_canonical_csv(recs, out, schema)
        written.append(out)
    return written


def adapt_public_dataset(kind: str, root, out_dir, phone_only: bool = False) -> list:
    """Convert a published dataset layout into canonical CSV files."""
    root, out_dir = Path(root), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "mhealth":
        return _adapt_mhealth(root, out_dir)
    if kind == "wisdm":
        return _adapt_wisdm(root, out_dir, phone_only=phone_only)
    if kind == "sleep":
        return _adapt_sleep(root, out_dir)
    raise ConfigError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_generate(
    n_per_class: int,
    num_classes1: int,
    num_classes2: int,
    window_len: int = 100,
    seed: int = 0,
    difficulty: float = 0.0,
) -> WindowedDataset:
    """Sinusoid-plus-offset windows: task-1 class sets the frequency,
    task-2 class sets a per-axis DC offset.

    ``difficulty`` scales both Gaussian noise and random phase jitter; at
    0 every window of a class pair is identical, so both tasks are
    separable by construction.
    """
    if n_per_class < 1 or num_classes1 < 1 or num_classes2 < 1 or window_len < 1:
        raise ConfigError("synth_generate parameters must be positive")
    if difficulty < 0:
        raise ConfigError(f"difficulty must be >= 0, got {difficulty}")
    rng = np.random.default_rng([int(seed), 3])
    t = np.arange(window_len, dtype=np.float64) / window_len
    axis_phase = np.array([0.0, 2.094395102393195, 4.18879020478639])  # 0, 2pi/3, 4pi/3
    n_total = n_per_class * num_classes1 * num_classes2
    windows = np.empty((n_total, 1, 3, window_len), dtype=np.float32)
    y1 = np.empty(n_total, dtype=np.int64)
    y2 = np.empty(n_total, dtype=np.int64)
    i = 0
    for c1 in range(num_classes1):
        freq = float(c1 + 1)
        for c2 in range(num_classes2):
            theta = 2.0 * np.pi * c2 / num_classes2
            offsets = 1.5 * np.array([np.cos(theta), np.sin(theta), np.cos(2.0 * theta)])
            for _ in range(n_per_class):
                jitter = difficulty * rng.uniform(-np.pi, np.pi)
                noise = difficulty * rng.standard_normal((3, window_len))
                sig = np.sin(2.0 * np.pi * freq * t[None, :] + axis_phase[:, None] + jitter)
                windows[i, 0] = sig + offsets[:, None] + noise
                y1[i] = c1
                y2[i] = c2
                i += 1
    prov = [("synth", f"seed={seed}", k) for k in range(n_total)]
    return WindowedDataset(windows, y1, y2, num_classes1, num_classes2, prov)


# ---------------------------------------------------------------------------
# window cache container
# ---------------------------------------------------------------------------


def save_windows(ds: WindowedDataset, path) -> None:
    """Write a dataset to the binary cache format (deterministic bytes)."""
    path = Path(path)
    header = {
        "version": 1,
        "n": len(ds),
        "rows": int(ds.windows.shape[2]),
        "window_len": int(ds.window_len),
        "num_classes1": ds.num_classes1,
        "num_classes2": ds.num_classes2,
        "activity_names": ds.activity_names,
        "placement_names": ds.placement_names,
        "provenance": [[s, src, int(st)] for s, src, st in ds.provenance],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ds.windows, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.y1, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(ds.y2, dtype="<i4").tobytes())


def load_windows(path) -> WindowedDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise DataError(f"{path} is not a window cache (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n, rows, L = header["n"], header["rows"], header["window_len"]
        windows = np.frombuffer(fh.read(4 * n * rows * L), dtype="<f4").reshape(n, 1, rows, L)
        y1 = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int64)
        y2 = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int64)
    return WindowedDataset(
        windows.copy(),
        y1,
        y2,
        header["num_classes1"],
        header["num_classes2"],
        [(s, src, st) for s, src, st in header["provenance"]],
        header["activity_names"],
        header["placement_names"],
    )
