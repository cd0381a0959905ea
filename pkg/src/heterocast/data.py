"""Traffic series ingestion, repair, normalization and windowing.

The canonical interchange format is a wide CSV: first column ``t`` holds the
integer interval index, remaining columns hold one sensor each.  Empty cells
mark missing observations.  Multi-feature data uses one file per feature with
identical ``t`` and sensor columns.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DataError, FormatError, ParseError

STD_FLOOR = 1e-8
SPLIT_RATIOS = (0.6, 0.2, 0.2)


@dataclass
class TrafficSeries:
    """Signal tensor over (time, node, feature) with regular timestamps."""

    values: np.ndarray  # (T, N, d) float64, NaN where missing
    timestamps: np.ndarray  # (T,) int64, constant stride
    interval_seconds: int
    node_ids: list[str]
    missing: np.ndarray = field(default=None)  # (T, N, d) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.missing is None:
            self.missing = np.isnan(self.values)
        self.validate()

    def validate(self):
        T, N, d = self.values.shape
        if T < 1 or N < 2 or d < 1:
            raise DataError(f"series too small: T={T}, N={N}, d={d} (need N>=2, d>=1, T>=1)")
        if len(self.timestamps) != T:
            raise DataError("timestamps length does not match values")
        if self.interval_seconds <= 0:
            raise DataError("interval_seconds must be positive")
        strides = np.diff(self.timestamps)
        if T > 1 and not np.all(strides == strides[0]):
            bad = int(np.argmax(strides != strides[0]))
            raise FormatError(
                f"non-constant timestamp stride at row {bad + 1}: "
                f"{self.timestamps[bad]} -> {self.timestamps[bad + 1]}"
            )
        if T > 1 and strides[0] <= 0:
            raise FormatError("timestamps must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def has_missing(self) -> bool:
        return bool(self.missing.any())


@dataclass
class Normalizer:
    """Per-feature z-score statistics fit on a training prefix."""

    mean: np.ndarray  # (d,)
    std: np.ndarray  # (d,), strictly positive

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if np.any(self.std <= 0):
            raise DataError("normalizer std must be strictly positive")

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(mean=np.array(d["mean"]), std=np.array(d["std"]))


@dataclass
class WindowedDataset:
    """Supervised (input window, target window) samples with split tags.

    All values are kept in raw signal units; normalization is applied to
    model inputs at batch time so noise injection and metric computation
    stay in meaningful units.
    """

    inputs: np.ndarray  # (S, P, N, d)
    targets: np.ndarray  # (S, Q, N, d)
    slot_index: np.ndarray  # (S,) period slot of last observed step
    start_timestamps: np.ndarray  # (S,) timestamp of each window's first step
    n_slots: int
    split_tag: np.ndarray = None  # (S,) entries in {train, val, test}

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    def indices(self, split: str) -> np.ndarray:
        if self.split_tag is None:
            raise DataError("dataset has not been split")
        return np.nonzero(self.split_tag == split)[0]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (inputs, targets, slot_index) for one split."""
        idx = self.indices(name)
        return self.inputs[idx], self.targets[idx], self.slot_index[idx]


def load_series(
    paths: str | Path | Sequence[str | Path],
    fmt: str = "wide-csv",
    interval_seconds: int = 300,
) -> TrafficSeries:
    """Load a TrafficSeries from one wide CSV per feature.

    Missing cells become NaN and are flagged; call
    :func:`interpolate_missing` before modeling.
    """
    if fmt != "wide-csv":
        raise FormatError(f"unsupported series format: {fmt!r}")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    planes = []
    timestamps = None
    node_ids = None
    for path in paths:
        ts, ids, plane = _load_wide_csv(Path(path))
        if timestamps is None:
            timestamps, node_ids = ts, ids
        else:
            if not np.array_equal(ts, timestamps) or ids != node_ids:
                raise FormatError(
                    f"feature file {path} does not share the timestamp/node axes "
                    "of the first file"
                )
        planes.append(plane)
    values = np.stack(planes, axis=-1)  # (T, N, d)
    return TrafficSeries(
        values=values,
        timestamps=timestamps,
        interval_seconds=interval_seconds,
        node_ids=list(node_ids),
    )


def _load_wide_csv(path: Path) -> tuple[np.ndarray, list[str], np.ndarray]:
    if not path.exists():
        raise DataError(f"series file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) < 3:
            raise FormatError(f"{path}: need a 't' column plus at least 2 node columns")
        node_ids = [h.strip() for h in header[1:]]
        timestamps: list[int] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}"
                )
            try:
                timestamps.append(int(row[0]))
            except ValueError:
                raise ParseError(f"{path}: row {lineno}: bad interval index {row[0]!r}") from None
            vals = []
            for col, cell in zip(header[1:], row[1:]):
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {lineno}, column {col!r}: non-numeric cell {cell!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.asarray(timestamps, dtype=np.int64), node_ids, np.asarray(rows, dtype=np.float64)


def write_series_csv(path: str | Path, series: TrafficSeries, feature: int = 0) -> None:
    """Write one feature plane back to the wide CSV format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + list(series.node_ids))
        for t, row in zip(series.timestamps, series.values[:, :, feature]):
            writer.writerow([int(t)] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def interpolate_missing(series: TrafficSeries) -> TrafficSeries:
    """Fill missing runs linearly; extend leading/trailing runs with the
    nearest observed value.  Idempotent."""
    if not series.has_missing:
        return replace(series, values=series.values.copy(), missing=series.missing.copy())
    T, N, d = series.shape
    values = series.values.copy()
    t_axis = np.arange(T, dtype=np.float64)
    for n in range(N):
        for f in range(d):
            col = values[:, n, f]
            miss = series.missing[:, n, f]
            if not miss.any():
                continue
            if miss.all():
                raise DataError(
                    f"node {series.node_ids[n]!r} feature {f} has no observed values"
                )
            obs = ~miss
            # np.interp clamps to the edge values, which is exactly the
            # nearest-value extension rule for leading/trailing runs.
            col[miss] = np.interp(t_axis[miss], t_axis[obs], col[obs])
    return replace(series, values=values, missing=np.zeros_like(series.missing))


def fit_normalizer(series: TrafficSeries, train_fraction: float = 0.6) -> Normalizer:
    """Z-score statistics over the chronological training prefix.

    Per feature, pooled over nodes and time; population standard deviation,
    floored at ``STD_FLOOR``.
    """
    T, _, d = series.shape
    n_train = int(np.floor(train_fraction * T))
    if n_train < 2:
        raise DataError(f"training prefix has {n_train} steps; need at least 2")
    prefix = series.values[:n_train]
    if np.isnan(prefix).any():
        raise DataError("cannot fit normalizer on data with missing values")
    mean = prefix.reshape(-1, d).mean(axis=0)
    std = prefix.reshape(-1, d).std(axis=0)  # population formula (ddof=0)
    if np.any(std < STD_FLOOR):
        warnings.warn("constant training data: std floored at 1e-8", stacklevel=2)
        std = np.maximum(std, STD_FLOOR)
    return Normalizer(mean=mean, std=std)


def apply_normalizer(series: TrafficSeries, normalizer: Normalizer) -> TrafficSeries:
    return replace(series, values=normalizer.apply(series.values), missing=series.missing.copy())


def invert_normalizer(values: np.ndarray, normalizer: Normalizer) -> np.ndarray:
    return normalizer.invert(values)


def make_windows(series: TrafficSeries, P: int, Q: int, n_slots: int) -> WindowedDataset:
    """Slide a (P input, Q target) window over the series.

    Sample ``s`` covers steps ``[s, s+P+Q)``; its period slot is the timestamp
    of the last observed step (``s+P-1``) modulo ``n_slots``.
    """
    T, N, d = series.shape
    if series.has_missing:
        raise DataError("interpolate missing values before windowing")
    if T < P + Q:
        raise DataError(f"series length {T} is shorter than P+Q={P + Q}")
    S = T - P - Q + 1
    inputs = np.empty((S, P, N, d), dtype=np.float64)
    targets = np.empty((S, Q, N, d), dtype=np.float64)
    for s in range(S):
        inputs[s] = series.values[s : s + P]
        targets[s] = series.values[s + P : s + P + Q]
    last_obs_ts = series.timestamps[np.arange(S) + P - 1]
    slot_index = (last_obs_ts % n_slots).astype(np.int64)
    return WindowedDataset(
        inputs=inputs,
        targets=targets,
        slot_index=slot_index,
        start_timestamps=series.timestamps[:S].copy(),
        n_slots=n_slots,
    )


def chronological_split(
    dataset: WindowedDataset, ratios: tuple[float, float, float] = SPLIT_RATIOS
) -> WindowedDataset:
    """Tag samples train/val/test in chronological order (no shuffling)."""
    S = dataset.n_samples
    if S < 5:
        raise DataError(f"need at least 5 samples to split, got {S}")
    n_train = int(np.floor(ratios[0] * S))
    n_val = int(np.floor(ratios[1] * S))
    if n_train < 1 or n_val < 1 or S - n_train - n_val < 1:
        raise DataError(f"split of {S} samples leaves an empty partition")
    tag = np.empty(S, dtype="<U5")
    tag[:n_train] = "train"
    tag[n_train : n_train + n_val] = "val"
    tag[n_train + n_val :] = "test"
    return replace(dataset, split_tag=tag)


def add_gaussian_noise(
    dataset: WindowedDataset,
    variance: float,
    seed: int,
    noise_targets: bool = True,
) -> WindowedDataset:
    """Add zero-mean Gaussian noise to the training samples only.

    Noise is applied in raw signal units so the variance is meaningful on the
    measurement scale.  Validation and test samples are returned untouched.
    """
    if variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    inputs = dataset.inputs.copy()
    targets = dataset.targets.copy()
    if variance > 0:
        rng = np.random.default_rng([seed, 0x6E6F6973])  # dedicated noise stream
        train_idx = dataset.indices("train")
        sigma = float(np.sqrt(variance))
        inputs[train_idx] += rng.normal(0.0, sigma, size=inputs[train_idx].shape)
        if noise_targets:
            targets[train_idx] += rng.normal(0.0, sigma, size=targets[train_idx].shape)
    return replace(dataset, inputs=inputs, targets=targets)


def save_prepared(
    out_dir: str | Path,
    dataset: WindowedDataset,
    normalizer: Normalizer,
    node_ids: Sequence[str] = (),
) -> Path:
    """Write a prepared dataset directory (windows + normalizer + manifest)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(
        out_dir / "windows.npz",
        inputs=dataset.inputs,
        targets=dataset.targets,
        slot_index=dataset.slot_index,
        start_timestamps=dataset.start_timestamps,
        split_tag=dataset.split_tag,
    )
    manifest = {
        "node_ids": list(node_ids),
        "n_samples": int(dataset.n_samples),
        "n_train": int(len(dataset.indices("train"))),
        "n_val": int(len(dataset.indices("val"))),
        "n_test": int(len(dataset.indices("test"))),
        "input_len": int(dataset.inputs.shape[1]),
        "horizon": int(dataset.targets.shape[1]),
        "n_nodes": int(dataset.inputs.shape[2]),
        "n_features": int(dataset.inputs.shape[3]),
        "n_slots": int(dataset.n_slots),
        "normalizer": normalizer.to_dict(),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return out_dir


def load_prepared(data_dir: str | Path) -> tuple[WindowedDataset, Normalizer, dict]:
    data_dir = Path(data_dir)
    npz_path = data_dir / "windows.npz"
    manifest_path = data_dir / "manifest.json"
    if not npz_path.exists() or not manifest_path.exists():
        raise DataError(f"{data_dir} is not a prepared dataset directory")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    arrays = np.load(npz_path)
    dataset = WindowedDataset(
        inputs=arrays["inputs"],
        targets=arrays["targets"],
        slot_index=arrays["slot_index"],
        start_timestamps=arrays["start_timestamps"],
        n_slots=int(manifest["n_slots"]),
        split_tag=arrays["split_tag"],
    )
    return dataset, Normalizer.from_dict(manifest["normalizer"]), manifest
