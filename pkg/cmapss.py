"""
C-MAPSS turbofan dataset preparation.

Parses the whitespace-separated FD001 text files into per-engine traces,
drops constant sensors, min-max normalizes with training statistics, attaches
piecewise RUL labels and cuts fixed-length windows for the models.

Also owns the self-describing container format (named numpy arrays plus a
JSON metadata entry) shared by dataset splits, attacked datasets and model
checkpoints.
"""

import json
import logging
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from exceptions import (
    CheckpointVersionError,
    CorruptCheckpointError,
    DataParseError,
    UsageError,
)

logger = logging.getLogger(__name__)

SETTING_COLUMNS = [f"setting_{i}" for i in range(1, 4)]
SENSOR_COLUMNS = [f"sensor_{i}" for i in range(1, 22)]
COLUMN_NAMES = ["engine_id", "cycle"] + SETTING_COLUMNS + SENSOR_COLUMNS

DEFAULT_RUL_CAP = 130.0
# Sensor 6 of FD001 only takes the values 21.60 and 21.61 (variance ~2e-6) while the
# least-varying informative sensor sits near 1e-4.
DEFAULT_CONSTANT_TOLERANCE = 1e-5
FD001_DROPPED_SENSORS = 7

CONTAINER_FORMAT_VERSION = 1
_METADATA_KEY = "__metadata__"

PathLike = Union[str, Path]


@dataclass
class EngineTrace:
    """Run of one engine, stored column-wise: row k is cycle ``cycles[k]``."""
    engine_id: int
    cycles: np.ndarray
    settings: np.ndarray
    sensors: np.ndarray
    sensor_ids: Tuple[int, ...] = tuple(range(1, 22))
    rul: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.cycles.size)


@dataclass
class TimeWindow:
    """T×N sensor window and the RUL at its last cycle."""
    values: np.ndarray
    label: float
    engine_id: int
    end_cycle: int


@dataclass
class NormalizationStats:
    """Per-sensor min and max from the training traces."""
    minimum: np.ndarray
    maximum: np.ndarray

    @property
    def span(self) -> np.ndarray:
        return self.maximum - self.minimum

    def apply(self, values: np.ndarray) -> np.ndarray:
        span = self.span
        shifted = np.asarray(values, dtype=np.float64) - self.minimum
        return np.divide(shifted, span, out=np.zeros_like(shifted), where=span > 0)

    def invert(self, values: np.ndarray) -> np.ndarray:
        span = np.where(self.span > 0, self.span, 0.0)
        return np.asarray(values, dtype=np.float64) * span + self.minimum

    def to_dict(self) -> Dict[str, List[float]]:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[float]]) -> "NormalizationStats":
        return cls(np.asarray(data["minimum"], dtype=np.float64),
                   np.asarray(data["maximum"], dtype=np.float64))


@dataclass
class DatasetSplit:
    """Windowed train/test data plus everything needed to reproduce it."""
    train: List[TimeWindow]
    test: List[TimeWindow]
    stats: NormalizationStats
    dropped_sensors: List[int]
    sensor_ids: Tuple[int, ...]
    window_length: int
    rul_cap: float
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass
class PreparedData:
    """Normalized, labeled train and test traces."""
    train: List[EngineTrace]
    test: List[EngineTrace]
    stats: NormalizationStats
    dropped_sensors: List[int]
    rul_cap: float

    @property
    def sensor_ids(self) -> Tuple[int, ...]:
        return self.train[0].sensor_ids if self.train else ()

    def split(self, window_length: int, all_test_windows: bool = False) -> DatasetSplit:
        test = (window(self.test, window_length) if all_test_windows
                else final_windows(self.test, window_length))
        return DatasetSplit(
            train=window(self.train, window_length),
            test=test,
            stats=self.stats,
            dropped_sensors=list(self.dropped_sensors),
            sensor_ids=self.sensor_ids,
            window_length=window_length,
            rul_cap=self.rul_cap,
            metadata={"all_test_windows": all_test_windows},
        )


def load_raw(path: PathLike) -> List[EngineTrace]:
    """
    Parse a C-MAPSS text file into engine traces ordered by engine id.

    Args:
        path: Whitespace-separated file with 26 numeric columns per row

    Returns:
        One EngineTrace per engine, cycles ascending

    Raises:
        DataParseError: Wrong column count, non-numeric value or cycle gaps
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")

    rows, line_numbers = [], []
    with path.open() as handle:
        for number, line in enumerate(handle, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != len(COLUMN_NAMES):
                raise DataParseError(
                    f"expected {len(COLUMN_NAMES)} columns, found {len(fields)}", number
                )
            rows.append(fields)
            line_numbers.append(number)

    if not rows:
        logger.warning(f"{path} contains no rows")
        return []

    frame = pd.DataFrame(rows, columns=COLUMN_NAMES).apply(pd.to_numeric, errors="coerce")
    invalid = frame.isna().any(axis=1).to_numpy()
    if invalid.any():
        raise DataParseError("non-numeric value", line_numbers[int(np.argmax(invalid))])

    traces = []
    for engine_id, group in frame.groupby("engine_id", sort=True):
        group = group.sort_values("cycle", kind="stable")
        cycles = group["cycle"].to_numpy().astype(np.int64)
        if not np.array_equal(cycles, np.arange(1, cycles.size + 1)):
            raise DataParseError(f"engine {int(engine_id)}: cycles must run 1..n without gaps")
        traces.append(EngineTrace(
            engine_id=int(engine_id),
            cycles=cycles,
            settings=group[SETTING_COLUMNS].to_numpy(dtype=np.float64),
            sensors=group[SENSOR_COLUMNS].to_numpy(dtype=np.float64),
        ))

    logger.info(f"Loaded {len(rows)} rows for {len(traces)} engines from {path.name}")
    return traces


def load_rul_offsets(path: PathLike) -> Dict[int, float]:
    """Read ground-truth final RULs; line k belongs to test engine k."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"RUL file not found: {path}")
    offsets = {}
    engine_id = 0
    with path.open() as handle:
        for number, line in enumerate(handle, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 1:
                raise DataParseError(f"expected a single RUL value, found {len(fields)}", number)
            try:
                value = float(fields[0])
            except ValueError:
                raise DataParseError(f"non-numeric RUL '{fields[0]}'", number) from None
            engine_id += 1
            offsets[engine_id] = value
    return offsets


def select_sensors(traces: Sequence[EngineTrace], sensor_ids: Sequence[int]) -> List[EngineTrace]:
    """Keep only the given original sensor ids, in their current order."""
    selected = []
    for trace in traces:
        columns = [trace.sensor_ids.index(sensor) for sensor in sensor_ids]
        selected.append(replace(trace, sensors=trace.sensors[:, columns],
                                sensor_ids=tuple(sensor_ids)))
    return selected


def drop_constant_sensors(
    traces: Sequence[EngineTrace],
    tolerance: float = DEFAULT_CONSTANT_TOLERANCE,
    expected: Optional[int] = None,
) -> Tuple[List[EngineTrace], List[int]]:
    """
    Remove sensors whose variance over all rows is below ``tolerance``.

    Returns:
        Traces with the retained sensors (order preserved) and the dropped
        original sensor ids
    """
    if not traces:
        raise UsageError("drop_constant_sensors needs at least one trace")

    rows = np.concatenate([trace.sensors for trace in traces], axis=0)
    variance = rows.var(axis=0)
    sensor_ids = traces[0].sensor_ids
    dropped = [sensor for sensor, var in zip(sensor_ids, variance) if var < tolerance]
    retained = [sensor for sensor in sensor_ids if sensor not in dropped]

    if expected is not None and len(dropped) != expected:
        logger.warning(
            f"Constant-sensor detection dropped {len(dropped)} sensors, expected {expected}; "
            f"proceeding with {dropped}"
        )
    logger.info(f"Dropped constant sensors {dropped}; {len(retained)} retained")
    return select_sensors(traces, retained), dropped


def normalize(
    traces: Sequence[EngineTrace],
    stats: Optional[NormalizationStats] = None,
) -> Tuple[List[EngineTrace], NormalizationStats]:
    """
    Min-max map each sensor to [0, 1].

    Stats are computed from ``traces`` when absent (training data) and only
    applied when given (test data); test values outside the training range
    are not clamped.
    """
    if stats is None:
        if not traces:
            raise UsageError("cannot compute normalization stats from no traces")
        rows = np.concatenate([trace.sensors for trace in traces], axis=0)
        stats = NormalizationStats(rows.min(axis=0), rows.max(axis=0))
    normalized = [replace(trace, sensors=stats.apply(trace.sensors)) for trace in traces]
    return normalized, stats


def denormalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return stats.invert(values)


def label_rul(
    traces: Sequence[EngineTrace],
    cap: float = DEFAULT_RUL_CAP,
    final_rul_offsets: Optional[Mapping[int, float]] = None,
) -> List[EngineTrace]:
    """Attach piecewise RUL: min(cap, offset + last_cycle - cycle)."""
    if cap <= 0:
        raise UsageError(f"RUL cap must be positive, got {cap}")
    labeled = []
    for trace in traces:
        offset = 0.0
        if final_rul_offsets is not None:
            if trace.engine_id not in final_rul_offsets:
                raise UsageError(f"no ground-truth RUL for engine {trace.engine_id}")
            offset = float(final_rul_offsets[trace.engine_id])
        remaining = offset + (trace.cycles[-1] - trace.cycles).astype(np.float64)
        labeled.append(replace(trace, rul=np.minimum(cap, remaining)))
    return labeled


def _require_labels(trace: EngineTrace) -> np.ndarray:
    if trace.rul is None:
        raise UsageError(f"engine {trace.engine_id} has no RUL labels; run label_rul first")
    return trace.rul


def window(traces: Sequence[EngineTrace], length: int, stride: int = 1) -> List[TimeWindow]:
    """
    Cut every full window of ``length`` cycles, ordered by (engine_id, end_cycle).

    Engines shorter than ``length`` yield no windows.
    """
    if length < 1 or stride < 1:
        raise UsageError(f"window length and stride must be >= 1, got {length}, {stride}")
    windows = []
    for trace in sorted(traces, key=lambda item: item.engine_id):
        labels = _require_labels(trace)
        for end in range(length - 1, len(trace), stride):
            windows.append(TimeWindow(
                values=trace.sensors[end - length + 1:end + 1].copy(),
                label=float(labels[end]),
                engine_id=trace.engine_id,
                end_cycle=int(trace.cycles[end]),
            ))
    return windows


def pad_front(sensors: np.ndarray, length: int) -> np.ndarray:
    """Left-pad with the earliest row repeated until ``length`` rows exist."""
    missing = length - sensors.shape[0]
    if missing <= 0:
        return sensors
    return np.concatenate([np.repeat(sensors[:1], missing, axis=0), sensors], axis=0)


def final_windows(traces: Sequence[EngineTrace], length: int) -> List[TimeWindow]:
    """One window per engine ending at its last cycle; short engines are left-padded."""
    if length < 1:
        raise UsageError(f"window length must be >= 1, got {length}")
    windows = []
    for trace in sorted(traces, key=lambda item: item.engine_id):
        labels = _require_labels(trace)
        values = pad_front(trace.sensors[-length:], length)
        windows.append(TimeWindow(values=values.copy(), label=float(labels[-1]),
                                  engine_id=trace.engine_id, end_cycle=int(trace.cycles[-1])))
    return windows


def subset_min_cycles(traces: Sequence[EngineTrace], min_cycles: int = 150) -> List[EngineTrace]:
    """Keep engines with at least ``min_cycles`` recorded cycles."""
    if min_cycles < 1:
        raise UsageError(f"min_cycles must be >= 1, got {min_cycles}")
    return [trace for trace in traces if len(trace) >= min_cycles]


def stack_windows(windows: Sequence[TimeWindow]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack windows into a (B, T, N) array and a (B,) label array."""
    if not windows:
        return np.zeros((0, 0, 0)), np.zeros(0)
    values = np.stack([item.values for item in windows]).astype(np.float64)
    labels = np.array([item.label for item in windows], dtype=np.float64)
    return values, labels


def prepare(
    train_path: PathLike,
    test_path: PathLike,
    rul_path: Optional[PathLike] = None,
    cap: float = DEFAULT_RUL_CAP,
    tolerance: float = DEFAULT_CONSTANT_TOLERANCE,
    expected_dropped: Optional[int] = FD001_DROPPED_SENSORS,
) -> PreparedData:
    """Load, clean, normalize and label a train/test pair of C-MAPSS files."""
    train_raw = load_raw(train_path)
    test_raw = load_raw(test_path)
    if not train_raw:
        raise UsageError(f"training file {train_path} holds no engines")

    train, dropped = drop_constant_sensors(train_raw, tolerance, expected_dropped)
    test = select_sensors(test_raw, train[0].sensor_ids)
    train, stats = normalize(train)
    test, _ = normalize(test, stats)

    offsets = load_rul_offsets(rul_path) if rul_path is not None else None
    return PreparedData(
        train=label_rul(train, cap),
        test=label_rul(test, cap, offsets),
        stats=stats,
        dropped_sensors=dropped,
        rul_cap=cap,
    )


def save_container(path: PathLike, arrays: Mapping[str, np.ndarray],
                   metadata: Mapping[str, Any]) -> Path:
    """Write named arrays plus JSON metadata (with format version) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"format_version": CONTAINER_FORMAT_VERSION, **metadata}
    payload = dict(arrays)
    payload[_METADATA_KEY] = np.array(json.dumps(document, sort_keys=True))
    with path.open("wb") as handle:
        np.savez(handle, **payload)
    return path


def load_container(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a container written by save_container.

    Raises:
        CorruptCheckpointError: Truncated or foreign file, missing metadata
        CheckpointVersionError: Unsupported format version
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"container not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            if _METADATA_KEY not in data.files:
                raise CorruptCheckpointError(f"{path}: metadata entry missing")
            metadata = json.loads(str(data[_METADATA_KEY]))
            arrays = {name: data[name] for name in data.files if name != _METADATA_KEY}
    except (zipfile.BadZipFile, EOFError, OSError, ValueError, KeyError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable container ({e})") from e

    version = metadata.get("format_version")
    if version != CONTAINER_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CONTAINER_FORMAT_VERSION}"
        )
    return arrays, metadata


def _window_arrays(prefix: str, windows: Sequence[TimeWindow]) -> Dict[str, np.ndarray]:
    values, labels = stack_windows(windows)
    return {
        f"{prefix}_values": values,
        f"{prefix}_labels": labels,
        f"{prefix}_engine_ids": np.array([item.engine_id for item in windows], dtype=np.int64),
        f"{prefix}_end_cycles": np.array([item.end_cycle for item in windows], dtype=np.int64),
    }


def _windows_from_arrays(prefix: str, arrays: Mapping[str, np.ndarray]) -> List[TimeWindow]:
    try:
        values = arrays[f"{prefix}_values"]
        labels = arrays[f"{prefix}_labels"]
        engines = arrays[f"{prefix}_engine_ids"]
        ends = arrays[f"{prefix}_end_cycles"]
    except KeyError as e:
        raise CorruptCheckpointError(f"container lacks array {e}") from e
    return [
        TimeWindow(values=values[k].copy(), label=float(labels[k]),
                   engine_id=int(engines[k]), end_cycle=int(ends[k]))
        for k in range(labels.size)
    ]


def save_windows(path: PathLike, windows: Sequence[TimeWindow], metadata: Mapping[str, Any]) -> Path:
    """Store a flat window list, e.g. an attacked test set with provenance."""
    return save_container(path, _window_arrays("windows", windows),
                          {"kind": "windows", **metadata})


def load_windows(path: PathLike) -> Tuple[List[TimeWindow], Dict[str, Any]]:
    arrays, metadata = load_container(path)
    return _windows_from_arrays("windows", arrays), metadata


def save_split(split: DatasetSplit, path: PathLike) -> Path:
    arrays = {**_window_arrays("train", split.train), **_window_arrays("test", split.test)}
    metadata = {
        "kind": "dataset_split",
        "stats": split.stats.to_dict(),
        "dropped_sensors": list(split.dropped_sensors),
        "sensor_ids": list(split.sensor_ids),
        "window_length": split.window_length,
        "rul_cap": split.rul_cap,
        "extra": split.metadata,
    }
    return save_container(path, arrays, metadata)


def load_split(path: PathLike) -> DatasetSplit:
    arrays, metadata = load_container(path)
    if metadata.get("kind") != "dataset_split":
        raise CorruptCheckpointError(f"{path}: not a dataset split container")
    return DatasetSplit(
        train=_windows_from_arrays("train", arrays),
        test=_windows_from_arrays("test", arrays),
        stats=NormalizationStats.from_dict(metadata["stats"]),
        dropped_sensors=list(metadata["dropped_sensors"]),
        sensor_ids=tuple(metadata["sensor_ids"]),
        window_length=int(metadata["window_length"]),
        rul_cap=float(metadata["rul_cap"]),
        metadata=dict(metadata.get("extra", {})),
    )
