"""Parsing, cleaning, normalization, labeling, windowing and containers."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from cmapss import (COLUMN_NAMES, EngineTrace, NormalizationStats, denormalize, drop_constant_sensors,
                    final_windows, label_rul, load_container, load_raw, load_rul_offsets, load_split,
                    load_windows, normalize, pad_front, prepare, save_container, save_split,
                    save_windows, subset_min_cycles, window)
from data_generator import CONSTANT_SENSORS
from exceptions import CheckpointVersionError, CorruptCheckpointError, DataParseError, UsageError


def _row(engine: int, cycle: int) -> str:
    return " ".join([str(engine), str(cycle)] + ["0.5"] * (len(COLUMN_NAMES) - 2))


def _trace(engine_id: int, cycles: int, sensors: int = 2) -> EngineTrace:
    values = np.arange(cycles * sensors, dtype=np.float64).reshape(cycles, sensors)
    return EngineTrace(engine_id=engine_id, cycles=np.arange(1, cycles + 1),
                       settings=np.zeros((cycles, 3)), sensors=values,
                       sensor_ids=tuple(range(1, sensors + 1)))


def test_load_raw_groups_engines(synthetic_dir):
    traces = load_raw(synthetic_dir / "train_FD001.txt")
    assert [trace.engine_id for trace in traces] == list(range(1, 9))
    for trace in traces:
        npt.assert_array_equal(trace.cycles, np.arange(1, len(trace) + 1))
        assert trace.sensors.shape == (len(trace), 21)
        assert trace.settings.shape == (len(trace), 3)
        assert 60 <= len(trace) <= 80


def test_load_raw_reports_wrong_column_count(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text(_row(1, 1) + "\n" + "1 2 3\n")
    with pytest.raises(DataParseError) as info:
        load_raw(path)
    assert info.value.line_number == 2


def test_load_raw_reports_non_numeric_value(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text(_row(1, 1) + "\n" + _row(1, 2) + "\n" + _row(1, 3).replace("0.5", "abc", 1) + "\n")
    with pytest.raises(DataParseError) as info:
        load_raw(path)
    assert info.value.line_number == 3


def test_load_raw_rejects_cycle_gaps(tmp_path):
    path = tmp_path / "gap.txt"
    path.write_text(_row(1, 1) + "\n" + _row(1, 3) + "\n")
    with pytest.raises(DataParseError, match="gaps"):
        load_raw(path)


def test_load_raw_empty_and_missing(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert load_raw(empty) == []
    with pytest.raises(FileNotFoundError):
        load_raw(tmp_path / "absent.txt")


def test_load_rul_offsets(tmp_path):
    path = tmp_path / "RUL.txt"
    path.write_text("112\n98\n\n69\n")
    assert load_rul_offsets(path) == {1: 112.0, 2: 98.0, 3: 69.0}
    path.write_text("112\nabc\n")
    with pytest.raises(DataParseError) as info:
        load_rul_offsets(path)
    assert info.value.line_number == 2


def test_drop_constant_sensors_finds_synthetic_constants(synthetic_dir):
    traces = load_raw(synthetic_dir / "train_FD001.txt")
    cleaned, dropped = drop_constant_sensors(traces, expected=7)
    assert dropped == list(CONSTANT_SENSORS)
    assert cleaned[0].sensors.shape[1] == 14
    assert all(sensor not in cleaned[0].sensor_ids for sensor in dropped)


def test_drop_constant_sensors_warns_on_unexpected_count(synthetic_dir, caplog):
    traces = load_raw(synthetic_dir / "train_FD001.txt")
    with caplog.at_level("WARNING"):
        drop_constant_sensors(traces, expected=3)
    assert "expected 3" in caplog.text


def test_normalize_maps_training_range_to_unit_interval():
    traces = [_trace(1, 5), _trace(2, 4)]
    traces[1].sensors[:, 1] = 7.0
    traces[0].sensors[:, 1] = 7.0
    normalized, stats = normalize(traces)
    rows = np.concatenate([trace.sensors for trace in normalized])
    assert rows[:, 0].min() == 0.0 and rows[:, 0].max() == 1.0
    npt.assert_array_equal(rows[:, 1], 0.0)

    test, _ = normalize([_trace(3, 12)], stats)
    assert test[0].sensors[:, 0].max() > 1.0
    npt.assert_allclose(denormalize(normalized[0].sensors[:, :1], NormalizationStats(
        stats.minimum[:1], stats.maximum[:1])), traces[0].sensors[:, :1])


def test_label_rul_caps_and_offsets():
    labeled = label_rul([_trace(1, 200)], cap=130)[0]
    assert labeled.rul[0] == 130.0
    assert labeled.rul[-1] == 0.0
    npt.assert_array_equal(labeled.rul[-5:], [4, 3, 2, 1, 0])

    truncated = label_rul([_trace(1, 31)], cap=130, final_rul_offsets={1: 112})[0]
    assert truncated.rul[-1] == 112.0
    assert truncated.rul[0] == 130.0
    with pytest.raises(UsageError):
        label_rul([_trace(2, 5)], final_rul_offsets={1: 10})


def test_window_counts_and_order():
    traces = label_rul([_trace(2, 10), _trace(1, 192)])
    windows = window(traces, 80)
    assert len(windows) == 113
    assert all(item.engine_id == 1 for item in windows)
    assert [item.end_cycle for item in windows[:3]] == [80, 81, 82]
    assert windows[0].values.shape == (80, 2)
    assert windows[-1].label == 0.0

    strided = window(traces, 80, stride=2)
    assert [item.end_cycle for item in strided[:2]] == [80, 82]
    assert window(label_rul([_trace(1, 5)]), 6) == []


def test_window_rejects_bad_length_and_unlabeled_traces():
    with pytest.raises(UsageError):
        window(label_rul([_trace(1, 5)]), 0)
    with pytest.raises(UsageError, match="label_rul"):
        window([_trace(1, 5)], 3)


def test_final_windows_pad_short_engines():
    traces = label_rul([_trace(1, 3), _trace(2, 10)], final_rul_offsets={1: 50, 2: 20})
    windows = final_windows(traces, 5)
    assert [item.engine_id for item in windows] == [1, 2]
    npt.assert_array_equal(windows[0].values[:3], np.repeat(traces[0].sensors[:1], 3, axis=0))
    npt.assert_array_equal(windows[0].values[2:], traces[0].sensors)
    assert windows[0].label == 50.0
    assert pad_front(traces[1].sensors, 4) is traces[1].sensors


def test_subset_min_cycles():
    traces = [_trace(1, 149), _trace(2, 150), _trace(3, 300)]
    assert [trace.engine_id for trace in subset_min_cycles(traces)] == [2, 3]


def test_prepare_synthetic(prepared):
    assert prepared.dropped_sensors == list(CONSTANT_SENSORS)
    assert len(prepared.sensor_ids) == 14
    assert len(prepared.train) == 8 and len(prepared.test) == 6
    split = prepared.split(10)
    assert len(split.test) == 6
    assert split.train[0].values.shape == (10, 14)
    assert max(item.label for item in split.train) <= 130.0
    assert len(prepared.split(10, all_test_windows=True).test) >= len(split.test)


def test_split_container_round_trip(prepared, tmp_path):
    split = prepared.split(8)
    path = save_split(split, tmp_path / "split.npz")
    loaded = load_split(path)
    assert len(loaded.train) == len(split.train)
    npt.assert_array_equal(loaded.train[5].values, split.train[5].values)
    assert loaded.test[0].label == split.test[0].label
    assert loaded.dropped_sensors == split.dropped_sensors
    assert loaded.sensor_ids == split.sensor_ids
    npt.assert_array_equal(loaded.stats.minimum, split.stats.minimum)


def test_windows_container_keeps_metadata(prepared, tmp_path):
    windows = prepared.split(8).test
    path = save_windows(tmp_path / "w.npz", windows, {"attack": "FGSM(eps=0.3)"})
    loaded, metadata = load_windows(path)
    assert metadata["attack"] == "FGSM(eps=0.3)"
    assert metadata["format_version"] == 1
    assert [item.engine_id for item in loaded] == [item.engine_id for item in windows]


def test_corrupt_and_foreign_containers(tmp_path):
    path = save_container(tmp_path / "c.npz", {"x": np.arange(100.0)}, {"kind": "test"})
    data = path.read_bytes()
    truncated = tmp_path / "truncated.npz"
    truncated.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_container(truncated)

    bare = tmp_path / "bare.npz"
    np.savez(bare, x=np.zeros(2))
    with pytest.raises(CorruptCheckpointError, match="metadata"):
        load_container(bare)

    future = tmp_path / "future.npz"
    np.savez(future, x=np.zeros(2), __metadata__=np.array(json.dumps({"format_version": 99})))
    with pytest.raises(CheckpointVersionError):
        load_container(future)

    with pytest.raises(FileNotFoundError):
        load_container(tmp_path / "missing.npz")


def test_fd001_counts(real_data_dir):
    data = prepare(real_data_dir / "train_FD001.txt", real_data_dir / "test_FD001.txt",
                   real_data_dir / "RUL_FD001.txt")
    assert len(data.train) == 100
    assert len(data.test) == 100
    assert len(data.dropped_sensors) == 7
    assert len(data.sensor_ids) == 14
    assert len(subset_min_cycles(data.test, 150)) == 37
