import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subimage_overlap.convergence import (
    MetricCurve,
    best_point,
    compare_runs,
    earliest_epoch_reaching,
    first_epoch_within_absolute,
    first_epoch_within_relative,
    smoothed_curve,
    smoothed_snapshot,
    smoothed_value,
)

curves = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=40)


def test_best_point_earliest_tie():
    assert best_point([0.1, 0.5, 0.3, 0.5]) == (2, 0.5)


def test_relative_threshold_hand_trace():
    curve = [0.2, 0.5, 0.55, 0.6]
    # 0.9 * 0.6 = 0.54, first value >= 0.54 is 0.55 at epoch 3
    assert first_epoch_within_relative(curve) == 3
    # 0.6 - 0.10 = 0.5, first value >= 0.5 is epoch 2
    assert first_epoch_within_absolute(curve) == 2
    assert first_epoch_within_absolute([0.05, 0.08]) == 1
    assert first_epoch_within_absolute(curve, margin=0.0) == 4


def test_smoothing_examples():
    assert smoothed_value([0.3] * 5, 3) == pytest.approx(0.3)
    assert smoothed_value([0.1, 0.40, 0.46, 0.43, 0.2], 3) == pytest.approx(0.43)
    assert smoothed_snapshot([0.5, 0.6, 0.613, 0.613], 4) == pytest.approx((0.613, 0.613))
    assert smoothed_value([0.2, 0.4, 0.9], 1) == pytest.approx(0.3)
    with pytest.raises(IndexError):
        smoothed_value([0.2, 0.4], 3)


def test_threshold_attainment_uses_raw_values():
    got = earliest_epoch_reaching([0.58, 0.605, 0.62], (0.60, 0.61, 0.62))
    assert got == {0.60: 2, 0.61: 3, 0.62: 3}
    assert earliest_epoch_reaching([0.58, 0.605, 0.609], (0.60, 0.61, 0.62)) == {0.60: 2}
    assert earliest_epoch_reaching([0.1, 0.2], (0.6, 0.7)) == {}
    assert earliest_epoch_reaching([0.1, 0.2], (0.0,)) == {0.0: 1}
    with pytest.raises(ValueError):
        earliest_epoch_reaching([0.1], (0.7, 0.6))


@settings(max_examples=200, deadline=None)
@given(curves)
def test_proximity_ordering(values):
    best_epoch, _ = best_point(values)
    rel = first_epoch_within_relative(values)
    ab = first_epoch_within_absolute(values)
    assert rel <= best_epoch and ab <= best_epoch
    assert ab <= rel


@settings(max_examples=200, deadline=None)
@given(curves)
def test_smoothing_is_a_contraction(values):
    sm = smoothed_curve(values)
    assert min(values) - 1e-12 <= min(sm) and max(sm) <= max(values) + 1e-12


def test_compare_against_self_has_zero_deltas():
    base = MetricCurve(tuple(np.linspace(0.3, 0.6, 100)), "base")
    report = compare_runs([base], baseline="base")
    assert all(d == 0 for d in report.rows[0].deltas.values())
    assert set(report.rows[0].deltas) == {5, 15, 30, 60, 100}


def test_constructed_offsets_become_deltas():
    base = np.linspace(0.3, 0.6, 100)
    runs = [MetricCurve(tuple(base), "base"), MetricCurve(tuple(base + 0.02), "plus"),
            MetricCurve(tuple(base - 0.01), "minus")]
    report = compare_runs(runs, baseline="base")
    for row, offset in zip(report.rows, (0.0, 0.02, -0.01)):
        for delta in row.deltas.values():
            assert delta == pytest.approx(offset)


def test_report_columns_and_bytes(tmp_path):
    base = MetricCurve(tuple(np.linspace(0.5, 0.65, 100)), "base")
    other = MetricCurve(tuple(np.linspace(0.55, 0.66, 100)), "other")
    report = compare_runs([base, other], baseline="base", test_iou={"other": 0.61})
    cols = report.columns()
    assert cols[:5] == ["model", "best", "best_epoch", "rel10_epoch", "abs10pp_epoch"]
    assert cols[5:10] == ["thr_0.6", "thr_0.61", "thr_0.62", "thr_0.63", "thr_0.64"]
    assert cols[-1] == "test_iou"
    a = [p.read_bytes() for p in report.write(tmp_path / "a")]
    again = compare_runs([base, other], baseline="base", test_iou={"other": 0.61})
    b = [p.read_bytes() for p in again.write(tmp_path / "b")]
    assert a == b
    series = (tmp_path / "a" / "series_other.csv").read_text().splitlines()
    assert series[0] == "epoch,raw,smoothed" and len(series) == 101
    tsv = report.write(tmp_path / "t", "\t")
    assert tsv[0].name == "summary.tsv"


def test_single_run_without_baseline_has_no_deltas():
    report = compare_runs([MetricCurve((0.1, 0.2, 0.3), "only")], snapshot_epochs=(1, 2))
    assert report.rows[0].deltas == {}
    assert report.rows[0].snapshots[1] == pytest.approx((0.15, 0.1))


def test_baseline_missing_epochs_rejected():
    short = MetricCurve((0.1, 0.2), "short")
    with pytest.raises(ValueError, match="missing epochs"):
        compare_runs([short], snapshot_epochs=(5,), baseline="short")
    with pytest.raises(ValueError, match="not among"):
        compare_runs([short], baseline="other")
