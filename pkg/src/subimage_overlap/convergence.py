"""Convergence statistics over per-epoch validation curves."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

DEFAULT_SNAPSHOTS = (5, 15, 30, 60, 100)
DEFAULT_THRESHOLDS = (0.60, 0.61, 0.62, 0.63, 0.64)


@dataclass(frozen=True)
class MetricCurve:
    """Values for epochs ``1..len(values)``."""

    values: tuple[float, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def from_points(cls, points, name: str = "") -> "MetricCurve":
        points = list(points)
        epochs = [int(e) for e, _ in points]
        if epochs != list(range(1, len(points) + 1)):
            raise ValueError("epochs must be contiguous and start at 1")
        return cls(tuple(v for _, v in points), name)

    def __len__(self):
        return len(self.values)

    def at(self, epoch: int) -> float:
        if not 1 <= epoch <= len(self.values):
            raise IndexError(f"epoch {epoch} outside 1..{len(self.values)}")
        return self.values[epoch - 1]

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(enumerate(self.values, start=1))


def _curve(curve) -> MetricCurve:
    return curve if isinstance(curve, MetricCurve) else MetricCurve(tuple(curve))


def best_point(curve) -> tuple[int, float]:
    """Maximum value and its earliest epoch."""
    curve = _curve(curve)
    if not len(curve):
        raise ValueError("empty curve")
    best = max(curve.values)
    return curve.values.index(best) + 1, best


def _first_at_least(curve: MetricCurve, threshold: float) -> int | None:
    for epoch, value in curve.points:
        if value >= threshold:
            return epoch
    return None


def first_epoch_within_relative(curve, ratio: float = 0.9) -> int:
    curve = _curve(curve)
    _, best = best_point(curve)
    return _first_at_least(curve, ratio * best)


def first_epoch_within_absolute(curve, margin: float = 0.10) -> int:
    curve = _curve(curve)
    _, best = best_point(curve)
    return _first_at_least(curve, best - margin)


def smoothed_value(curve, epoch: int) -> float:
    """Centred 3-epoch mean, using only the neighbours that exist at the ends."""
    curve = _curve(curve)
    curve.at(epoch)
    lo, hi = max(1, epoch - 1), min(len(curve), epoch + 1)
    window = curve.values[lo - 1:hi]
    return sum(window) / len(window)


def smoothed_snapshot(curve, epoch: int) -> tuple[float, float]:
    """(smoothed, raw) value at ``epoch``."""
    curve = _curve(curve)
    return smoothed_value(curve, epoch), curve.at(epoch)


def smoothed_curve(curve) -> list[float]:
    curve = _curve(curve)
    return [smoothed_value(curve, e) for e in range(1, len(curve) + 1)]


def earliest_epoch_reaching(curve, thresholds) -> dict[float, int]:
    """First epoch whose raw value reaches each threshold; unreached ones are absent."""
    curve = _curve(curve)
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    out = {}
    for t in thresholds:
        epoch = _first_at_least(curve, t)
        if epoch is not None:
            out[t] = epoch
    return out


@dataclass(frozen=True)
class RunSummary:
    model: str
    best: float
    best_epoch: int
    rel10_epoch: int
    abs10pp_epoch: int
    thresholds: dict
    snapshots: dict
    deltas: dict
    test_iou: float | None = None


def summarize(curve: MetricCurve, snapshot_epochs=DEFAULT_SNAPSHOTS,
              thresholds=DEFAULT_THRESHOLDS, baseline: MetricCurve | None = None,
              test_iou: float | None = None) -> RunSummary:
    best_epoch, best = best_point(curve)
    snaps, deltas = {}, {}
    for e in snapshot_epochs:
        if e > len(curve):
            continue
        snaps[e] = smoothed_snapshot(curve, e)
        if baseline is not None:
            if e > len(baseline):
                raise ValueError(f"baseline {baseline.name!r} has no epoch {e}")
            deltas[e] = snaps[e][0] - smoothed_value(baseline, e)
    return RunSummary(
        model=curve.name, best=best, best_epoch=best_epoch,
        rel10_epoch=first_epoch_within_relative(curve),
        abs10pp_epoch=first_epoch_within_absolute(curve),
        thresholds=earliest_epoch_reaching(curve, sorted(thresholds)),
        snapshots=snaps, deltas=deltas, test_iou=test_iou,
    )


@dataclass(frozen=True)
class Report:
    rows: list
    snapshot_epochs: tuple
    thresholds: tuple
    series: dict

    def columns(self) -> list[str]:
        cols = ["model", "best", "best_epoch", "rel10_epoch", "abs10pp_epoch"]
        cols += [f"thr_{t:g}" for t in self.thresholds]
        for e in self.snapshot_epochs:
            cols += [f"smoothed_{e}", f"raw_{e}", f"delta_{e}"]
        return cols + ["test_iou"]

    def table_rows(self) -> list[list[str]]:
        out = []
        for r in self.rows:
            row = [r.model, _fmt(r.best), str(r.best_epoch), str(r.rel10_epoch),
                   str(r.abs10pp_epoch)]
            row += [str(r.thresholds.get(t, "")) for t in self.thresholds]
            for e in self.snapshot_epochs:
                smoothed, raw = r.snapshots.get(e, (None, None))
                row += [_fmt(smoothed), _fmt(raw), _fmt(r.deltas.get(e))]
            row.append(_fmt(r.test_iou))
            out.append(row)
        return out

    def to_csv(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        writer.writerow(self.columns())
        writer.writerows(self.table_rows())
        return buf.getvalue()

    def write(self, out_dir, delimiter: str = ",") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ext = "tsv" if delimiter == "\t" else "csv"
        table = out_dir / f"summary.{ext}"
        table.write_text(self.to_csv(delimiter))
        written = [table]
        for name, curve in self.series.items():
            path = out_dir / f"series_{_safe(name)}.{ext}"
            buf = io.StringIO()
            writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
            writer.writerow(["epoch", "raw", "smoothed"])
            for (e, raw), sm in zip(curve.points, smoothed_curve(curve)):
                writer.writerow([e, _fmt(raw), _fmt(sm)])
            path.write_text(buf.getvalue())
            written.append(path)
        return written


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "run"


def compare_runs(curves, snapshot_epochs=DEFAULT_SNAPSHOTS, thresholds=DEFAULT_THRESHOLDS,
                 baseline: str | None = None, test_iou: dict | None = None) -> Report:
    """Summaries for several named curves, with smoothed deltas against ``baseline``."""
    curves = [_curve(c) for c in curves]
    names = [c.name for c in curves]
    if len(set(names)) != len(names):
        raise ValueError(f"run names must be unique, got {names}")
    base = None
    if baseline is not None:
        lookup = {c.name: c for c in curves}
        if baseline not in lookup:
            raise ValueError(f"baseline {baseline!r} not among runs {names}")
        base = lookup[baseline]
        missing = [e for e in snapshot_epochs if e > len(base)]
        if missing:
            raise ValueError(f"baseline {baseline!r} is missing epochs {missing}")
    test_iou = test_iou or {}
    rows = [summarize(c, snapshot_epochs, thresholds, base, test_iou.get(c.name)) for c in curves]
    return Report(rows, tuple(snapshot_epochs), tuple(sorted(thresholds)),
                  {c.name: c for c in curves})
