"""Per-slice pixel metrics, mean aggregation and run comparison."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from subseg._atomic import atomic_write_text
from subseg.errors import EmptyAggregateError, IncomparableRunsError, ParseError, ShapeError

REPORT_HEADER = "SUBSEGREPORT v1"


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


@dataclass(frozen=True)
class SliceMetrics:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def dice(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def gt_empty(self) -> bool:
        return self.tp + self.fn == 0


def slice_metrics(pred: np.ndarray, gt: np.ndarray) -> SliceMetrics:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return SliceMetrics(tp, fp, fn)


@dataclass
class MetricsReport:
    n_slices: int
    mean_precision: float
    mean_recall: float
    mean_dice: float
    per_slice: list[tuple[tuple[str, int], SliceMetrics]] = field(default_factory=list)
    config_fingerprint: str = ""
    skip_empty_gt: bool = False

    @property
    def keys(self) -> set[tuple[str, int]]:
        return {k for k, _ in self.per_slice}

    def micro(self) -> SliceMetrics:
        """Pooled-pixel counts over all included slices (not the reported mean)."""
        return SliceMetrics(
            sum(m.tp for _, m in self.per_slice),
            sum(m.fp for _, m in self.per_slice),
            sum(m.fn for _, m in self.per_slice),
        )


def aggregate(per_slice, skip_empty_gt=False, config_fingerprint="") -> MetricsReport:
    """Unweighted mean of per-slice ratios.

    ``per_slice`` holds either ``SliceMetrics`` or ``(key, SliceMetrics)``
    pairs; bare metrics get positional keys ``("", i)``.
    """
    items = []
    for i, item in enumerate(per_slice):
        if isinstance(item, SliceMetrics):
            items.append((("", i), item))
        else:
            key, m = item
            items.append(((str(key[0]), int(key[1])), m))
    if skip_empty_gt:
        items = [(k, m) for k, m in items if not m.gt_empty]
    if not items:
        raise EmptyAggregateError("no slices left to aggregate")
    n = len(items)
    # fsum is exactly rounded, so the result does not depend on slice order
    return MetricsReport(
        n_slices=n,
        mean_precision=math.fsum(m.precision for _, m in items) / n,
        mean_recall=math.fsum(m.recall for _, m in items) / n,
        mean_dice=math.fsum(m.dice for _, m in items) / n,
        per_slice=sorted(items, key=lambda kv: kv[0]),
        config_fingerprint=config_fingerprint,
        skip_empty_gt=skip_empty_gt,
    )


def report_text(report: MetricsReport, per_slice=True) -> str:
    lines = [
        REPORT_HEADER,
        f"n_slices={report.n_slices}",
        f"mean_precision={report.mean_precision:.6f}",
        f"mean_recall={report.mean_recall:.6f}",
        f"mean_dice={report.mean_dice:.6f}",
        f"skip_empty_gt={int(report.skip_empty_gt)}",
        f"config={report.config_fingerprint}",
    ]
    if per_slice:
        for (case_id, idx), m in report.per_slice:
            lines.append(f"{case_id},{idx},{m.tp},{m.fp},{m.fn}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, path, per_slice=True) -> None:
    atomic_write_text(path, report_text(report, per_slice))


def read_report(path) -> MetricsReport:
    """Parse a report file; means are recomputed from per-slice counts when present."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != REPORT_HEADER:
        raise ParseError(f"{path}: missing {REPORT_HEADER} header", 1)
    fields: dict[str, str] = {}
    per_slice = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if "=" in line and "," not in line.split("=", 1)[0]:
            name, value = line.split("=", 1)
            fields[name.strip()] = value.strip()
            continue
        parts = line.split(",")
        try:
            case_id = parts[0]
            idx, tp, fp, fn = (int(p) for p in parts[1:])
        except ValueError as exc:
            raise ParseError(f"{path}: malformed per-slice line {line!r}", lineno) from exc
        per_slice.append(((case_id, idx), SliceMetrics(tp, fp, fn)))
    skip = fields.get("skip_empty_gt", "0") == "1"
    fingerprint = fields.get("config", "")
    if per_slice:
        return aggregate(per_slice, skip_empty_gt=skip, config_fingerprint=fingerprint)
    try:
        return MetricsReport(
            n_slices=int(fields["n_slices"]),
            mean_precision=float(fields["mean_precision"]),
            mean_recall=float(fields["mean_recall"]),
            mean_dice=float(fields["mean_dice"]),
            config_fingerprint=fingerprint,
            skip_empty_gt=skip,
        )
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: incomplete report ({exc})") from exc


@dataclass
class Comparison:
    labels: tuple[str, str]
    rows: tuple[tuple[float, float, float], tuple[float, float, float]]

    @property
    def deltas(self) -> tuple[float, float, float]:
        a, b = self.rows
        return tuple(x - y for x, y in zip(a, b))

    def format(self) -> str:
        width = max(12, *(len(label) for label in self.labels), len("Delta"))
        head = f"{'':<{width}}  {'Precision':>9}  {'Recall':>9}  {'DICE':>9}"
        out = [head]
        for label, row in zip(self.labels, self.rows):
            out.append(f"{label:<{width}}  " + "  ".join(f"{v:>9.4f}" for v in row))
        out.append(f"{'Delta':<{width}}  " + "  ".join(f"{v:>+9.4f}" for v in self.deltas))
        return "\n".join(out) + "\n"


def compare_runs(a: MetricsReport, b: MetricsReport, labels: Sequence[str] = ("A", "B")) -> Comparison:
    diff = a.keys ^ b.keys
    if diff:
        raise IncomparableRunsError(len(diff))
    return Comparison(
        tuple(labels),
        (
            (a.mean_precision, a.mean_recall, a.mean_dice),
            (b.mean_precision, b.mean_recall, b.mean_dice),
        ),
    )
