"""Evaluation metrics and cross-run aggregation.

``tightness`` is the gap between a certificate and the observed test error,
``pearson`` the sample correlation of bounds against test errors, and
``aggregate`` groups :class:`RunRecord` rows into summary statistics.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "RunRecord",
    "SummaryRow",
    "UndefinedCorrelationError",
    "tightness",
    "is_violation",
    "pearson",
    "aggregate",
    "summary_csv",
    "SUMMARY_COLUMNS",
]

SUMMARY_COLUMNS = (
    "tier", "method", "count", "bound_mean", "bound_median", "bound_iqr",
    "test_mean", "tightness_mean", "tightness_median", "pearson",
)


class UndefinedCorrelationError(ValueError):
    """Pearson correlation is undefined for a constant input vector."""


@dataclass(frozen=True)
class RunRecord:
    instance: int
    repetition: int
    tier: str
    method: str
    bound: float
    train_loss: float
    test_loss: float
    episodes: int | None = None

    def __post_init__(self):
        for name in ("bound", "train_loss", "test_loss"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")

    @property
    def tightness(self) -> float:
        return tightness(self.bound, self.test_loss)


def tightness(bound: float, test_error: float) -> float:
    return bound - test_error


def is_violation(bound: float, test_error: float) -> bool:
    return tightness(bound, test_error) < 0


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    r = float(dx @ dy) / (sx * sy)
    return max(-1.0, min(1.0, r))


def _quartiles(v: np.ndarray) -> tuple[float, float, float]:
    # linear interpolation between order statistics (spreadsheet QUARTILE.INC)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(q1), float(med), float(q3)


@dataclass(frozen=True)
class SummaryRow:
    key: tuple
    count: int
    bound_mean: float
    bound_median: float
    bound_iqr: float
    test_mean: float
    test_median: float
    test_iqr: float
    tightness_mean: float
    tightness_median: float
    tightness_iqr: float
    pearson: float | None  # None when a group is too small or constant
    outliers: tuple[int, ...]  # indices into the input records, by bound

    def as_dict(self, group_by: Sequence[str]) -> dict:
        d = dict(zip(group_by, self.key))
        d.update({k: v for k, v in asdict(self).items() if k != "key"})
        d["outliers"] = list(self.outliers)
        return d


def aggregate(records: Sequence[RunRecord], group_by: Sequence[str] = ("tier", "method")) -> list[SummaryRow]:
    """One summary row per distinct ``group_by`` key, in first-seen order.

    Outliers are records whose bound falls outside the 1.5 IQR whiskers of
    their group; they are reported, not removed.
    """
    if not records:
        raise ValueError("aggregate needs at least one record")
    groups: dict[tuple, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(tuple(getattr(r, k) for k in group_by), []).append(i)

    rows = []
    for key, idx in groups.items():
        b = np.array([records[i].bound for i in idx])
        te = np.array([records[i].test_loss for i in idx])
        ti = b - te
        (bq1, bmed, bq3), (tq1, tmed, tq3), (gq1, gmed, gq3) = _quartiles(b), _quartiles(te), _quartiles(ti)
        lo, hi = bq1 - 1.5 * (bq3 - bq1), bq3 + 1.5 * (bq3 - bq1)
        try:
            r = pearson(b, te)
        except ValueError:
            r = None
        rows.append(SummaryRow(
            key=key, count=len(idx),
            bound_mean=float(b.mean()), bound_median=bmed, bound_iqr=bq3 - bq1,
            test_mean=float(te.mean()), test_median=tmed, test_iqr=tq3 - tq1,
            tightness_mean=float(ti.mean()), tightness_median=gmed, tightness_iqr=gq3 - gq1,
            pearson=r,
            outliers=tuple(i for i, v in zip(idx, b) if v < lo or v > hi),
        ))
    return rows


def summary_csv(rows: Iterable[SummaryRow], group_by: Sequence[str] = ("tier", "method")) -> str:
    """Render summary rows as CSV text.

    Key columns beyond ``tier`` and ``method`` (e.g. ``episodes``) are
    appended after the fixed columns. Empty cells mean undefined values.
    """
    extra = [k for k in group_by if k not in ("tier", "method")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(SUMMARY_COLUMNS) + extra)
    for row in rows:
        d = row.as_dict(group_by)
        out = []
        for col in list(SUMMARY_COLUMNS) + extra:
            v = d.get(col)
            out.append("" if v is None else repr(v) if isinstance(v, float) else v)
        w.writerow(out)
    return buf.getvalue()
