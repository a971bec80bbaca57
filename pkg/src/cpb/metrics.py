"""Confusion counts against test-day ground truth and the derived quality metrics.

Ratios with a zero denominator are reported as ``None`` and left out of
averages; they are never coerced to zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np

from .forecast import PredictionList

RATES = ("tpr", "fpr", "ppv", "f1")
DELTAS = ("tp_impr", "fp_incr", "fn_incr")
METRICS = RATES + DELTAS


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int
    # test-day attackers outside the candidate universe (diagnostic only)
    unreachable: int = 0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.fn, self.tn


def confusion(pred: PredictionList, test) -> Confusion:
    """Count blacklist/whitelist hits against the set of test-day attackers."""
    test = np.unique(np.asarray(list(test) if isinstance(test, (set, frozenset)) else test, dtype=np.uint32))
    black, white = pred.blacklist, pred.whitelist
    tp = int(np.isin(black, test).sum())
    fn = int(np.isin(white, test).sum())
    return Confusion(
        tp=tp,
        fp=len(black) - tp,
        fn=fn,
        tn=len(white) - fn,
        unreachable=int((~np.isin(test, pred.universe)).sum()),
    )


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class QualityReport:
    tpr: float | None
    fpr: float | None
    ppv: float | None
    f1: float | None
    tp_impr: float | None
    fp_incr: float | None
    fn_incr: float | None

    @property
    def undefined(self) -> frozenset[str]:
        return frozenset(k for k, v in asdict(self).items() if v is None)

    def as_dict(self) -> dict[str, float | None]:
        return asdict(self)


def derive(conf: Confusion, baseline: Confusion) -> QualityReport:
    """Rates of ``conf`` plus its relative change versus the no-sharing baseline."""
    tp, fp, fn, tn = conf.as_tuple()
    # 2TP/(2TP+FP+FN) is the harmonic mean of PPV and TPR, and stays defined
    # (as 0) when TP=0 but some prediction or miss exists
    return QualityReport(
        tpr=_ratio(tp, tp + fn),
        fpr=_ratio(fp, fp + tn),
        ppv=_ratio(tp, tp + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        tp_impr=_ratio(tp - baseline.tp, baseline.tp),
        fp_incr=_ratio(fp - baseline.fp, baseline.fp),
        fn_incr=_ratio(fn - baseline.fn, baseline.fn),
    )


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    n: int
    excluded: int


def aggregate(reports: Iterable[QualityReport | Mapping]) -> dict[str, MetricSummary | None]:
    """Mean and population std of every metric over its defined values.

    A metric with no defined value maps to None (absent, not zero).
    """
    values: dict[str, list[float]] = {m: [] for m in METRICS}
    excluded = dict.fromkeys(METRICS, 0)
    for rep in reports:
        row = rep.as_dict() if isinstance(rep, QualityReport) else rep
        for m in METRICS:
            v = row.get(m)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                excluded[m] += 1
            else:
                values[m].append(float(v))
    out: dict[str, MetricSummary | None] = {}
    for m in METRICS:
        vals = values[m]
        if not vals:
            out[m] = None
            continue
        # sorted so the float sum does not depend on row order
        arr = np.sort(np.asarray(vals))
        mean = math.fsum(arr) / len(arr)
        std = math.sqrt(math.fsum((arr - mean) ** 2) / len(arr))
        out[m] = MetricSummary(mean, std, len(arr), excluded[m])
    return out


TABLE_COLUMNS = ("clustering", "k", "avg_size", "n_collab", "tpr", "ppv", "tp_impr", "fp_incr", "fn_incr", "f1")


def _fmt(x: float | None, digits: int = 2) -> str:
    return "NA" if x is None else f"{x:.{digits}f}"


def table_row(
    clustering: str,
    k: int,
    avg_size: float,
    n_collab: int,
    summary: Mapping[str, MetricSummary | None],
) -> dict[str, str]:
    """One results-table row; TP and FP deltas are formatted as mean ± std."""

    def mean(m):
        s = summary.get(m)
        return None if s is None else s.mean

    def pm(m):
        s = summary.get(m)
        return "NA" if s is None else f"{s.mean:.2f} ± {s.std:.2f}"

    return {
        "clustering": clustering,
        "k": str(k),
        "avg_size": _fmt(avg_size, 1),
        "n_collab": str(n_collab),
        "tpr": _fmt(mean("tpr")),
        "ppv": _fmt(mean("ppv")),
        "tp_impr": pm("tp_impr"),
        "fp_incr": pm("fp_incr"),
        "fn_incr": _fmt(mean("fn_incr")),
        "f1": _fmt(mean("f1")),
    }
