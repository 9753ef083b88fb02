"""Boundary segmentation scoring and phone-pair boundary analysis.

Hypothesis boundaries are matched greedily to reference boundaries in
increasing reference order, each reference taking the nearest unconsumed
hypothesis within the tolerance (20 ms by default). Precision, recall, F1,
over-segmentation, and the R-value are derived from the matched counts.
Utterance-initial and utterance-final reference marks are excluded before
matching.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import LabeledInterval, LabelFoldTable, default_fold_table
from .errors import NoReferenceBoundaries

DEFAULT_TOLERANCE_S = 0.02


@dataclass
class MatchCounts:
    n_hits: int = 0
    n_ref: int = 0
    n_hyp: int = 0
    tolerance_s: float = DEFAULT_TOLERANCE_S


@dataclass
class EvalReport:
    """Boundary detection metrics, all ratios as fractions in [0, 1]."""

    precision: float
    recall: float
    f1: float
    over_segmentation: float
    r_value: float
    r1: float
    r2: float
    n_hits: int
    n_ref: int
    n_hyp: int
    tolerance_s: float


def reference_boundaries(
    intervals: Sequence[LabeledInterval], duration_s: float | None = None
) -> list[float]:
    """Interior alignment edges in seconds, utterance edges dropped."""
    if duration_s is None and intervals:
        duration_s = intervals[-1].end_s
    times: set[float] = set()
    for iv in intervals:
        times.add(iv.start_s)
        times.add(iv.end_s)
    eps = 1e-6
    return sorted(
        t for t in times if t > eps and (duration_s is None or t < duration_s - eps)
    )


def match_boundaries(
    ref: Sequence[float], hyp: Sequence[float], tolerance_s: float = DEFAULT_TOLERANCE_S
) -> MatchCounts:
    """Greedy one-to-one matching of hypothesis to reference boundaries.

    References are visited in increasing order; each takes the nearest
    not-yet-consumed hypothesis within the tolerance, preferring the
    earlier hypothesis on exact ties.
    """
    ref = sorted(ref)
    hyp = sorted(hyp)
    used = [False] * len(hyp)
    hits = 0
    for r in ref:
        best_j, best_d = -1, math.inf
        for j, h in enumerate(hyp):
            if used[j]:
                continue
            if h > r + tolerance_s + 1e-12:
                break
            d = abs(h - r)
            if d <= tolerance_s + 1e-12 and d < best_d - 1e-12:
                best_j, best_d = j, d
        if best_j >= 0:
            used[best_j] = True
            hits += 1
    return MatchCounts(n_hits=hits, n_ref=len(ref), n_hyp=len(hyp), tolerance_s=tolerance_s)


def accumulate_counts(counts: Iterable[MatchCounts]) -> MatchCounts:
    """Sum per-utterance counts into corpus-level counts."""
    total = MatchCounts(tolerance_s=DEFAULT_TOLERANCE_S)
    first = True
    for c in counts:
        if first:
            total.tolerance_s = c.tolerance_s
            first = False
        elif abs(c.tolerance_s - total.tolerance_s) > 1e-12:
            raise ValueError("cannot accumulate counts matched at different tolerances")
        total.n_hits += c.n_hits
        total.n_ref += c.n_ref
        total.n_hyp += c.n_hyp
    return total


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def r_value(precision: float, recall: float) -> float:
    """Segmentation R-value from precision and recall fractions.

    With zero precision the over-segmentation ratio is +inf and the value
    degenerates to -inf through its r2 term; a warning is emitted since the
    number is then only a sentinel for "no usable hypothesis".
    """
    if precision == 0.0:
        warnings.warn("R-value is degenerate at zero precision", RuntimeWarning, stacklevel=2)
        return -math.inf
    os = recall / precision - 1.0
    r1 = math.sqrt((1.0 - recall) ** 2 + os**2)
    r2 = (-os + recall - 1.0) / math.sqrt(2.0)
    return 1.0 - (abs(r1) + abs(r2)) / 2.0


def compute_metrics(counts: MatchCounts) -> EvalReport:
    """Precision/recall/F1/OS/R-value from matched boundary counts."""
    if counts.n_ref == 0:
        raise NoReferenceBoundaries("no reference boundaries to score against")
    precision = counts.n_hits / counts.n_hyp if counts.n_hyp > 0 else 0.0
    recall = counts.n_hits / counts.n_ref
    if precision == 0.0:
        warnings.warn(
            "zero precision: over-segmentation is +inf and the R-value degenerates",
            RuntimeWarning,
            stacklevel=2,
        )
        os = math.inf
        r1 = math.inf
        r2 = -math.inf
        rval = -math.inf
    else:
        os = recall / precision - 1.0
        r1 = math.sqrt((1.0 - recall) ** 2 + os**2)
        r2 = (-os + recall - 1.0) / math.sqrt(2.0)
        rval = 1.0 - (abs(r1) + abs(r2)) / 2.0
    return EvalReport(
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        over_segmentation=os,
        r_value=rval,
        r1=r1,
        r2=r2,
        n_hits=counts.n_hits,
        n_ref=counts.n_ref,
        n_hyp=counts.n_hyp,
        tolerance_s=counts.tolerance_s,
    )


def write_report(path: str | Path, report: EvalReport) -> None:
    lines = [
        f"precision {report.precision:.6f}",
        f"recall {report.recall:.6f}",
        f"f1 {report.f1:.6f}",
        f"os {report.over_segmentation:.6f}",
        f"r_value {report.r_value:.6f}",
        f"n_hits {report.n_hits}",
        f"n_ref {report.n_ref}",
        f"n_hyp {report.n_hyp}",
        f"tolerance_s {report.tolerance_s:.3f}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_report(report: EvalReport, title: str = "boundary detection") -> str:
    pct = lambda x: f"{100 * x:6.2f}" if math.isfinite(x) else f"{x:>6}"
    return "\n".join(
        [
            f"{title} @ {report.tolerance_s * 1000:.0f} ms tolerance",
            f"  precision {pct(report.precision)} %   ({report.n_hits}/{report.n_hyp})",
            f"  recall    {pct(report.recall)} %   ({report.n_hits}/{report.n_ref})",
            f"  f1        {pct(report.f1)} %",
            f"  os        {pct(report.over_segmentation)} %",
            f"  r-value   {pct(report.r_value)} %",
        ]
    )


class PairConfusion:
    """Hit counts for reference boundaries grouped by flanking broad classes."""

    def __init__(self, classes: Sequence[str]):
        self.classes = list(classes)
        n = len(self.classes)
        self.hits = np.zeros((n, n), dtype=int)
        self.totals = np.zeros((n, n), dtype=int)
        self._index = {c: i for i, c in enumerate(self.classes)}

    def add(self, left: str, right: str, hit: bool) -> None:
        i, j = self._index[left], self._index[right]
        self.totals[i, j] += 1
        if hit:
            self.hits[i, j] += 1

    def accuracy(self) -> np.ndarray:
        """Fraction detected per (left, right) class pair; NaN when unseen."""
        with np.errstate(invalid="ignore"):
            return np.where(self.totals > 0, self.hits / np.maximum(self.totals, 1), np.nan)

    def to_csv(self, path: str | Path) -> None:
        acc = self.accuracy()
        lines = ["left\\right," + ",".join(self.classes)]
        for i, left in enumerate(self.classes):
            cells = [
                "" if self.totals[i, j] == 0 else f"{100 * acc[i, j]:.2f}"
                for j in range(len(self.classes))
            ]
            lines.append(",".join([left] + cells))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def pair_confusion(
    ref_alignments: Mapping[str, Sequence[LabeledInterval]],
    hyp_boundaries: Mapping[str, Sequence[float]],
    table: LabelFoldTable | None = None,
    tolerance_s: float = DEFAULT_TOLERANCE_S,
) -> PairConfusion:
    """Score each adjacent phone pair's boundary for detection.

    A reference boundary between two adjacent phones counts as detected
    when any hypothesis boundary of the same utterance lies within the
    tolerance. Pairs separated by an alignment gap are skipped.
    """
    table = table or default_fold_table()
    conf = PairConfusion(table.broad_classes)
    for utt_id, intervals in ref_alignments.items():
        hyp = sorted(hyp_boundaries.get(utt_id, []))
        for a, b in zip(intervals[:-1], intervals[1:]):
            if abs(a.end_s - b.start_s) > 1e-6:
                continue
            left = table.fold(a.label, table.BROAD)
            right = table.fold(b.label, table.BROAD)
            t = a.end_s
            hit = any(abs(h - t) <= tolerance_s + 1e-12 for h in hyp)
            conf.add(left, right, hit)
    return conf
