"""Confusion-derived metrics, ROC-AUC, and per-domain reporting.

A metric whose denominator is empty (for instance sensitivity with no
positives) is undefined and carried as None; rendering serializes it as
null. Balanced accuracy is the mean of sensitivity and specificity and is
undefined whenever either of them is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, ParseError


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int
    domain_id: int = 0

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.domain_id < 0:
            raise ValueError("domain_id must be non-negative")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricRow:
    bacc: float | None
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    roc_auc: float | None = None


@dataclass
class DomainReport:
    per_domain: dict[int, MetricRow] = field(default_factory=dict)
    overall_pooled: MetricRow | None = None
    overall_macro: MetricRow | None = None
    threshold: float = 0.5


def confusion_at_threshold(
    samples: list[ScoredSample], threshold: float
) -> ConfusionCounts:
    """Counts with the decision rule: predict positive iff score >= threshold."""
    if not samples:
        raise EmptyInput("confusion of an empty sample list")
    tp = fp = tn = fn = 0
    for s in samples:
        predicted = s.score >= threshold
        if s.label == 1:
            tp += predicted
            fn += not predicted
        else:
            fp += predicted
            tn += not predicted
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def summarize(counts: ConfusionCounts) -> MetricRow:
    """Ratios from confusion counts; zero-denominator ratios are undefined."""
    sens = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    spec = counts.tn / (counts.tn + counts.fp) if counts.tn + counts.fp else None
    acc = (counts.tp + counts.tn) / counts.total if counts.total else None
    bacc = (sens + spec) / 2.0 if sens is not None and spec is not None else None
    return MetricRow(bacc=bacc, accuracy=acc, sensitivity=sens, specificity=spec)


def roc_auc(samples: list[ScoredSample]) -> float | None:
    """Mann-Whitney AUC with half credit for ties, via tie-aware ranks.

    Equals the O(n^2) average over positive-negative pairs of
    1[pos > neg] + 0.5 * 1[pos == neg]; undefined when a class is absent.
    """
    if not samples:
        return None
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.intp)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based ranks, ties share the midpoint rank
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1

    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def domain_report(samples: list[ScoredSample], threshold: float) -> DomainReport:
    """Per-domain rows plus pooled and macro-averaged overall rows."""
    if not samples:
        raise EmptyInput("report of an empty sample list")
    by_domain: dict[int, list[ScoredSample]] = {}
    for s in samples:
        by_domain.setdefault(s.domain_id, []).append(s)

    per_domain = {}
    for domain in sorted(by_domain):
        group = by_domain[domain]
        row = summarize(confusion_at_threshold(group, threshold))
        per_domain[domain] = MetricRow(
            bacc=row.bacc,
            accuracy=row.accuracy,
            sensitivity=row.sensitivity,
            specificity=row.specificity,
            roc_auc=roc_auc(group),
        )

    pooled_row = summarize(confusion_at_threshold(samples, threshold))
    pooled = MetricRow(
        bacc=pooled_row.bacc,
        accuracy=pooled_row.accuracy,
        sensitivity=pooled_row.sensitivity,
        specificity=pooled_row.specificity,
        roc_auc=roc_auc(samples),
    )

    def macro(name: str) -> float | None:
        values = [
            getattr(row, name)
            for row in per_domain.values()
            if getattr(row, name) is not None
        ]
        return float(np.mean(values)) if values else None

    macro_row = MetricRow(
        bacc=macro("bacc"),
        accuracy=macro("accuracy"),
        sensitivity=macro("sensitivity"),
        specificity=macro("specificity"),
        roc_auc=macro("roc_auc"),
    )
    return DomainReport(
        per_domain=per_domain,
        overall_pooled=pooled,
        overall_macro=macro_row,
        threshold=threshold,
    )


_ROW_FIELDS = ("bacc", "accuracy", "sensitivity", "specificity", "roc_auc")


def _row_dict(row: MetricRow, rounded: bool) -> dict:
    out = {}
    for name in _ROW_FIELDS:
        value = getattr(row, name)
        if value is None:
            out[name] = None
        else:
            out[name] = round(value, 3) if rounded else value
    return out


def _row_from_dict(d: dict) -> MetricRow:
    return MetricRow(**{name: d.get(name) for name in _ROW_FIELDS})


def render_report(report: DomainReport) -> str:
    """Serialize to JSON: 3-decimal values for display, raw values alongside."""

    def domain_list(rounded: bool) -> list[dict]:
        return [
            {"domain": domain, **_row_dict(row, rounded)}
            for domain, row in sorted(report.per_domain.items())
        ]

    doc = {
        "per_domain": domain_list(rounded=True),
        "overall_pooled": _row_dict(report.overall_pooled, rounded=True),
        "overall_macro": _row_dict(report.overall_macro, rounded=True),
        "raw": {
            "per_domain": domain_list(rounded=False),
            "overall_pooled": _row_dict(report.overall_pooled, rounded=False),
            "overall_macro": _row_dict(report.overall_macro, rounded=False),
        },
        "threshold": report.threshold,
    }
    return json.dumps(doc, indent=2)


def parse_report(text: str) -> DomainReport:
    """Rebuild a DomainReport from the raw section of a rendered report."""
    doc = json.loads(text)
    try:
        raw = doc["raw"]
        per_domain = {
            int(entry["domain"]): _row_from_dict(entry) for entry in raw["per_domain"]
        }
        return DomainReport(
            per_domain=per_domain,
            overall_pooled=_row_from_dict(raw["overall_pooled"]),
            overall_macro=_row_from_dict(raw["overall_macro"]),
            threshold=doc["threshold"],
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"not a report document: missing {exc}") from exc


def _format_value(value: float | None) -> str:
    return "  n/a" if value is None else f"{value:.3f}"


def format_table(report: DomainReport) -> str:
    """Fixed-width text table: one row per domain plus overall rows."""
    header = f"{'Domain':<16} {'BAcc':>5} {'Acc':>5} {'Sens':>5} {'Spec':>5} {'AUC':>5}"
    lines = [header, "-" * len(header)]

    def line(name: str, row: MetricRow) -> str:
        cells = " ".join(_format_value(getattr(row, f)) for f in _ROW_FIELDS)
        return f"{name:<16} {cells}"

    for domain, row in sorted(report.per_domain.items()):
        lines.append(line(str(domain), row))
    lines.append("-" * len(header))
    lines.append(line("Overall (pooled)", report.overall_pooled))
    lines.append(line("Overall (macro)", report.overall_macro))
    return "\n".join(lines)
