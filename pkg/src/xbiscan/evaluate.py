"""Scoring of pipeline predictions against ground truth.

Impact predictions are scored as a 4-class exact-match problem: a 4x4
confusion matrix (rows = ground truth, columns = prediction) with
accuracy = trace/total and macro precision/recall averaged uniformly over
the four labels. A sample predicted with the wrong label counts as a false
positive for the predicted label and a false negative for the true one.

All metric arithmetic is exact (fractions.Fraction); rounding happens only
at display time. A label never predicted (or never present) contributes 0
to the macro mean rather than poisoning it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ContractViolation
from .impact import IMPACT_ORDER, ImpactScore, impact_from_label


@dataclass
class ConfusionMatrix:
    """4x4 counts over the fixed impact-label order; rows are ground truth."""

    counts: list[list[int]]

    @property
    def labels(self) -> tuple[ImpactScore, ...]:
        return IMPACT_ORDER

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def row_sums(self) -> list[int]:
        return [sum(row) for row in self.counts]

    def col_sums(self) -> list[int]:
        return [sum(row[j] for row in self.counts) for j in range(len(IMPACT_ORDER))]

    def tp(self, i: int) -> int:
        return self.counts[i][i]

    def fp(self, i: int) -> int:
        return self.col_sums()[i] - self.counts[i][i]

    def fn(self, i: int) -> int:
        return self.row_sums()[i] - self.counts[i][i]


def confusion(pred: Sequence[ImpactScore], truth: Sequence[ImpactScore]) -> ConfusionMatrix:
    """Count (truth, prediction) pairs into the fixed-order matrix."""
    if len(pred) != len(truth):
        raise ContractViolation(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if not pred:
        raise ContractViolation("confusion requires at least one sample")
    index = {label: i for i, label in enumerate(IMPACT_ORDER)}
    counts = [[0] * len(IMPACT_ORDER) for _ in IMPACT_ORDER]
    for p, t in zip(pred, truth):
        counts[index[t]][index[p]] += 1
    return ConfusionMatrix(counts=counts)


def macro_precision(m: ConfusionMatrix) -> Fraction:
    """Mean over labels of tp/(tp+fp); zero-denominator labels contribute 0."""
    total = Fraction(0)
    for i in range(len(IMPACT_ORDER)):
        denom = m.tp(i) + m.fp(i)
        if denom:
            total += Fraction(m.tp(i), denom)
    return total / len(IMPACT_ORDER)


def macro_recall(m: ConfusionMatrix) -> Fraction:
    """Mean over labels of tp/(tp+fn); zero-denominator labels contribute 0."""
    total = Fraction(0)
    for i in range(len(IMPACT_ORDER)):
        denom = m.tp(i) + m.fn(i)
        if denom:
            total += Fraction(m.tp(i), denom)
    return total / len(IMPACT_ORDER)


def accuracy(m: ConfusionMatrix) -> Fraction:
    """Exact-label-match rate: trace / total."""
    total = m.total
    if total == 0:
        raise ContractViolation("accuracy of an empty matrix is undefined")
    trace = sum(m.tp(i) for i in range(len(IMPACT_ORDER)))
    return Fraction(trace, total)


def collapsed_accuracy(m: ConfusionMatrix) -> Fraction:
    """Accuracy after merging the no-XBI and minor-visual categories.

    Derived display view for triage-focused reading; not a separate metric
    path. A sample counts as correct when prediction and truth agree after
    mapping minor-visual to no-XBI.
    """
    total = m.total
    if total == 0:
        raise ContractViolation("accuracy of an empty matrix is undefined")
    merged = {0: 0, 1: 0, 2: 2, 3: 3}
    correct = 0
    for i in range(len(IMPACT_ORDER)):
        for j in range(len(IMPACT_ORDER)):
            if merged[i] == merged[j]:
                correct += m.counts[i][j]
    return Fraction(correct, total)


@dataclass
class BinaryMetrics:
    """Standard binary metrics with positive = "present".

    A zero denominator yields 0 for that metric and is named in
    zero_denominator_flags rather than raising.
    """

    accuracy: Fraction
    precision: Fraction
    recall: Fraction
    zero_denominator_flags: list[str] = field(default_factory=list)


def binary_metrics(pred: Sequence[bool], truth: Sequence[bool]) -> BinaryMetrics:
    if len(pred) != len(truth):
        raise ContractViolation(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if not pred:
        raise ContractViolation("binary_metrics requires at least one sample")
    tp = sum(1 for p, t in zip(pred, truth) if p and t)
    tn = sum(1 for p, t in zip(pred, truth) if not p and not t)
    fp = sum(1 for p, t in zip(pred, truth) if p and not t)
    fn = sum(1 for p, t in zip(pred, truth) if not p and t)
    flags: list[str] = []
    acc = Fraction(tp + tn, len(pred))
    if tp + fp:
        precision = Fraction(tp, tp + fp)
    else:
        precision = Fraction(0)
        flags.append("precision")
    if tp + fn:
        recall = Fraction(tp, tp + fn)
    else:
        recall = Fraction(0)
        flags.append("recall")
    return BinaryMetrics(accuracy=acc, precision=precision, recall=recall, zero_denominator_flags=flags)


@dataclass
class PerLabelStats:
    tp: int
    fp: int
    fn: int
    precision: Fraction
    recall: Fraction


@dataclass
class EvalReport:
    matrix: ConfusionMatrix
    macro_precision: Fraction
    macro_recall: Fraction
    accuracy: Fraction
    per_label: dict[ImpactScore, PerLabelStats]
    binary_ads: BinaryMetrics | None
    binary_dynamics: BinaryMetrics | None
    unscored: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class TruthRecord:
    site_id: str
    impact: ImpactScore
    ads_present: bool
    dynamics_present: bool


def eval_from_matrix(
    m: ConfusionMatrix,
    binary_ads: BinaryMetrics | None = None,
    binary_dynamics: BinaryMetrics | None = None,
    unscored: Iterable[str] = (),
) -> EvalReport:
    per_label = {
        label: PerLabelStats(
            tp=m.tp(i),
            fp=m.fp(i),
            fn=m.fn(i),
            precision=Fraction(m.tp(i), m.tp(i) + m.fp(i)) if m.tp(i) + m.fp(i) else Fraction(0),
            recall=Fraction(m.tp(i), m.tp(i) + m.fn(i)) if m.tp(i) + m.fn(i) else Fraction(0),
        )
        for i, label in enumerate(IMPACT_ORDER)
    }
    return EvalReport(
        matrix=m,
        macro_precision=macro_precision(m),
        macro_recall=macro_recall(m),
        accuracy=accuracy(m),
        per_label=per_label,
        binary_ads=binary_ads,
        binary_dynamics=binary_dynamics,
        unscored=sorted(unscored),
    )


# --- ground-truth file -------------------------------------------------------

_BOOL = {"yes": True, "no": False}


def load_truth_csv(path: str | Path) -> dict[str, TruthRecord]:
    """Parse the ground-truth CSV: site_id,impact,ads_present,dynamics_present.

    Impact uses the canonical hyphenated spellings; booleans are yes|no.
    """
    records: dict[str, TruthRecord] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["site_id", "impact", "ads_present", "dynamics_present"]
        if reader.fieldnames != expected:
            raise ContractViolation(
                f"truth CSV header must be {','.join(expected)}, got {reader.fieldnames}"
            )
        for row_num, row in enumerate(reader, start=2):
            site_id = row["site_id"].strip()
            if not site_id:
                raise ContractViolation(f"truth CSV line {row_num}: empty site_id")
            if site_id in records:
                raise ContractViolation(f"truth CSV line {row_num}: duplicate site_id {site_id!r}")
            try:
                impact = impact_from_label(row["impact"])
            except ValueError as exc:
                raise ContractViolation(f"truth CSV line {row_num}: {exc}") from exc
            try:
                ads = _BOOL[row["ads_present"].strip().lower()]
                dyn = _BOOL[row["dynamics_present"].strip().lower()]
            except KeyError as exc:
                raise ContractViolation(
                    f"truth CSV line {row_num}: booleans must be yes|no, got {exc}"
                ) from exc
            records[site_id] = TruthRecord(site_id, impact, ads, dyn)
    return records


def write_truth_csv(records: Iterable[TruthRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "impact", "ads_present", "dynamics_present"])
        for rec in records:
            writer.writerow(
                [
                    rec.site_id,
                    rec.impact.label,
                    "yes" if rec.ads_present else "no",
                    "yes" if rec.dynamics_present else "no",
                ]
            )


# --- scoring a pipeline run ---------------------------------------------------


def score_run(report: "RunReport", truth: Mapping[str, TruthRecord]) -> EvalReport:  # noqa: F821
    """Score a run's site analyses against ground truth.

    Sites missing from truth are listed as unscored, never guessed. Binary
    stage metrics are computed only when that stage ran.
    """
    scored = [site for site in report.sites if site.site_id in truth]
    unscored = [site.site_id for site in report.sites if site.site_id not in truth]
    if not scored:
        raise ContractViolation("no overlap between report sites and ground truth")

    pred = [site.xbi.impact for site in scored]
    true = [truth[site.site_id].impact for site in scored]
    m = confusion(pred, true)

    binary_ads = None
    ads_scored = [s for s in scored if s.stage_flags.ads_enabled and s.ads is not None]
    if ads_scored:
        binary_ads = binary_metrics(
            [s.ads[0].present or s.ads[1].present for s in ads_scored],
            [truth[s.site_id].ads_present for s in ads_scored],
        )

    binary_dynamics = None
    dyn_scored = [s for s in scored if s.stage_flags.dynamics_enabled and s.dynamics is not None]
    if dyn_scored:
        binary_dynamics = binary_metrics(
            [s.dynamics[0].present or s.dynamics[1].present for s in dyn_scored],
            [truth[s.site_id].dynamics_present for s in dyn_scored],
        )

    return eval_from_matrix(m, binary_ads, binary_dynamics, unscored)


# --- serialization -------------------------------------------------------------


def _binary_to_dict(b: BinaryMetrics | None) -> dict | None:
    if b is None:
        return None
    return {
        "accuracy": float(b.accuracy),
        "precision": float(b.precision),
        "recall": float(b.recall),
        "zero_denominator_flags": list(b.zero_denominator_flags),
    }


def eval_report_to_dict(report: EvalReport) -> dict:
    return {
        "labels": [label.label for label in IMPACT_ORDER],
        "matrix": report.matrix.counts,
        "accuracy": float(report.accuracy),
        "macro_precision": float(report.macro_precision),
        "macro_recall": float(report.macro_recall),
        "collapsed_accuracy": float(collapsed_accuracy(report.matrix)),
        "per_label": {
            label.label: {
                "tp": stats.tp,
                "fp": stats.fp,
                "fn": stats.fn,
                "precision": float(stats.precision),
                "recall": float(stats.recall),
            }
            for label, stats in report.per_label.items()
        },
        "binary_ads": _binary_to_dict(report.binary_ads),
        "binary_dynamics": _binary_to_dict(report.binary_dynamics),
        "unscored": list(report.unscored),
    }


def emit_eval_json(report: EvalReport) -> str:
    return json.dumps(eval_report_to_dict(report), sort_keys=True, indent=2) + "\n"


def format_eval_summary(report: EvalReport) -> str:
    """Human-readable summary table; percentages rounded to 2 decimals."""

    def pct(x: Fraction) -> str:
        return f"{float(x) * 100:.2f}%"

    lines = []
    lines.append("impact-score confusion matrix (rows = truth, cols = prediction)")
    header = "truth \\ pred".ljust(22) + "".join(l.label.rjust(22) for l in IMPACT_ORDER)
    lines.append(header)
    for i, label in enumerate(IMPACT_ORDER):
        lines.append(label.label.ljust(22) + "".join(str(c).rjust(22) for c in report.matrix.counts[i]))
    lines.append("")
    lines.append(f"accuracy:        {pct(report.accuracy)}")
    lines.append(f"macro precision: {pct(report.macro_precision)}")
    lines.append(f"macro recall:    {pct(report.macro_recall)}")
    lines.append(
        "accuracy (no-XBI and minor-visual merged): "
        f"{pct(collapsed_accuracy(report.matrix))}"
    )
    for name, b in (("ads", report.binary_ads), ("dynamics", report.binary_dynamics)):
        if b is None:
            lines.append(f"binary {name}: not scored (stage did not run)")
        else:
            flagged = f" [zero-denominator: {', '.join(b.zero_denominator_flags)}]" if b.zero_denominator_flags else ""
            lines.append(
                f"binary {name}: accuracy {pct(b.accuracy)}, precision {pct(b.precision)}, "
                f"recall {pct(b.recall)}{flagged}"
            )
    if report.unscored:
        lines.append(f"unscored sites (absent from truth): {', '.join(report.unscored)}")
    return "\n".join(lines) + "\n"
