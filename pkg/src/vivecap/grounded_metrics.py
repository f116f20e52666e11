"""Character-consistency metrics grounded in per-frame gold labels.

Convention note: a predicted-but-absent name counts as a false positive
(fp = |pred \\ r|, fn = |r \\ pred|). Set `paper_literal_fp_fn=True` to
swap the two; F1 and the mistake count are symmetric under the swap.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Optional

from .core_model import DatasetManifest, Roster


class NonRosterName(Exception):
    def __init__(self, name):
        super().__init__(f"name not in roster: {name!r}")
        self.name = name


class MissingPrediction(Exception):
    def __init__(self, frame_id):
        super().__init__(f"no prediction for labeled frame: {frame_id!r}")
        self.frame_id = frame_id


class EmptyList(Exception):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class GroundedMetrics:
    precision: float
    recall: float
    f1: float
    mistakes: int


@dataclass(frozen=True)
class AggregateGroundedMetrics:
    mean_precision: float
    mean_recall: float
    macro_f1: float
    mean_mistakes: float
    n_examples: int


def confusion_counts(
    r: Iterable[str],
    pred: Iterable[str],
    roster: Optional[Roster] = None,
    paper_literal_fp_fn: bool = False,
) -> ConfusionCounts:
    r, pred = set(r), set(pred)
    if roster is not None:
        for name in r | pred:
            if name not in roster:
                raise NonRosterName(name)
    tp = len(r & pred)
    fp = len(pred - r)
    fn = len(r - pred)
    if paper_literal_fp_fn:
        fp, fn = fn, fp
    return ConfusionCounts(tp=tp, fp=fp, fn=fn)


def per_example_metrics(c: ConfusionCounts) -> GroundedMetrics:
    if c.tp == 0 and c.fp == 0 and c.fn == 0:
        # A correct "no characters" prediction scores perfectly.
        return GroundedMetrics(precision=1.0, recall=1.0, f1=1.0, mistakes=0)
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) > 0 else 0.0
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else 0.0
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    return GroundedMetrics(precision=precision, recall=recall, f1=f1, mistakes=c.fp + c.fn)


def aggregate(metrics: list[GroundedMetrics]) -> AggregateGroundedMetrics:
    """Macro averaging: mean of each per-example field independently."""
    if not metrics:
        raise EmptyList("cannot aggregate zero examples")
    n = len(metrics)
    return AggregateGroundedMetrics(
        mean_precision=sum(m.precision for m in metrics) / n,
        mean_recall=sum(m.recall for m in metrics) / n,
        macro_f1=sum(m.f1 for m in metrics) / n,
        mean_mistakes=sum(m.mistakes for m in metrics) / n,
        n_examples=n,
    )


@dataclass(frozen=True)
class FrameRow:
    frame_id: str
    scored: bool
    counts: Optional[ConfusionCounts] = None
    metrics: Optional[GroundedMetrics] = None


def evaluate_dataset(
    manifest: DatasetManifest,
    predictions: dict[str, Iterable[str]],
    roster: Optional[Roster] = None,
    paper_literal_fp_fn: bool = False,
) -> tuple[AggregateGroundedMetrics, list[FrameRow]]:
    """Score every labeled frame against its prediction; frames with a
    prediction but no label appear in the table unscored."""
    rows = []
    scored = []
    for frame in manifest.frames:
        label = manifest.labels.get(frame.id)
        if label is None:
            if frame.id in predictions:
                rows.append(FrameRow(frame_id=frame.id, scored=False))
            continue
        if frame.id not in predictions:
            raise MissingPrediction(frame.id)
        counts = confusion_counts(
            label.characters, predictions[frame.id], roster=roster,
            paper_literal_fp_fn=paper_literal_fp_fn,
        )
        metrics = per_example_metrics(counts)
        rows.append(FrameRow(frame_id=frame.id, scored=True, counts=counts, metrics=metrics))
        scored.append(metrics)
    return aggregate(scored), rows


def report_json(agg: AggregateGroundedMetrics, rows: list[FrameRow]) -> str:
    per_frame = []
    for row in rows:
        rec = {"frame_id": row.frame_id, "scored": row.scored}
        if row.scored:
            rec.update(
                tp=row.counts.tp, fp=row.counts.fp, fn=row.counts.fn,
                precision=row.metrics.precision, recall=row.metrics.recall,
                f1=row.metrics.f1, mistakes=row.metrics.mistakes,
            )
        per_frame.append(rec)
    obj = {
        "aggregate": {
            "mean_precision": agg.mean_precision,
            "mean_recall": agg.mean_recall,
            "macro_f1": agg.macro_f1,
            "mean_mistakes": agg.mean_mistakes,
            "n_examples": agg.n_examples,
        },
        "per_frame": per_frame,
    }
    return json.dumps(obj, indent=2, sort_keys=True)


def report_csv(agg: AggregateGroundedMetrics, rows: list[FrameRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame_id", "tp", "fp", "fn", "precision", "recall", "f1", "mistakes"])
    for row in rows:
        if row.scored:
            writer.writerow([
                row.frame_id, row.counts.tp, row.counts.fp, row.counts.fn,
                f"{row.metrics.precision:.6f}", f"{row.metrics.recall:.6f}",
                f"{row.metrics.f1:.6f}", row.metrics.mistakes,
            ])
        else:
            writer.writerow([row.frame_id, "", "", "", "", "", "", ""])
    writer.writerow([
        "AGGREGATE", "", "", "",
        f"{agg.mean_precision:.6f}", f"{agg.mean_recall:.6f}",
        f"{agg.macro_f1:.6f}", f"{agg.mean_mistakes:.6f}",
    ])
    return buf.getvalue()
