"""Span-level precision/recall/F1 in the CoNLL style.

A predicted span is a true positive only when start, end, and slot type
all match a gold span exactly; there is no partial credit. Reports carry
micro-averaged counts plus per-slot, per-domain, and seen/unseen-slot
breakdowns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .corpus import CorpusError, split_label, validate_iob


class EvaluationError(ValueError):
    """Misaligned gold/prediction inputs."""


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end_inclusive: int
    slot_type: str

    def __post_init__(self):
        if not (0 <= self.start <= self.end_inclusive):
            raise ValueError(f"bad span boundaries ({self.start}, {self.end_inclusive})")

    @property
    def length(self) -> int:
        return self.end_inclusive - self.start + 1


def extract_spans(labels: Sequence[str]) -> Set[Span]:
    """Maximal B-S (I-S)* runs of a typed IOB sequence."""
    validate_iob(labels)
    spans: Set[Span] = set()
    start = None
    current = None
    for pos, label in enumerate(labels):
        prefix, slot = split_label(label)
        if prefix == "B":
            if current is not None:
                spans.add(Span(start, pos - 1, current))
            start, current = pos, slot
        elif prefix == "O" and current is not None:
            spans.add(Span(start, pos - 1, current))
            start, current = None, None
    if current is not None:
        spans.add(Span(start, len(labels) - 1, current))
    return spans


def render_spans(spans: Iterable[Span], length: int) -> List[str]:
    """Inverse of extract_spans for non-overlapping span sets."""
    labels = ["O"] * length
    for span in spans:
        if span.end_inclusive >= length:
            raise ValueError(f"span {span} exceeds length {length}")
        labels[span.start] = f"B-{span.slot_type}"
        for pos in range(span.start + 1, span.end_inclusive + 1):
            labels[pos] = f"I-{span.slot_type}"
    return labels


@dataclass
class PrfCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def add(self, other: "PrfCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class EvalReport:
    micro: PrfCounts
    per_slot: Dict[str, PrfCounts] = field(default_factory=dict)
    per_domain: Dict[str, PrfCounts] = field(default_factory=dict)
    seen_f1: Optional[float] = None
    unseen_f1: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "micro": self.micro.to_dict(),
            "per_slot": {k: v.to_dict() for k, v in sorted(self.per_slot.items())},
            "per_domain": {k: v.to_dict() for k, v in sorted(self.per_domain.items())},
            "seen_f1": self.seen_f1,
            "unseen_f1": self.unseen_f1,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        def fmt(value: Optional[float]) -> str:
            return "N/A" if value is None else f"{value:.4f}"

        lines = [
            f"{'micro':24s} P={self.micro.precision:.4f} R={self.micro.recall:.4f} "
            f"F1={self.micro.f1:.4f} (tp={self.micro.tp} fp={self.micro.fp} fn={self.micro.fn})",
            f"{'seen slots':24s} F1={fmt(self.seen_f1)}",
            f"{'unseen slots':24s} F1={fmt(self.unseen_f1)}",
        ]
        if self.per_slot:
            lines.append("per slot type:")
            for name, counts in sorted(self.per_slot.items()):
                lines.append(f"  {name:22s} P={counts.precision:.4f} R={counts.recall:.4f} F1={counts.f1:.4f}")
        if self.per_domain:
            lines.append("per domain:")
            for name, counts in sorted(self.per_domain.items()):
                lines.append(f"  {name:22s} F1={counts.f1:.4f}")
        return "\n".join(lines)


def _count(gold: Set[Span], pred: Set[Span]) -> PrfCounts:
    tp = len(gold & pred)
    return PrfCounts(tp=tp, fp=len(pred) - tp, fn=len(gold) - tp)


def span_f1(
    gold: Mapping[str, Sequence[str]],
    pred: Mapping[str, Sequence[str]],
    domains: Optional[Mapping[str, str]] = None,
    train_slot_names: Optional[Set[str]] = None,
) -> EvalReport:
    """Exact-match span F1 over aligned id -> typed-label mappings."""
    gold_only = sorted(set(gold) - set(pred))
    pred_only = sorted(set(pred) - set(gold))
    if gold_only or pred_only:
        raise EvaluationError(
            f"gold/prediction ids diverge: missing from predictions {gold_only}, "
            f"unexpected predictions {pred_only}"
        )
    report = EvalReport(micro=PrfCounts())
    seen_counts = PrfCounts()
    unseen_counts = PrfCounts()
    for uid in sorted(gold):
        g_labels, p_labels = gold[uid], pred[uid]
        if len(g_labels) != len(p_labels):
            raise EvaluationError(
                f"utterance {uid}: gold has {len(g_labels)} tokens, prediction {len(p_labels)}"
            )
        try:
            g_spans = extract_spans(g_labels)
            p_spans = extract_spans(p_labels)
        except CorpusError as exc:
            raise EvaluationError(f"utterance {uid}: {exc}")
        report.micro.add(_count(g_spans, p_spans))
        slot_names = {s.slot_type for s in g_spans | p_spans}
        for name in slot_names:
            counts = _count(
                {s for s in g_spans if s.slot_type == name},
                {s for s in p_spans if s.slot_type == name},
            )
            report.per_slot.setdefault(name, PrfCounts()).add(counts)
        if domains is not None:
            domain = domains.get(uid, "unknown")
            report.per_domain.setdefault(domain, PrfCounts()).add(_count(g_spans, p_spans))
        if train_slot_names is not None:
            for partition, counts in (
                (True, seen_counts),
                (False, unseen_counts),
            ):
                counts.add(
                    _count(
                        {s for s in g_spans if (s.slot_type in train_slot_names) == partition},
                        {s for s in p_spans if (s.slot_type in train_slot_names) == partition},
                    )
                )
    if train_slot_names is not None:
        report.seen_f1 = seen_counts.f1 if (seen_counts.tp + seen_counts.fp + seen_counts.fn) else None
        report.unseen_f1 = (
            unseen_counts.f1 if (unseen_counts.tp + unseen_counts.fp + unseen_counts.fn) else None
        )
    return report


def seen_unseen_breakdown(
    gold: Mapping[str, Sequence[str]],
    pred: Mapping[str, Sequence[str]],
    train_slot_names: Set[str],
) -> Tuple[Optional[float], Optional[float]]:
    """F1 computed separately over spans whose slot name did/did not occur
    in any training domain; None marks an empty partition."""
    report = span_f1(gold, pred, train_slot_names=train_slot_names)
    return report.seen_f1, report.unseen_f1


def aggregate_f1(values: Sequence[float]) -> Tuple[float, float]:
    """(mean, population stdev) across runs, the multi-seed convention."""
    if not values:
        raise EvaluationError("no values to aggregate")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
