"""Zero-shot inference: decode IOB per candidate slot type, then merge the
per-slot predictions into one typed label sequence.

Span confidence is the geometric mean of the CRF posterior marginals of
the decoded tags across the span (length-normalized); the whole-sequence
path probability is available behind the `confidence="path"` flag. When
spans from different slot types claim overlapping tokens, the higher
confidence wins and the loser is dropped entirely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import crf
from .annotators import Provider
from .corpus import SlotType, Utterance, validate_iob
from .network import ModelConfig, ModelParams, forward_pass, prepare_inputs

CONFIDENCE_MODES = ("marginal", "path")


@dataclass(frozen=True)
class ScoredSpan:
    start: int
    end_inclusive: int
    confidence: float

    @property
    def length(self) -> int:
        return self.end_inclusive - self.start + 1


@dataclass
class SlotPrediction:
    slot_type: str
    labels: List[str]  # untyped {B, I, O}, length J
    spans: List[ScoredSpan]


@dataclass
class MergedPrediction:
    labels: List[str]  # typed IOB, length J

    def __post_init__(self):
        validate_iob(self.labels)


def untyped_spans(labels: Sequence[str]) -> List[Tuple[int, int]]:
    """Maximal B I* runs of an untyped tag sequence."""
    spans = []
    start = None
    for pos, tag in enumerate(labels):
        if tag == "B":
            if start is not None:
                spans.append((start, pos - 1))
            start = pos
        elif tag == "O" and start is not None:
            spans.append((start, pos - 1))
            start = None
    if start is not None:
        spans.append((start, len(labels) - 1))
    return spans


class Predictor:
    """Loaded model plus annotation provider, with per-sequence feature
    caching for repeated decoding over the same corpus."""

    def __init__(
        self,
        params: ModelParams,
        config: ModelConfig,
        provider: Provider,
        confidence: str = "marginal",
    ):
        if confidence not in CONFIDENCE_MODES:
            raise ValueError(f"confidence must be one of {CONFIDENCE_MODES}")
        self.params = params
        self.config = config
        self.provider = provider
        self.confidence = confidence
        self._cache: Dict[Tuple[str, str], object] = {}

    def _inputs(self, utterance: Utterance, slot_type: SlotType):
        key = (utterance.id, slot_type.name)
        inputs = self._cache.get(key)
        if inputs is None:
            inputs = prepare_inputs(utterance, slot_type, self.provider, self.config)
            self._cache[key] = inputs
        return inputs

    def predict_slot(self, utterance: Utterance, slot_type: SlotType) -> SlotPrediction:
        inputs = self._inputs(utterance, slot_type)
        result = forward_pass(inputs, self.params, self.config, training=False)
        emissions = result.pred_emissions.data
        path, path_log_prob = crf.viterbi(emissions, self.params.pred_crf)
        labels = [crf.TAGS[i] for i in path]
        spans: List[ScoredSpan] = []
        runs = untyped_spans(labels)
        if runs:
            if self.confidence == "marginal":
                marginals = crf.marginals(emissions, self.params.pred_crf)
                tag_probs = marginals[np.arange(len(path)), path]
                for start, end in runs:
                    log_probs = np.log(np.maximum(tag_probs[start : end + 1], 1e-300))
                    spans.append(
                        ScoredSpan(start, end, min(float(np.exp(log_probs.mean())), 1.0))
                    )
            else:
                conf = min(float(np.exp(path_log_prob)), 1.0)
                spans = [ScoredSpan(start, end, conf) for start, end in runs]
        return SlotPrediction(slot_type=slot_type.name, labels=labels, spans=spans)

    def predict_utterance(
        self, utterance: Utterance, candidate_slots: Sequence[SlotType]
    ) -> MergedPrediction:
        return predict_utterance(utterance, candidate_slots, self)


def predict_slot(utterance: Utterance, slot_type: SlotType, model: Predictor) -> SlotPrediction:
    return model.predict_slot(utterance, slot_type)


def merge(predictions: Sequence[SlotPrediction]) -> MergedPrediction:
    """Greedy non-overlapping span selection across slot types.

    Spans are ranked by confidence, then length, then slot name
    (lexicographically smaller wins), then start position; a span that
    overlaps an already-accepted one is dropped.
    """
    if not predictions:
        return MergedPrediction(labels=[])
    lengths = {len(p.labels) for p in predictions}
    if len(lengths) != 1:
        raise ValueError(f"predictions disagree on utterance length: {sorted(lengths)}")
    n = lengths.pop()
    candidates = [
        (-span.confidence, -span.length, pred.slot_type, span.start, span)
        for pred in predictions
        for span in pred.spans
    ]
    candidates.sort(key=lambda item: item[:4])
    labels = ["O"] * n
    occupied = np.zeros(n, dtype=bool)
    for _, _, slot_name, _, span in candidates:
        if occupied[span.start : span.end_inclusive + 1].any():
            continue
        occupied[span.start : span.end_inclusive + 1] = True
        labels[span.start] = f"B-{slot_name}"
        for pos in range(span.start + 1, span.end_inclusive + 1):
            labels[pos] = f"I-{slot_name}"
    return MergedPrediction(labels=labels)


def predict_utterance(
    utterance: Utterance,
    candidate_slots: Sequence[SlotType],
    model: Predictor,
) -> MergedPrediction:
    """Decode every candidate slot type independently, then merge."""
    if not candidate_slots:
        raise ValueError("candidate slot set is empty")
    predictions = [model.predict_slot(utterance, st) for st in candidate_slots]
    return merge(predictions)


def write_predictions(
    path: Union[str, Path],
    rows: Iterable[Tuple[Utterance, MergedPrediction]],
) -> None:
    """JSONL rows: {"id", "tokens", "gold", "pred"}."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utterance, prediction in rows:
            fh.write(
                json.dumps(
                    {
                        "id": utterance.id,
                        "tokens": list(utterance.tokens),
                        "gold": list(utterance.labels),
                        "pred": list(prediction.labels),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_predictions(path: Union[str, Path]) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows
