"""Corpus data model: utterances, slot types, labels, splits.

File formats (JSON Lines, UTF-8, LF):
  corpus     header {"format_version": 1} then {"id", "domain", "intent", "tokens", "labels"}
  slot types header {"format_version": 1} then {"name", "description", "domains"}

Labels follow the IOB scheme: "B-<slot>" opens a span, "I-<slot>" continues
it, "O" is outside. An I tag is only valid directly after a B or I of the
same slot type.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

FORMAT_VERSION = 1
OTHERS = "Others"
REGIMES = ("leave_one_out", "percentage", "cross_dataset")


class CorpusError(ValueError):
    """Malformed corpus content (parse, schema, or IOB violations)."""


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from string/int parts (process-independent)."""
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little") >> 1


def tokenize_slot_name(name: str) -> List[str]:
    """"playlist_owner" -> ["playlist", "owner"]; used when no description exists."""
    return [t for t in name.replace("_", " ").replace("-", " ").split() if t]


def split_label(label: str) -> Tuple[str, Optional[str]]:
    if label == "O":
        return "O", None
    if label.startswith("B-") or label.startswith("I-"):
        return label[0], label[2:]
    raise CorpusError(f"bad IOB label {label!r}")


def validate_iob(labels: Sequence[str], utterance_id: str = "?") -> None:
    prev_type: Optional[str] = None
    for pos, label in enumerate(labels):
        try:
            prefix, slot = split_label(label)
        except CorpusError:
            raise CorpusError(f"utterance {utterance_id}: bad label {label!r} at position {pos}")
        if prefix == "I" and slot != prev_type:
            raise CorpusError(
                f"utterance {utterance_id}: I-{slot} at position {pos} "
                "does not continue a span of the same slot type"
            )
        prev_type = slot if prefix in ("B", "I") else None


@dataclass(frozen=True)
class Utterance:
    id: str
    domain: str
    intent: str
    tokens: Tuple[str, ...]
    labels: Tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise CorpusError(f"utterance {self.id}: empty token sequence")
        if len(self.labels) != len(self.tokens):
            raise CorpusError(
                f"utterance {self.id}: {len(self.labels)} labels for {len(self.tokens)} tokens"
            )
        validate_iob(self.labels, self.id)

    def present_slot_types(self) -> List[str]:
        """Distinct slot type names in first-appearance order."""
        seen: List[str] = []
        for label in self.labels:
            prefix, slot = split_label(label)
            if prefix == "B" and slot not in seen:
                seen.append(slot)
        return seen


@dataclass(frozen=True)
class SlotType:
    name: str
    description_tokens: Tuple[str, ...]
    domains: frozenset

    def __post_init__(self):
        if not self.description_tokens:
            object.__setattr__(self, "description_tokens", tuple(tokenize_slot_name(self.name)))
        if not self.description_tokens:
            raise CorpusError(f"slot type {self.name!r} has no usable description")


@dataclass(frozen=True)
class TrainingExample:
    utterance_id: str
    slot_type: SlotType
    y_indep: Tuple[str, ...]
    y_slot: Tuple[str, ...]
    polarity: str  # "positive" | "negative"


@dataclass
class SplitSpec:
    regime: str
    unit: str = "domain"  # "domain" or "intent"
    target_unit: Optional[str] = None  # leave_one_out
    percentage: Optional[int] = None  # percentage regime: 25 | 50 | 75
    train_dataset: Optional[str] = None  # cross_dataset
    seed: int = 0
    dev_fraction: float = 0.1

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise CorpusError(f"unknown split regime {self.regime!r}")
        if self.unit not in ("domain", "intent"):
            raise CorpusError(f"split unit must be domain or intent, got {self.unit!r}")


@dataclass
class Split:
    regime: str
    unit: str
    seed: int
    train_units: Tuple[str, ...]
    test_units: Tuple[str, ...]
    train_ids: Tuple[str, ...]
    dev_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]

    def __post_init__(self):
        if set(self.train_units) & set(self.test_units):
            raise CorpusError("train and test units overlap")


@dataclass
class Dataset:
    utterances: List[Utterance]
    slot_types: List[SlotType]
    by_id: Dict[str, Utterance] = field(init=False)
    slot_by_name: Dict[str, SlotType] = field(init=False)

    def __post_init__(self):
        self.by_id = {}
        for utt in self.utterances:
            if utt.id in self.by_id:
                raise CorpusError(f"duplicate utterance id {utt.id!r}")
            self.by_id[utt.id] = utt
        self.slot_by_name = {}
        for st in self.slot_types:
            if st.name in self.slot_by_name:
                raise CorpusError(f"duplicate slot type {st.name!r}")
            self.slot_by_name[st.name] = st
        for utt in self.utterances:
            for name in utt.present_slot_types():
                if name not in self.slot_by_name:
                    raise CorpusError(
                        f"utterance {utt.id}: slot type {name!r} is not declared"
                    )

    def units(self, unit: str) -> List[str]:
        key = (lambda u: u.domain) if unit == "domain" else (lambda u: u.intent)
        return sorted({key(u) for u in self.utterances})

    def counts(self) -> Dict[str, int]:
        return {
            "utterances": len(self.utterances),
            "domains": len({u.domain for u in self.utterances}),
            "intents": len({u.intent for u in self.utterances}),
            "slot_types": len(self.slot_types),
        }


def _read_jsonl(path: Union[str, Path]) -> List[Tuple[int, dict]]:
    """(line_number, object) pairs; validates the header line if any content."""
    text = Path(path).read_text(encoding="utf-8")
    records: List[Tuple[int, dict]] = []
    lines = text.splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}: line {lineno}: malformed JSON ({exc.msg})")
        if not isinstance(obj, dict):
            raise CorpusError(f"{path}: line {lineno}: expected an object")
        records.append((lineno, obj))
    if records:
        lineno, header = records[0]
        version = header.get("format_version")
        if version is None:
            raise CorpusError(f"{path}: line {lineno}: missing format_version header line")
        if version != FORMAT_VERSION:
            raise CorpusError(f"{path}: unsupported format_version {version}")
        records = records[1:]
    return records


def _require(obj: dict, key: str, path, lineno: int):
    if key not in obj:
        raise CorpusError(f"{path}: line {lineno}: missing field {key!r}")
    return obj[key]


def load_corpus_file(path: Union[str, Path]) -> List[Utterance]:
    utterances = []
    for lineno, obj in _read_jsonl(path):
        try:
            utterances.append(
                Utterance(
                    id=str(_require(obj, "id", path, lineno)),
                    domain=str(_require(obj, "domain", path, lineno)),
                    intent=str(_require(obj, "intent", path, lineno)),
                    tokens=tuple(_require(obj, "tokens", path, lineno)),
                    labels=tuple(_require(obj, "labels", path, lineno)),
                )
            )
        except CorpusError as exc:
            raise CorpusError(f"{path}: line {lineno}: {exc}")
    return utterances


def load_slot_file(path: Union[str, Path]) -> List[SlotType]:
    slot_types = []
    for lineno, obj in _read_jsonl(path):
        name = str(_require(obj, "name", path, lineno))
        description = obj.get("description") or tokenize_slot_name(name)
        slot_types.append(
            SlotType(
                name=name,
                description_tokens=tuple(str(t) for t in description),
                domains=frozenset(obj.get("domains", [])),
            )
        )
    return slot_types


def load_dataset(
    corpus_path: Union[str, Path],
    slots_path: Union[str, Path],
    format_version: int = FORMAT_VERSION,
) -> Dataset:
    """Load and fully validate a corpus plus its slot-type inventory."""
    if format_version != FORMAT_VERSION:
        raise CorpusError(f"unsupported format_version {format_version}")
    return Dataset(load_corpus_file(corpus_path), load_slot_file(slots_path))


def save_corpus_file(path: Union[str, Path], utterances: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION}) + "\n")
        for utt in utterances:
            fh.write(
                json.dumps(
                    {
                        "id": utt.id,
                        "domain": utt.domain,
                        "intent": utt.intent,
                        "tokens": list(utt.tokens),
                        "labels": list(utt.labels),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def save_slot_file(path: Union[str, Path], slot_types: Iterable[SlotType]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION}) + "\n")
        for st in slot_types:
            fh.write(
                json.dumps(
                    {
                        "name": st.name,
                        "description": list(st.description_tokens),
                        "domains": sorted(st.domains),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def group_rare_into_others(dataset: Dataset, threshold: int, unit: str = "intent") -> Dataset:
    """Rename every intent/domain with fewer than `threshold` utterances to "Others"."""
    if threshold <= 0:
        raise CorpusError("grouping threshold must be positive")
    if unit not in ("intent", "domain"):
        raise CorpusError(f"grouping unit must be intent or domain, got {unit!r}")
    counts: Dict[str, int] = {}
    for utt in dataset.utterances:
        value = utt.intent if unit == "intent" else utt.domain
        counts[value] = counts.get(value, 0) + 1
    rare = {value for value, n in counts.items() if n < threshold}
    if not rare:
        return dataset

    def rename(value: str) -> str:
        return OTHERS if value in rare else value

    utterances = [
        Utterance(
            id=u.id,
            domain=rename(u.domain) if unit == "domain" else u.domain,
            intent=rename(u.intent) if unit == "intent" else u.intent,
            tokens=u.tokens,
            labels=u.labels,
        )
        for u in dataset.utterances
    ]
    slot_types = dataset.slot_types
    if unit == "domain":
        slot_types = [
            SlotType(
                name=st.name,
                description_tokens=st.description_tokens,
                domains=frozenset(rename(d) for d in st.domains),
            )
            for st in dataset.slot_types
        ]
    return Dataset(utterances, slot_types)


def strip_slot_labels(labels: Sequence[str]) -> List[str]:
    """Erase slot types: B-S -> B, I-S -> I, O -> O."""
    validate_iob(labels)
    return [split_label(label)[0] for label in labels]


def project_slot_labels(labels: Sequence[str], slot_type: Union[str, SlotType]) -> List[str]:
    """Keep only the spans of one slot type, untyped; everything else O."""
    validate_iob(labels)
    name = slot_type.name if isinstance(slot_type, SlotType) else slot_type
    out = []
    for label in labels:
        prefix, slot = split_label(label)
        out.append(prefix if slot == name else "O")
    return out


def generate_examples(
    utterance: Utterance,
    slot_inventory: Sequence[SlotType],
    q: int = 3,
    rng_seed: int = 0,
) -> List[TrainingExample]:
    """One positive example per slot type present, plus q sampled negatives.

    Negatives draw uniformly without replacement from inventory slot types
    absent from the utterance (all of them if fewer than q exist); the draw
    is a pure function of rng_seed.
    """
    if not slot_inventory:
        raise CorpusError("slot inventory is empty")
    by_name = {st.name: st for st in slot_inventory}
    present = utterance.present_slot_types()
    missing = [name for name in present if name not in by_name]
    if missing:
        raise CorpusError(
            f"utterance {utterance.id}: inventory lacks present slot types {missing}"
        )
    y_indep = tuple(strip_slot_labels(utterance.labels))
    examples = [
        TrainingExample(
            utterance_id=utterance.id,
            slot_type=by_name[name],
            y_indep=y_indep,
            y_slot=tuple(project_slot_labels(utterance.labels, name)),
            polarity="positive",
        )
        for name in present
    ]
    absent = sorted(name for name in by_name if name not in present)
    if absent and q > 0:
        rng = np.random.default_rng(rng_seed)
        picked = rng.choice(len(absent), size=min(q, len(absent)), replace=False)
        all_o = ("O",) * len(utterance.tokens)
        for idx in sorted(int(i) for i in picked):
            examples.append(
                TrainingExample(
                    utterance_id=utterance.id,
                    slot_type=by_name[absent[idx]],
                    y_indep=y_indep,
                    y_slot=all_o,
                    polarity="negative",
                )
            )
    return examples


def _pick_dev_ids(
    utterances: Sequence[Utterance], fraction: float, seed: int
) -> Tuple[List[str], List[str]]:
    """Seeded dev sample, stratified by intent; returns (train_ids, dev_ids)."""
    groups: Dict[str, List[str]] = {}
    for utt in utterances:
        groups.setdefault(utt.intent, []).append(utt.id)
    rng = np.random.default_rng(stable_seed("dev", seed))
    dev: List[str] = []
    for intent in sorted(groups):
        ids = sorted(groups[intent])
        k = int(round(fraction * len(ids)))
        if k > 0:
            picked = rng.choice(len(ids), size=k, replace=False)
            dev.extend(ids[int(i)] for i in sorted(picked))
    if not dev and utterances:
        largest = max(sorted(groups), key=lambda g: len(groups[g]))
        dev = [sorted(groups[largest])[0]]
    dev_set = set(dev)
    train = [u.id for u in utterances if u.id not in dev_set]
    return train, sorted(dev)


def make_split(
    data: Union[Dataset, Mapping[str, Dataset]], spec: SplitSpec
) -> Split:
    """Partition into unit-disjoint train/test plus a seeded dev sample."""
    if spec.regime == "cross_dataset":
        if not isinstance(data, Mapping):
            raise CorpusError("cross_dataset regime needs a mapping of named datasets")
        if spec.train_dataset not in data:
            raise CorpusError(f"training corpus {spec.train_dataset!r} not found")
        test_names = sorted(n for n in data if n != spec.train_dataset)
        if not test_names:
            raise CorpusError("cross_dataset regime needs at least one test corpus")
        train_ds = data[spec.train_dataset]
        train_ids, dev_ids = _pick_dev_ids(train_ds.utterances, spec.dev_fraction, spec.seed)
        test_ids = [u.id for name in test_names for u in data[name].utterances]
        return Split(
            regime=spec.regime,
            unit="dataset",
            seed=spec.seed,
            train_units=(spec.train_dataset,),
            test_units=tuple(test_names),
            train_ids=tuple(train_ids),
            dev_ids=tuple(dev_ids),
            test_ids=tuple(test_ids),
        )

    if isinstance(data, Mapping):
        raise CorpusError(f"{spec.regime} regime operates on a single dataset")
    units = data.units(spec.unit)
    if spec.regime == "leave_one_out":
        if spec.target_unit not in units:
            raise CorpusError(f"held-out unit {spec.target_unit!r} not in {units}")
        test_units = [spec.target_unit]
        train_units = [u for u in units if u != spec.target_unit]
    else:  # percentage
        if spec.percentage not in (25, 50, 75):
            raise CorpusError(f"percentage must be 25, 50 or 75, got {spec.percentage}")
        if len(units) < 2:
            raise CorpusError("percentage split needs at least 2 units")
        rng = np.random.default_rng(stable_seed("split", spec.seed))
        order = [units[int(i)] for i in rng.permutation(len(units))]
        n_train = int(round(spec.percentage / 100.0 * len(units)))
        n_train = min(max(n_train, 1), len(units) - 1)
        train_units = sorted(order[:n_train])
        test_units = sorted(order[n_train:])

    key = (lambda u: u.domain) if spec.unit == "domain" else (lambda u: u.intent)
    train_pool = [u for u in data.utterances if key(u) in set(train_units)]
    test_ids = [u.id for u in data.utterances if key(u) in set(test_units)]
    train_ids, dev_ids = _pick_dev_ids(train_pool, spec.dev_fraction, spec.seed)
    return Split(
        regime=spec.regime,
        unit=spec.unit,
        seed=spec.seed,
        train_units=tuple(train_units),
        test_units=tuple(test_units),
        train_ids=tuple(train_ids),
        dev_ids=tuple(dev_ids),
        test_ids=tuple(test_ids),
    )


def make_split_batch(
    data: Union[Dataset, Mapping[str, Dataset]], spec: SplitSpec, seeds: Sequence[int]
) -> List[Split]:
    """One split per seed (the averaging convention is five seeds)."""
    splits = []
    for seed in seeds:
        one = SplitSpec(
            regime=spec.regime,
            unit=spec.unit,
            target_unit=spec.target_unit,
            percentage=spec.percentage,
            train_dataset=spec.train_dataset,
            seed=int(seed),
            dev_fraction=spec.dev_fraction,
        )
        splits.append(make_split(data, one))
    return splits
