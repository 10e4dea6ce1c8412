"""Providers of the three per-token signals the embedding layer consumes:
POS tags, NER tags, and contextual word vectors.

Signals either come from annotation files written offline by an exporter
(`FileProvider`) or from deterministic fallbacks good enough for tests and
desk-scale runs (`FallbackProvider`). A missing utterance id in a file
store is always a hard error, never a silent fallback.

File formats (UTF-8, LF):
  annotations  JSONL: header {"format_version": 1} then {"id", "pos", "ner"}
  embeddings   text: header {"dim", "count"} then {"id", "vectors"}
               binary: magic "LEONAEMB", u32 version/dim/count, an
               id-offset index, then little-endian float32 rows
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from hashlib import blake2b
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import CorpusError, SlotType, Utterance, validate_iob

EMBEDDING_MAGIC = b"LEONAEMB"
EMBEDDING_BIN_VERSION = 1
NER_ENTITY_TYPES = ("PER", "GPE", "ORG", "MISC")

UPOS_TAGS = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)


class AnnotationError(ValueError):
    """Annotation content fails validation (lengths, tags, dimensions)."""


class AnnotationLookupError(KeyError):
    """An utterance id is absent from a file-backed store."""


@dataclass(frozen=True)
class TagVocabulary:
    """Ordered tag strings; index 0 is UNK, index 1 is PAD, both reserved."""

    tags: Tuple[str, ...]

    def __post_init__(self):
        if self.tags[:2] != ("UNK", "PAD"):
            raise ValueError("vocabulary must reserve UNK at 0 and PAD at 1")
        if len(set(self.tags)) != len(self.tags):
            raise ValueError("duplicate tags in vocabulary")

    def __len__(self) -> int:
        return len(self.tags)

    def id(self, tag: str) -> int:
        try:
            return self.tags.index(tag)
        except ValueError:
            return 0

    def ids(self, tags: Sequence[str]) -> List[int]:
        index = {t: i for i, t in enumerate(self.tags)}
        return [index.get(t, 0) for t in tags]


POS_VOCAB = TagVocabulary(("UNK", "PAD") + UPOS_TAGS)
NER_VOCAB = TagVocabulary(
    ("UNK", "PAD", "O")
    + tuple(f"{p}-{e}" for e in NER_ENTITY_TYPES for p in ("B", "I"))
)
IOB_VOCAB = TagVocabulary(("UNK", "PAD", "B", "I", "O"))


@dataclass(frozen=True)
class AnnotationRecord:
    utterance_id: str
    pos: Tuple[str, ...]
    ner: Tuple[str, ...]

    def __post_init__(self):
        if len(self.pos) != len(self.ner):
            raise AnnotationError(
                f"record {self.utterance_id}: pos length {len(self.pos)} != ner length {len(self.ner)}"
            )
        try:
            validate_iob(self.ner, self.utterance_id)
        except CorpusError as exc:
            raise AnnotationError(str(exc))
        for tag in self.ner:
            if tag != "O" and tag[2:] not in NER_ENTITY_TYPES:
                raise AnnotationError(
                    f"record {self.utterance_id}: unknown entity type in {tag!r}"
                )


@dataclass(frozen=True)
class EmbeddingRecord:
    utterance_id: str
    vectors: np.ndarray  # (J, E)


# ---------------------------------------------------------------------------
# hashed fallback embeddings

_gram_cache: Dict[Tuple[str, int, int], np.ndarray] = {}


def _gram_vector(gram: str, dim: int, seed: int) -> np.ndarray:
    key = (gram, dim, seed)
    vec = _gram_cache.get(key)
    if vec is None:
        digest = blake2b(f"{seed}\x1f{dim}\x1f{gram}".encode("utf-8"), digest_size=8)
        gen = np.random.default_rng(int.from_bytes(digest.digest(), "little"))
        vec = gen.standard_normal(dim)
        _gram_cache[key] = vec
    return vec


def hash_embed(token: str, dim: int, seed: int = 0) -> np.ndarray:
    """L2-normalized average of seeded projections of character trigrams.

    Deterministic and vocabulary-free; the empty token maps to zeros.
    """
    if dim <= 0:
        raise ValueError(f"dim must be positive, got {dim}")
    if not token:
        return np.zeros(dim)
    padded = f"\x02{token}\x03"
    acc = np.zeros(dim)
    for i in range(len(padded) - 2):
        acc += _gram_vector(padded[i : i + 3], dim, seed)
    acc /= len(padded) - 2
    norm = np.linalg.norm(acc)
    return acc / norm if norm > 0 else acc


# ---------------------------------------------------------------------------
# fallback POS / NER

_CLOSED_CLASS = {
    "a": "DET", "an": "DET", "the": "DET", "this": "DET", "that": "DET",
    "some": "DET", "any": "DET", "my": "PRON", "your": "PRON", "me": "PRON",
    "i": "PRON", "you": "PRON", "it": "PRON", "we": "PRON", "us": "PRON",
    "in": "ADP", "at": "ADP", "on": "ADP", "near": "ADP", "by": "ADP",
    "from": "ADP", "of": "ADP", "with": "ADP", "for": "ADP", "to": "PART",
    "and": "CCONJ", "or": "CCONJ", "but": "CCONJ", "if": "SCONJ",
    "is": "AUX", "are": "AUX", "was": "AUX", "be": "AUX", "would": "AUX",
    "could": "AUX", "can": "AUX", "will": "AUX", "please": "INTJ",
    "not": "PART", "no": "DET", "now": "ADV", "today": "NOUN",
    "tonight": "NOUN", "tomorrow": "NOUN", "very": "ADV", "there": "ADV",
    "here": "ADV", "like": "VERB", "want": "VERB", "need": "VERB",
    "book": "VERB", "find": "VERB", "show": "VERB", "play": "VERB",
    "get": "VERB", "make": "VERB",
}


def fallback_pos(tokens: Sequence[str]) -> List[str]:
    """Closed-class lexicon plus suffix/shape heuristics; UNK when clueless."""
    out = []
    for tok in tokens:
        low = tok.lower()
        if low in _CLOSED_CLASS:
            out.append(_CLOSED_CLASS[low])
        elif tok[:1].isupper():
            out.append("PROPN")
        elif any(c.isdigit() for c in tok):
            out.append("NUM")
        elif all(not c.isalnum() for c in tok):
            out.append("PUNCT")
        elif low.endswith("ly"):
            out.append("ADV")
        elif low.endswith(("ing", "ed")):
            out.append("VERB")
        elif low.endswith(("tion", "ness", "ment", "er", "s")):
            out.append("NOUN")
        else:
            out.append("UNK")
    return out


def gazetteer_ner(tokens: Sequence[str], gazetteer: Mapping[str, str]) -> List[str]:
    """Longest-match phrase lookup emitting IOB over the four entity types."""
    lowered = [t.lower() for t in tokens]
    tags = ["O"] * len(tokens)
    max_len = max((phrase.count(" ") + 1 for phrase in gazetteer), default=0)
    i = 0
    while i < len(tokens):
        matched = 0
        entity = None
        for span in range(min(max_len, len(tokens) - i), 0, -1):
            phrase = " ".join(lowered[i : i + span])
            if phrase in gazetteer:
                matched = span
                entity = gazetteer[phrase]
                break
        if matched:
            tags[i] = f"B-{entity}"
            for k in range(1, matched):
                tags[i + k] = f"I-{entity}"
            i += matched
        else:
            i += 1
    return tags


class FallbackProvider:
    """Pure function of (tokens, seed): lexicon POS, gazetteer NER (else
    all-O), and hashed contextual vectors."""

    def __init__(
        self,
        ctx_dim: int = 1024,
        seed: int = 0,
        gazetteer: Optional[Mapping[str, str]] = None,
    ):
        self.ctx_dim = ctx_dim
        self.seed = seed
        self.gazetteer = dict(gazetteer) if gazetteer else {}

    def annotate_tokens(self, tokens: Sequence[str]) -> Tuple[List[str], List[str], np.ndarray]:
        pos = fallback_pos(tokens)
        ner = gazetteer_ner(tokens, self.gazetteer) if self.gazetteer else ["O"] * len(tokens)
        vectors = np.stack([hash_embed(t, self.ctx_dim, self.seed) for t in tokens])
        return pos, ner, vectors

    def annotate(self, utterance: Utterance) -> Tuple[List[str], List[str], np.ndarray]:
        return self.annotate_tokens(utterance.tokens)

    def annotate_slot(self, slot_type: SlotType) -> Tuple[List[str], List[str], np.ndarray]:
        return self.annotate_tokens(slot_type.description_tokens)


# ---------------------------------------------------------------------------
# file-backed provider

def _read_header_jsonl(path: Union[str, Path]) -> List[Tuple[int, dict]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                rows.append((lineno, json.loads(line)))
    return rows


def load_annotation_file(path: Union[str, Path]) -> Dict[str, AnnotationRecord]:
    rows = _read_header_jsonl(path)
    if rows and rows[0][1].get("format_version") is not None:
        rows = rows[1:]
    records: Dict[str, AnnotationRecord] = {}
    for lineno, obj in rows:
        rec = AnnotationRecord(
            utterance_id=str(obj["id"]),
            pos=tuple(obj["pos"]),
            ner=tuple(obj["ner"]),
        )
        if rec.utterance_id in records:
            raise AnnotationError(f"{path}: line {lineno}: duplicate id {rec.utterance_id!r}")
        records[rec.utterance_id] = rec
    return records


def write_annotation_file(path: Union[str, Path], records: Sequence[AnnotationRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format_version": 1}) + "\n")
        for rec in records:
            fh.write(
                json.dumps(
                    {"id": rec.utterance_id, "pos": list(rec.pos), "ner": list(rec.ner)},
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_embedding_file(path: Union[str, Path]) -> Tuple[int, Dict[str, np.ndarray]]:
    """Returns (dim, id -> (J, dim) float64 vectors); detects text vs binary."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(EMBEDDING_MAGIC))
    if magic == EMBEDDING_MAGIC:
        return _load_embedding_binary(path)
    return _load_embedding_text(path)


def _load_embedding_text(path: Path) -> Tuple[int, Dict[str, np.ndarray]]:
    rows = _read_header_jsonl(path)
    if not rows:
        raise AnnotationError(f"{path}: missing embedding header")
    _, header = rows[0]
    if "dim" not in header:
        raise AnnotationError(f"{path}: embedding header lacks 'dim'")
    dim = int(header["dim"])
    store: Dict[str, np.ndarray] = {}
    for lineno, obj in rows[1:]:
        vid = str(obj["id"])
        vectors = np.asarray(obj["vectors"], dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != dim:
            raise AnnotationError(
                f"{path}: line {lineno}: record {vid!r} has shape {vectors.shape}, want (*, {dim})"
            )
        if vid in store:
            raise AnnotationError(f"{path}: line {lineno}: duplicate id {vid!r}")
        store[vid] = vectors
    if "count" in header and int(header["count"]) != len(store):
        raise AnnotationError(
            f"{path}: header count {header['count']} != {len(store)} records"
        )
    return dim, store


def write_embedding_file(path: Union[str, Path], dim: int, records: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"dim": dim, "count": len(records)}) + "\n")
        for vid, vectors in records.items():
            fh.write(
                json.dumps({"id": vid, "vectors": np.asarray(vectors).tolist()}) + "\n"
            )


def write_embedding_binary(path: Union[str, Path], dim: int, records: Mapping[str, np.ndarray]) -> None:
    """Binary container: magic, version, dim, count, id-offset index, then
    a contiguous little-endian float32 payload."""
    index = []
    payload = bytearray()
    for vid, vectors in records.items():
        arr = np.ascontiguousarray(np.asarray(vectors, dtype="<f4"))
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise AnnotationError(f"record {vid!r} has shape {arr.shape}, want (*, {dim})")
        index.append((vid, len(payload), arr.shape[0]))
        payload.extend(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<III", EMBEDDING_BIN_VERSION, dim, len(index)))
        for vid, offset, rows in index:
            raw = vid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QI", offset, rows))
        fh.write(bytes(payload))


def _load_embedding_binary(path: Path) -> Tuple[int, Dict[str, np.ndarray]]:
    blob = path.read_bytes()
    if blob[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise AnnotationError(f"{path}: bad magic bytes")
    pos = len(EMBEDDING_MAGIC)
    version, dim, count = struct.unpack_from("<III", blob, pos)
    pos += 12
    if version != EMBEDDING_BIN_VERSION:
        raise AnnotationError(f"{path}: unsupported container version {version}")
    index = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        vid = blob[pos : pos + id_len].decode("utf-8")
        pos += id_len
        offset, rows = struct.unpack_from("<QI", blob, pos)
        pos += 12
        index.append((vid, offset, rows))
    store: Dict[str, np.ndarray] = {}
    payload_start = pos
    for vid, offset, rows in index:
        start = payload_start + offset
        arr = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=start)
        if vid in store:
            raise AnnotationError(f"{path}: duplicate id {vid!r}")
        store[vid] = arr.reshape(rows, dim).astype(np.float64)
    return dim, store


class FileProvider:
    """Annotations and embeddings looked up by utterance id from files.

    Slot descriptions are served from records stored under "slot:<name>"
    when the exporter wrote them, otherwise computed with the deterministic
    fallback (novel zero-shot slot types cannot exist in any offline file).
    """

    SLOT_KEY_PREFIX = "slot:"

    def __init__(
        self,
        annotation_path: Union[str, Path],
        embedding_path: Union[str, Path],
        seed: int = 0,
        gazetteer: Optional[Mapping[str, str]] = None,
    ):
        self.annotations = load_annotation_file(annotation_path)
        self.ctx_dim, self.embeddings = load_embedding_file(embedding_path)
        self._fallback = FallbackProvider(ctx_dim=self.ctx_dim, seed=seed, gazetteer=gazetteer)

    def annotate(self, utterance: Utterance) -> Tuple[List[str], List[str], np.ndarray]:
        rec = self.annotations.get(utterance.id)
        if rec is None:
            raise AnnotationLookupError(f"no annotation record for utterance {utterance.id!r}")
        vectors = self.embeddings.get(utterance.id)
        if vectors is None:
            raise AnnotationLookupError(f"no embedding record for utterance {utterance.id!r}")
        n = len(utterance.tokens)
        if len(rec.pos) != n:
            raise AnnotationError(
                f"utterance {utterance.id}: {len(rec.pos)} pos tags for {n} tokens"
            )
        if vectors.shape[0] != n:
            raise AnnotationError(
                f"utterance {utterance.id}: {vectors.shape[0]} embedding rows for {n} tokens"
            )
        return list(rec.pos), list(rec.ner), vectors

    def annotate_slot(self, slot_type: SlotType) -> Tuple[List[str], List[str], np.ndarray]:
        key = self.SLOT_KEY_PREFIX + slot_type.name
        rec = self.annotations.get(key)
        vectors = self.embeddings.get(key)
        if rec is not None and vectors is not None:
            k = len(slot_type.description_tokens)
            if len(rec.pos) != k or vectors.shape[0] != k:
                raise AnnotationError(f"slot {slot_type.name}: description annotation misaligned")
            return list(rec.pos), list(rec.ner), vectors
        return self._fallback.annotate_slot(slot_type)


Provider = Union[FileProvider, FallbackProvider]


def annotate(provider: Provider, utterance: Utterance) -> Tuple[List[str], List[str], np.ndarray]:
    """Three aligned length-J sequences: POS tags, NER tags, context vectors."""
    pos, ner, vectors = provider.annotate(utterance)
    n = len(utterance.tokens)
    if not (len(pos) == len(ner) == vectors.shape[0] == n):
        raise AnnotationError(
            f"utterance {utterance.id}: misaligned annotations "
            f"(tokens={n}, pos={len(pos)}, ner={len(ner)}, vectors={vectors.shape[0]})"
        )
    return pos, ner, vectors


# ---------------------------------------------------------------------------
# validation reports

@dataclass
class FileReport:
    path: str
    records: int = 0
    errors: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {"path": self.path, "records": self.records, "errors": list(self.errors)}


def validate_annotation_file(
    path: Union[str, Path], token_counts: Optional[Mapping[str, int]] = None
) -> FileReport:
    """Per-record validity and duplicate detection; alignment against token
    counts when a corpus is supplied."""
    report = FileReport(path=str(path))
    seen = set()
    try:
        rows = _read_header_jsonl(path)
    except (OSError, json.JSONDecodeError) as exc:
        report.errors.append(f"{path}: unreadable: {exc}")
        return report
    if rows and rows[0][1].get("format_version") is not None:
        rows = rows[1:]
    for lineno, obj in rows:
        report.records += 1
        vid = str(obj.get("id", ""))
        if not vid:
            report.errors.append(f"line {lineno}: missing id")
            continue
        if vid in seen:
            report.errors.append(f"line {lineno}: duplicate id {vid!r}")
            continue
        seen.add(vid)
        try:
            rec = AnnotationRecord(utterance_id=vid, pos=tuple(obj["pos"]), ner=tuple(obj["ner"]))
        except (KeyError, AnnotationError) as exc:
            report.errors.append(f"line {lineno}: {exc}")
            continue
        if token_counts is not None and not vid.startswith(FileProvider.SLOT_KEY_PREFIX):
            want = token_counts.get(vid)
            if want is None:
                report.errors.append(f"line {lineno}: id {vid!r} not in corpus")
            elif len(rec.pos) != want:
                report.errors.append(
                    f"line {lineno}: id {vid!r} has {len(rec.pos)} tags for {want} tokens"
                )
    return report


def validate_embedding_file(
    path: Union[str, Path],
    token_counts: Optional[Mapping[str, int]] = None,
    expect_dim: Optional[int] = None,
) -> FileReport:
    report = FileReport(path=str(path))
    try:
        dim, store = load_embedding_file(path)
    except (OSError, AnnotationError, json.JSONDecodeError, struct.error) as exc:
        report.errors.append(str(exc))
        return report
    report.records = len(store)
    if expect_dim is not None and dim != expect_dim:
        report.errors.append(f"header dim {dim} != expected {expect_dim}")
    for vid, vectors in store.items():
        bad_rows = np.flatnonzero(~np.isfinite(vectors).all(axis=1))
        for row in bad_rows:
            report.errors.append(f"record {vid!r}: non-finite value in row {int(row)}")
        if token_counts is not None and not vid.startswith(FileProvider.SLOT_KEY_PREFIX):
            want = token_counts.get(vid)
            if want is None:
                report.errors.append(f"record {vid!r} not in corpus")
            elif vectors.shape[0] != want:
                report.errors.append(
                    f"record {vid!r} has {vectors.shape[0]} rows for {want} tokens"
                )
    return report
