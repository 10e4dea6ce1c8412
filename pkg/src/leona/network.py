"""The slot-filling network: six layers from token features to two CRF heads.

Per (utterance, slot type) pair:

  embed          POS/NER tag embeddings + contextual vectors, fused by a
                 linear projection and a 2-layer highway network -> X (d, J)
  encode         BiLSTM over utterance and slot description -> H (2h, J),
                 U (2h, K); the two sides share weights by default
  step-two head  affine projection of H to 3 scores per token, scored by a
                 slot-independent CRF
  similarity     trainable word-pair similarity A (J, K) between utterance
                 and description encodings
  attend         description-to-utterance and utterance-to-description
                 attention -> G (4h, J)
  contextualize  2-stack BiLSTM over [H; G; IOB tag embedding] -> C (2h, J)
  predict head   two affine+ReLU layers then 3 scores per token, scored by
                 a slot-specific CRF shared across slot types

The IOB feed uses gold slot-independent tags while training (teacher
forcing) and step-two Viterbi decodes at inference; no gradient flows
through the discrete tags.
"""

from __future__ import annotations

import base64
import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import crf
from .annotators import NER_VOCAB, POS_VOCAB, Provider, annotate, hash_embed
from .corpus import SlotType, TrainingExample, Utterance, stable_seed
from .crf import CrfParams, label_ids, log_likelihood, new_crf_params
from .tensor import (
    Tensor,
    concat,
    dropout,
    matmul,
    max_over_axis,
    mul,
    narrow,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
    transpose,
    tsum,
)

CHECKPOINT_VERSION = 1

# seeds for the hash features that stand in for POS/NER/contextual signals
# when use_pretrained_features is off (the "no step-one" ablation)
_HASH_SEED_POS = 101
_HASH_SEED_NER = 202
_HASH_SEED_CTX = 303


@dataclass
class ModelConfig:
    pos_dim: int = 300
    ner_dim: int = 300
    ctx_dim: int = 1024
    fused_dim: int = 400
    lstm_hidden: int = 300
    iob_feed_dim: int = 32
    dropout: float = 0.3
    use_pretrained_features: bool = True
    use_iob_feed: bool = True
    share_encoders: bool = True

    def __post_init__(self):
        for name in ("pos_dim", "ner_dim", "ctx_dim", "fused_dim", "lstm_hidden", "iob_feed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def _glorot(gen: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    a = np.sqrt(6.0 / (in_dim + out_dim))
    return gen.uniform(-a, a, size=(out_dim, in_dim))


class ModelParams:
    """Named parameter tensors for every layer plus the two CRF heads.

    Iteration order is creation order and fixed by construction, which the
    optimizer and the checkpoint format both rely on.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        gen = np.random.default_rng(stable_seed("model-params", seed))
        d = config.fused_dim
        h = config.lstm_hidden

        self._add("pos_table", gen.normal(0.0, 0.5, size=(config.pos_dim, len(POS_VOCAB))))
        self._add("ner_table", gen.normal(0.0, 0.5, size=(config.ner_dim, len(NER_VOCAB))))

        in_dim = config.pos_dim + config.ner_dim + config.ctx_dim
        self._add("fuse_w", _glorot(gen, d, in_dim))
        self._add("fuse_b", np.zeros((d, 1)))
        for i in (1, 2):
            self._add(f"hw{i}_gate_w", _glorot(gen, d, d))
            self._add(f"hw{i}_gate_b", np.full((d, 1), -1.0))  # start carry-biased
            self._add(f"hw{i}_lin_w", _glorot(gen, d, d))
            self._add(f"hw{i}_lin_b", np.zeros((d, 1)))

        self._add_lstm(gen, "enc", d, h)
        if not config.share_encoders:
            self._add_lstm(gen, "denc", d, h)

        self._add("step2_w", _glorot(gen, crf.N_TAGS, 2 * h))
        self._add("step2_b", np.zeros((crf.N_TAGS, 1)))
        self.step2_crf = self._add_crf("step2")

        # start the similarity function as a plain dot product (the linear
        # terms at zero, the elementwise-product block at one) so matching
        # utterance/description tokens score high before any training
        w_a = np.zeros((6 * h, 1))
        w_a[4 * h :] = 1.0
        self._add("w_a", w_a)
        self._add("iob_table", gen.normal(0.0, 0.5, size=(config.iob_feed_dim, crf.N_TAGS)))

        self._add_lstm(gen, "ctx1", 6 * h + config.iob_feed_dim, h)
        self._add_lstm(gen, "ctx2", 2 * h, h)

        self._add("pred1_w", _glorot(gen, h, 2 * h))
        self._add("pred1_b", np.zeros((h, 1)))
        self._add("pred2_w", _glorot(gen, h, h))
        self._add("pred2_b", np.zeros((h, 1)))
        self._add("pred3_w", _glorot(gen, crf.N_TAGS, h))
        self._add("pred3_b", np.zeros((crf.N_TAGS, 1)))
        self.pred_crf = self._add_crf("pred")

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def _add_lstm(self, gen, prefix: str, in_dim: int, hidden: int) -> None:
        for direction in ("f", "b"):
            bias = np.zeros((4 * hidden, 1))
            bias[hidden : 2 * hidden] = 1.0  # forget gate open at init
            self._add(f"{prefix}_{direction}_w", _glorot(gen, 4 * hidden, in_dim + hidden))
            self._add(f"{prefix}_{direction}_b", bias)

    def _add_crf(self, prefix: str) -> CrfParams:
        fresh = new_crf_params()
        return CrfParams(
            transitions=self._add(f"{prefix}_crf_trans", fresh.transitions.data),
            start_scores=self._add(f"{prefix}_crf_start", fresh.start_scores.data),
            end_scores=self._add(f"{prefix}_crf_end", fresh.end_scores.data),
        )

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def named(self) -> "OrderedDict[str, Tensor]":
        return self._tensors

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self._tensors.values())


# ---------------------------------------------------------------------------
# input features

@dataclass
class FeatureBlock:
    """Constant per-token feature matrices for one token sequence.

    When `onehot` is set, pos/ner hold tag one-hots to be multiplied with
    the embedding tables and ctx holds provider vectors; otherwise all
    three are ready-made hash features of the tokens themselves.
    """

    pos: np.ndarray  # (rows, J)
    ner: np.ndarray
    ctx: np.ndarray
    onehot: bool

    @property
    def length(self) -> int:
        return self.pos.shape[1]


def build_features(
    tokens: Sequence[str],
    pos_tags: Sequence[str],
    ner_tags: Sequence[str],
    ctx_vectors: np.ndarray,
    config: ModelConfig,
) -> FeatureBlock:
    n = len(tokens)
    if not (len(pos_tags) == len(ner_tags) == n and ctx_vectors.shape[0] == n):
        raise ValueError(
            f"misaligned inputs: tokens={n}, pos={len(pos_tags)}, "
            f"ner={len(ner_tags)}, ctx={ctx_vectors.shape[0]}"
        )
    if config.use_pretrained_features:
        if ctx_vectors.shape[1] != config.ctx_dim:
            raise ValueError(
                f"context vectors have dim {ctx_vectors.shape[1]}, config wants {config.ctx_dim}"
            )
        pos = np.zeros((len(POS_VOCAB), n))
        pos[POS_VOCAB.ids(pos_tags), np.arange(n)] = 1.0
        ner = np.zeros((len(NER_VOCAB), n))
        ner[NER_VOCAB.ids(ner_tags), np.arange(n)] = 1.0
        return FeatureBlock(pos=pos, ner=ner, ctx=ctx_vectors.T.astype(np.float64), onehot=True)
    pos = np.stack([hash_embed(t, config.pos_dim, _HASH_SEED_POS) for t in tokens], axis=1)
    ner = np.stack([hash_embed(t, config.ner_dim, _HASH_SEED_NER) for t in tokens], axis=1)
    ctx = np.stack([hash_embed(t, config.ctx_dim, _HASH_SEED_CTX) for t in tokens], axis=1)
    return FeatureBlock(pos=pos, ner=ner, ctx=ctx, onehot=False)


@dataclass
class NetworkInputs:
    """Everything constant about one (utterance, slot type) pair."""

    utterance_id: str
    tokens: Tuple[str, ...]
    slot_name: str
    utt: FeatureBlock
    desc: FeatureBlock


def prepare_inputs(
    utterance: Utterance,
    slot_type: SlotType,
    provider: Provider,
    config: ModelConfig,
) -> NetworkInputs:
    pos, ner, vectors = annotate(provider, utterance)
    d_pos, d_ner, d_vectors = provider.annotate_slot(slot_type)
    return NetworkInputs(
        utterance_id=utterance.id,
        tokens=utterance.tokens,
        slot_name=slot_type.name,
        utt=build_features(utterance.tokens, pos, ner, vectors, config),
        desc=build_features(slot_type.description_tokens, d_pos, d_ner, d_vectors, config),
    )


# ---------------------------------------------------------------------------
# layers

def embed(
    feats: FeatureBlock,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Fuse the three signals into X (d, J): projection then 2-layer highway."""
    if feats.onehot:
        pos_e = matmul(params["pos_table"], Tensor(feats.pos))
        ner_e = matmul(params["ner_table"], Tensor(feats.ner))
    else:
        pos_e = Tensor(feats.pos)
        ner_e = Tensor(feats.ner)
    stack = concat([pos_e, ner_e, Tensor(feats.ctx)], axis=0)
    x = matmul(params["fuse_w"], stack) + params["fuse_b"]
    for i in (1, 2):
        gate = sigmoid(matmul(params[f"hw{i}_gate_w"], x) + params[f"hw{i}_gate_b"])
        cand = relu(matmul(params[f"hw{i}_lin_w"], x) + params[f"hw{i}_lin_b"])
        x = gate * cand + (Tensor(1.0) - gate) * x
    if training and config.dropout > 0:
        x = dropout(x, config.dropout, training=True, rng=rng)
    return x


def _lstm_direction(x: Tensor, order: range, w: Tensor, b: Tensor, hidden: int) -> List[Tensor]:
    """Hidden states for one direction, indexed by position (not visit order).

    The input-side product is batched across all positions up front; the
    recurrence only multiplies the hidden-side weight block per step. Fused
    gate rows are laid out [input; forget; output; candidate] so a single
    sigmoid covers the three gates.
    """
    w_h = narrow(w, 1, 0, hidden)
    w_x = narrow(w, 1, hidden, w.shape[1] - hidden)
    from_input = matmul(w_x, x) + b  # (4h, J)
    h = Tensor(np.zeros((hidden, 1)))
    c = Tensor(np.zeros((hidden, 1)))
    outs: List[Optional[Tensor]] = [None] * len(order)
    for j in order:
        z = matmul(w_h, h) + narrow(from_input, 1, j, 1)
        gates = sigmoid(narrow(z, 0, 0, 3 * hidden))
        i = narrow(gates, 0, 0, hidden)
        f = narrow(gates, 0, hidden, hidden)
        o = narrow(gates, 0, 2 * hidden, hidden)
        g = tanh(narrow(z, 0, 3 * hidden, hidden))
        c = f * c + i * g
        h = o * tanh(c)
        outs[j] = h
    return outs


def _bilstm(x: Tensor, params: ModelParams, prefix: str, hidden: int) -> Tensor:
    n = x.shape[1]
    fwd = _lstm_direction(x, range(n), params[f"{prefix}_f_w"], params[f"{prefix}_f_b"], hidden)
    bwd = _lstm_direction(
        x, range(n - 1, -1, -1), params[f"{prefix}_b_w"], params[f"{prefix}_b_b"], hidden
    )
    fwd_block = concat(fwd, axis=1) if n > 1 else fwd[0]
    bwd_block = concat(bwd, axis=1) if n > 1 else bwd[0]
    return concat([fwd_block, bwd_block], axis=0)


def encode(
    x: Tensor, params: ModelParams, config: ModelConfig, side: str = "utterance"
) -> Tensor:
    """BiLSTM over positions: (d, J) -> (2h, J); per-position [fwd; bwd]."""
    prefix = "enc"
    if side == "description" and not config.share_encoders:
        prefix = "denc"
    return _bilstm(x, params, prefix, config.lstm_hidden)


def step_two_emissions(h: Tensor, params: ModelParams) -> Tensor:
    """Per-token slot-independent tag scores, (J, 3)."""
    return transpose(matmul(params["step2_w"], h) + params["step2_b"])


def similarity_matrix(h: Tensor, u: Tensor, w_a: Tensor) -> Tensor:
    """A[j, k] = w_a . [h_j ; u_k ; h_j * u_k], shape (J, K)."""
    two_h = h.shape[0]
    if u.shape[0] != two_h or w_a.shape != (3 * two_h, 1):
        raise ValueError(
            f"similarity dims disagree: H {h.shape}, U {u.shape}, w_a {w_a.shape}"
        )
    w1 = narrow(w_a, 0, 0, two_h)
    w2 = narrow(w_a, 0, two_h, two_h)
    w3 = narrow(w_a, 0, 2 * two_h, two_h)
    utt_term = matmul(transpose(h), w1)  # (J, 1)
    desc_term = matmul(transpose(w2), u)  # (1, K)
    cross_term = matmul(transpose(mul(h, w3)), u)  # (J, K)
    return cross_term + utt_term + desc_term


def attend(a: Tensor, h: Tensor, u: Tensor) -> Tensor:
    """Bi-directional attention features G (4h, J).

    Rows are [U'; H']: U' re-weights description positions per utterance
    word; H' tiles one utterance summary vector, weighted by how strongly
    each word's best description match scores.
    """
    n = a.shape[0]
    att = softmax(a, axis=1)  # (J, K), rows sum to 1
    u_prime = matmul(u, transpose(att))  # (2h, J)
    best = max_over_axis(a, axis=1)  # (J,), max across description axis
    b = softmax(reshape(best, (n, 1)), axis=0)
    h_summary = matmul(h, b)  # (2h, 1)
    h_prime = matmul(h_summary, Tensor(np.ones((1, n))))  # tiled columns
    return concat([u_prime, h_prime], axis=0)


def contextualize(
    h: Tensor,
    g: Tensor,
    iob_tags: Sequence[int],
    params: ModelParams,
    config: ModelConfig,
) -> Tensor:
    """2-stack BiLSTM over [H; G; tag embedding] -> C (2h, J)."""
    n = h.shape[1]
    if len(iob_tags) != n:
        raise ValueError(f"{len(iob_tags)} IOB tags for {n} positions")
    if config.use_iob_feed:
        onehot = np.zeros((crf.N_TAGS, n))
        onehot[list(iob_tags), np.arange(n)] = 1.0
        iob_e = matmul(params["iob_table"], Tensor(onehot))
    else:
        iob_e = Tensor(np.zeros((config.iob_feed_dim, n)))
    stack = concat([h, g, iob_e], axis=0)
    c = _bilstm(stack, params, "ctx1", config.lstm_hidden)
    return _bilstm(c, params, "ctx2", config.lstm_hidden)


def predict_emissions(c: Tensor, params: ModelParams) -> Tensor:
    """Slot-specific tag scores (J, 3): two affine+ReLU layers, then affine."""
    l1 = relu(matmul(params["pred1_w"], c) + params["pred1_b"])
    l2 = relu(matmul(params["pred2_w"], l1) + params["pred2_b"])
    return transpose(matmul(params["pred3_w"], l2) + params["pred3_b"])


@dataclass
class ForwardResult:
    step2_emissions: Tensor  # (J, 3)
    pred_emissions: Tensor  # (J, 3)
    iob_feed: List[int]  # tags fed to contextualization


def forward_pass(
    inputs: NetworkInputs,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    teacher_iob: Optional[Sequence[int]] = None,
) -> ForwardResult:
    """Run all six layers for one (utterance, slot type) pair.

    Training mode needs gold slot-independent tags (teacher forcing) and an
    rng for dropout; inference decodes the step-two CRF for the IOB feed
    and applies no dropout.
    """
    if training and teacher_iob is None:
        raise ValueError("training mode requires gold slot-independent tags")
    rate = config.dropout if training else 0.0

    def drop(t: Tensor) -> Tensor:
        return dropout(t, rate, training=training, rng=rng) if rate > 0 else t

    x = embed(inputs.utt, params, config, training=training, rng=rng)
    s = embed(inputs.desc, params, config, training=training, rng=rng)
    h = drop(encode(x, params, config, side="utterance"))
    u = drop(encode(s, params, config, side="description"))
    step2 = step_two_emissions(h, params)
    if teacher_iob is not None:
        iob_feed = list(teacher_iob)
    else:
        iob_feed, _ = crf.viterbi(step2.data, params.step2_crf)
    a = similarity_matrix(h, u, params["w_a"])
    g = drop(attend(a, h, u))
    c = drop(contextualize(h, g, iob_feed, params, config))
    pred = predict_emissions(c, params)
    return ForwardResult(step2_emissions=step2, pred_emissions=pred, iob_feed=iob_feed)


def forward_loss(
    example: TrainingExample,
    inputs: NetworkInputs,
    params: ModelParams,
    config: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
) -> Tensor:
    """Joint negative log likelihood of both CRF heads for one example."""
    y_indep = label_ids(example.y_indep)
    y_slot = label_ids(example.y_slot)
    result = forward_pass(
        inputs, params, config, training=training, rng=rng, teacher_iob=y_indep
    )
    ll_indep = log_likelihood(result.step2_emissions, y_indep, params.step2_crf)
    ll_slot = log_likelihood(result.pred_emissions, y_slot, params.pred_crf)
    return (ll_indep + ll_slot) * Tensor(-1.0)


# ---------------------------------------------------------------------------
# checkpoints

def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii"),
    }


def _decode_array(entry: dict, name: str, expect_shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(entry["data"]), dtype=np.float64)
    shape = tuple(entry["shape"])
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"checkpoint entry {name!r} has wrong payload size")
    if expect_shape is not None and shape != expect_shape:
        raise ValueError(f"checkpoint entry {name!r} shape {shape} != expected {expect_shape}")
    return arr.reshape(shape).copy()


def save_checkpoint(
    path: Union[str, Path],
    params: ModelParams,
    seeds: Optional[Dict[str, int]] = None,
    trainer_state: Optional[dict] = None,
) -> None:
    """Versioned container: name -> shape -> row-major float64 payload, plus
    the model config, RNG seeds, and (optionally) resumable trainer state.

    Written atomically (temp file + rename); round-trips bit-exactly.
    """
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "seeds": seeds or {},
        "params": {name: _encode_array(t.data) for name, t in params.named().items()},
    }
    if trainer_state is not None:
        payload["trainer_state"] = trainer_state
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    seeds: Dict[str, int]
    trainer_state: Optional[dict] = None

    def __iter__(self):
        # unpacks as (params, config, seeds) for the common case
        return iter((self.params, self.config, self.seeds))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    config = ModelConfig.from_dict(payload["config"])
    params = ModelParams(config, seed=0)
    stored = payload["params"]
    names = set(params.named())
    if set(stored) != names:
        missing = names - set(stored)
        extra = set(stored) - names
        raise ValueError(f"checkpoint parameter mismatch: missing={missing}, extra={extra}")
    for name, t in params.named().items():
        t.data = _decode_array(stored[name], name, t.data.shape)
    return Checkpoint(
        params=params,
        config=config,
        seeds=dict(payload.get("seeds", {})),
        trainer_state=payload.get("trainer_state"),
    )
