"""Mini-batch joint training: Adam, reduce-on-plateau learning rate,
early stopping on dev span F1, atomic checkpointing.

Run directory layout: best.ckpt, last.ckpt, metrics.jsonl, config.json.
The metrics log holds one JSON line per evaluation:
{"epoch", "train_loss", "dev_f1", "lr"}. Identical (config, seed, data)
reproduce the log byte for byte.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .annotators import AnnotationLookupError, Provider
from .corpus import (
    Dataset,
    Split,
    SlotType,
    TrainingExample,
    Utterance,
    generate_examples,
    stable_seed,
)
from .decoder import Predictor
from .evaluator import span_f1
from .network import (
    ModelConfig,
    ModelParams,
    NetworkInputs,
    _decode_array,
    _encode_array,
    forward_loss,
    load_checkpoint,
    prepare_inputs,
    save_checkpoint,
)
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 200
    lr_init: float = 0.001
    lr_decay_factor: float = 0.5
    lr_patience: int = 3
    early_stop_patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_floor: float = 1e-5
    grad_clip: float = 5.0  # global gradient norm ceiling; 0 disables
    seed: int = 0
    q: int = 3  # negatives sampled per utterance

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.lr_decay_factor < 1.0):
            raise ValueError("lr_decay_factor must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


class AdamState:
    """First/second moment estimates plus the step counter."""

    def __init__(self):
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def to_payload(self) -> dict:
        return {
            "t": self.t,
            "m": {k: _encode_array(a) for k, a in self.m.items()},
            "v": {k: _encode_array(a) for k, a in self.v.items()},
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "AdamState":
        state = cls()
        state.t = int(payload["t"])
        state.m = {k: _decode_array(e, k) for k, e in payload["m"].items()}
        state.v = {k: _decode_array(e, k) for k, e in payload["v"].items()}
        return state


def adam_step(
    params: "OrderedDict[str, Tensor]",
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam update with bias correction, in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        elif g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} {tensor.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        tensor.data = tensor.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients down to a global L2 norm ceiling; returns the
    pre-clip norm."""
    total = float(np.sqrt(sum(float(np.square(g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class FeatureCache:
    """Network inputs per (utterance, slot type) pair, built once."""

    def __init__(self, dataset: Dataset, provider: Provider, config: ModelConfig):
        self.dataset = dataset
        self.provider = provider
        self.config = config
        self._inputs: Dict[Tuple[str, str], NetworkInputs] = {}

    def get(self, utterance: Utterance, slot_type: SlotType) -> NetworkInputs:
        key = (utterance.id, slot_type.name)
        inputs = self._inputs.get(key)
        if inputs is None:
            inputs = prepare_inputs(utterance, slot_type, self.provider, self.config)
            self._inputs[key] = inputs
        return inputs


def training_slot_pool(dataset: Dataset, train_ids: Sequence[str]) -> List[SlotType]:
    """Slot types available as training targets and negative candidates:
    those declared for a training utterance's domain plus any present in
    training utterances. Sorted by name for determinism."""
    train_utts = [dataset.by_id[uid] for uid in train_ids]
    train_domains = {u.domain for u in train_utts}
    names = set()
    for st in dataset.slot_types:
        if st.domains & train_domains:
            names.add(st.name)
    for u in train_utts:
        names.update(u.present_slot_types())
    return sorted((dataset.slot_by_name[n] for n in names), key=lambda st: st.name)


def build_training_examples(
    dataset: Dataset,
    utterance_ids: Sequence[str],
    pool: Sequence[SlotType],
    q: int,
    seed: int,
) -> List[TrainingExample]:
    examples: List[TrainingExample] = []
    for uid in utterance_ids:
        utt = dataset.by_id[uid]
        examples.extend(
            generate_examples(utt, pool, q=q, rng_seed=stable_seed(seed, "negatives", uid))
        )
    return examples


def _check_annotations(dataset: Dataset, ids: Sequence[str], provider: Provider) -> None:
    missing = []
    for uid in ids:
        try:
            provider.annotate(dataset.by_id[uid])
        except AnnotationLookupError:
            missing.append(uid)
    if missing:
        raise AnnotationLookupError(
            f"annotations missing for {len(missing)} utterances: {sorted(missing)[:20]}"
        )


def evaluate_f1(
    dataset: Dataset,
    ids: Sequence[str],
    predictor: Predictor,
    candidates_by_domain: Mapping[str, List[SlotType]],
) -> float:
    """Micro span F1 of merged predictions against gold labels."""
    gold = {}
    pred = {}
    for uid in sorted(ids):
        utt = dataset.by_id[uid]
        candidates = candidates_by_domain.get(utt.domain)
        if not candidates:
            continue
        gold[uid] = list(utt.labels)
        pred[uid] = predictor.predict_utterance(utt, candidates).labels
    if not gold:
        return 0.0
    return span_f1(gold, pred).micro.f1


def candidate_map(dataset: Dataset, pool: Sequence[SlotType]) -> Dict[str, List[SlotType]]:
    """Domain -> candidate slot types (the domain's inventory within the pool)."""
    domains = {u.domain for u in dataset.utterances}
    mapping: Dict[str, List[SlotType]] = {}
    for domain in domains:
        scoped = [st for st in pool if domain in st.domains]
        mapping[domain] = scoped if scoped else list(pool)
    return mapping


@dataclass
class TrainResult:
    run_dir: str
    best_dev_f1: float
    best_epoch: int
    epochs_run: int
    metrics: List[dict] = field(default_factory=list)


def train(
    dataset: Dataset,
    split: Split,
    provider: Provider,
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_dir: Union[str, Path],
    resume: bool = False,
) -> TrainResult:
    """Joint training of both tagger heads over the split's training ids.

    Each epoch shuffles (utterance x slot type) examples with a seeded RNG,
    accumulates batch-mean gradients, applies Adam, then scores dev span F1
    with the real decoder. The learning rate halves after `lr_patience`
    evaluations without improvement (floor lr_floor); training stops after
    `early_stop_patience` evaluations without improvement. The best-dev
    checkpoint is kept alongside the newest one.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if not split.train_ids:
        raise ValueError("training split is empty")
    _check_annotations(dataset, list(split.train_ids) + list(split.dev_ids), provider)

    pool = training_slot_pool(dataset, list(split.train_ids) + list(split.dev_ids))
    if not pool:
        raise ValueError("no slot types available for training")
    examples = build_training_examples(
        dataset, split.train_ids, pool, train_config.q, train_config.seed
    )
    cache = FeatureCache(dataset, provider, model_config)
    candidates = candidate_map(dataset, pool)

    params = ModelParams(model_config, seed=train_config.seed)
    adam = AdamState()
    start_epoch = 1
    lr = train_config.lr_init
    best_f1 = -1.0
    best_epoch = 0
    stale = 0  # evaluations since the last improvement
    metrics: List[dict] = []

    last_path = run_dir / "last.ckpt"
    if resume and last_path.exists():
        ckpt = load_checkpoint(last_path)
        params = ckpt.params
        state = ckpt.trainer_state or {}
        adam = AdamState.from_payload(state["adam"]) if "adam" in state else AdamState()
        start_epoch = int(state.get("epoch", 0)) + 1
        lr = float(state.get("lr", lr))
        best_f1 = float(state.get("best_f1", best_f1))
        best_epoch = int(state.get("best_epoch", 0))
        stale = int(state.get("stale", 0))
        if (run_dir / "metrics.jsonl").exists():
            metrics = [
                json.loads(line)
                for line in (run_dir / "metrics.jsonl").read_text().splitlines()
                if line.strip()
            ]

    config_payload = {
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
        "split": {
            "regime": split.regime,
            "unit": split.unit,
            "seed": split.seed,
            "train_units": list(split.train_units),
            "test_units": list(split.test_units),
        },
    }
    _atomic_write(run_dir / "config.json", json.dumps(config_payload, sort_keys=True, indent=2))

    dropout_rng = np.random.default_rng(stable_seed(train_config.seed, "dropout"))
    named = params.named()
    name_of = {id(t): name for name, t in named.items()}

    epochs_run = start_epoch - 1
    for epoch in range(start_epoch, train_config.max_epochs + 1):
        epochs_run = epoch
        order_rng = np.random.default_rng(stable_seed(train_config.seed, "shuffle", epoch))
        order = order_rng.permutation(len(examples))
        epoch_loss = 0.0
        for lo in range(0, len(order), train_config.batch_size):
            batch = [examples[int(i)] for i in order[lo : lo + train_config.batch_size]]
            grads: Dict[str, np.ndarray] = {}
            for example in batch:
                utt = dataset.by_id[example.utterance_id]
                inputs = cache.get(utt, example.slot_type)
                with Tape() as tape:
                    loss = forward_loss(
                        example, inputs, params, model_config, rng=dropout_rng
                    )
                epoch_loss += loss.item()
                for tensor, g in tape.backward(loss).items():
                    name = name_of.get(id(tensor))
                    if name is not None:
                        if name in grads:
                            grads[name] += g
                        else:
                            grads[name] = g.copy()
            scale = 1.0 / len(batch)
            for name in grads:
                grads[name] *= scale
            if train_config.grad_clip > 0:
                clip_gradients(grads, train_config.grad_clip)
            adam_step(
                named, grads, adam, lr,
                beta1=train_config.adam_beta1,
                beta2=train_config.adam_beta2,
                eps=train_config.adam_eps,
            )
        train_loss = epoch_loss / len(examples)

        predictor = Predictor(params, model_config, provider)
        dev_f1 = evaluate_f1(dataset, split.dev_ids, predictor, candidates)
        metrics.append({"epoch": epoch, "train_loss": train_loss, "dev_f1": dev_f1, "lr": lr})
        _append_metrics(run_dir / "metrics.jsonl", metrics[-1], fresh=(epoch == 1))

        improved = dev_f1 > best_f1 + 1e-12
        if improved:
            best_f1 = dev_f1
            best_epoch = epoch
            stale = 0
            save_checkpoint(
                run_dir / "best.ckpt", params,
                seeds={"train": train_config.seed},
                trainer_state={"epoch": epoch, "dev_f1": dev_f1},
            )
        else:
            stale += 1
            if stale % train_config.lr_patience == 0 and lr > train_config.lr_floor:
                lr = max(lr * train_config.lr_decay_factor, train_config.lr_floor)

        save_checkpoint(
            last_path, params,
            seeds={"train": train_config.seed},
            trainer_state={
                "epoch": epoch,
                "lr": lr,
                "best_f1": best_f1,
                "best_epoch": best_epoch,
                "stale": stale,
                "adam": adam.to_payload(),
            },
        )
        if stale >= train_config.early_stop_patience:
            break

    return TrainResult(
        run_dir=str(run_dir),
        best_dev_f1=best_f1,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        metrics=metrics,
    )


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _append_metrics(path: Path, entry: dict, fresh: bool) -> None:
    mode = "w" if fresh else "a"
    with open(path, mode, encoding="utf-8", newline="\n") as fh:
        fh.write(
            json.dumps(
                {k: entry[k] for k in ("epoch", "train_loss", "dev_f1", "lr")},
                sort_keys=True,
            )
            + "\n"
        )
