"""Linear-chain CRF over the 3-tag {B, I, O} space.

Two instances of this model are used: one scoring slot-independent tags
and one scoring slot-specific tags. Both share the structural constraint
that I may never follow O and may not open a sequence. Forbidden moves
are handled with a large additive penalty rather than a true -inf so all
arithmetic stays finite.

log_partition / log_likelihood run on the autodiff tape (training path);
viterbi / marginals are plain numpy (decoding path).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

from .tensor import Tensor, logsumexp, mul, narrow, reshape, transpose, tsum

TAGS: Tuple[str, str, str] = ("B", "I", "O")
TAG_TO_ID = {t: i for i, t in enumerate(TAGS)}
N_TAGS = 3
MASK_PENALTY = -1e4

_B, _I, _O = 0, 1, 2


def default_constraint_mask() -> np.ndarray:
    """Allowed transitions, indexed [from, to]; only O -> I is forbidden."""
    mask = np.ones((N_TAGS, N_TAGS), dtype=bool)
    mask[_O, _I] = False
    return mask


def default_start_allowed() -> np.ndarray:
    allowed = np.ones(N_TAGS, dtype=bool)
    allowed[_I] = False
    return allowed


@dataclass
class CrfParams:
    """Trainable transition/start/end scores plus the fixed constraint mask."""

    transitions: Tensor
    start_scores: Tensor
    end_scores: Tensor
    constraint_mask: np.ndarray = field(default_factory=default_constraint_mask)
    start_allowed: np.ndarray = field(default_factory=default_start_allowed)

    def __post_init__(self):
        if self.transitions.shape != (N_TAGS, N_TAGS):
            raise ValueError(f"transitions must be {N_TAGS}x{N_TAGS}, got {self.transitions.shape}")
        if self.constraint_mask[_O, _I]:
            raise ValueError("constraint mask must forbid O -> I")
        if self.start_allowed[_I]:
            raise ValueError("constraint mask must forbid I as the first tag")

    @property
    def transition_penalty(self) -> np.ndarray:
        return MASK_PENALTY * (~self.constraint_mask)

    @property
    def start_penalty(self) -> np.ndarray:
        return MASK_PENALTY * (~self.start_allowed)


def new_crf_params() -> CrfParams:
    """Zero-initialized trainable CRF parameters."""
    return CrfParams(
        transitions=Tensor(np.zeros((N_TAGS, N_TAGS)), requires_grad=True),
        start_scores=Tensor(np.zeros(N_TAGS), requires_grad=True),
        end_scores=Tensor(np.zeros(N_TAGS), requires_grad=True),
    )


def label_ids(labels: Sequence[Union[str, int]]) -> List[int]:
    return [TAG_TO_ID[y] if isinstance(y, str) else int(y) for y in labels]


def labels_allowed(labels: Sequence[Union[str, int]], params: CrfParams) -> bool:
    ids = label_ids(labels)
    if not params.start_allowed[ids[0]]:
        return False
    return all(params.constraint_mask[a, b] for a, b in zip(ids, ids[1:]))


def _as_tensor(emissions: Union[Tensor, np.ndarray]) -> Tensor:
    return emissions if isinstance(emissions, Tensor) else Tensor(emissions)


def _effective_tensors(params: CrfParams) -> Tuple[Tensor, Tensor, Tensor]:
    trans = params.transitions + Tensor(params.transition_penalty)
    start = params.start_scores + Tensor(params.start_penalty)
    return trans, start, params.end_scores


def _effective_np(params: CrfParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        params.transitions.data + params.transition_penalty,
        params.start_scores.data + params.start_penalty,
        params.end_scores.data,
    )


def log_partition(emissions: Union[Tensor, np.ndarray], params: CrfParams) -> Tensor:
    """log sum over all mask-allowed tag sequences of exp(path score).

    Forward algorithm in log space; differentiable w.r.t. emissions and
    all CRF parameters when run under a tape.
    """
    emissions = _as_tensor(emissions)
    n = emissions.shape[0]
    if n < 1 or emissions.shape[1] != N_TAGS:
        raise ValueError(f"emissions must be Jx{N_TAGS} with J >= 1, got {emissions.shape}")
    trans, start, end = _effective_tensors(params)
    alpha = reshape(start, (1, N_TAGS)) + narrow(emissions, 0, 0, 1)
    for i in range(1, n):
        scores = transpose(alpha) + trans  # (T,1) + (T,T): row = previous tag
        alpha = logsumexp(scores, axis=0, keepdims=True) + narrow(emissions, 0, i, 1)
    return logsumexp(alpha + reshape(end, (1, N_TAGS)), axis=None)


def sequence_score(
    emissions: Union[Tensor, np.ndarray],
    labels: Sequence[Union[str, int]],
    params: CrfParams,
) -> Tensor:
    """Unnormalized path score of one tag sequence (mask penalties included)."""
    emissions = _as_tensor(emissions)
    ids = label_ids(labels)
    n = emissions.shape[0]
    if len(ids) != n:
        raise ValueError(f"{len(ids)} labels for {n} emission rows")
    trans, start, end = _effective_tensors(params)

    onehot = np.zeros((n, N_TAGS))
    onehot[np.arange(n), ids] = 1.0
    score = tsum(mul(emissions, Tensor(onehot)))

    pair_counts = np.zeros((N_TAGS, N_TAGS))
    for a, b in zip(ids, ids[1:]):
        pair_counts[a, b] += 1.0
    if n > 1:
        score = score + tsum(mul(trans, Tensor(pair_counts)))

    start_onehot = np.zeros(N_TAGS)
    start_onehot[ids[0]] = 1.0
    end_onehot = np.zeros(N_TAGS)
    end_onehot[ids[-1]] = 1.0
    score = score + tsum(mul(start, Tensor(start_onehot)))
    score = score + tsum(mul(end, Tensor(end_onehot)))
    return score


def log_likelihood(
    emissions: Union[Tensor, np.ndarray],
    labels: Sequence[Union[str, int]],
    params: CrfParams,
) -> Tensor:
    """Conditional log probability of the gold sequence; always <= 0."""
    if not labels_allowed(labels, params):
        raise ValueError(f"gold labels violate the constraint mask: {list(labels)}")
    return sequence_score(emissions, labels, params) - log_partition(emissions, params)


def _lse(v: np.ndarray, axis: int) -> np.ndarray:
    m = v.max(axis=axis, keepdims=True)
    return (np.log(np.exp(v - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis=axis)


def _log_partition_np(e: np.ndarray, trans: np.ndarray, start: np.ndarray, end: np.ndarray) -> float:
    alpha = start + e[0]
    for i in range(1, e.shape[0]):
        alpha = _lse(alpha[:, None] + trans, axis=0) + e[i]
    return float(_lse((alpha + end)[None, :], axis=1)[0])


def viterbi(
    emissions: Union[Tensor, np.ndarray], params: CrfParams
) -> Tuple[List[int], float]:
    """Best mask-allowed tag sequence and its normalized log probability.

    Ties prefer the lower tag index (B < I < O) at every backtrack step.
    """
    e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=np.float64)
    trans, start, end = _effective_np(params)
    n = e.shape[0]
    delta = start + e[0]
    backptr = np.zeros((n, N_TAGS), dtype=np.intp)
    for i in range(1, n):
        cand = delta[:, None] + trans  # [prev, next]
        backptr[i] = cand.argmax(axis=0)  # argmax takes the first (lowest) index
        delta = cand[backptr[i], np.arange(N_TAGS)] + e[i]
    delta = delta + end
    best = int(delta.argmax())
    path = [best]
    for i in range(n - 1, 0, -1):
        best = int(backptr[i, best])
        path.append(best)
    path.reverse()
    log_prob = float(delta.max()) - _log_partition_np(e, trans, start, end)
    return path, min(log_prob, 0.0)


def marginals(emissions: Union[Tensor, np.ndarray], params: CrfParams) -> np.ndarray:
    """Posterior tag probabilities per position (forward-backward), JxT."""
    e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=np.float64)
    trans, start, end = _effective_np(params)
    n = e.shape[0]
    alpha = np.zeros((n, N_TAGS))
    alpha[0] = start + e[0]
    for i in range(1, n):
        alpha[i] = _lse(alpha[i - 1][:, None] + trans, axis=0) + e[i]
    beta = np.zeros((n, N_TAGS))
    beta[n - 1] = end
    for i in range(n - 2, -1, -1):
        beta[i] = _lse(trans + (e[i + 1] + beta[i + 1])[None, :], axis=1)
    log_z = _lse((alpha[n - 1] + end)[None, :], axis=1)[0]
    marg = np.exp(alpha + beta - log_z)
    return marg / marg.sum(axis=1, keepdims=True)
