"""Dynamic combination scheduling driven by decoupling-progress scores.

Once per epoch, each of the 7 modality combinations gets a separability
score: the Jensen-Shannon divergence (un-halved form, so the range is
[0, 2 ln 2]) between the softmax-normalized pooled private and common adapter
representations, averaged over a fixed probe batch and over the modalities in
the combination. A large score means the private adapter has moved far from
the shared one, i.e. the combination has extracted a lot of characteristic
information.

Epoch-over-epoch score deltas rank the combinations in descending order
(rank 1 = fastest-rising score). With the default direction the top half -
the combinations still actively pulling their private space apart, i.e. the
ones with the most characteristic information left to extract - gets its
sampling probability increased, the bottom half decreased, and the
median-ranked combination is untouched. Setting boost_rising=False inverts
this, treating rising scores as "already learned well" and suppressing them
instead. Each adjustment has magnitude q_base * lambda * sigmoid(delta), and
probabilities are clamped to [p_min, p_max]. Probabilities are normalized
only at sampling time.

For models trained without adapter banks the per-modality score is undefined;
as a stand-in, the score is the divergence between the model's predicted
class distribution under the combination and under the full modality set. A
rising score then means the combination's predictions are drifting away from
the full-information ones (it is being starved), and the same boost-rising
rule feeds it more data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .modalities import ALL_COMBINATIONS, FULL, Combo
from .model import MculoraModel, forward_batch, stack_features
from .rng import Rng
from .synthgen import Utterance

_LOG_EPS = 1e-12

N_COMBINATIONS = len(ALL_COMBINATIONS)


@dataclass
class SeparabilityVector:
    """Per-combination decoupling scores for one epoch (canonical order)."""

    values: np.ndarray
    epoch: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_COMBINATIONS,):
            raise ContractError(f"expected {N_COMBINATIONS} scores, got shape {self.values.shape}")
        if (self.values < 0).any():
            raise ContractError("separability scores must be nonnegative")


@dataclass(frozen=True)
class CombinationSchedule:
    """Sampling probabilities plus the update hyperparameters."""

    q: np.ndarray
    p_min: float = 0.05
    p_max: float = 0.5
    q_base: float = 0.1
    lam: float = 1.0
    boost_rising: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64))
        if self.q.shape != (N_COMBINATIONS,):
            raise ContractError(f"schedule needs {N_COMBINATIONS} probabilities, got {self.q.shape}")
        if not (0.0 < self.p_min < self.p_max < 1.0):
            raise ContractError(f"need 0 < p_min < p_max < 1, got [{self.p_min}, {self.p_max}]")
        if not (0.0 < self.q_base < 1.0):
            raise ContractError(f"q_base must be in (0, 1), got {self.q_base}")
        if self.lam <= 0.0:
            raise ContractError(f"lambda must be > 0, got {self.lam}")
        if ((self.q < self.p_min - 1e-12) | (self.q > self.p_max + 1e-12)).any():
            raise ContractError("probabilities must start within [p_min, p_max]")


def uniform_schedule(p_min: float = 0.05, p_max: float = 0.5, q_base: float = 0.1,
                     lam: float = 1.0, reduce_fast_learners: bool = True) -> CombinationSchedule:
    return CombinationSchedule(np.full(N_COMBINATIONS, 1.0 / N_COMBINATIONS),
                               p_min=p_min, p_max=p_max, q_base=q_base, lam=lam,
                               reduce_fast_learners=reduce_fast_learners)


# ---------------------------------------------------------------------------
# divergence
# ---------------------------------------------------------------------------

def js_divergence(p, q) -> float:
    """Un-halved Jensen-Shannon divergence between two discrete distributions.

    Symmetric, zero iff p == q, at most 2 ln 2. A small epsilon inside the
    logs guards zero entries.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractError(f"js_divergence expects equal-length distributions, got {p.shape} and {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if (dist < 0).any():
            raise ContractError(f"{name} has negative entries")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ContractError(f"{name} sums to {dist.sum()}, expected 1 within 1e-9")
    m = 0.5 * (p + q)
    kl_pm = float(np.sum(p * np.log((p + _LOG_EPS) / (m + _LOG_EPS))))
    kl_qm = float(np.sum(q * np.log((q + _LOG_EPS) / (m + _LOG_EPS))))
    return kl_pm + kl_qm


def _js_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Row-wise un-halved JS divergence for (B, d) distribution matrices."""
    M = 0.5 * (P + Q)
    kl_pm = np.sum(P * np.log((P + _LOG_EPS) / (M + _LOG_EPS)), axis=1)
    kl_qm = np.sum(Q * np.log((Q + _LOG_EPS) / (M + _LOG_EPS)), axis=1)
    return kl_pm + kl_qm


def _softmax_rows(X: np.ndarray) -> np.ndarray:
    e = np.exp(X - X.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def separability_scores(model: MculoraModel, probe_batch: list[Utterance], epoch: int = 0) -> SeparabilityVector:
    """Score each combination's decoupling degree on an all-modalities probe batch."""
    if not probe_batch:
        raise ContractError("separability_scores: empty probe batch")
    if any(u.presence != FULL for u in probe_batch):
        raise ContractError("separability_scores: probe batch must have all modalities present")
    feats = stack_features(probe_batch)
    scores = np.zeros(N_COMBINATIONS)
    if model.cfg.mcla and model.adapters is not None:
        B, L, D = feats["a"].shape
        pooled_com: dict[str, np.ndarray] = {}
        for m in feats:
            x2d = feats[m].reshape(B * L, D)
            pooled_com[m] = (model.adapters[m].common.effective_map() @ x2d.T).T.reshape(B, L, -1).mean(axis=1)
        for idx, combo in enumerate(ALL_COMBINATIONS):
            per_mod = []
            for m in combo:
                x2d = feats[m].reshape(B * L, D)
                prt = (model.adapters[m].private_pair(combo).effective_map() @ x2d.T).T.reshape(B, L, -1).mean(axis=1)
                div = _js_rows(_softmax_rows(prt), _softmax_rows(pooled_com[m]))
                per_mod.append(div.mean())
            scores[idx] = float(np.mean(per_mod))
    else:
        # adapter-free fallback: compare each combination's fused token
        # distribution against the full-modality one
        full_tok = forward_batch(model, feats)["fused_com"].data
        full_dist = _softmax_rows(full_tok)
        for idx, combo in enumerate(ALL_COMBINATIONS):
            sub = {m: feats[m] for m in combo}
            tok = forward_batch(model, sub)["fused_com"].data
            scores[idx] = float(_js_rows(_softmax_rows(tok), full_dist).mean())
    return SeparabilityVector(values=scores, epoch=epoch)


def score_delta(s_prev: SeparabilityVector | np.ndarray, s_next: SeparabilityVector | np.ndarray) -> np.ndarray:
    """Elementwise difference between consecutive score vectors."""
    prev = s_prev.values if isinstance(s_prev, SeparabilityVector) else np.asarray(s_prev, dtype=np.float64)
    nxt = s_next.values if isinstance(s_next, SeparabilityVector) else np.asarray(s_next, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise ContractError(f"score vectors differ in length: {prev.shape} vs {nxt.shape}")
    return nxt - prev


def initial_scores() -> SeparabilityVector:
    """Scores before any training: all zero."""
    return SeparabilityVector(np.zeros(N_COMBINATIONS), epoch=0)


# ---------------------------------------------------------------------------
# probability updates
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # scalar math per element: adjustment magnitudes must equal the scalar
    # definition q_base * lambda * sigmoid(delta) bit for bit, and score
    # deltas are bounded by the JS range so overflow is not a concern
    return np.array([1.0 / (1.0 + math.exp(-min(max(xi, -500.0), 500.0))) for xi in x])


def schedule_deltas(sched: CombinationSchedule, delta_s: np.ndarray) -> np.ndarray:
    """Signed pre-clamp probability adjustments for each combination.

    Combinations are ranked by their score delta (ties broken by index).
    With reduce_fast_learners, the top half of progress is decremented and the
    bottom half incremented; the median-ranked combination is left unchanged.
    Magnitudes are q_base * lambda * sigmoid(delta_i).
    """
    delta_s = np.asarray(delta_s, dtype=np.float64)
    if delta_s.shape != (N_COMBINATIONS,):
        raise ContractError(f"expected {N_COMBINATIONS} score deltas, got shape {delta_s.shape}")
    order = np.argsort(delta_s, kind="stable")  # ascending progress
    if not sched.reduce_fast_learners:
        order = order[::-1]
    idx_of = np.empty(N_COMBINATIONS, dtype=np.int64)
    idx_of[order] = np.arange(1, N_COMBINATIONS + 1)  # 1-based rank
    threshold = (N_COMBINATIONS + 1) // 2  # median rank of 7 -> 4
    magnitude = np.abs(sched.q_base * sched.lam * _sigmoid(delta_s))
    deltas = np.where(idx_of > threshold, -magnitude, magnitude)
    deltas[idx_of == threshold] = 0.0
    return deltas


def update_probabilities(sched: CombinationSchedule, delta_s: np.ndarray) -> CombinationSchedule:
    """Apply ranked adjustments and clamp each probability to [p_min, p_max]."""
    q = np.clip(sched.q + schedule_deltas(sched, delta_s), sched.p_min, sched.p_max)
    return replace(sched, q=q)


def sample_combination(sched: CombinationSchedule, rng: Rng) -> Combo:
    """Categorical draw proportional to q (normalized at draw time)."""
    return ALL_COMBINATIONS[rng.categorical(sched.q)]
