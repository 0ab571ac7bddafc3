"""Two-phase training and missing-modality evaluation.

Phase 1 (pretrain): encoders, fusion, and the common head are trained with
the task loss on complete data (dropout on the encoder hidden layer only
here); encoders are then frozen for good.

Phase 2 (finetune): adapter banks, both heads, and the gate are trained on
incomplete batches. Each batch draws one modality combination from the
schedule (uniform when the dynamic scheduler is off), masks the batch to it,
and minimizes task loss + beta * orthogonality loss over the fine-tune
parameter set only. After every epoch, separability scores are recomputed on
a fixed probe batch and, when the scheduler is on, the sampling probabilities
are re-balanced.

Ablations: mcla=False trains only the common head on the frozen base;
dpft=False keeps combination probabilities uniform.

Evaluation reports ACC, macro-F1, WA (class-frequency-weighted accuracy), and
UA (mean per-class recall) per testing condition. Under the fixed protocol,
all seven conditions are imposed on the full test set and "average" is the
unweighted mean over the six incomplete conditions (the full set is reported
separately). Under the random protocol, each sample's missing pattern is
drawn once from the configured probability range.

CSV interfaces (column orders are part of the interface):

* epoch log:     epoch,phase,l_task,l_ort,l_total,wallclock_ms
* schedule log:  epoch,s_<c>...,ds_<c>...,q_<c>... for c in a,t,v,av,at,tv,atv
* probe log:     epoch,mean_cos_prt_com
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dpft import (
    CombinationSchedule,
    initial_scores,
    sample_combination,
    score_delta,
    separability_scores,
    uniform_schedule,
    update_probabilities,
)
from .errors import ConfigError, ContractError
from .losses import orthogonality_loss, task_loss, total_loss
from .modalities import ALL_COMBINATIONS, FULL, INCOMPLETE_COMBINATIONS, MODALITIES, Combo
from .model import MculoraModel, ModelConfig, attach_adapters, build_model, forward_batch
from .rng import Rng
from .synthgen import Utterance, apply_random_missing

_EVAL_CHUNK = 512


@dataclass
class TrainConfig:
    pretrain_epochs: int = 100
    finetune_epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta: float = 0.001
    rank: int = 4
    alpha: float = 1.0
    dropout: float = 0.5
    mcla: bool = True
    dpft: bool = True
    p_min: float = 0.05
    p_max: float = 0.5
    q_base: float = 0.1
    lam: float = 1.0
    reduce_fast_learners: bool = True
    probe_size: int = 256
    model_dim: int = 32
    classes: int = 4
    task: str = "classification"
    seed: int = 66
    mask_lo: float = 0.4
    mask_hi: float = 0.6
    eval_seed: int = 66

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (0.0 <= self.mask_lo <= self.mask_hi <= 1.0):
            raise ConfigError(f"mask range invalid: [{self.mask_lo}, {self.mask_hi}]")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"task must be classification or regression, got {self.task!r}")
        return self


@dataclass
class EpochRow:
    epoch: int
    phase: str
    l_task: float
    l_ort: float
    l_total: float
    wallclock_ms: float


@dataclass
class ScheduleRow:
    epoch: int
    scores: np.ndarray
    deltas: np.ndarray
    q: np.ndarray


@dataclass
class TrainResult:
    model: MculoraModel
    epoch_rows: list[EpochRow] = field(default_factory=list)
    schedule_rows: list[ScheduleRow] = field(default_factory=list)
    probe_rows: list[tuple[int, float]] = field(default_factory=list)


class Adam:
    """Adaptive-moment gradient step; parameters without a fresh gradient are skipped."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(sorted(params.items()))
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = {k: 0 for k in self.params}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _stack_dataset(dataset: list[Utterance]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    feats = {m: np.stack([u.features[m] for u in dataset]) for m in dataset[0].presence}
    labels = np.array([u.label for u in dataset])
    return feats, labels


def _require_complete(dataset: list[Utterance], what: str) -> None:
    if not dataset:
        raise ContractError(f"{what}: empty dataset")
    if any(u.presence != FULL for u in dataset):
        raise ContractError(f"{what}: requires complete samples (all modalities present)")


def _batch_indices(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# phase 1: pretraining the base
# ---------------------------------------------------------------------------

def pretrain(dataset: list[Utterance], cfg: TrainConfig, root_rng: Rng | None = None) -> TrainResult:
    """Train encoders + fusion + common head on complete data, then freeze encoders."""
    cfg.validate()
    _require_complete(dataset, "pretrain")
    root = root_rng if root_rng is not None else Rng(cfg.seed)
    feats, labels = _stack_dataset(dataset)
    raw_dim = feats["a"].shape[2]
    model = build_model(ModelConfig(raw_dim=raw_dim, model_dim=cfg.model_dim, classes=cfg.classes,
                                    rank=cfg.rank, alpha=cfg.alpha, task=cfg.task), root)
    opt = Adam(model.parameters("pretrain"), lr=cfg.learning_rate)
    order_rng = root.child("pretrain-order")
    dropout_rng = root.child("pretrain-dropout")
    result = TrainResult(model=model)
    n = len(dataset)
    for epoch in range(1, cfg.pretrain_epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(n)
        sums = np.zeros(2)
        batches = 0
        for idx in _batch_indices(n, cfg.batch_size, order):
            batch_feats = {m: feats[m][idx] for m in MODALITIES}
            opt.zero_grad()
            with ad.Tape() as tape:
                out = forward_batch(model, batch_feats, dropout_p=cfg.dropout, dropout_rng=dropout_rng)
                l_task = task_loss(out["y_last"], labels[idx], cfg.task)
            ad.gradients(l_task, tape)
            opt.step()
            sums += (l_task.item(), 0.0)
            batches += 1
        l_task_mean = sums[0] / batches
        result.epoch_rows.append(EpochRow(epoch, "pretrain", l_task_mean, 0.0, l_task_mean,
                                          (time.perf_counter() - t0) * 1e3))
    model.freeze_base()
    model.phase = "pretrained"
    return result


# ---------------------------------------------------------------------------
# phase 2: combination-aware fine-tuning
# ---------------------------------------------------------------------------

def _probe_mean_cosine(model: MculoraModel, probe_feats: dict[str, np.ndarray]) -> float:
    """Mean cosine between pooled private and common adapter outputs on the probe."""
    if model.adapters is None:
        return 0.0
    B, L, D = probe_feats["a"].shape
    vals = []
    pooled_com = {}
    for m in MODALITIES:
        x2d = probe_feats[m].reshape(B * L, D)
        pooled_com[m] = (model.adapters[m].common.effective_map() @ x2d.T).T.reshape(B, L, -1).mean(axis=1)
    for combo in ALL_COMBINATIONS:
        for m in combo:
            x2d = probe_feats[m].reshape(B * L, D)
            prt = (model.adapters[m].private_pair(combo).effective_map() @ x2d.T).T.reshape(B, L, -1).mean(axis=1)
            com = pooled_com[m]
            nu = np.linalg.norm(com, axis=1)
            nv = np.linalg.norm(prt, axis=1)
            ok = (nu > ad.NORM_EPS) & (nv > ad.NORM_EPS)
            cos = np.zeros(B)
            cos[ok] = np.sum(com[ok] * prt[ok], axis=1) / (nu[ok] * nv[ok])
            vals.append(cos.mean())
    return float(np.mean(vals))


def finetune(model: MculoraModel, dataset: list[Utterance], cfg: TrainConfig,
             probe_batch: list[Utterance] | None = None, root_rng: Rng | None = None) -> TrainResult:
    """Fine-tune adapters/heads/gate under scheduled incomplete batches."""
    cfg.validate()
    if model.phase != "pretrained":
        raise ContractError(f"finetune requires a pretrained checkpoint, phase is {model.phase!r}")
    _require_complete(dataset, "finetune")
    root = root_rng if root_rng is not None else Rng(cfg.seed)
    if probe_batch is None:
        probe_batch = dataset[-min(cfg.probe_size, len(dataset)):]
    else:
        probe_batch = probe_batch[:cfg.probe_size]
    _require_complete(probe_batch, "finetune probe")

    attach_adapters(model, root.child("attach"), rank=cfg.rank, alpha=cfg.alpha, mcla=cfg.mcla)
    trainable = model.parameters("finetune")
    opt = Adam(trainable, lr=cfg.learning_rate)
    sched = uniform_schedule(cfg.p_min, cfg.p_max, cfg.q_base, cfg.lam, cfg.reduce_fast_learners)
    feats, labels = _stack_dataset(dataset)
    probe_feats, _ = _stack_dataset(probe_batch)
    order_rng = root.child("finetune-order")
    samp_rng = root.child("combo-sampling")
    s_prev = initial_scores()
    result = TrainResult(model=model)
    n = len(dataset)
    zero = ad.constant(0.0)
    for epoch in range(1, cfg.finetune_epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for idx in _batch_indices(n, cfg.batch_size, order):
            combo = sample_combination(sched, samp_rng)
            batch_feats = {m: feats[m][idx] for m in combo}
            opt.zero_grad()
            with ad.Tape() as tape:
                out = forward_batch(model, batch_feats)
                l_task = task_loss(out["y_last"], labels[idx], cfg.task)
                if cfg.mcla:
                    l_ort = orthogonality_loss(out["com_pooled"], {combo: out["prt_pooled"]},
                                               out["enc_pooled"])
                else:
                    l_ort = zero
                l_tot = total_loss(l_task, l_ort, cfg.beta)
            ad.gradients(l_tot, tape)
            opt.step()
            sums += (l_task.item(), l_ort.item(), l_tot.item())
            batches += 1
        scores = separability_scores(model, probe_batch, epoch=epoch)
        deltas = score_delta(s_prev, scores)
        if cfg.dpft:
            sched = update_probabilities(sched, deltas)
        result.schedule_rows.append(ScheduleRow(epoch, scores.values.copy(), deltas.copy(), sched.q.copy()))
        result.probe_rows.append((epoch, _probe_mean_cosine(model, probe_feats)))
        s_prev = scores
        result.epoch_rows.append(EpochRow(epoch, "finetune", sums[0] / batches, sums[1] / batches,
                                          sums[2] / batches, (time.perf_counter() - t0) * 1e3))
    model.phase = "finetuned"
    return result


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    acc: float
    f1: float
    wa: float
    ua: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.acc, self.f1, self.wa, self.ua)


@dataclass
class MetricsRecord:
    protocol: str
    rows: dict[str, Metrics]
    average: Metrics | None = None


def compute_metrics(preds, labels) -> Metrics:
    """ACC, macro-F1, WA (frequency-weighted recall), UA (mean per-class recall)."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ContractError(f"compute_metrics: need equal-length nonempty inputs, got {preds.shape} and {labels.shape}")
    n = labels.size
    acc = float(np.mean(preds == labels))
    label_classes = np.unique(labels)
    recalls = []
    wa = 0.0
    for c in label_classes:
        support = np.sum(labels == c)
        recall = float(np.sum((preds == c) & (labels == c)) / support)
        recalls.append(recall)
        wa += (support / n) * recall
    ua = float(np.mean(recalls))
    f1s = []
    for c in np.unique(np.concatenate([labels, preds])):
        tp = float(np.sum((preds == c) & (labels == c)))
        fp = float(np.sum((preds == c) & (labels != c)))
        fn = float(np.sum((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    return Metrics(acc=acc, f1=float(np.mean(f1s)), wa=float(wa), ua=ua)


# ---------------------------------------------------------------------------
# evaluation under missing-modality protocols
# ---------------------------------------------------------------------------

def _eval_workers() -> int:
    try:
        return max(1, int(os.environ.get("MCULORA_THREADS", "1")))
    except ValueError:
        return 1


def _predict_rows(model: MculoraModel, feats: dict[str, np.ndarray]) -> np.ndarray:
    out = forward_batch(model, feats)
    return np.argmax(out["y_last"].data, axis=1)


def _predict_condition(model: MculoraModel, feats: dict[str, np.ndarray], n: int) -> np.ndarray:
    chunks = [(start, min(start + _EVAL_CHUNK, n)) for start in range(0, n, _EVAL_CHUNK)]
    workers = _eval_workers()
    if workers == 1 or len(chunks) == 1:
        parts = [_predict_rows(model, {m: a[s:e] for m, a in feats.items()}) for s, e in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool_:
            parts = list(pool_.map(
                lambda span: _predict_rows(model, {m: a[span[0]:span[1]] for m, a in feats.items()}),
                chunks))
    return np.concatenate(parts)


def predict_dataset(model: MculoraModel, dataset: list[Utterance]) -> np.ndarray:
    """Class predictions for samples of arbitrary (mixed) presence combinations."""
    preds = np.zeros(len(dataset), dtype=np.int64)
    by_combo: dict[Combo, list[int]] = {}
    for i, utt in enumerate(dataset):
        by_combo.setdefault(utt.presence, []).append(i)
    for combo, indices in sorted(by_combo.items(), key=lambda kv: ALL_COMBINATIONS.index(kv[0])):
        sub_feats = {m: np.stack([dataset[i].features[m] for i in indices]) for m in combo}
        preds[np.array(indices)] = _predict_condition(model, sub_feats, len(indices))
    return preds


def evaluate(model: MculoraModel, dataset: list[Utterance], protocol: str,
             cfg: TrainConfig | None = None) -> MetricsRecord:
    """Score a model on the test set under the fixed or random missing protocol."""
    cfg = cfg if cfg is not None else TrainConfig()
    if model.cfg.task != "classification":
        raise ContractError("evaluation metrics are defined for classification tasks")
    if not dataset:
        raise ContractError("evaluate: empty dataset")
    labels = np.array([u.label for u in dataset], dtype=np.int64)
    if protocol == "fixed":
        _require_complete(dataset, "fixed-protocol evaluation")
        feats, _ = _stack_dataset(dataset)
        rows: dict[str, Metrics] = {}
        for combo in ALL_COMBINATIONS:
            sub = {m: feats[m] for m in combo}
            preds = _predict_condition(model, sub, len(dataset))
            rows[combo.name] = compute_metrics(preds, labels)
        avg = Metrics(*[float(np.mean([rows[c.name].as_tuple()[k] for c in INCOMPLETE_COMBINATIONS]))
                        for k in range(4)])
        return MetricsRecord(protocol="fixed", rows=rows, average=avg)
    if protocol == "random":
        masked = apply_random_missing(dataset, (cfg.mask_lo, cfg.mask_hi), seed=cfg.eval_seed)
        preds = predict_dataset(model, masked)
        return MetricsRecord(protocol="random", rows={"random": compute_metrics(preds, labels)})
    raise ContractError(f"unknown protocol {protocol!r}, expected 'fixed' or 'random'")


# ---------------------------------------------------------------------------
# log and document formatting
# ---------------------------------------------------------------------------

_COMBO_NAMES = [c.name for c in ALL_COMBINATIONS]

EPOCH_LOG_COLUMNS = ["epoch", "phase", "l_task", "l_ort", "l_total", "wallclock_ms"]
SCHEDULE_LOG_COLUMNS = ([f"s_{c}" for c in _COMBO_NAMES]
                        + [f"ds_{c}" for c in _COMBO_NAMES]
                        + [f"q_{c}" for c in _COMBO_NAMES])
PROBE_LOG_COLUMNS = ["epoch", "mean_cos_prt_com"]


def write_epoch_log(path, rows: list[EpochRow]) -> None:
    lines = [",".join(EPOCH_LOG_COLUMNS)]
    for r in rows:
        lines.append(f"{r.epoch},{r.phase},{r.l_task!r},{r.l_ort!r},{r.l_total!r},{r.wallclock_ms!r}")
    _write_text(path, "\n".join(lines) + "\n")


def write_schedule_log(path, rows: list[ScheduleRow]) -> None:
    lines = [",".join(["epoch"] + SCHEDULE_LOG_COLUMNS)]
    for r in rows:
        vals = [str(r.epoch)] + [repr(float(x)) for x in (*r.scores, *r.deltas, *r.q)]
        lines.append(",".join(vals))
    _write_text(path, "\n".join(lines) + "\n")


def write_probe_log(path, rows: list[tuple[int, float]]) -> None:
    lines = [",".join(PROBE_LOG_COLUMNS)]
    for epoch, cos in rows:
        lines.append(f"{epoch},{cos!r}")
    _write_text(path, "\n".join(lines) + "\n")


def _write_text(path, text: str) -> None:
    import os as _os
    from pathlib import Path
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    _os.replace(tmp, path)


_METRICS_HEADER = "# mculora metrics v1"
_ROW_ORDER = ["a", "t", "v", "av", "at", "tv", "average", "atv"]


def format_metrics_document(record: MetricsRecord, config_echo: str, version: str) -> str:
    """Structured-text metrics table plus config echo and version string."""
    lines = [_METRICS_HEADER,
             f"version: {version}",
             f"protocol: {record.protocol}",
             f"config: {config_echo}",
             "condition,acc,f1,wa,ua"]
    names = _ROW_ORDER if record.protocol == "fixed" else list(record.rows)
    for name in names:
        m = record.average if name == "average" else record.rows.get(name)
        if m is None:
            continue
        lines.append(f"{name},{m.acc!r},{m.f1!r},{m.wa!r},{m.ua!r}")
    return "\n".join(lines) + "\n"


def parse_metrics_document(text: str) -> tuple[MetricsRecord, dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _METRICS_HEADER:
        raise ContractError("not a mculora metrics document")
    meta = {}
    idx = 1
    while idx < len(lines) and ":" in lines[idx] and not lines[idx].startswith("condition,"):
        key, _, val = lines[idx].partition(":")
        meta[key.strip()] = val.strip()
        idx += 1
    if idx >= len(lines) or lines[idx] != "condition,acc,f1,wa,ua":
        raise ContractError("metrics document lacks its table header")
    rows: dict[str, Metrics] = {}
    average = None
    for ln in lines[idx + 1:]:
        name, *vals = ln.split(",")
        m = Metrics(*(float(v) for v in vals))
        if name == "average":
            average = m
        else:
            rows[name] = m
    return MetricsRecord(protocol=meta.get("protocol", "?"), rows=rows, average=average), meta


def write_metrics_document(path, record: MetricsRecord, config_echo: str, version: str) -> None:
    _write_text(path, format_metrics_document(record, config_echo, version))
