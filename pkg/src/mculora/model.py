"""The multimodal model: frozen base plus combination-aware adapter banks.

Structure
---------
* one small feed-forward encoder per modality (raw_dim -> d -> d, tanh),
  trained on complete data and frozen afterwards;
* a single-head cross-attention fusion block with one learned query token and
  per-modality key/value projections, turning 1-3 pooled modality vectors
  into one fused token (set-wise: input order is irrelevant);
* a common prediction head, plus - once adapters are attached - a
  characteristic prediction head and a scalar gate blending the two.

Adapters consume raw features in parallel to the frozen encoder. Each
modality owns one low-rank pair per combination containing it (private) and
one pair shared by all combinations (common). Their pooled outputs are added
to the pooled encoder representation before fusion, so with zero-initialized
up-projections the fine-tuned model starts exactly at the pretrained model's
behavior.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .modalities import ALL_COMBINATIONS, MODALITIES, Combo
from .rng import Rng
from .serialize import load_container, save_container
from .synthgen import Utterance

_GATE_HIDDEN = 16
_GATE_PREACT_LIMIT = 30.0  # keeps the logistic output strictly inside (0, 1)


@dataclass
class ModelConfig:
    raw_dim: int = 16
    model_dim: int = 32
    classes: int = 4
    rank: int = 4
    alpha: float = 1.0
    task: str = "classification"
    mcla: bool = True

    @property
    def out_dim(self) -> int:
        return self.classes if self.task == "classification" else 1


class Encoder:
    """Per-modality feed-forward stack: raw_dim -> d (tanh) -> d."""

    def __init__(self, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor):
        self.W1, self.b1, self.W2, self.b2 = W1, b1, W2, b2
        self.frozen = False

    def forward(self, x2d: Tensor, dropout_p: float = 0.0, rng: Rng | None = None) -> Tensor:
        h = ad.tanh(ad.add(ad.matmul(x2d, self.W1), self.b1))
        if dropout_p > 0.0:
            h = ad.dropout(h, dropout_p, rng)
        return ad.add(ad.matmul(h, self.W2), self.b2)

    def encode(self, x: np.ndarray) -> Tensor:
        """Deterministic forward of one (L, raw_dim) sequence to (L, d)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.W1.shape[0]:
            raise ShapeError(f"encoder expects (L, {self.W1.shape[0]}) input, got {x.shape}")
        return self.forward(ad.constant(x))

    def freeze(self) -> None:
        self.frozen = True
        for t in (self.W1, self.b1, self.W2, self.b2):
            t.requires_grad = False
            t._tracked = False

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W1": self.W1, f"{prefix}.b1": self.b1,
                f"{prefix}.W2": self.W2, f"{prefix}.b2": self.b2}


class LoraPair:
    """Trainable low-rank weight delta: x -> alpha * (B A) x, rank <= r."""

    def __init__(self, A: Tensor, B: Tensor, alpha: float = 1.0):
        if A.shape[0] != B.shape[1]:
            raise ShapeError(f"rank mismatch between A {A.shape} and B {B.shape}")
        self.A, self.B, self.alpha = A, B, float(alpha)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def apply(self, x2d: Tensor) -> Tensor:
        """(N, d_in) -> (N, d_out), down- then up-projection per position."""
        down = ad.matmul(x2d, ad.transpose(self.A))
        up = ad.matmul(down, ad.transpose(self.B))
        return ad.mul(up, ad.constant(self.alpha))

    def effective_map(self) -> np.ndarray:
        """The dense (d_out, d_in) matrix alpha * B A this pair represents."""
        return self.alpha * (self.B.data @ self.A.data)


class AdapterBank:
    """One modality's adapters: a private pair per containing combination plus one shared pair."""

    def __init__(self, modality: str, private: dict[Combo, LoraPair], common: LoraPair):
        self.modality = modality
        self.private = private
        self.common = common

    def private_pair(self, combo: Combo) -> LoraPair:
        if self.modality not in combo:
            raise ContractError(
                f"no private adapter: modality {self.modality!r} not in combination {combo.name!r}")
        return self.private[combo]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.com.A": self.common.A, f"{prefix}.com.B": self.common.B}
        for combo, pair in self.private.items():
            params[f"{prefix}.prt.{combo.name}.A"] = pair.A
            params[f"{prefix}.prt.{combo.name}.B"] = pair.B
        return params


class FusionBlock:
    """Single-head cross-attention from a learned query over per-modality tokens."""

    def __init__(self, query: Tensor, keys: dict[str, Tensor], values: dict[str, Tensor]):
        self.query = query  # (1, d)
        self.keys = keys    # per-modality (d, d)
        self.values = values

    def fuse_batch(self, reps: dict[str, Tensor]) -> Tensor:
        mods = [m for m in MODALITIES if m in reps]
        if not mods:
            raise ContractError("fuse: no representations given")
        d = self.query.shape[1]
        scale = ad.constant(1.0 / np.sqrt(d))
        scores = [ad.mul(ad.matmul(ad.matmul(reps[m], self.keys[m]), ad.transpose(self.query)), scale)
                  for m in mods]
        attn = ad.softmax(ad.concat(scores, axis=1), axis=1)
        fused = None
        for j, m in enumerate(mods):
            weighted = ad.mul(ad.narrow(attn, 1, j, 1), ad.matmul(reps[m], self.values[m]))
            fused = weighted if fused is None else ad.add(fused, weighted)
        return fused

    def fuse(self, reps: dict[str, Tensor]) -> Tensor:
        """1-3 pooled d-vectors (keyed by modality) -> one fused d-vector."""
        batched = {m: ad.reshape(r, (1, -1)) for m, r in reps.items()}
        return ad.reshape(self.fuse_batch(batched), (-1,))

    def parameters(self) -> dict[str, Tensor]:
        params = {"fusion.query": self.query}
        for m in MODALITIES:
            params[f"fusion.{m}.Wk"] = self.keys[m]
            params[f"fusion.{m}.Wv"] = self.values[m]
        return params


class Heads:
    """Common head, characteristic head, and the adaptive blending gate."""

    def __init__(self, com_W: Tensor, com_b: Tensor):
        self.com_W, self.com_b = com_W, com_b
        self.prt_W: Tensor | None = None
        self.prt_b: Tensor | None = None
        self.gate_W1: Tensor | None = None
        self.gate_b1: Tensor | None = None
        self.gate_W2: Tensor | None = None
        self.gate_b2: Tensor | None = None

    def common_logits(self, token: Tensor) -> Tensor:
        return ad.add(ad.matmul(token, self.com_W), self.com_b)

    def private_logits(self, token: Tensor) -> Tensor:
        return ad.add(ad.matmul(token, self.prt_W), self.prt_b)

    def gate_weight(self, token: Tensor) -> Tensor:
        """(B, d) -> (B, 1) blending weight, strictly inside (0, 1)."""
        h = ad.tanh(ad.add(ad.matmul(token, self.gate_W1), self.gate_b1))
        pre = ad.add(ad.matmul(h, self.gate_W2), self.gate_b2)
        return ad.sigmoid(ad.clip(pre, -_GATE_PREACT_LIMIT, _GATE_PREACT_LIMIT))

    def parameters(self, include_finetune_heads: bool) -> dict[str, Tensor]:
        params = {"head.com.W": self.com_W, "head.com.b": self.com_b}
        if include_finetune_heads and self.prt_W is not None:
            params.update({
                "head.prt.W": self.prt_W, "head.prt.b": self.prt_b,
                "gate.W1": self.gate_W1, "gate.b1": self.gate_b1,
                "gate.W2": self.gate_W2, "gate.b2": self.gate_b2,
            })
        return params


def pool(R: Tensor) -> Tensor:
    """Mean over sequence positions: (L, d) -> (d,) or (B, L, d) -> (B, d)."""
    if R.ndim == 2:
        return ad.tmean(R, axis=0)
    if R.ndim == 3:
        return ad.tmean(R, axis=1)
    raise ShapeError(f"pool expects a 2-D or 3-D tensor, got shape {R.shape}")


def combine_predictions(y_com: Tensor, y_hat: Tensor, weight) -> Tensor:
    """(1 - w) * common prediction + w * characteristic prediction."""
    w = ad.as_tensor(weight)
    return ad.add(ad.mul(ad.sub(1.0, w), y_com), ad.mul(w, y_hat))


class MculoraModel:
    def __init__(self, cfg: ModelConfig, encoders: dict[str, Encoder], fusion: FusionBlock,
                 heads: Heads, adapters: dict[str, AdapterBank] | None = None, phase: str = "init"):
        self.cfg = cfg
        self.encoders = encoders
        self.fusion = fusion
        self.heads = heads
        self.adapters = adapters
        self.phase = phase

    # -- parameter groups ---------------------------------------------------

    def parameters(self, group: str = "all") -> dict[str, Tensor]:
        base: dict[str, Tensor] = {}
        for m in MODALITIES:
            base.update(self.encoders[m].parameters(f"enc.{m}"))
        base.update(self.fusion.parameters())
        if group == "pretrain":
            base.update(self.heads.parameters(include_finetune_heads=False))
            return base
        if group == "finetune":
            params = self.heads.parameters(include_finetune_heads=self.cfg.mcla and self.adapters is not None)
            if self.cfg.mcla and self.adapters is not None:
                for m in MODALITIES:
                    params.update(self.adapters[m].parameters(f"adapter.{m}"))
            return params
        base.update(self.heads.parameters(include_finetune_heads=self.adapters is not None))
        if self.adapters is not None:
            for m in MODALITIES:
                base.update(self.adapters[m].parameters(f"adapter.{m}"))
        return base

    def freeze_base(self) -> None:
        for m in MODALITIES:
            self.encoders[m].freeze()

    # -- adapter access (combination-aware low-rank adaptation) -------------

    def adapt_private(self, x: np.ndarray, modality: str, combo: Combo) -> Tensor:
        """Private down/up projection of raw features for (modality, combo)."""
        if self.adapters is None:
            raise ContractError("model has no adapters attached")
        pair = self.adapters[modality].private_pair(combo)
        return pair.apply(ad.constant(np.asarray(x, dtype=np.float64)))

    def adapt_common(self, x: np.ndarray, modality: str) -> Tensor:
        if self.adapters is None:
            raise ContractError("model has no adapters attached")
        return self.adapters[modality].common.apply(ad.constant(np.asarray(x, dtype=np.float64)))


def build_model(cfg: ModelConfig, rng: Rng) -> MculoraModel:
    """Fresh base model (no adapters); all parameters trainable."""
    init = rng.child("init")
    d, D = cfg.model_dim, cfg.raw_dim

    def param(r: Rng, shape, scale: float) -> Tensor:
        return Tensor(r.normal(0.0, scale, size=shape), requires_grad=True)

    encoders = {}
    for m in MODALITIES:
        r = init.child(f"enc-{m}")
        encoders[m] = Encoder(
            W1=param(r, (D, d), 1.0 / np.sqrt(D)),
            b1=Tensor(np.zeros((1, d)), requires_grad=True),
            W2=param(r, (d, d), 1.0 / np.sqrt(d)),
            b2=Tensor(np.zeros((1, d)), requires_grad=True),
        )
    fr = init.child("fusion")
    fusion = FusionBlock(
        query=param(fr, (1, d), 1.0 / np.sqrt(d)),
        keys={m: param(fr.child(f"k-{m}"), (d, d), 1.0 / np.sqrt(d)) for m in MODALITIES},
        values={m: param(fr.child(f"v-{m}"), (d, d), 1.0 / np.sqrt(d)) for m in MODALITIES},
    )
    hr = init.child("heads")
    heads = Heads(
        com_W=param(hr, (d, cfg.out_dim), 1.0 / np.sqrt(d)),
        com_b=Tensor(np.zeros((1, cfg.out_dim)), requires_grad=True),
    )
    return MculoraModel(cfg, encoders, fusion, heads, adapters=None, phase="init")


def attach_adapters(model: MculoraModel, rng: Rng, rank: int | None = None,
                    alpha: float | None = None, mcla: bool = True) -> None:
    """Create zero-initialized adapter banks, the characteristic head (a copy
    of the pretrained common head), and the gate. Requires a pretrained model."""
    if model.phase != "pretrained":
        raise ContractError(f"adapters attach to a pretrained model, phase is {model.phase!r}")
    cfg = model.cfg
    if rank is not None:
        cfg.rank = int(rank)
    if alpha is not None:
        cfg.alpha = float(alpha)
    cfg.mcla = bool(mcla)
    if not mcla:
        model.adapters = None
        return
    if cfg.rank < 1:
        raise ContractError(f"adapter rank must be >= 1, got {cfg.rank}")
    init = rng.child("adapters")
    d, D = cfg.model_dim, cfg.raw_dim

    def pair(r: Rng) -> LoraPair:
        # standard convention: Gaussian down-projection, zero up-projection,
        # so adapters contribute exactly nothing until trained
        A = Tensor(r.normal(0.0, 0.02, size=(cfg.rank, D)), requires_grad=True)
        B = Tensor(np.zeros((d, cfg.rank)), requires_grad=True)
        return LoraPair(A, B, alpha=cfg.alpha)

    model.adapters = {}
    for m in MODALITIES:
        private = {c: pair(init.child(f"{m}-prt-{c.name}")) for c in ALL_COMBINATIONS if m in c}
        model.adapters[m] = AdapterBank(m, private, pair(init.child(f"{m}-com")))

    gr = rng.child("gate")
    model.heads.prt_W = Tensor(model.heads.com_W.data.copy(), requires_grad=True)
    model.heads.prt_b = Tensor(model.heads.com_b.data.copy(), requires_grad=True)
    model.heads.gate_W1 = Tensor(gr.normal(0.0, 1.0 / np.sqrt(d), size=(d, _GATE_HIDDEN)), requires_grad=True)
    model.heads.gate_b1 = Tensor(np.zeros((1, _GATE_HIDDEN)), requires_grad=True)
    model.heads.gate_W2 = Tensor(gr.normal(0.0, 1.0 / np.sqrt(_GATE_HIDDEN), size=(_GATE_HIDDEN, 1)), requires_grad=True)
    model.heads.gate_b2 = Tensor(np.zeros((1, 1)), requires_grad=True)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def forward_batch(model: MculoraModel, feats: dict[str, np.ndarray], *,
                  dropout_p: float = 0.0, dropout_rng: Rng | None = None) -> dict:
    """Batched forward over stacked (B, L, raw_dim) features of one combination.

    Returns tensors for: pooled encoder/common/private representations per
    modality, the fused tokens, both head outputs, the gate weight, and the
    blended prediction y_last.
    """
    mods = [m for m in MODALITIES if m in feats]
    if not mods:
        raise ContractError("forward: empty presence set")
    combo = Combo.from_modalities(mods)
    use_mcla = model.cfg.mcla and model.adapters is not None

    enc_pooled: dict[str, Tensor] = {}
    com_pooled: dict[str, Tensor] = {}
    prt_pooled: dict[str, Tensor] = {}
    for m in mods:
        x = np.asarray(feats[m], dtype=np.float64)
        B, L, D = x.shape
        x2d = ad.constant(x.reshape(B * L, D))
        h = model.encoders[m].forward(x2d, dropout_p=dropout_p, rng=dropout_rng)
        enc_pooled[m] = pool(ad.reshape(h, (B, L, -1)))
        if use_mcla:
            bank = model.adapters[m]
            com_pooled[m] = pool(ad.reshape(bank.common.apply(x2d), (B, L, -1)))
            prt_pooled[m] = pool(ad.reshape(bank.private_pair(combo).apply(x2d), (B, L, -1)))

    out = {"combo": combo, "enc_pooled": enc_pooled, "com_pooled": com_pooled, "prt_pooled": prt_pooled}
    if use_mcla:
        com_in = {m: ad.add(enc_pooled[m], com_pooled[m]) for m in mods}
        prt_in = {m: ad.add(enc_pooled[m], prt_pooled[m]) for m in mods}
        fused_com = model.fusion.fuse_batch(com_in)
        fused_prt = model.fusion.fuse_batch(prt_in)
        y_com = model.heads.common_logits(fused_com)
        y_hat = model.heads.private_logits(fused_prt)
        weight = model.heads.gate_weight(fused_prt)
        y_last = combine_predictions(y_com, y_hat, weight)
        out.update(fused_com=fused_com, fused_prt=fused_prt, y_com=y_com,
                   y_hat=y_hat, weight=weight, y_last=y_last)
    else:
        fused = model.fusion.fuse_batch(enc_pooled)
        y_com = model.heads.common_logits(fused)
        out.update(fused_com=fused, fused_prt=None, y_com=y_com,
                   y_hat=y_com, weight=None, y_last=y_com)
    return out


def stack_features(batch: list[Utterance]) -> dict[str, np.ndarray]:
    """Stack a batch sharing one presence combination into per-modality arrays."""
    if not batch:
        raise ContractError("empty batch")
    combo = batch[0].presence
    if any(u.presence != combo for u in batch):
        raise ContractError("batch mixes presence combinations")
    return {m: np.stack([u.features[m] for u in batch]) for m in combo}


def predict(sample: Utterance, model: MculoraModel):
    """Single-sample prediction: (y_last, y_hat, y_com, weight) as plain values."""
    feats = {m: sample.features[m][None] for m in sample.presence}
    out = forward_batch(model, feats)
    weight = float(out["weight"].data[0, 0]) if out["weight"] is not None else None
    return (out["y_last"].data[0], out["y_hat"].data[0], out["y_com"].data[0], weight)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: MculoraModel, path) -> None:
    params = model.parameters("all")
    meta = {
        "config": asdict(model.cfg),
        "phase": model.phase,
        "has_adapters": model.adapters is not None,
    }
    save_container(path, "checkpoint", meta, {k: t.data for k, t in sorted(params.items())})


def load_checkpoint(path) -> MculoraModel:
    _, meta, arrays = load_container(path, expected_kind="checkpoint")
    cfg = ModelConfig(**meta["config"])
    model = build_model(cfg, Rng(0))
    if meta["has_adapters"]:
        model.phase = "pretrained"
        attach_adapters(model, Rng(0), rank=cfg.rank, alpha=cfg.alpha, mcla=True)
    model.phase = meta["phase"]
    params = model.parameters("all")
    missing = set(params) - set(arrays)
    if missing:
        raise ContractError(f"checkpoint {path} lacks parameters: {sorted(missing)[:4]}...")
    for name, tensor in params.items():
        if arrays[name].shape != tensor.data.shape:
            raise ContractError(f"checkpoint parameter {name} has shape {arrays[name].shape}, "
                                f"expected {tensor.data.shape}")
        tensor.data = arrays[name]
    if model.phase in ("pretrained", "finetuned"):
        model.freeze_base()
    return model


def checkpoint_phase(path) -> str:
    _, meta, _ = load_container(path, expected_kind="checkpoint")
    return meta["phase"]


def encoder_state_bytes(model: MculoraModel) -> bytes:
    """Byte snapshot of all encoder parameters (frozen-base comparisons)."""
    chunks = []
    for m in MODALITIES:
        for name, t in sorted(model.encoders[m].parameters(f"enc.{m}").items()):
            chunks.append(name.encode())
            chunks.append(t.data.tobytes())
    return b"".join(chunks)


def config_echo(cfg) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
