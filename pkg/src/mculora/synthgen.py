"""Synthetic multimodal datasets with controllable signal structure.

Real emotion-recognition corpora are replaced by a generator whose knobs make
"different modality combinations carry different discriminative information"
a controllable ground truth. Each sample's label influences three kinds of
signal, each embedded into per-modality feature sequences:

* a shared latent, visible in every modality (``shared_strength``),
* a per-modality private latent, visible only in its own modality and
  encoding a modality-specific view of the class (``private_strength``),
* pairwise interaction terms (``pair_interaction_strength``): for each
  modality pair, a lead modality carries ``class_bit + noise`` along a fixed
  direction while the partner carries the same noise sample along its own
  direction. Jointly the noise cancels exactly, so the pair reads a clean
  class bit; alone, the lead sees a noisy bit and the partner sees pure
  noise. The optimal linear readout of these directions therefore depends on
  which modalities are present - combination-specific characteristic
  information by construction.

Labels are stratified round-robin, so any contiguous split stays balanced.
Generation is a pure function of the config, including its seed.

Missing-modality protocols:

* fixed: force one combination onto every sample;
* random: drop each modality independently with a per-draw probability taken
  uniformly from a configured range, retaining one uniformly-chosen modality
  whenever all three would drop (a sample never loses every modality).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ContractError
from .modalities import FULL, MODALITIES, Combo
from .rng import Rng
from .serialize import load_container, save_container

# (lead, partner) per pair; each modality leads exactly one pair
_PAIRS = (("a", "t"), ("v", "a"), ("t", "v"))

# within-class spread of the shared/private latents around their class anchors
_SHARED_JITTER = 0.25
_PRIVATE_JITTER = 0.25

# noise planted on the pair channels (cancels exactly when both sides are present)
_PAIR_NOISE = 1.0


@dataclass
class SynthConfig:
    num_samples: int = 2000
    seq_len: int = 8
    raw_dim: int = 16
    classes: int = 4
    shared_dim: int = 4
    private_dim: int = 2
    shared_strength: float = 1.0
    private_strength: float = 0.6
    pair_interaction_strength: float = 0.8
    noise_std: float = 1.0
    task: str = "classification"
    seed: int = 66

    def validate(self) -> "SynthConfig":
        for name in ("num_samples", "seq_len", "raw_dim", "shared_dim", "private_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("shared_strength", "private_strength", "pair_interaction_strength", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"task must be classification or regression, got {self.task!r}")
        if self.task == "classification" and self.classes < 2:
            raise ConfigError(f"classes must be >= 2 for classification, got {self.classes}")
        return self


@dataclass
class Utterance:
    """One sample: per-modality feature matrices for the present modalities."""

    features: dict[str, np.ndarray]
    label: float
    presence: Combo = field(default=FULL)

    def __post_init__(self) -> None:
        have = set(self.features)
        want = set(self.presence.modalities)
        if have != want:
            raise ContractError(f"features {sorted(have)} do not match presence {sorted(want)}")


def _class_anchors(num_classes: int, dim: int, rng: Rng) -> np.ndarray:
    """(num_classes, dim) unit anchors; orthogonal while classes fit, then sign-flipped reuse."""
    basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0].T
    anchors = np.zeros((num_classes, dim))
    for c in range(num_classes):
        anchors[c] = basis[c % dim] * (1.0 if (c // dim) % 2 == 0 else -1.0)
    return anchors


def _unit_columns(rng: Rng, rows: int, cols: int) -> np.ndarray:
    m = rng.normal(size=(rows, cols))
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def _pair_bit(label: int, pair_idx: int) -> float:
    if pair_idx < 2:
        bit = (label >> pair_idx) & 1
    else:
        bit = bin(label).count("1") & 1
    return 1.0 if bit else -1.0


def generate_dataset(cfg: SynthConfig) -> list[Utterance]:
    """All-modalities-present dataset; pure function of cfg (seed included)."""
    cfg.validate()
    root = Rng(cfg.seed)
    geom = root.child("geometry")
    shared_anchors = _class_anchors(cfg.classes, cfg.shared_dim, geom.child("shared"))
    private_anchors = {
        m: _class_anchors(cfg.classes, cfg.private_dim, geom.child(f"private-{m}"))[
            geom.child(f"private-perm-{m}").permutation(cfg.classes)
        ]
        for m in MODALITIES
    }
    shared_proj = {m: _unit_columns(geom.child(f"proj-shared-{m}"), cfg.raw_dim, cfg.shared_dim) for m in MODALITIES}
    private_proj = {m: _unit_columns(geom.child(f"proj-private-{m}"), cfg.raw_dim, cfg.private_dim) for m in MODALITIES}
    pair_dirs = {
        (m1, m2): (
            _unit_columns(geom.child(f"pair-{m1}{m2}-lead"), cfg.raw_dim, 1)[:, 0],
            _unit_columns(geom.child(f"pair-{m1}{m2}-follow"), cfg.raw_dim, 1)[:, 0],
        )
        for (m1, m2) in _PAIRS
    }
    score_dir = geom.child("score").normal(size=cfg.shared_dim)
    score_dir /= np.linalg.norm(score_dir)

    samples = root.child("samples")
    n, L, D = cfg.num_samples, cfg.seq_len, cfg.raw_dim
    shared_noise = samples.child("shared").normal(size=(n, cfg.shared_dim))
    private_noise = {m: samples.child(f"private-{m}").normal(size=(n, cfg.private_dim)) for m in MODALITIES}
    pair_noise = {p: samples.child(f"pair-{p[0]}{p[1]}").normal(0.0, _PAIR_NOISE, size=n) for p in _PAIRS}
    feature_noise = {m: samples.child(f"noise-{m}").normal(size=(n, L, D)) for m in MODALITIES}

    dataset: list[Utterance] = []
    for i in range(n):
        label = i % cfg.classes if cfg.task == "classification" else 0
        z_shared = (shared_anchors[label] if cfg.task == "classification" else 0.0) + _SHARED_JITTER * shared_noise[i]
        if cfg.task == "regression":
            z_shared = shared_noise[i]
            label = float(np.tanh(score_dir @ z_shared))
        base = {}
        for m in MODALITIES:
            vec = cfg.shared_strength * (shared_proj[m] @ z_shared)
            if cfg.task == "classification":
                z_m = private_anchors[m][label] + _PRIVATE_JITTER * private_noise[m][i]
            else:
                z_m = private_noise[m][i]
            vec = vec + cfg.private_strength * (private_proj[m] @ z_m)
            base[m] = vec
        for j, (lead_m, partner_m) in enumerate(_PAIRS):
            eps = pair_noise[(lead_m, partner_m)][i]
            h = _pair_bit(int(label), j) if cfg.task == "classification" else 0.0
            lead, follow = pair_dirs[(lead_m, partner_m)]
            base[lead_m] = base[lead_m] + cfg.pair_interaction_strength * (h + eps) * lead
            base[partner_m] = base[partner_m] + cfg.pair_interaction_strength * eps * follow
        features = {
            m: base[m][None, :] + cfg.noise_std * feature_noise[m][i]
            for m in MODALITIES
        }
        dataset.append(Utterance(features=features, label=label, presence=FULL))
    return dataset


# ---------------------------------------------------------------------------
# missing-modality protocols
# ---------------------------------------------------------------------------

def apply_fixed_missing(dataset: list[Utterance], combo: Combo) -> list[Utterance]:
    """Force `combo` onto every sample, dropping absent modalities' features."""
    out = []
    for utt in dataset:
        missing = [m for m in combo if m not in utt.presence]
        if missing:
            raise ContractError(f"cannot impose {combo.name!r}: sample lacks modalities {missing}")
        out.append(Utterance(features={m: utt.features[m] for m in combo}, label=utt.label, presence=combo))
    return out


def draw_missing_masks(n: int, mask_prob_range: tuple[float, float], rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """(pre, post) boolean drop masks of shape (n, 3); post applies forced retention."""
    lo, hi = mask_prob_range
    if not (0.0 <= lo <= hi <= 1.0):
        raise ContractError(f"mask probability range must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]")
    probs = rng.uniform(lo, hi, size=(n, len(MODALITIES)))
    draws = rng.uniform(size=(n, len(MODALITIES)))
    pre = draws < probs
    post = pre.copy()
    all_dropped = post.all(axis=1)
    keep = rng.integers(0, len(MODALITIES), size=n)
    for i in np.nonzero(all_dropped)[0]:
        post[i, keep[i]] = False
    return pre, post


def apply_random_missing(dataset: list[Utterance], mask_prob_range: tuple[float, float], seed: int) -> list[Utterance]:
    """Per-sample independent modality dropping; presence never ends up empty."""
    rng = Rng(seed).child("random-missing")
    _, drop = draw_missing_masks(len(dataset), mask_prob_range, rng)
    out = []
    for utt, row in zip(dataset, drop):
        kept = [m for k, m in enumerate(MODALITIES) if not row[k] and m in utt.presence]
        if not kept:  # sample already incomplete and survivors were dropped
            kept = [utt.presence.modalities[0]]
        combo = Combo.from_modalities(kept)
        out.append(Utterance(features={m: utt.features[m] for m in kept}, label=utt.label, presence=combo))
    return out


# ---------------------------------------------------------------------------
# dataset file format (see serialize module for the container layout)
# ---------------------------------------------------------------------------

def save_dataset(path, dataset: list[Utterance], cfg: SynthConfig) -> None:
    """Arrays stored: per-modality (N, L, D) features (zeros where absent),
    labels (N,), presence (N, 3) uint8 in modality order a, t, v."""
    n = len(dataset)
    L = next(iter(dataset[0].features.values())).shape[0] if n else cfg.seq_len
    D = cfg.raw_dim
    arrays: dict[str, np.ndarray] = {}
    presence = np.zeros((n, len(MODALITIES)), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.float64)
    for m in MODALITIES:
        arrays[f"features_{m}"] = np.zeros((n, L, D))
    for i, utt in enumerate(dataset):
        labels[i] = utt.label
        for k, m in enumerate(MODALITIES):
            if m in utt.presence:
                presence[i, k] = 1
                arrays[f"features_{m}"][i] = utt.features[m]
    arrays["labels"] = labels
    arrays["presence"] = presence
    save_container(path, "dataset", {"config": asdict(cfg)}, arrays)


def load_dataset(path) -> tuple[list[Utterance], SynthConfig]:
    _, meta, arrays = load_container(path, expected_kind="dataset")
    cfg = SynthConfig(**meta["config"])
    labels = arrays["labels"]
    presence = arrays["presence"]
    dataset = []
    for i in range(labels.shape[0]):
        mods = [m for k, m in enumerate(MODALITIES) if presence[i, k]]
        features = {m: arrays[f"features_{m}"][i] for m in mods}
        label = int(labels[i]) if cfg.task == "classification" else float(labels[i])
        dataset.append(Utterance(features=features, label=label, presence=Combo.from_modalities(mods)))
    return dataset, cfg


def split_dataset(dataset: list[Utterance], train_frac: float, val_frac: float):
    """Contiguous (train, val, test) split; round-robin labels keep it balanced."""
    if not (0 < train_frac < 1 and 0 <= val_frac < 1 and train_frac + val_frac < 1):
        raise ConfigError(f"invalid split fractions train={train_frac} val={val_frac}")
    n = len(dataset)
    n_train = int(round(n * train_frac))
    n_val = int(round(n * val_frac))
    return dataset[:n_train], dataset[n_train:n_train + n_val], dataset[n_train + n_val:]
