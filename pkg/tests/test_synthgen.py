import numpy as np
import pytest

from mculora.errors import ConfigError, ContractError
from mculora.modalities import AV, FULL, MODALITIES, T, Combo
from mculora.rng import Rng
from mculora.synthgen import (
    SynthConfig,
    Utterance,
    apply_fixed_missing,
    apply_random_missing,
    draw_missing_masks,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
)

from conftest import lstsq_probe_accuracy


def pooled(dataset, modality):
    return np.stack([u.features[modality].mean(axis=0) for u in dataset])


def labels_of(dataset):
    return np.array([u.label for u in dataset], dtype=np.int64)


def test_cardinality_and_label_range():
    ds = generate_dataset(SynthConfig(num_samples=1000, classes=4, seed=1))
    assert len(ds) == 1000
    labels = labels_of(ds)
    assert labels.min() >= 0 and labels.max() < 4


def test_generation_is_deterministic():
    cfg = SynthConfig(num_samples=64, seed=66)
    a = generate_dataset(cfg)
    b = generate_dataset(cfg)
    for ua, ub in zip(a, b):
        assert ua.label == ub.label
        for m in MODALITIES:
            assert np.array_equal(ua.features[m], ub.features[m])


def test_shared_signal_alone_is_linearly_decodable_from_each_modality():
    # independent least-squares probe oracle: the label is a deterministic
    # function of the shared latent planted in every modality
    cfg = SynthConfig(
        num_samples=400,
        shared_strength=1.0,
        private_strength=0.0,
        pair_interaction_strength=0.0,
        noise_std=0.0,
        seed=3,
    )
    ds = generate_dataset(cfg)
    labels = labels_of(ds)
    for m in MODALITIES:
        acc = lstsq_probe_accuracy(pooled(ds, m), labels, cfg.classes)
        assert acc >= 0.95, f"modality {m} probe accuracy {acc:.3f}"


def test_label_marginals_are_stratified():
    cfg = SynthConfig(num_samples=10_000, classes=4, seed=5)
    counts = np.bincount(labels_of(generate_dataset(cfg)), minlength=4)
    assert np.all(np.abs(counts / 10_000 - 0.25) <= 0.05 * 0.25)


def test_presence_never_empty():
    ds = generate_dataset(SynthConfig(num_samples=200, seed=7))
    masked = apply_random_missing(ds, (1.0, 1.0), seed=7)
    assert all(len(u.presence) >= 1 for u in masked)


def test_invalid_config_rejected():
    with pytest.raises(ConfigError, match="num_samples"):
        SynthConfig(num_samples=0).validate()
    with pytest.raises(ConfigError, match="classes"):
        SynthConfig(classes=1).validate()
    with pytest.raises(ConfigError, match="noise_std"):
        SynthConfig(noise_std=-0.1).validate()


# ---------------------------------------------------------------------------
# fixed missing protocol
# ---------------------------------------------------------------------------

def test_fixed_missing_full_set_is_identity():
    ds = generate_dataset(SynthConfig(num_samples=16, seed=2))
    out = apply_fixed_missing(ds, FULL)
    for a, b in zip(ds, out):
        assert a.presence == b.presence == FULL
        assert set(a.features) == set(b.features)


def test_fixed_missing_text_only():
    ds = generate_dataset(SynthConfig(num_samples=16, seed=2))
    out = apply_fixed_missing(ds, T)
    assert all(set(u.features) == {"t"} and u.presence == T for u in out)


def test_fixed_missing_audio_vision_drops_text():
    ds = generate_dataset(SynthConfig(num_samples=16, seed=2))
    out = apply_fixed_missing(ds, AV)
    assert all(set(u.features) == {"a", "v"} for u in out)


def test_fixed_missing_is_idempotent():
    ds = generate_dataset(SynthConfig(num_samples=8, seed=2))
    once = apply_fixed_missing(ds, AV)
    twice = apply_fixed_missing(once, AV)
    for a, b in zip(once, twice):
        assert a.presence == b.presence
        for m in a.presence:
            assert np.array_equal(a.features[m], b.features[m])


# ---------------------------------------------------------------------------
# random missing protocol
# ---------------------------------------------------------------------------

def test_random_missing_zero_probability_drops_nothing():
    ds = generate_dataset(SynthConfig(num_samples=32, seed=4))
    out = apply_random_missing(ds, (0.0, 0.0), seed=4)
    assert all(u.presence == FULL for u in out)


def test_random_missing_certain_drop_leaves_exactly_one_modality():
    ds = generate_dataset(SynthConfig(num_samples=64, seed=4))
    out = apply_random_missing(ds, (1.0, 1.0), seed=4)
    assert all(len(u.presence) == 1 for u in out)


def test_random_missing_empirical_drop_rate_monte_carlo():
    # drop rate before forced retention should hover around the range midpoint
    pre, _ = draw_missing_masks(10_000, (0.4, 0.6), Rng(66))
    rates = pre.mean(axis=0)
    assert np.all(rates >= 0.45) and np.all(rates <= 0.55), rates


def test_random_missing_is_deterministic_given_seed():
    ds = generate_dataset(SynthConfig(num_samples=128, seed=9))
    m1 = [u.presence for u in apply_random_missing(ds, (0.4, 0.6), seed=66)]
    m2 = [u.presence for u in apply_random_missing(ds, (0.4, 0.6), seed=66)]
    assert m1 == m2


def test_utterance_features_must_match_presence():
    with pytest.raises(ContractError):
        Utterance(features={"a": np.zeros((2, 3))}, label=0, presence=AV)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_dataset_roundtrip_is_bitwise(tmp_path):
    cfg = SynthConfig(num_samples=40, seed=11)
    ds = apply_random_missing(generate_dataset(cfg), (0.3, 0.7), seed=11)
    path = tmp_path / "data.mcu"
    save_dataset(path, ds, cfg)
    loaded, loaded_cfg = load_dataset(path)
    assert loaded_cfg == cfg
    assert len(loaded) == len(ds)
    for a, b in zip(ds, loaded):
        assert a.presence == b.presence
        assert a.label == b.label
        for m in a.presence:
            assert np.array_equal(a.features[m], b.features[m])


def test_dataset_file_bytes_are_reproducible(tmp_path):
    cfg = SynthConfig(num_samples=16, seed=12)
    p1, p2 = tmp_path / "a.mcu", tmp_path / "b.mcu"
    save_dataset(p1, generate_dataset(cfg), cfg)
    save_dataset(p2, generate_dataset(cfg), cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_split_is_contiguous_and_balanced():
    ds = generate_dataset(SynthConfig(num_samples=200, classes=4, seed=13))
    train, val, test = split_dataset(ds, 0.7, 0.15)
    assert len(train) == 140 and len(val) == 30 and len(test) == 30
    counts = np.bincount(labels_of(train), minlength=4)
    assert counts.max() - counts.min() <= 1


def test_regression_labels_are_real_scores():
    cfg = SynthConfig(num_samples=32, task="regression", seed=14)
    ds = generate_dataset(cfg)
    assert all(isinstance(u.label, float) for u in ds)
    assert len({u.label for u in ds}) > 16
