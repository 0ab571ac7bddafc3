"""Flat key=value experiment configuration and run manifests.

Config files are plain text: one ``key = value`` per line, ``#`` comments,
blank lines ignored. Every key is typed and validated against the schema
below; unknown keys and malformed values are rejected with the field named.
The resolved snapshot is echoed into each run's ``manifest.json`` together
with the effective seed and SHA-256 checksums of every written artifact, so a
run can be reproduced byte for byte (wallclock columns excepted).

All randomness in a command flows from one root seed, fanned out to named
child streams (data, init, sampling, ...), so e.g. ablation runs that share a
seed also share initialization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .rng import derive_seed
from .synthgen import SynthConfig
from .trainer import TrainConfig


def _parse_bool(text: str) -> bool:
    val = text.strip().lower()
    if val in ("on", "true", "1", "yes"):
        return True
    if val in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


@dataclass
class ExperimentConfig:
    # data generation
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
    # splits
    train_frac: float = 0.7
    val_frac: float = 0.15
    # model and optimization
    model_dim: int = 32
    rank: int = 4
    alpha: float = 1.0
    pretrain_epochs: int = 100
    finetune_epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta: float = 0.001
    dropout: float = 0.5
    mcla: bool = True
    dpft: bool = True
    # schedule
    p_min: float = 0.05
    p_max: float = 0.5
    q_base: float = 0.1
    lam: float = 1.0
    reduce_fast_learners: bool = True
    probe_size: int = 256
    # protocols
    mask_lo: float = 0.4
    mask_hi: float = 0.6
    eval_seed: int = 66
    # root seed
    seed: int = 66

    def validate(self) -> "ExperimentConfig":
        self.to_synth_config().validate()
        self.to_train_config().validate()
        if not (0 < self.train_frac < 1 and 0 <= self.val_frac < 1
                and self.train_frac + self.val_frac < 1):
            raise ConfigError(f"train_frac/val_frac leave no test split: {self.train_frac}, {self.val_frac}")
        if self.probe_size < 1:
            raise ConfigError(f"probe_size must be >= 1, got {self.probe_size}")
        return self

    def to_synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_samples=self.num_samples, seq_len=self.seq_len, raw_dim=self.raw_dim,
            classes=self.classes, shared_dim=self.shared_dim, private_dim=self.private_dim,
            shared_strength=self.shared_strength, private_strength=self.private_strength,
            pair_interaction_strength=self.pair_interaction_strength, noise_std=self.noise_std,
            task=self.task, seed=derive_seed(self.seed, "data"),
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            pretrain_epochs=self.pretrain_epochs, finetune_epochs=self.finetune_epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate, beta=self.beta,
            rank=self.rank, alpha=self.alpha, dropout=self.dropout, mcla=self.mcla,
            dpft=self.dpft, p_min=self.p_min, p_max=self.p_max, q_base=self.q_base,
            lam=self.lam, reduce_fast_learners=self.reduce_fast_learners,
            probe_size=self.probe_size, model_dim=self.model_dim, classes=self.classes,
            task=self.task, seed=self.seed, mask_lo=self.mask_lo, mask_hi=self.mask_hi,
            eval_seed=self.eval_seed,
        )

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            setattr(cfg, key, _convert(key, value))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: field {key}: {exc}") from exc
    return cfg.validate()


def _convert(key: str, value: str):
    ftype = _FIELD_TYPES[key]
    if ftype in ("int", int):
        return int(value)
    if ftype in ("float", float):
        return float(value)
    if ftype in ("bool", bool):
        return _parse_bool(value)
    return value


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config_text(path.read_text(encoding="utf-8"), source=str(path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    import subprocess
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, check=False,
        ).stdout.strip()
    except OSError:
        described = ""
    return f"{__version__}+{described}" if described else __version__


def write_manifest(out_dir, command: str, config: ExperimentConfig, seed: int,
                   config_path: str | None, artifacts: list[str]) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config_path": config_path,
        "config": config.echo(),
        "seed": int(seed),
        "out_dir": str(out_dir),
        "artifacts": {name: sha256_file(out_dir / name) for name in sorted(artifacts)},
        "version": version_string(),
    }
    path = out_dir / "manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    import os
    os.replace(tmp, path)
    return path
