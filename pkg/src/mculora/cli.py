"""Command-line entry point for reproducible generation/training/evaluation runs.

Subcommands: gen-data, pretrain, finetune, eval, report. Every command is a
pure function of (config file, input artifacts, seed) up to wallclock columns
in the epoch logs. Each writes its artifacts plus a manifest.json with the
resolved config snapshot and artifact checksums into --out.

Exit codes: 0 success, 2 input/config error, 3 state/contract error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, version_string, write_manifest
from .errors import ConfigError, ContractError, ShapeError
from .modalities import Combo
from .model import checkpoint_phase, load_checkpoint, save_checkpoint
from .rng import Rng
from .synthgen import apply_fixed_missing, generate_dataset, load_dataset, save_dataset, split_dataset
from .trainer import (
    MetricsRecord,
    compute_metrics,
    evaluate,
    finetune,
    parse_metrics_document,
    predict_dataset,
    pretrain,
    write_epoch_log,
    write_metrics_document,
    write_probe_log,
    write_schedule_log,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_STATE = 3


def _bool_flag(value: str) -> bool:
    low = value.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mculora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic multimodal dataset file")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(func=cmd_gen_data)

    pre = sub.add_parser("pretrain", help="train the frozen base on complete data")
    pre.add_argument("--config", required=True)
    pre.add_argument("--data", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--seed", type=int, default=None)
    pre.set_defaults(func=cmd_pretrain)

    fin = sub.add_parser("finetune", help="combination-aware fine-tuning of a pretrained checkpoint")
    fin.add_argument("--config", required=True)
    fin.add_argument("--data", required=True)
    fin.add_argument("--checkpoint", required=True)
    fin.add_argument("--out", required=True)
    fin.add_argument("--seed", type=int, default=None)
    fin.add_argument("--mcla", type=_bool_flag, default=None, metavar="on|off")
    fin.add_argument("--dpft", type=_bool_flag, default=None, metavar="on|off")
    fin.add_argument("--rank", type=int, default=None)
    fin.add_argument("--beta", type=float, default=None)
    fin.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("eval", help="evaluate a checkpoint under a missing-modality protocol")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--protocol", required=True, choices=["fixed", "random"])
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--combo", default=None, choices=["a", "t", "v", "at", "av", "tv", "atv"],
                    help="restrict the fixed protocol to one condition")
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="compare completed runs and emit plot-ready CSVs")
    rep.add_argument("runs", nargs="+", help="run directories containing metrics.txt")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: missing input file: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE


def _prepare(args, require_config: bool = True) -> tuple[ExperimentConfig, Path]:
    overrides = {"seed": getattr(args, "seed", None)}
    for key in ("rank", "beta", "mcla", "dpft"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "config", None) is not None:
        cfg = load_config(args.config, overrides)
    elif require_config:
        raise ConfigError("--config is required for this command")
    else:
        cfg = ExperimentConfig()
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
        cfg.validate()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir


def _load_splits(cfg: ExperimentConfig, data_path: str):
    dataset, _ = load_dataset(data_path)
    return split_dataset(dataset, cfg.train_frac, cfg.val_frac)


def cmd_gen_data(args) -> int:
    cfg, out_dir = _prepare(args)
    dataset = generate_dataset(cfg.to_synth_config())
    save_dataset(out_dir / "dataset.mcu", dataset, cfg.to_synth_config())
    write_manifest(out_dir, "gen-data", cfg, cfg.seed, args.config, ["dataset.mcu"])
    print(f"wrote {out_dir / 'dataset.mcu'} ({cfg.num_samples} samples)")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg, out_dir = _prepare(args)
    train, _, _ = _load_splits(cfg, args.data)
    result = pretrain(train, cfg.to_train_config(), root_rng=Rng(cfg.seed))
    save_checkpoint(result.model, out_dir / "checkpoint.mcu")
    write_epoch_log(out_dir / "epoch_log.csv", result.epoch_rows)
    write_manifest(out_dir, "pretrain", cfg, cfg.seed, args.config,
                   ["checkpoint.mcu", "epoch_log.csv"])
    print(f"pretrained {cfg.pretrain_epochs} epochs; checkpoint at {out_dir / 'checkpoint.mcu'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, out_dir = _prepare(args)
    phase = checkpoint_phase(args.checkpoint)
    if phase != "pretrained":
        raise ContractError(f"finetune needs a checkpoint in phase 'pretrained', found {phase!r}")
    model = load_checkpoint(args.checkpoint)
    train, val, _ = _load_splits(cfg, args.data)
    probe = val[:cfg.probe_size] if val else None
    result = finetune(model, train, cfg.to_train_config(), probe_batch=probe, root_rng=Rng(cfg.seed))
    save_checkpoint(result.model, out_dir / "checkpoint.mcu")
    write_epoch_log(out_dir / "epoch_log.csv", result.epoch_rows)
    write_schedule_log(out_dir / "schedule_log.csv", result.schedule_rows)
    write_probe_log(out_dir / "probe_log.csv", result.probe_rows)
    write_manifest(out_dir, "finetune", cfg, cfg.seed, args.config,
                   ["checkpoint.mcu", "epoch_log.csv", "schedule_log.csv", "probe_log.csv"])
    print(f"finetuned {cfg.finetune_epochs} epochs "
          f"(mcla={'on' if cfg.mcla else 'off'}, dpft={'on' if cfg.dpft else 'off'})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out_dir = _prepare(args, require_config=False)
    if args.seed is not None:
        cfg.eval_seed = args.seed  # the random protocol's masking seed
    model = load_checkpoint(args.checkpoint)
    _, _, test = _load_splits(cfg, args.data)
    if args.combo is not None and args.protocol == "fixed":
        combo = Combo.from_name(args.combo)
        masked = apply_fixed_missing(test, combo)
        preds = predict_dataset(model, masked)
        labels = [u.label for u in masked]
        record = MetricsRecord(protocol="fixed", rows={combo.name: compute_metrics(preds, labels)})
    else:
        record = evaluate(model, test, args.protocol, cfg.to_train_config())
    write_metrics_document(out_dir / "metrics.txt", record, config_echo_str(cfg), version_string())
    write_manifest(out_dir, "eval", cfg, cfg.seed, getattr(args, "config", None), ["metrics.txt"])
    print((out_dir / "metrics.txt").read_text(), end="")
    return EXIT_OK


def config_echo_str(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.echo(), sort_keys=True)


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs: list[tuple[str, MetricsRecord]] = []
    for run_dir in args.runs:
        run_path = Path(run_dir)
        metrics_path = run_path / "metrics.txt"
        try:
            record, _ = parse_metrics_document(metrics_path.read_text(encoding="utf-8"))
            runs.append((run_path.name, record))
        except (OSError, ContractError, ValueError) as exc:
            print(f"warning: skipping {run_dir}: {exc}", file=sys.stderr)
    if not runs:
        print("error: no valid run directories", file=sys.stderr)
        return EXIT_INPUT

    conditions: list[str] = []
    for _, record in runs:
        for name in record.rows:
            if name not in conditions:
                conditions.append(name)

    lines = ["# run comparison (ACC per condition; delta vs first run)"]
    header = ["condition"] + [name for name, _ in runs]
    lines.append(",".join(header))
    for cond in conditions + ["average"]:
        cells = [cond]
        for _, record in runs:
            m = record.average if cond == "average" else record.rows.get(cond)
            cells.append("" if m is None else f"{100 * m.acc:.2f}")
        lines.append(",".join(cells))
    base = runs[0][1]
    if base.average is not None and len(runs) > 1:
        deltas = ["average_delta", ""]
        for _, record in runs[1:]:
            if record.average is None:
                deltas.append("")
            else:
                deltas.append(f"{100 * (record.average.acc - base.average.acc):+.2f}")
        lines.append(",".join(deltas))
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    curves = out_dir / "curves"
    curves.mkdir(exist_ok=True)
    for cond in conditions + (["average"] if any(r.average for _, r in runs) else []):
        rows = ["run,acc,f1,wa,ua"]
        for name, record in runs:
            m = record.average if cond == "average" else record.rows.get(cond)
            if m is not None:
                rows.append(f"{name},{m.acc!r},{m.f1!r},{m.wa!r},{m.ua!r}")
        (curves / f"condition_{cond}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    for run_dir in args.runs:
        src = Path(run_dir) / "epoch_log.csv"
        if src.exists():
            (curves / f"epochs_{Path(run_dir).name}.csv").write_text(src.read_text(encoding="utf-8"),
                                                                     encoding="utf-8")
    print(f"report written to {out_dir / 'report.txt'} ({len(runs)} runs)")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
