import json

import numpy as np
import pytest

from mculora.cli import main
from mculora.config import load_config, parse_config_text
from mculora.errors import ConfigError
from mculora.synthgen import load_dataset

TINY_CONFIG = """
# desk-scale smoke configuration
num_samples = 80
seq_len = 3
raw_dim = 8
classes = 3
shared_dim = 3
private_dim = 2
model_dim = 8
rank = 2
pretrain_epochs = 2
finetune_epochs = 2
batch_size = 16
probe_size = 12
noise_std = 0.3
seed = 66
"""


@pytest.fixture()
def workspace(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(TINY_CONFIG)
    return tmp_path, cfg_path


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data_writes_dataset_and_manifest(workspace):
    tmp, cfg = workspace
    out = tmp / "data"
    assert run("gen-data", "--config", cfg, "--out", out) == 0
    dataset, loaded_cfg = load_dataset(out / "dataset.mcu")
    assert len(dataset) == 80
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert "dataset.mcu" in manifest["artifacts"]
    assert manifest["config"]["num_samples"] == 80


def test_gen_data_is_checksum_reproducible(workspace):
    tmp, cfg = workspace
    out1, out2 = tmp / "d1", tmp / "d2"
    assert run("gen-data", "--config", cfg, "--out", out1) == 0
    assert run("gen-data", "--config", cfg, "--out", out2) == 0
    m1 = json.loads((out1 / "manifest.json").read_text())["artifacts"]
    m2 = json.loads((out2 / "manifest.json").read_text())["artifacts"]
    assert m1 == m2


def test_gen_data_rejects_bad_config(workspace, capsys):
    tmp, _ = workspace
    bad = tmp / "bad.cfg"
    bad.write_text("num_samples = 0\n")
    assert run("gen-data", "--config", bad, "--out", tmp / "x") == 2
    assert "num_samples" in capsys.readouterr().err


def test_unknown_config_key_rejected(workspace, capsys):
    tmp, _ = workspace
    bad = tmp / "bad.cfg"
    bad.write_text("numsamples = 10\n")
    assert run("gen-data", "--config", bad, "--out", tmp / "x") == 2
    assert "numsamples" in capsys.readouterr().err


def full_pipeline(tmp, cfg):
    data = tmp / "data"
    pre = tmp / "pre"
    fin = tmp / "fin"
    assert run("gen-data", "--config", cfg, "--out", data) == 0
    assert run("pretrain", "--config", cfg, "--data", data / "dataset.mcu", "--out", pre) == 0
    assert run("finetune", "--config", cfg, "--data", data / "dataset.mcu",
               "--checkpoint", pre / "checkpoint.mcu", "--out", fin) == 0
    return data, pre, fin


def test_pipeline_produces_expected_artifacts(workspace):
    tmp, cfg = workspace
    data, pre, fin = full_pipeline(tmp, cfg)
    assert (pre / "checkpoint.mcu").exists()
    assert (pre / "epoch_log.csv").read_text().startswith("epoch,phase,l_task")
    for name in ("checkpoint.mcu", "epoch_log.csv", "schedule_log.csv", "probe_log.csv", "manifest.json"):
        assert (fin / name).exists(), name


def test_finetune_refuses_finetuned_checkpoint(workspace, capsys):
    tmp, cfg = workspace
    data, _, fin = full_pipeline(tmp, cfg)
    rc = run("finetune", "--config", cfg, "--data", data / "dataset.mcu",
             "--checkpoint", fin / "checkpoint.mcu", "--out", tmp / "fin2")
    assert rc == 3
    assert "pretrained" in capsys.readouterr().err


def test_missing_data_file_is_input_error(workspace):
    tmp, cfg = workspace
    rc = run("pretrain", "--config", cfg, "--data", tmp / "nope.mcu", "--out", tmp / "p")
    assert rc == 2


def test_eval_fixed_emits_full_condition_table(workspace, capsys):
    tmp, cfg = workspace
    data, _, fin = full_pipeline(tmp, cfg)
    out = tmp / "ev"
    assert run("eval", "--checkpoint", fin / "checkpoint.mcu", "--data", data / "dataset.mcu",
               "--protocol", "fixed", "--config", cfg, "--out", out) == 0
    lines = (out / "metrics.txt").read_text().splitlines()
    table_start = lines.index("condition,acc,f1,wa,ua")
    names = [ln.split(",")[0] for ln in lines[table_start + 1:]]
    assert names == ["a", "t", "v", "av", "at", "tv", "average", "atv"]


def test_eval_random_protocol_single_row(workspace):
    tmp, cfg = workspace
    data, _, fin = full_pipeline(tmp, cfg)
    out = tmp / "evr"
    assert run("eval", "--checkpoint", fin / "checkpoint.mcu", "--data", data / "dataset.mcu",
               "--protocol", "random", "--config", cfg, "--seed", "66", "--out", out) == 0
    lines = (out / "metrics.txt").read_text().splitlines()
    rows = lines[lines.index("condition,acc,f1,wa,ua") + 1:]
    assert len(rows) == 1
    assert rows[0].startswith("random,")


def test_eval_single_combo_restriction(workspace):
    tmp, cfg = workspace
    data, _, fin = full_pipeline(tmp, cfg)
    out = tmp / "evc"
    assert run("eval", "--checkpoint", fin / "checkpoint.mcu", "--data", data / "dataset.mcu",
               "--protocol", "fixed", "--config", cfg, "--combo", "av", "--out", out) == 0
    lines = (out / "metrics.txt").read_text().splitlines()
    rows = lines[lines.index("condition,acc,f1,wa,ua") + 1:]
    assert [r.split(",")[0] for r in rows] == ["av"]


def test_eval_metrics_are_byte_reproducible(workspace):
    tmp, cfg = workspace
    data, _, fin = full_pipeline(tmp, cfg)
    o1, o2 = tmp / "e1", tmp / "e2"
    for out in (o1, o2):
        assert run("eval", "--checkpoint", fin / "checkpoint.mcu", "--data", data / "dataset.mcu",
                   "--protocol", "fixed", "--config", cfg, "--out", out) == 0
    assert (o1 / "metrics.txt").read_bytes() == (o2 / "metrics.txt").read_bytes()


def test_report_compares_runs_and_emits_curves(workspace, capsys):
    tmp, cfg = workspace
    data, pre, fin = full_pipeline(tmp, cfg)
    ev1, ev2 = tmp / "ev1", tmp / "ev2"
    run("eval", "--checkpoint", fin / "checkpoint.mcu", "--data", data / "dataset.mcu",
        "--protocol", "fixed", "--config", cfg, "--out", ev1)
    run("eval", "--checkpoint", fin / "checkpoint.mcu", "--data", data / "dataset.mcu",
        "--protocol", "fixed", "--config", cfg, "--out", ev2)
    out = tmp / "rep"
    assert run("report", ev1, ev2, "--out", out) == 0
    assert (out / "report.txt").exists()
    assert (out / "curves" / "condition_a.csv").exists()
    assert (out / "curves" / "condition_average.csv").exists()


def test_report_skips_malformed_dirs_but_succeeds_with_one_valid(workspace, capsys):
    tmp, cfg = workspace
    data, _, fin = full_pipeline(tmp, cfg)
    ev = tmp / "ev1"
    run("eval", "--checkpoint", fin / "checkpoint.mcu", "--data", data / "dataset.mcu",
        "--protocol", "fixed", "--config", cfg, "--out", ev)
    bogus = tmp / "bogus"
    bogus.mkdir()
    (bogus / "metrics.txt").write_text("not a metrics file\n")
    assert run("report", ev, bogus, "--out", tmp / "rep") == 0
    assert "skipping" in capsys.readouterr().err
    assert run("report", bogus, "--out", tmp / "rep2") == 2


def test_checkpoint_write_is_atomic(workspace, monkeypatch):
    tmp, cfg = workspace
    data, pre, _ = full_pipeline(tmp, cfg)
    import mculora.serialize as ser
    original = ser.os.replace
    calls = []
    monkeypatch.setattr(ser.os, "replace", lambda a, b: calls.append((a, b)) or original(a, b))
    run("pretrain", "--config", cfg, "--data", data / "dataset.mcu", "--out", tmp / "pre2")
    assert any(str(b).endswith("checkpoint.mcu") for _, b in calls)
    assert not list((tmp / "pre2").glob("*.tmp"))


def test_config_overrides_via_flags(workspace):
    tmp, cfg = workspace
    data, pre, _ = full_pipeline(tmp, cfg)
    out = tmp / "fin_ablation"
    assert run("finetune", "--config", cfg, "--data", data / "dataset.mcu",
               "--checkpoint", pre / "checkpoint.mcu", "--out", out,
               "--mcla", "off", "--dpft", "off", "--rank", "1", "--beta", "0") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["mcla"] is False
    assert manifest["config"]["dpft"] is False
    assert manifest["config"]["rank"] == 1
    assert manifest["config"]["beta"] == 0.0
    sched = (out / "schedule_log.csv").read_text().splitlines()
    first = [float(x) for x in sched[1].split(",")[1:]]
    q = first[-7:]
    assert all(abs(v - 1 / 7) < 1e-12 for v in q)


def test_parse_config_text_handles_comments_and_types():
    cfg = parse_config_text("mcla = off\nbeta = 0.01 # inline comment\n\n# full comment\nrank = 8\n")
    assert cfg.mcla is False
    assert cfg.beta == 0.01
    assert cfg.rank == 8
    with pytest.raises(ConfigError, match="beta"):
        parse_config_text("beta = maybe\n")
    with pytest.raises(ConfigError, match="expected key"):
        parse_config_text("just some words\n")
