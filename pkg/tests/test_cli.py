"""Command-line behavior: stage wiring, exit codes, and error records."""

import json

import pytest

from camreid import cli
from camreid import contrastive as ctr
from camreid import pipeline as pl
from camreid import synth


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    """A miniature config on disk, as a user would pass with --config."""
    stream = synth.StreamConfig(
        duration_frames=240, entry_rate=0.12, d_latent=12, d_obs=24, pose_dim=4
    )
    cc = ctr.ContrastiveConfig(batch_size=16, bank_size=64, epochs_cid=2, epochs_tsd=3)
    config = pl.PipelineConfig(
        stream=stream,
        contrastive=cc,
        n_identities=10,
        n_cameras=3,
        encoder_dims=(24, 32, 16),
        min_len=2,
        min_affinity=0.2,
        eval_window_frac=0.2,
        seed=11,
    )
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(config.to_payload()))
    return path


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_stagewise_chain(cfg_file, tmp_path, capsys):
    out = tmp_path / "exp"
    for command in ("simulate", "train-cid", "extract", "trackletize", "train-tsd", "fit-ccr"):
        assert _run(command, "--config", cfg_file, "--out", out) == 0
    assert _run("evaluate", "--config", cfg_file, "--out", out) == 0
    shown = capsys.readouterr().out
    assert "cmc@1" in shown and "mAP" in shown
    assert (out / "eval" / "report.json").exists()


def test_run_command_and_skip(cfg_file, tmp_path, capsys):
    out = tmp_path / "exp"
    assert _run("run", "--config", cfg_file, "--out", out) == 0
    first = capsys.readouterr().out
    assert "mAP" in first
    # a second invocation hits every manifest and reprints the same report
    assert _run("run", "--config", cfg_file, "--out", out) == 0
    assert capsys.readouterr().out == first


def test_missing_config_exits_3(tmp_path, capsys):
    rc = _run("simulate", "--config", tmp_path / "absent.json", "--out", tmp_path / "o")
    assert rc == 3
    record = json.loads(capsys.readouterr().err.strip())
    assert record["error"] == "ManifestError"


def test_unparsable_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    rc = _run("simulate", "--config", bad, "--out", tmp_path / "o")
    assert rc == 2
    assert json.loads(capsys.readouterr().err.strip())["error"] == "InvalidInputError"


def test_unknown_config_field_exits_2(cfg_file, tmp_path, capsys):
    payload = json.loads(cfg_file.read_text())
    payload["detector"] = "yolo"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(payload))
    rc = _run("simulate", "--config", bad, "--out", tmp_path / "o")
    assert rc == 2
    capsys.readouterr()


def test_stage_before_inputs_exits_3(cfg_file, tmp_path, capsys):
    rc = _run("train-cid", "--config", cfg_file, "--out", tmp_path / "o")
    assert rc == 3
    record = json.loads(capsys.readouterr().err.strip())
    assert "missing input" in record["message"]


def test_conflicting_rerun_and_force(cfg_file, tmp_path, capsys):
    out = tmp_path / "exp"
    assert _run("simulate", "--config", cfg_file, "--out", out) == 0
    rc = _run("simulate", "--config", cfg_file, "--seed", 3, "--out", out)
    assert rc == 3
    capsys.readouterr()
    assert _run("simulate", "--config", cfg_file, "--seed", 3, "--out", out, "--force") == 0
    written = json.loads((out / "config.json").read_text())
    assert written["seed"] == 3


def test_ablate_prints_rows(cfg_file, tmp_path, capsys):
    out = tmp_path / "exp"
    rc = _run(
        "ablate", "--config", cfg_file, "--out", out, "--axis", "min_len", "--values", "[2, 3]"
    )
    assert rc == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert [r["min_len"] for r in rows] == [2, 3]
    assert (out / "ablation" / "min_len.jsonl").exists()
    assert (out / "ablation" / "min_len.series").exists()
    rc = _run(
        "ablate", "--config", cfg_file, "--out", out, "--axis", "min_len", "--values", "[2, 3]"
    )
    assert rc == 3
    capsys.readouterr()


def test_deterministic_flag_pins_workers(cfg_file, tmp_path):
    out = tmp_path / "exp"
    rc = _run(
        "simulate", "--config", cfg_file, "--out", out, "--workers", 4, "--deterministic"
    )
    assert rc == 0
    written = json.loads((out / "config.json").read_text())
    assert written["workers"] == 1
    assert written["deterministic"] is True


def test_argparse_rejects_unknown_command(capsys):
    with pytest.raises(SystemExit):
        cli.main(["transmogrify", "--out", "x"])
    capsys.readouterr()


def test_evaluate_without_ccr(cfg_file, tmp_path, capsys):
    out = tmp_path / "exp"
    for command in ("simulate", "train-cid", "extract", "trackletize", "train-tsd"):
        assert _run(command, "--config", cfg_file, "--out", out) == 0
    rc = _run("evaluate", "--config", cfg_file, "--out", out, "--checkpoint", "tsd", "--no-ccr")
    assert rc == 0
    assert "mAP" in capsys.readouterr().out
    manifest = json.loads((out / "eval" / "manifest.json").read_text())
    assert manifest["extra"]["use_ccr"] is False
