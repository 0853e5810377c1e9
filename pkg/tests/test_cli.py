import csv
import json
import xml.etree.ElementTree as ET

import pytest
import yaml

from logan_lab.cli import cell_seed, main
from logan_lab.storage import read_csv

SMALL = {"train": {"total_steps": 6, "batch_size": 8, "latent_dim": 4, "gen_hidden": [8], "disc_hidden": [8],
                   "eval_interval": 3, "eval_samples": 64}}


def write_cfg(path, **extra):
    raw = {"seed": 1, "run_id": "t", **SMALL, **extra}
    path.write_text(yaml.safe_dump(raw))
    return path


def svg_ok(path):
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")


def test_train_writes_artifacts(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    run = tmp_path / "run"
    for name in ("config.yaml", "metrics.csv", "summary.json", "ckpt_0000000.logn", "ckpt_0000006.logn"):
        assert (run / name).exists(), name
    svg_ok(run / "samples.svg")
    summary = json.loads((run / "summary.json").read_text())
    assert summary["steps"] == 6 and summary["seed"] == 1
    assert json.loads(capsys.readouterr().out.strip()) == summary
    assert len(read_csv(run / "metrics.csv")[1]) == 6


def test_train_is_byte_reproducible(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml")
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for name in ("metrics.csv", "ckpt_0000006.logn", "samples.svg", "summary.json", "config.yaml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_seed_flag_and_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("LOGAN_LAB_OUT", str(tmp_path / "root"))
    cfg = write_cfg(tmp_path / "c.yaml")
    assert main(["train", "--config", str(cfg), "--seed", "4"]) == 0
    assert json.loads((tmp_path / "root" / "t" / "summary.json").read_text())["seed"] == 4


def test_resume_via_cli_matches_full_run(tmp_path):
    full = write_cfg(tmp_path / "full.yaml")
    part = write_cfg(tmp_path / "part.yaml", train={**SMALL["train"], "total_steps": 3})
    assert main(["train", "--config", str(full), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(part), "--out", str(tmp_path / "b")]) == 0
    assert main(["train", "--config", str(full), "--out", str(tmp_path / "b"),
                 "--resume", str(tmp_path / "b" / "ckpt_0000003.logn")]) == 0
    assert (tmp_path / "a" / "ckpt_0000006.logn").read_bytes() == (tmp_path / "b" / "ckpt_0000006.logn").read_bytes()


def test_eval_writes_sweeps(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml")
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    ck = tmp_path / "run" / "ckpt_0000006.logn"
    assert main(["eval", "--checkpoint", str(ck), "--truncation", "1,0.5,0.25", "--steps", "0,1,3",
                 "--samples", "100", "--out", str(tmp_path / "ev")]) == 0
    header, rows = read_csv(tmp_path / "ev" / "truncation.csv")
    assert [r["s"] for r in rows] == [1.0, 0.5, 0.25]
    header, rows = read_csv(tmp_path / "ev" / "eval_steps.csv")
    assert [r["steps"] for r in rows] == [0, 1, 3] and rows[0]["mean_critic_gain"] == 0.0
    svg_ok(tmp_path / "ev" / "truncation.svg")
    svg_ok(tmp_path / "ev" / "eval_steps.svg")


def test_sweep_cells_and_seed_derivation(tmp_path):
    raw = {"base": {"seed": 10, "run_id": "sw", **SMALL}, "grid": {"alpha": [0.5, 0.9], "c": [0.5]}}
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["sweep", "--config", str(path), "--out", str(tmp_path / "sw")]) == 0
    with open(tmp_path / "sw" / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(r["status"] == "ok" for r in rows)
    assert sorted(int(r["seed"]) for r in rows) == [10, 11]
    fids = [float(r["proxy_fid"]) for r in rows]
    assert fids == sorted(fids)
    assert cell_seed(10, 1) == 11


def test_one_point_sweep_equals_train(tmp_path):
    raw = {"base": {"seed": 3, "run_id": "sw", **SMALL}, "grid": {"alpha": [0.9]}}
    (tmp_path / "s.yaml").write_text(yaml.safe_dump(raw))
    main(["sweep", "--config", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "sw")])
    cfg = write_cfg(tmp_path / "c.yaml", seed=3, latent={"alpha": 0.9})
    cfg.write_text(cfg.read_text().replace("seed: 1", "seed: 3"))
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "tr")])
    assert (tmp_path / "sw" / "cell000" / "metrics.csv").read_bytes() == (tmp_path / "tr" / "metrics.csv").read_bytes()


def test_sweep_reports_failed_cells(tmp_path):
    raw = {"base": {"seed": 0, **SMALL, "train": {**SMALL["train"], "lr_d": 1e300, "lr_g": 1e300}},
           "grid": {"alpha": [0.9]}}
    (tmp_path / "s.yaml").write_text(yaml.safe_dump(raw))
    assert main(["sweep", "--config", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "sw")]) == 1
    with open(tmp_path / "sw" / "results.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    assert row["status"].startswith("failed") and row["proxy_fid"] == ""


def test_check_passes(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "14/14 checks passed" in out and "FAIL" not in out


@pytest.mark.parametrize("method, grows", [("simgrad", True), ("sga", False)])
def test_game_bilinear(tmp_path, method, grows):
    assert main(["game", "--game", "bilinear", "--method", method, "--steps", "20",
                 "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "trajectory.csv")
    norms = [r["param_norm"] for r in rows]
    assert len(norms) == 21 and (norms[-1] > norms[0]) == grows
    svg_ok(tmp_path / "phase.svg")


def test_game_quadratic(tmp_path):
    assert main(["game", "--game", "quadratic", "--q1", "2,0,0,1", "--q2", "1,0,0,2", "--steps", "50",
                 "--out", str(tmp_path)]) == 0
    _, rows = read_csv(tmp_path / "trajectory.csv")
    assert rows[-1]["param_norm"] < rows[0]["param_norm"]


def test_exit_code_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("run_id: x\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["check", "--threads", "0"]) == 2


def test_exit_code_abort(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", train={**SMALL["train"], "lr_d": 1e300, "lr_g": 1e300})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 3
    assert (tmp_path / "run" / "abort_dump.json").exists()
    assert "abort" in capsys.readouterr().err


def test_exit_code_checkpoint(tmp_path):
    bad = tmp_path / "x.logn"
    bad.write_bytes(b"not a checkpoint at all")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 4
    assert main(["eval", "--checkpoint", str(tmp_path / "none.logn"), "--out", str(tmp_path)]) == 4
