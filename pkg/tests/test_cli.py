import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mfm import cli
from mfm.errors import ConfigError


def smoke_overrides(out, **kw):
    base = dict(preset="gmm4", seed=11, out=str(out), mode="mfm",
                iters=4, particles=6, kq=2, diag_samples=16)
    base.update(kw)
    return base


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_preset_defaults():
    cfg = cli.parse_config(overrides=dict(preset="gmm4", seed=1))
    assert cfg.particles == 128 and cfg.hidden == 128 and cfg.mala_tau == 0.2
    cfg = cli.parse_config(overrides=dict(preset="field", seed=1))
    assert cfg.particles == 1024 and cfg.hidden == 256 and cfg.mala_tau == 1e-4
    cfg = cli.parse_config(overrides=dict(preset="lgcp", seed=1))
    assert cfg.hidden == 1024 and cfg.mala_tau == 0.01
    cfg = cli.parse_config(overrides=dict(preset="manywell", seed=1))
    assert cfg.mala_tau == 0.1


def test_missing_seed_rejected():
    with pytest.raises(ConfigError, match="seed"):
        cli.parse_config(overrides=dict(preset="gmm4"))


def test_unknown_field_rejected(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 1\nbogus_field = 3\n")
    with pytest.raises(ConfigError, match="bogus_field"):
        cli.parse_config(path)


def test_config_file_roundtrip(tmp_path):
    cfg = cli.parse_config(overrides=smoke_overrides(tmp_path / "o"))
    path = tmp_path / "c.cfg"
    path.write_text(cli.config_lines(cfg))
    again = cli.parse_config(path)
    assert again == cfg


def test_flag_overrides_beat_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("preset = \"gmm4\"\nseed = 5\niters = 100\n")
    cfg = cli.parse_config(path, overrides=dict(iters=7))
    assert cfg.iters == 7 and cfg.seed == 5


def test_bad_divergence_rejected():
    with pytest.raises(ConfigError, match="divergence"):
        cli.parse_config(overrides=dict(preset="gmm4", seed=1, divergence="hutchinson:0"))


def test_smoke_run_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["--preset", "gmm4", "--seed", "11", "--out", str(out),
                   "--iters", "4", "--particles", "6", "--kq", "2"])
    assert rc == 0
    for name in ["samples.csv", "runlog.csv", "diagnostics.json",
                 "flow.ckpt", "config.resolved"]:
        assert (out / name).exists()
    samples = cli.load_samples_csv(out / "samples.csv")
    assert samples.shape == (6, 2)
    rows = cli.load_runlog_csv(out / "runlog.csv")
    assert len(rows) == 4
    payload = json.loads((out / "diagnostics.json").read_text())
    for key in ["mmd2", "ksd_u", "ksd_v", "mean_logpi", "wall_seconds",
                "acceptance_local", "acceptance_flow", "beta_trace_len"]:
        assert key in payload


def test_rerun_same_seed_identical_artifacts(tmp_path):
    h = []
    for sub in ["a", "b"]:
        out = tmp_path / sub
        assert cli.run(cli.parse_config(overrides=smoke_overrides(out))) == 0
        h.append((file_hash(out / "samples.csv"), file_hash(out / "flow.ckpt")))
    # the config hash stamp differs only through `out`, so compare bodies
    a = (tmp_path / "a" / "samples.csv").read_text().splitlines()[1:]
    b = (tmp_path / "b" / "samples.csv").read_text().splitlines()[1:]
    assert a == b
    assert file_hash(tmp_path / "a" / "flow.ckpt") == file_hash(tmp_path / "b" / "flow.ckpt")


def test_worker_count_does_not_change_samples(tmp_path):
    bodies = []
    for sub, workers in [("w1", 1), ("w4", 4)]:
        out = tmp_path / sub
        cfg = cli.parse_config(overrides=smoke_overrides(out, workers=workers))
        assert cli.run(cfg) == 0
        bodies.append((out / "samples.csv").read_text().splitlines()[1:])
    assert bodies[0] == bodies[1]


def test_diagnose_reproduces_stored_diagnostics(tmp_path):
    out = tmp_path / "run"
    cfg = cli.parse_config(overrides=smoke_overrides(out))
    assert cli.run(cfg) == 0
    stored = json.loads((out / "diagnostics.json").read_text())
    rc = cli.main(["--config", str(out / "config.resolved"), "--mode", "diagnose"])
    assert rc == 0
    recomputed = json.loads((out / "diagnostics.json").read_text())
    for key in stored:
        if key == "wall_seconds":
            continue
        assert recomputed[key] == stored[key], key


def test_atsmc_mode_runs(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["--preset", "gmm4", "--seed", "3", "--out", str(out),
                   "--mode", "atsmc", "--iters", "2", "--particles", "32",
                   "--kq", "3"])
    assert rc == 0
    payload = json.loads((out / "diagnostics.json").read_text())
    assert payload["beta_trace_len"] >= 1
    assert not (out / "flow.ckpt").exists()


def test_fm_oracle_mode_runs(tmp_path):
    out = tmp_path / "run"
    rc = cli.main(["--preset", "gmm4", "--seed", "3", "--out", str(out),
                   "--mode", "fm-oracle", "--iters", "3", "--particles", "8"])
    assert rc == 0
    assert (out / "flow.ckpt").exists()


def test_error_exit_status(tmp_path, capsys):
    rc = cli.main(["--preset", "gmm4", "--out", str(tmp_path / "x")])  # no seed
    assert rc == 1
    err = capsys.readouterr().err
    assert json.loads(err.strip())["error"] == "ConfigError"


def test_samples_csv_header_stamp(tmp_path):
    out = tmp_path / "run"
    cfg = cli.parse_config(overrides=smoke_overrides(out))
    cli.run(cfg)
    first = (out / "samples.csv").read_text().splitlines()[0]
    assert first.startswith("# config_hash=") and "seed=11" in first


def test_lgcp_property_run(tmp_path):
    # desk-scale grid: finishes, finite KSD-V, local acceptance above 0.1
    out = tmp_path / "lgcp"
    cfg = cli.parse_config(overrides=dict(
        preset="lgcp", seed=5, out=str(out), m_side=8, iters=30, particles=16,
        kq=10, diag_samples=32, ode_steps=4, hidden=32))
    assert cli.run(cfg) == 0
    payload = json.loads((out / "diagnostics.json").read_text())
    assert np.isfinite(payload["ksd_v"])
    assert payload["acceptance_local"] > 0.1
    assert payload["mmd2"] is None
