import os
import subprocess
import sys

import numpy as np
import pytest

from _support import small_config
from geofunflow import cli
from geofunflow import pipeline as pl
from geofunflow.latent_grid import read_gfield
from geofunflow.spectral import fae_reconstruct
from geofunflow.verify import Check


@pytest.fixture(scope="module")
def trained():
    return pl.train(small_config())


def test_config_ini_round_trip():
    cfg = small_config(hidden=(4, 3), lr=3e-4, domain="internal", case="EntropyJump1D")
    back = pl.RunConfig.from_ini(cfg.to_ini())
    assert back == cfg and back.digest() == cfg.digest()
    with pytest.raises(ValueError):
        pl.RunConfig.from_ini("[run]\nbogus = 1\n")
    with pytest.raises(ValueError):
        pl.RunConfig.from_ini("[nowhere]\nseed = 1\n")
    with pytest.raises(ValueError):
        pl.RunConfig(domain="orbit")
    with pytest.raises(ValueError):
        pl.RunConfig(latent_dims=4)


def test_zero_warmup_leaves_parameters():
    cfg = small_config(warmup_steps=0)
    problem = pl.build_problem(cfg)
    models = pl.init_models(cfg, problem)
    before = {k: v.copy() for k, v in models.fae.params().items()}
    assert pl.fae_warmup(cfg, problem, models) == []
    assert all(np.array_equal(before[k], v) for k, v in models.fae.params().items())


def test_constant_target_warmup():
    cfg = pl.RunConfig(case="UniformFlow", speed_min=1.0, speed_max=1.0, angle_max=0.0, latent_dims=6, channels=2,
                       samples=2, volume_points=200, surface_points=80, warmup_steps=100, modes=2, hidden=(2,),
                       sato_window=1)
    problem = pl.build_problem(cfg)
    models = pl.init_models(cfg, problem)
    pl.fae_warmup(cfg, problem, models)
    lat = models.fae.encode(problem.geom, problem.values[0])
    _, loss = fae_reconstruct(models.fae, problem.geom, problem.values[0], cfg.lambda_reg)
    assert loss <= cfg.lambda_reg * (lat**2).sum() + 1e-8


def test_history_columns(trained):
    h = trained.history
    assert len(h) == 6 and [r["epoch"] for r in h] == list(range(1, 7))
    for r in h:
        assert set(r) == set(pl.LOSS_COLUMNS)
        assert r["composite"] == r["lambda"] * r["lambda_phys"]
        assert r["L_total"] == pytest.approx(r["L_FM"] + r["L_TV"] + r["composite"] * r["L_phys"], rel=1e-12)
        if r["epoch"] < 0.2 * 6:
            assert r["lambda"] == 0.0 and r["phase"] == "TopologySearch"


def test_homotopy_off_gives_fm_plus_tv():
    st = pl.train(small_config(lambda_max=0.0, epochs=3))
    for r in st.history:
        assert r["L_total"] == pytest.approx(r["L_FM"] + r["L_TV"], rel=1e-14)


def test_loss_csv_round_trip(trained, tmp_path):
    p = tmp_path / "loss.csv"
    pl.write_loss_csv(p, trained.history)
    assert p.read_text().splitlines()[0] == ",".join(pl.LOSS_COLUMNS)
    back = pl.read_loss_csv(p)
    assert back[-1]["L_FM"] == trained.history[-1]["L_FM"]


def test_checkpoint_resume_matches(tmp_path):
    cfg = small_config()
    full = pl.train(cfg)
    half = pl.train(cfg, stop_epoch=3)
    path = tmp_path / "ck.gff"
    pl.save_checkpoint(path, half)
    lines = path.read_text().splitlines()
    assert lines[0] == pl.CKPT_VERSION and lines[1].startswith("meta ")
    resumed = pl.train(cfg, state=pl.load_checkpoint(path, cfg))
    for a, b in zip(full.history, resumed.history):
        assert a == b


def test_checkpoint_errors(trained, tmp_path):
    path = tmp_path / "ck.gff"
    pl.save_checkpoint(path, trained)
    text = path.read_text()
    bad = tmp_path / "bad.gff"
    bad.write_text(text.replace(pl.CKPT_VERSION, "geofunflow-ckpt/0", 1))
    with pytest.raises(pl.CheckpointError):
        pl.load_checkpoint(bad)
    lines = text.splitlines()
    bad.write_text("\n".join(lines[:3] + [lines[3].split()[0]]) + "\n")
    with pytest.raises(pl.CheckpointError):
        pl.load_checkpoint(bad)
    bad.write_bytes(b"PK\x03\x04\xcb\xff")
    with pytest.raises(pl.CheckpointError):
        pl.load_checkpoint(bad)
    with pytest.raises(pl.CheckpointError):
        pl.load_checkpoint(path, small_config(seed=8))


def test_sampling_determinism_and_convergence(trained):
    a = pl.sample_latents(trained, 2, 5, 16)
    assert np.array_equal(a, pl.sample_latents(trained, 2, 5, 16))
    ref = pl.sample_latents(trained, 2, 5, 256)
    e64 = np.abs(pl.sample_latents(trained, 2, 5, 64) - ref).max()
    e128 = np.abs(pl.sample_latents(trained, 2, 5, 128) - ref).max()
    assert e128 < e64


def test_decoded_wall_constraint(trained):
    z = pl.sample_latents(trained, 3, 11, 8)
    for zi in z:
        u = pl.decode(trained.problem, trained.models, zi)
        assert pl.wall_normal_violation(trained.problem, u) <= 1e-12


def test_sample_files(trained, tmp_path):
    paths = pl.sample_cmd(trained, tmp_path, 8, 3, n=2)
    assert len(paths) == 2
    grid, _ = read_gfield(paths[0])
    assert grid.values.shape == (*trained.cfg.fine_dims, 4)


def test_trajectory_rows(trained):
    rows = pl.residual_trajectory(trained, 7, 2, 12)
    assert len(rows) == 7 and rows[0][0] == 0.0 and rows[-1][0] == 1.0
    assert all(np.isfinite(r) for _, r in rows)


def test_uq_outputs(trained, tmp_path):
    mean, var = pl.uq(trained, tmp_path, 3, 1, 4)
    assert np.all(var >= 0) and mean.shape == var.shape
    assert (tmp_path / "uq_summary.csv").exists()


def test_internal_branch_runs():
    st = pl.train(small_config(domain="internal", case="EntropyJump1D", epochs=2))
    assert all(np.isfinite(r["L_phys"]) for r in st.history)
    assert st.problem.ctx.wall is None


def test_analytic_residuals_small():
    res, mask = pl.analytic_residuals(small_config(case="UniformFlow"))
    assert all(np.abs(r).max() <= 1e-10 for r in res.values())
    assert mask.shape == small_config().fine_dims


def _ini(tmp_path, **kw):
    p = tmp_path / "run.ini"
    p.write_text(small_config(**kw).to_ini())
    return str(p)


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    assert cli.main(["schedule", "--out", str(tmp_path), "--steps", "10"]) == 0
    lines = (tmp_path / "schedule.csv").read_text().splitlines()
    assert lines[0] == "tau,lambda,lambda_phys,composite,phase" and len(lines) == 12
    with pytest.raises(SystemExit) as exc:
        cli.main(["teleport"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["schedule", "--steps", "0"])
    assert exc.value.code == 1
    assert cli.main(["sample", "--checkpoint", str(tmp_path / "missing.gff")]) == 1
    monkeypatch.setattr(cli, "run_suite", lambda name, out: [Check("fake", "always", 1.0, 0.0, False)])
    assert cli.main(["verify", "stencil", "--out", str(tmp_path)]) == 3


def test_cli_spectrum_and_residual(tmp_path):
    assert cli.main(["spectrum", "--out", str(tmp_path), "--steps", "11", "--h", "0.5"]) == 0
    rows = (tmp_path / "spectrum.csv").read_text().splitlines()
    assert rows[0] == "omega,symbol_magnitude,ad_magnitude,bound,h" and len(rows) == 12
    assert cli.main(["residual", "--config", _ini(tmp_path), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "residuals.csv").exists() and (tmp_path / "residual_continuity.gfield").exists()


def test_cli_train_sample_metrics(tmp_path):
    ini = _ini(tmp_path, epochs=2)
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", ini, "--out", out, "--quiet"]) == 0
    ck = os.path.join(out, "checkpoint.gff")
    assert cli.main(["sample", "--checkpoint", ck, "--out", out, "--steps", "4", "--n", "2"]) == 0
    assert cli.main(["trajectory", "--checkpoint", ck, "--out", out, "--rows", "3", "--steps", "4"]) == 0
    s0, s1 = os.path.join(out, "sample_000.gfield"), os.path.join(out, "sample_001.gfield")
    assert cli.main(["metrics", "--pred", s0, "--ref", s1, "--out", out]) == 0
    assert cli.main(["encode", "--checkpoint", ck, "--out", out, "--samples", "1"]) == 0
    assert cli.main(["train", "--resume", ck, "--out", out, "--quiet"]) == 0


def test_verify_all_passes(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "geofunflow", "verify", "all", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert (tmp_path / "verify.csv").exists()
