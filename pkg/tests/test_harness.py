from __future__ import annotations

import numpy as np
import pytest

from fastep.harness.build import build_model, phase_encode_columns
from fastep.harness.cli import main
from fastep.harness.config import ConfigError, ExperimentConfig, load_config, parse_config_text
from fastep.harness.images import phantom, read_pgm, write_pgm
from fastep.harness.run import (
    HEADER_BYTES,
    MAGIC,
    Marginals,
    check_output,
    read_marginals,
    read_summary,
    run_experiment,
    write_marginals,
)

SMALL = dict(height=8, width=8, kernel_height=3, kernel_width=3, noise_var=1e-2, eta=1.0)


def test_tau_syntax():
    cfg = ExperimentConfig(noise_var=1e-4, tau_a="0.04/sigma", tau_r="3")
    assert cfg.tau("tau_a") == pytest.approx(4.0)
    assert cfg.tau("tau_r") == 3.0
    with pytest.raises(ConfigError):
        ExperimentConfig(tau_a="abc")


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "exp.txt"
    path.write_text("# a comment\nexperiment = cartesian_mri\nheight=16\nwidth = 16\ncolumns=6\n")
    cfg = load_config(path, {"noise_var": "1e-4", "solver": "parallel"})
    assert (cfg.experiment, cfg.height, cfg.columns, cfg.noise_var, cfg.solver) == ("cartesian_mri", 16, 6, 1e-4, "parallel")
    assert load_config(None, parse_config_text(cfg.to_text())) == cfg


@pytest.mark.parametrize("text", ["height=abc", "colour=red", "noequals", "eta=2", "solver=gibbs"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        load_config(None, parse_config_text(text))


def test_phase_encode_columns():
    cols = phase_encode_columns(16, 5)
    np.testing.assert_array_equal(cols, [0, 1, 2, 14, 15])
    np.testing.assert_array_equal(phase_encode_columns(8, 8), np.arange(8))
    rand = phase_encode_columns(16, 7, "random", seed=4)
    assert set((16 - rand) % 16) == set(rand)
    with pytest.raises(ConfigError):
        phase_encode_columns(7, 2)


def test_builders():
    deconv = build_model(ExperimentConfig(**SMALL))
    assert (deconv.n, deconv.m, deconv.q) == (64, 64, 192)
    mri = build_model(ExperimentConfig(experiment="cartesian_mri", height=8, width=8, columns=4))
    assert (mri.n, mri.m, mri.q) == (64, 32, 192)
    assert np.allclose(mri.sites.tau[:64], 0.04 / np.sqrt(1e-3))
    assert np.allclose(mri.sites.tau[64:], 0.08 / np.sqrt(1e-3))
    custom = build_model(ExperimentConfig(experiment="custom", height=4, width=6))
    assert custom.m == 24
    with pytest.raises(ConfigError):
        build_model(ExperimentConfig(height=2, width=2, kernel_height=3))


def test_pgm_round_trip(tmp_path):
    img = phantom(12, 9, seed=1)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (12, 9)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    cfg = ExperimentConfig(image=str(tmp_path / "a.pgm"), kernel_height=3, kernel_width=3)
    assert build_model(cfg).n == 108


def test_marginals_format(tmp_path, rng):
    n, q = 3, 5
    marg = Marginals(*(rng.normal(size=k) for k in (n, n, q, q, q, q)))
    path = tmp_path / "m.bin"
    write_marginals(path, marg)
    data = path.read_bytes()
    assert data[:8] == MAGIC and len(data) == HEADER_BYTES + 8 * (2 * n + 4 * q)
    assert int.from_bytes(data[8:16], "little") == n and int.from_bytes(data[16:24], "little") == q
    assert data[24:32] == b"\0" * 8
    back = read_marginals(path)
    for a, b in zip(vars(marg).values(), vars(back).values()):
        np.testing.assert_array_equal(a, b)
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        read_marginals(path)


def test_run_writes_artifacts_and_check_passes(tmp_path):
    cfg = ExperimentConfig(**SMALL, solver="parallel", output=str(tmp_path / "out"))
    run = run_experiment(cfg)
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == ["config.txt", "marginals.bin", "summary.txt", "trace.csv"]
    summary = read_summary(out / "summary.txt")
    assert summary["converged"] == "True"
    assert float(summary["phi_final"]) == pytest.approx(run.summary["phi_star"], rel=1e-6)
    ok, stored, phi = check_output(out)
    assert ok and abs(stored - phi) <= 1e-10 * abs(phi)


def test_runs_are_byte_identical(tmp_path):
    blobs = []
    for k in range(2):
        cfg = ExperimentConfig(**SMALL, solver="fast", output=str(tmp_path / f"r{k}"))
        run_experiment(cfg)
        blobs.append((tmp_path / f"r{k}" / "marginals.bin").read_bytes())
    assert blobs[0] == blobs[1]


def test_cli_exit_codes(tmp_path, capsys):
    out = tmp_path / "cli"
    args = ["--height", "8", "--width", "8", "--kernel-height", "3", "--kernel_width", "3", "--noise-var", "1e-2"]
    assert main(["run", *args, "--solver", "vb", "--output", str(out)]) == 0
    assert main(["check", str(out)]) == 0
    assert main(["run", "--eta", "3", "--output", str(out)]) == 2
    assert main(["run", str(tmp_path / "missing.txt")]) == 2
    assert main(["compare", *args, "--solvers", "fast,bogus", "--output", str(out)]) == 2
    assert main(["compare", *args, "--solvers", "fast,parallel", "--output", str(tmp_path / "cmp")]) == 0
    assert (tmp_path / "cmp" / "compare.txt").exists()
    # corrupt the stored energy
    summary = (out / "summary.txt").read_text().splitlines()
    summary = [("phi_final=1.0" if line.startswith("phi_final=") else line) for line in summary]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    assert main(["check", str(out)]) == 3
    capsys.readouterr()


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert capsys.readouterr().out.count("PASS") == 4
