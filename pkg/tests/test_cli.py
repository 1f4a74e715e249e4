import json

import numpy as np
import pytest

from gpkmd.cli import (
    EXIT_INPUT,
    CliError,
    cmd_eval_eigs,
    cmd_phases,
    config_hash,
    load_config,
    main,
    read_eigenvalues,
    read_modes,
    write_eigenvalues,
    write_modes,
)
from gpkmd.data import read_matrix_csv, write_matrix_csv
from gpkmd.model import KoopmanSpectrum

SMALL_SL = {"t_len": 80, "d": 7, "noise_std": 0.05}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(out[-1])


def _config(tmp_path, **sections):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(sections))
    return path


@pytest.fixture
def small_fit(tmp_path, capsys):
    cfg = _config(
        tmp_path,
        data={"stuart_landau": SMALL_SL},
        model={"modes": 4, "rank": 20},
        fit={"max_iters": 10},
    )
    code, summary = run(capsys, "fit", "--config", cfg, "--out", tmp_path / "fit")
    assert code == 0, summary
    return tmp_path / "fit"


# ----------------------------------------------------------------- config


def test_defaults_and_flag_precedence(tmp_path):
    cfg = _config(tmp_path, seed=3, model={"modes": 4})
    merged = load_config(str(cfg), {"seed": 9, "model": {"rank": 7}})
    assert merged["seed"] == 9
    assert merged["model"] == {"modes": 4, "latent_dims": 2, "rank": 7, "dmd_selection": "svd"}


@pytest.mark.parametrize(
    "content",
    [
        {"model": {"modes": 4, "colour": "red"}},
        {"fit": {"max_iters": -1}},
        {"unknown": 1},
        {"data": {"dt": 0}},
    ],
)
def test_schema_rejects_bad_config(tmp_path, content):
    with pytest.raises(CliError):
        load_config(str(_config(tmp_path, **content)), {})


def test_config_hash_ignores_output():
    a = {"seed": 1, "output": {"directory": "a"}}
    b = {"seed": 1, "output": {"directory": "b"}}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({"seed": 2})


def test_eigenvalue_and_mode_tables_round_trip(tmp_path, rng):
    lam = np.exp(rng.standard_normal(3) * 0.1 + 1j * rng.standard_normal(3))
    write_eigenvalues(tmp_path / "e.csv", KoopmanSpectrum(lam, 0.1))
    assert np.array_equal(read_eigenvalues(tmp_path / "e.csv"), lam)
    w = rng.standard_normal((4, 3)) + 1j * rng.standard_normal((4, 3))
    write_modes(tmp_path / "m.csv", w)
    assert np.array_equal(read_modes(tmp_path / "m.csv"), w)
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header.startswith("channel,mode1_re,mode1_im")


# --------------------------------------------------------------- generate


def test_generate_paper_config(tmp_path, capsys):
    cfg = _config(tmp_path, seed=11, data={"stuart_landau": {"noise_std": 0.2}})
    code, summary = run(capsys, "generate", "--config", cfg, "--out", tmp_path / "gen")
    assert code == 0 and summary["command"] == "generate"
    y, names = read_matrix_csv(tmp_path / "gen" / "observations.csv")
    assert y.shape == (35, 751) and names[0] == "y1"
    header = (tmp_path / "gen" / "observations.csv").read_text().splitlines()[0]
    assert len(header.split(",")) == 1 + 70
    meta = json.loads((tmp_path / "gen" / "metadata.json").read_text())
    assert meta["seed"] == 11 and meta["config"]["noise_std"] == 0.2
    truth, tnames = read_matrix_csv(tmp_path / "gen" / "truth.csv")
    assert tnames == ["r", "theta"] and truth.shape == (2, 751)


def test_generate_minimal_length(tmp_path, capsys):
    cfg = _config(tmp_path, data={"stuart_landau": {"t_len": 2}})
    code, _ = run(capsys, "generate", "--config", cfg, "--out", tmp_path / "gen")
    assert code == 0
    lines = (tmp_path / "gen" / "observations.csv").read_text().splitlines()
    assert len(lines) == 3


def test_generate_invalid_dt_writes_nothing(tmp_path, capsys):
    cfg = _config(tmp_path, data={"stuart_landau": {"dt": 0}})
    code, summary = run(capsys, "generate", "--config", cfg, "--out", tmp_path / "gen")
    assert code == EXIT_INPUT and summary["error"] == "input_error"
    assert not (tmp_path / "gen").exists()


# -------------------------------------------------------------------- fit


def test_fit_writes_all_tables(small_fit):
    files = {p.name for p in small_fit.iterdir()}
    assert {
        "latents.csv",
        "pca_latents.csv",
        "modes.csv",
        "eigenvalues.csv",
        "variances.csv",
        "trace.csv",
        "manifest.json",
        "dmd_eigenvalues.csv",
        "dmd_modes.csv",
    } <= files
    manifest = json.loads((small_fit / "manifest.json").read_text())
    assert manifest["status"] in ("converged", "max_iters")
    assert manifest["dt"] == 0.05 and manifest["seed"] == 0
    assert len(manifest["config_sha256"]) == 64
    assert manifest["final_log_posterior"] >= manifest["initial_log_posterior"]
    assert read_modes(small_fit / "modes.csv").shape == (7, 4)
    assert read_eigenvalues(small_fit / "eigenvalues.csv").shape == (4,)
    latents, _ = read_matrix_csv(small_fit / "latents.csv")
    assert latents.shape == (2, 81)


def test_fit_from_generated_file_uses_metadata_dt(tmp_path, capsys):
    cfg = _config(tmp_path, data={"stuart_landau": {**SMALL_SL, "dt": 0.1}})
    run(capsys, "generate", "--config", cfg, "--out", tmp_path / "gen")
    code, summary = run(
        capsys, "fit", "--data", tmp_path / "gen" / "observations.csv",
        "--modes", 3, "--rank", 10, "--out", tmp_path / "fit", "--dmd-only",
    )
    assert code == 0 and summary["status"] == "dmd_only"
    manifest = json.loads((tmp_path / "fit" / "manifest.json").read_text())
    assert manifest["dt"] == 0.1 and manifest["modes"] == 3


def test_fit_flu_shaped_csv(tmp_path, capsys, rng):
    t = np.arange(402)
    season = np.sin(2 * np.pi * t / 52.18)[None, :] + 0.1 * rng.standard_normal((51, 402))
    raw = np.exp(season + rng.uniform(0, 1, (51, 1)))
    path = tmp_path / "flu.csv"
    np.savetxt(path, raw.T, delimiter=",", header=",".join(f"s{i}" for i in range(51)), comments="")
    cfg = _config(
        tmp_path,
        data={"source": "csv", "path": str(path), "preprocessing": {"log_transform": "log"}},
        model={"modes": 6, "rank": 50},
        fit={"max_iters": 3},
    )
    code, _ = run(capsys, "fit", "--config", cfg, "--out", tmp_path / "fit")
    assert code == 0
    assert read_eigenvalues(tmp_path / "fit" / "eigenvalues.csv").shape == (6,)
    assert read_modes(tmp_path / "fit" / "modes.csv").shape == (51, 6)
    code, _ = run(capsys, "phases", tmp_path / "fit", "--weekly")
    assert code == 0
    phases, _ = read_matrix_csv(tmp_path / "fit" / "phases.csv")
    assert phases.shape == (6, 51)


def test_fit_rank_one_single_mode(tmp_path, capsys):
    lam = 0.98 * np.exp(0.2j)
    w = np.array([1.0, 0.5 - 0.5j, -0.3j])
    y = np.outer(w, lam ** np.arange(40))
    write_matrix_csv(tmp_path / "obs.csv", y)
    cfg = _config(
        tmp_path,
        data={"source": "observations", "path": str(tmp_path / "obs.csv"), "dt": 1.0},
        model={"modes": 1, "latent_dims": 1, "rank": 40},
        fit={"max_iters": 2000},
    )
    code, summary = run(capsys, "fit", "--config", cfg, "--out", tmp_path / "fit")
    assert code == 0, summary
    assert summary["status"] in ("converged", "max_iters")
    trace = np.genfromtxt(tmp_path / "fit" / "trace.csv", delimiter=",", names=True)
    tail = trace["objective"][-20:]
    # the tail of the trace has flattened out
    assert tail[-1] - tail[0] <= 1e-3 * abs(tail[-1])
    variances = dict(
        line.split(",") for line in (tmp_path / "fit" / "variances.csv").read_text().splitlines()[1:]
    )
    # the mean squared entry of y is about 0.3
    assert float(variances["noise_var"]) < 1e-2


def test_fit_missing_input_exit_code(tmp_path, capsys):
    code, summary = run(capsys, "fit", "--data", tmp_path / "nope.csv", "--out", tmp_path / "fit")
    assert code == 2
    assert summary["error"] == "input_error" and "not found" in summary["message"]


def test_fit_rank_above_t_rejected(tmp_path, capsys):
    cfg = _config(tmp_path, data={"stuart_landau": SMALL_SL}, model={"rank": 500})
    code, _ = run(capsys, "fit", "--config", cfg, "--out", tmp_path / "fit")
    assert code == 2


def test_fit_does_not_mutate_inputs(tmp_path, capsys):
    cfg = _config(tmp_path, data={"stuart_landau": SMALL_SL})
    run(capsys, "generate", "--config", cfg, "--out", tmp_path / "gen")
    obs = tmp_path / "gen" / "observations.csv"
    before = obs.read_bytes()
    config_before = cfg.read_bytes()
    run(capsys, "fit", "--config", cfg, "--data", obs, "--modes", 3, "--rank", 10, "--dmd-only", "--out", tmp_path / "fit")
    assert obs.read_bytes() == before and cfg.read_bytes() == config_before


# ------------------------------------------------------------- eval-eigs


def test_eval_eigs_table(small_fit, capsys):
    code, summary = run(capsys, "eval-eigs", small_fit)
    assert code == 0
    assert set(summary["errors"]) == {"dmd", "gpkmd"}
    lines = (small_fit / "eig_errors.csv").read_text().splitlines()
    assert lines[0] == "method,k,error" and len(lines) == 3


def test_eval_eigs_exact_estimates_give_zero(tmp_path):
    omega0 = 0.5
    lam = np.exp(np.array([0.0, 1j * omega0, -2j * omega0]) * 0.05)
    (tmp_path / "manifest.json").write_text(json.dumps({"dt": 0.05, "modes": 3}))
    write_eigenvalues(tmp_path / "dmd_eigenvalues.csv", KoopmanSpectrum(lam, 0.05))
    result = cmd_eval_eigs(str(tmp_path), {"delta": 0.5, "beta": 1.0, "gamma": 1.0})
    assert result["errors"]["dmd"] == pytest.approx(0.0, abs=1e-12)
    # DMD-only output gives a single-row table
    assert len((tmp_path / "eig_errors.csv").read_text().splitlines()) == 2


def test_eval_eigs_zero_eigenvalue_is_infinite(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"dt": 0.05, "modes": 2}))
    write_eigenvalues(tmp_path / "eigenvalues.csv", KoopmanSpectrum(np.array([0.0, 1.0]), 0.05))
    row = (tmp_path / "eigenvalues.csv").read_text().splitlines()[1]
    assert row == "1,0,0,-inf,0"
    result = cmd_eval_eigs(str(tmp_path), {"delta": 0.5, "beta": 1.0, "gamma": 1.0})
    assert result["errors"]["gpkmd"] == np.inf


def test_eval_eigs_mismatched_k(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"dt": 0.05, "modes": 4}))
    write_eigenvalues(tmp_path / "dmd_eigenvalues.csv", KoopmanSpectrum(np.ones(3), 0.05))
    with pytest.raises(CliError):
        cmd_eval_eigs(str(tmp_path), {"delta": 0.5, "beta": 1.0, "gamma": 1.0})


# ----------------------------------------------------------------- phases


def test_phases_outputs(small_fit, capsys):
    code, _ = run(capsys, "phases", small_fit, "--samples-per-unit", 20)
    assert code == 0
    phases, _ = read_matrix_csv(small_fit / "phases.csv")
    assert phases.shape == (4, 7)
    assert np.all((phases >= 0) & (phases < 1))
    freqs = np.genfromtxt(small_fit / "frequencies.csv", delimiter=",", names=True)
    assert freqs["frequency"].shape == (4,)


def test_phases_zero_eigenvalue_is_an_error(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"dt": 1.0, "modes": 2}))
    write_modes(tmp_path / "modes.csv", np.ones((3, 2)))
    with open(tmp_path / "eigenvalues.csv", "w") as fh:
        fh.write("mode,discrete_re,discrete_im,continuous_re,continuous_im\n1,0,0,-inf,0\n2,1,0,0,0\n")
    with pytest.raises(CliError):
        cmd_phases(str(tmp_path), None)


def test_phases_missing_fit_dir(tmp_path, capsys):
    code, summary = run(capsys, "phases", tmp_path / "none")
    assert code == 2 and "manifest" in summary["message"]


# ------------------------------------------------------------ determinism


def test_generate_and_fit_are_reproducible(tmp_path, capsys):
    cfg = _config(
        tmp_path,
        data={"stuart_landau": SMALL_SL},
        model={"modes": 4, "rank": 20},
        fit={"max_iters": 15},
    )
    for run_dir in ("a", "b"):
        run(capsys, "generate", "--config", cfg, "--out", tmp_path / run_dir / "gen")
        run(capsys, "fit", "--config", cfg, "--out", tmp_path / run_dir / "fit")
    for sub in ("gen", "fit"):
        for path in sorted((tmp_path / "a" / sub).iterdir()):
            other = tmp_path / "b" / sub / path.name
            if path.name == "trace.csv":
                strip = lambda p: [r.rsplit(",", 1)[0] for r in p.read_text().splitlines()]
                assert strip(path) == strip(other)
            elif path.name == "manifest.json":
                a, b = json.loads(path.read_text()), json.loads(other.read_text())
                a.pop("created"), b.pop("created")
                assert a == b
            else:
                assert path.read_bytes() == other.read_bytes(), path.name
