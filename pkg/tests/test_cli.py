import json
import math

import numpy as np
import pytest

from rqj import cli
from rqj.cli import ConfigError, Mode, build_config, main, parse_config, read_config_file
from rqj.records import CSV_HEADER, read_csv


def _run(tmp_path, name, *args):
    out = tmp_path / name
    code = main(["--out", str(out), *args])
    return code, out


def _meta(out):
    return json.loads((out / "run_meta.json").read_text())


# parsing and validation


def test_defaults_are_filled_and_echoed(tmp_path):
    code, out = _run(tmp_path, "sme", "--mode", "SME_TRAJ", "--set", "t_final=0.01")
    assert code == 0
    cfg = _meta(out)["config"]
    for key in cli.SCHEMA:
        assert key in cfg
    assert cfg["g"] == 120.0 and cfg["kappa"] == 40.0 and cfg["gamma_perp"] == 2.6
    assert cfg["E"] == pytest.approx(40 * math.sqrt(20))
    assert cfg["n_max"] == 15
    assert cfg["dt"] == pytest.approx(5e-5)
    assert cfg["frame"] == "DISPLACED"
    assert cfg["filter_fc"] == 10.0


def test_eta_out_of_range_rejected(tmp_path, capsys):
    code, out = _run(tmp_path, "bad", "--set", "eta=1.5")
    assert code == 2
    assert "eta must lie in [0, 1]" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.parametrize("mode", ["SME_TRAJ", "PFE_TRAJ", "ENSEMBLE", "QFUNC"])
def test_weak_drive_rejected_for_fixed_point_modes(tmp_path, capsys, mode):
    code, out = _run(tmp_path, "weak", "--mode", mode, "--set", "E=50")
    assert code == 2
    err = capsys.readouterr().err
    assert "2E > g" in err
    assert not out.exists()


def test_weak_drive_allowed_for_steady_state():
    cfg = build_config({"mode": "ME_STEADY", "E": "50", "frame": "LAB", "n_max": "10"})
    assert cfg.params.E == 50.0


def test_unknown_key_is_error(tmp_path, capsys):
    code, out = _run(tmp_path, "unk", "--set", "gama_perp=1.0")
    assert code == 2
    assert "unknown configuration keys: gama_perp" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.parametrize(
    "overrides, fragment",
    [
        ({"t_final": "0"}, "t_final"),
        ({"stride": "7", "t_final": "0.01"}, "stride 7"),
        ({"dt": "0.01"}, "dt"),
        ({"mode": "PFE_TRAJ", "dt": "0.001"}, "CFL"),
        ({"filter_fc": "5000"}, "filter_fc"),
        ({"thresholds": "100, -100"}, "thresholds"),
        ({"base_seed": "-3"}, "base_seed"),
        ({"mode": "FOO"}, "mode"),
        ({"E": "100", "e_over_kappa_sq": "20"}, "either E"),
    ],
)
def test_bad_values_name_the_constraint(overrides, fragment):
    with pytest.raises(ConfigError, match=fragment):
        build_config(overrides)


def test_config_file_format(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nmode = PFE_TRAJ\n g = 120  # inline\n\nt_final=0.1\n")
    raw = read_config_file(path)
    assert raw == {"mode": "PFE_TRAJ", "g": "120", "t_final": "0.1"}
    path.write_text("g = 1\ng = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        read_config_file(path)
    path.write_text("just words\n")
    with pytest.raises(ConfigError, match="key = value"):
        read_config_file(path)
    with pytest.raises(ConfigError, match="does not exist"):
        read_config_file(tmp_path / "missing.cfg")


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("mode = PFE_TRAJ\nbase_seed = 3\nt_final = 0.1\n")
    cfg, workers = parse_config(["--config", str(path), "--seed", "11", "--mode", "SME_TRAJ",
                                 "--set", "t_final=0.02", "--workers", "2"])
    assert cfg.mode is Mode.SME_TRAJ
    assert cfg.base_seed == 11
    assert cfg.t_final == 0.02
    assert workers == 2


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("RQJ_WORKERS", "3")
    _, workers = parse_config(["--set", "t_final=0.01"])
    assert workers == 3


# runs


def test_sme_run_is_byte_identical(tmp_path):
    args = ("--mode", "SME_TRAJ", "--seed", "5", "--set", "t_final=0.05", "--set", "variant=RWA")
    code_a, a = _run(tmp_path, "a", *args)
    code_b, b = _run(tmp_path, "b", *args)
    assert code_a == code_b == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    assert (a / "trajectory.csv").read_text().splitlines()[0] == CSV_HEADER
    meta = _meta(a)
    assert meta["incomplete"] is False
    assert meta["seeds"]["base_seed"] == 5
    assert meta["wall_time_s"] > 0
    assert "version" in meta


def test_output_reruns_from_its_own_config(tmp_path):
    code, a = _run(tmp_path, "a", "--mode", "PFE_TRAJ", "--seed", "2", "--set", "t_final=0.1",
                   "--set", "E=200")
    assert code == 0
    code, b = _run(tmp_path, "b", "--config", str(a / "run_config.cfg"))
    assert code == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()


def test_pfe_run_with_snapshots(tmp_path):
    code, out = _run(tmp_path, "pfe", "--mode", "PFE_TRAJ", "--set", "t_final=0.1",
                     "--set", "n_snapshots=2", "--set", "stride=1")
    assert code == 0
    for k in range(3):
        lines = (out / f"snapshot_t{k}.csv").read_text().splitlines()
        assert lines[0] == "y,p_plus,p_minus"
    data = read_csv(out / "trajectory.csv")
    assert data.shape == (2000, 6)
    meta = _meta(out)
    assert meta["snapshot_times_us"] == pytest.approx([0.0, 0.05, 0.1])
    summary = json.loads((out / "switches.json").read_text())
    assert "n_events" in summary


def test_qfunc_run_is_bimodal(tmp_path):
    code, out = _run(tmp_path, "q", "--mode", "QFUNC", "--set", "q_points=61")
    assert code == 0
    summary = json.loads((out / "qfunc_summary.json").read_text())
    assert len(summary["maxima"]) == 2
    for m in summary["maxima"]:
        assert min(abs(complex(m["re"], m["im"]) - complex(f["re"], f["im"]))
                   for f in summary["fixed_points"]) < 0.2
    grid = np.loadtxt(out / "qfunc.csv", delimiter=",", skiprows=1)
    assert grid.shape[0] == 61 * 61


def test_me_steady_run(tmp_path):
    code, out = _run(tmp_path, "ss", "--mode", "ME_STEADY")
    assert code == 0
    summary = json.loads((out / "steady_state.json").read_text())
    assert summary["p_plus"] == pytest.approx(0.5, abs=0.02)
    assert np.load(out / "rho_steady.npy").shape == (32, 32)


def test_ensemble_run(tmp_path):
    code, out = _run(tmp_path, "ens", "--mode", "ENSEMBLE", "--set", "n_traj=4", "--set", "t_final=0.01",
                     "--set", "n_snapshots=2")
    assert code == 0
    summary = json.loads((out / "ensemble.json").read_text())
    assert summary["n_traj"] == 4
    assert len(summary["trace_distance_vs_me"]) == 3
    assert _meta(out)["seeds"]["stream_index"] == [0, 3]


def test_scaling_run(tmp_path):
    code, out = _run(tmp_path, "sc", "--mode", "SCALING", "--set", "t_final=1.5",
                     "--set", "scaling_g_values=120, 240", "--set", "scaling_gamma_perps=1.3, 0.65",
                     "--set", "scaling_etas=0.5, 1.0", "--set", "scaling_burn_in=0.5")
    assert code == 0
    rows = (out / "scaling.csv").read_text().splitlines()
    assert rows[0] == "g_mhz,kappa_mhz,gamma_perp_mhz,eta,inv_mean_inv_s,std_err"
    assert len(rows) == 1 + 6
    fits = json.loads((out / "scaling_fit.json").read_text())["fits"]
    assert "eta_slope" in fits and "ci95" in fits["eta_slope"]


def test_numerical_failure_marks_incomplete(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(cli, "simulate_pfe", boom)
    code, out = _run(tmp_path, "fail", "--mode", "PFE_TRAJ", "--set", "t_final=0.01")
    assert code == 1
    meta = _meta(out)
    assert meta["incomplete"] is True
    assert "synthetic failure" in meta["error"]
