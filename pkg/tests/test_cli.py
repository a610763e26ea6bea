import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from waveprobe import cli
from waveprobe.config import load_config, validate
from waveprobe.errors import ConfigError

LINE = """
[domain]
T = 3.2
bounds = [[0.0, 1.0]]
"""


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _run(tmp_path, command, text, *extra):
    cfg = _write(tmp_path, text)
    out = tmp_path / f"out_{command}"
    return cli.main([command, "--config", str(cfg), "--out", str(out), *extra]), out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- validation ------------------------------------------------------------------


def test_validation_collects_field_errors():
    raw = {
        "domain": {"T": -1.0, "bounds": [[0.0, 1.0]]},
        "grid": {"cfl": 1.5},
        "sweep": {"deltas": [1e-3, 1e-5]},
        "bogus": {},
    }
    with pytest.raises(ConfigError) as exc:
        validate(raw)
    msg = str(exc.value)
    for key in ("domain.T", "grid.cfl", "sweep.deltas", "bogus: unknown section"):
        assert key in msg


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_points_from_triples(tmp_path):
    cfg = load_config(_write(tmp_path, LINE + "[reconstruct]\nt = [1.4, 1.8, 3]\nx = [0.3, 0.7, 2]\n"))
    pts = cfg.sections["reconstruct"]["points"]
    assert len(pts) == 6 and pts[0] == (1.4, 0.3) and pts[-1] == (1.8, 0.7)


def test_seed_override(tmp_path):
    cfg = load_config(_write(tmp_path, "seed = 3\n" + LINE), seed=11)
    assert cfg.seed == 11


def test_bad_metric_name(tmp_path):
    with pytest.raises(ConfigError, match="metric.name"):
        load_config(_write(tmp_path, LINE + '[metric]\nname = "schwarzschild"\n'))


# --- exit codes --------------------------------------------------------------------


def test_config_error_exit_code(tmp_path):
    code, _ = _run(tmp_path, "forward", "[domain]\nT = 1.0\n")
    assert code == cli.EXIT_CONFIG


def test_cfl_error_exit_code(tmp_path):
    code, _ = _run(tmp_path, "forward", LINE + "[grid]\nnx = 64\nnt = 20\n")
    assert code == cli.EXIT_CONFIG


def test_numerical_failure_exit_code(tmp_path):
    # a beam through an early event touches the initial surface
    code, _ = _run(tmp_path, "beam", LINE + "[beam]\npoint = [0.2, 0.5]\ntaus = [40.0]\n")
    assert code == cli.EXIT_NUMERICAL


def test_help_documents_columns(capsys):
    with pytest.raises(SystemExit):
        cli.main(["sweep", "--help"])
    assert "delta, eps, tau, point_id" in capsys.readouterr().out


# --- forward ------------------------------------------------------------------------


def test_forward_zero_data(tmp_path):
    code, out = _run(tmp_path, "forward", LINE + '[forward]\ndata = "zero"\n[grid]\nnx = 16\n')
    assert code == 0
    rows = _rows(out / "solution.csv")
    assert rows and all(float(r["re"]) == 0 and float(r["im"]) == 0 for r in rows)


def test_forward_is_byte_identical(tmp_path):
    text = LINE + "[grid]\nnx = 32\n[potential]\nbumps = [{ center = [1.6, 0.5], width = 0.1 }]\n"
    c1, o1 = _run(tmp_path, "forward", text)
    first = (o1 / "solution.csv").read_bytes(), (o1 / "report.json").read_bytes()
    c2, o2 = _run(tmp_path, "forward", text)
    assert c1 == c2 == 0
    assert first == ((o2 / "solution.csv").read_bytes(), (o2 / "report.json").read_bytes())


def test_forward_manufactured_table(tmp_path):
    code, out = _run(tmp_path, "forward", "[domain]\nT = 1.0\nbounds = [[0.0, 1.0]]\n[grid]\nnx = 16\n"
                     '[forward]\ndata = "manufactured"\nrefinements = 2\n')
    assert code == 0
    ratios = [float(r["ratio"]) for r in _rows(out / "convergence.csv")[1:]]
    assert all(3.5 <= r <= 4.5 for r in ratios)


# --- beam ---------------------------------------------------------------------------


def test_beam_ladder_and_conjugate(tmp_path):
    base = "[domain]\nT = 3.0\nbounds = [[0.0, 1.0]]\n[beam]\npoint = [1.5, 0.5]\ntaus = [40.0, 80.0]\n"
    code, out = _run(tmp_path, "beam", base)
    assert code == 0
    ladder = _rows(out / "residual_ladder.csv")
    assert [float(r["tau"]) for r in ladder] == [40.0, 80.0]
    plain = _rows(out / "beam_dump.csv")
    code, out2 = _run(tmp_path, "beam", base + "conjugate = true\n")
    conj = _rows(out2 / "beam_dump.csv")
    assert code == 0 and len(plain) == len(conj)
    assert all(float(a["re"]) == float(b["re"]) and float(a["im"]) == -float(b["im"]) for a, b in zip(plain, conj))
    summary = json.loads((out / "summary.json").read_text())
    assert summary["residual_slope"] == "undefined"  # identically zero residual in flat 1+1


# --- identity and reconstruct ------------------------------------------------------------

BUMP = "[potential]\nbumps = [{ center = [1.6, 0.5], width = 0.1 }]\n"


def test_identity_zero_potential(tmp_path):
    code, out = _run(tmp_path, "identity", LINE + "[probe]\ntau = 40.0\neps = 1e-3\npoints = [[1.6, 0.5]]\n")
    assert code == 0
    row = _rows(out / "identity.csv")[0]
    assert float(row["lhs_re"]) == 0 and float(row["lhs_im"]) == 0
    assert abs(float(row["rhs_boundary_re"])) <= 1e-10


def test_identity_eps_ladder_slope_row(tmp_path):
    code, out = _run(tmp_path, "identity", LINE + BUMP
                     + "[probe]\ntau = 40.0\neps = 1e-3\neps_ladder = [0.02, 0.01, 0.005]\npoints = [[1.6, 0.5]]\n")
    assert code == 0
    rows = _rows(out / "identity.csv")
    assert rows[-1]["probe_id"] == "slope:0"
    assert float(rows[-1]["expansion_remainder"]) >= 2.7


def test_reconstruct_flags_points_outside(tmp_path):
    text = LINE + BUMP + "[probe]\ntau = 40.0\neps = 1e-3\n[reconstruct]\npoints = [[1.6, 0.5], [0.05, 0.5]]\n"
    code, out = _run(tmp_path, "reconstruct", text)
    assert code == 0
    rows = _rows(out / "qhat.csv")
    assert rows[0]["status"] == "ok" and float(rows[0]["abs_err"]) < 0.15
    assert rows[1]["status"] == "outside recovery set"
    calib = json.loads((out / "calibration.json").read_text())
    assert calib["literal_offset"] == 2.0


def test_reconstruct_null_potential(tmp_path):
    code, out = _run(tmp_path, "reconstruct", LINE + "[probe]\ntau = 40.0\neps = 1e-3\n[reconstruct]\npoints = [[1.6, 0.5]]\n")
    assert code == 0
    row = _rows(out / "qhat.csv")[0]
    assert abs(float(row["qhat_re"])) < 1e-8 and abs(float(row["qhat_im"])) < 1e-8


def test_reconstruct_all_points_fail(tmp_path):
    code, _ = _run(tmp_path, "reconstruct", LINE + BUMP + "[probe]\ntau = 40.0\n[reconstruct]\npoints = [[0.05, 0.5]]\n")
    assert code == cli.EXIT_NUMERICAL


# --- sweep -----------------------------------------------------------------------------


def test_single_delta_sweep_is_undefined_and_deterministic(tmp_path):
    text = ("seed = 4\n" + LINE + BUMP
            + "[sweep]\ndeltas = [1e-57]\npoints = [[1.6, 0.5]]\n")
    code, out = _run(tmp_path, "sweep", text)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["slope"] == "undefined" and summary["sigma"] == "24/679"
    first = (out / "sweep.csv").read_bytes(), (out / "summary.json").read_bytes()
    code, out2 = _run(tmp_path, "sweep", text)
    assert first == ((out2 / "sweep.csv").read_bytes(), (out2 / "summary.json").read_bytes())
    row = _rows(out / "sweep.csv")[0]
    assert math.isclose(float(row["delta"]), 1e-57)
