import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from twophoton import cli
from twophoton import io as tio

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
[domain]
kind = disk2

[discretization]
grid = 17
angles = 8

[sigma_a]
constant = 0.3

[sigma_b]
constant = {sb}

[kappa]
constant = 0.1

[solver]
max_outer = {max_outer}

[lines]
angles = 16
offsets = 16
recon_grid = 17
"""


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_admissibility_zero_scattering(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["admissibility", "--config", str(CONFIGS / "zero_scattering.ini"), "--out", str(out),
                     "--quiet"]) == cli.EXIT_OK
    res = _report(out)["result"]
    assert res["passed"] and res["mu"] == 0.0 and res["nu"] == 0.0
    assert (out / "timing.json").exists()


def test_riccati_profile_matches_closed_form(tmp_path):
    out = tmp_path / "out"
    assert cli.run("riccati", CONFIGS / "riccati_constant.ini", out, quiet=True) == cli.EXIT_OK
    header, data = tio.read_csv(out / "profile.csv")
    assert header[:3] == ["s", "x", "y"]
    s, v = data[:, 0], data[:, header.index("v")]
    exact = np.exp(-0.3 * s) / (1.0 + 0.2 * -np.expm1(-0.3 * s) / 0.3)
    np.testing.assert_allclose(v, exact, rtol=1e-8)
    assert _report(out)["result"]["length"] == pytest.approx(2.0)


def test_forward_outputs_and_deterministic_report(tmp_path):
    cfg = _write(tmp_path, SMALL.format(sb=0.1, max_outer=200))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run("forward", cfg, a, quiet=True) == cli.EXIT_OK
    assert cli.run("forward", cfg, b, quiet=True) == cli.EXIT_OK
    for name in ("trace.csv", "mean.csv", "radiance.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    rep = _report(a)
    assert rep["status"] == "ok" and "runtime_s" not in rep["result"]["solver"]
    assert "solve_s" in json.loads((a / "timing.json").read_text())


def test_inadmissible_config_exits_3(tmp_path):
    out = tmp_path / "out"
    cfg = _write(tmp_path, SMALL.format(sb=3.0, max_outer=200))
    assert cli.run("forward", cfg, out, quiet=True) == cli.EXIT_INADMISSIBLE
    rep = _report(out)
    assert rep["status"] == "inadmissible" and "nu_below_one" in rep["error"]
    assert cli.run("admissibility", cfg, tmp_path / "adm", quiet=True) == cli.EXIT_INADMISSIBLE


def test_nonconvergence_exits_4(tmp_path):
    out = tmp_path / "out"
    cfg = _write(tmp_path, SMALL.format(sb=0.1, max_outer=1))
    assert cli.run("forward", cfg, out, quiet=True) == cli.EXIT_NOT_CONVERGED
    assert _report(out)["status"] == "not converged"


@pytest.mark.parametrize("text,needle", [
    ("[nonsense]\nx = 1\n", "unknown section"),
    ("[domain]\nkind = torus\n", "[domain] kind"),
    ("[source]\nkind = beam\nprofile = box\n", "[source] profile"),
    ("[kernel]\nphase = hg\ng = 1.5\n", "[kernel] g"),
    ("[scatterfree]\nlevels = 0.5 1.0\n", "[scatterfree] levels"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, needle):
    cfg = _write(tmp_path, text)
    assert cli.run("forward", cfg, tmp_path / "out", quiet=True) == cli.EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_missing_config_and_output_dir(tmp_path):
    assert cli.run("forward", tmp_path / "absent.ini", tmp_path / "out") == cli.EXIT_CONFIG
    cfg = _write(tmp_path, SMALL.format(sb=0.1, max_outer=200))
    assert cli.run("forward", cfg, None) == cli.EXIT_CONFIG
    assert cli.run("forward", cfg, tmp_path / "o", seed=-1) == cli.EXIT_CONFIG


def test_line_commands_reject_3d(tmp_path):
    cfg = _write(tmp_path, "[domain]\nkind = ball3\n[discretization]\ngrid = 8\npolar = 2\nazimuth = 4\n")
    assert cli.run("recon-sa", cfg, tmp_path / "out", quiet=True) == cli.EXIT_CONFIG


def test_recon_sa_small(tmp_path):
    text = SMALL.format(sb=0.1, max_outer=200).replace("[kappa]\nconstant = 0.1\n", "")
    out = tmp_path / "out"
    assert cli.run("recon-sa", _write(tmp_path, text), out, quiet=True) == cli.EXIT_OK
    m = _report(out)["result"]["metrics"]
    assert m["rel_l2"] < 0.05 and math.isfinite(m["rel_linf"])
    assert (out / "sigma_a_field.csv").exists()


@pytest.mark.slow
def test_recon_sa_gaussian_config(tmp_path):
    out = tmp_path / "out"
    assert cli.run("recon-sa", CONFIGS / "gaussian_scatterfree.ini", out, quiet=True) == cli.EXIT_OK
    assert _report(out)["result"]["metrics"]["rel_l2"] <= 0.05


def test_expansion_check_is_second_order(tmp_path):
    out = tmp_path / "out"
    assert cli.run("expansion-check", CONFIGS / "expansion.ini", out, quiet=True) == cli.EXIT_OK
    res = _report(out)["result"]
    assert res["second_order"]
    # R is normalised by delta^2, so a second-order remainder gives ratios near 1
    assert all(abs(q - 1.0) < 0.05 for q in res["successive_ratios"])


def test_module_entry_point(tmp_path):
    out = tmp_path / "out"
    proc = subprocess.run([sys.executable, "-m", "twophoton", "admissibility", "--config",
                           str(CONFIGS / "zero_scattering.ini"), "--out", str(out), "--quiet"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "twophoton", "bogus", "--config", "x"], capture_output=True)
    assert bad.returncode == 2


def test_every_subcommand_is_registered():
    assert set(cli.SUBCOMMANDS) == set(cli.RUNNERS)
