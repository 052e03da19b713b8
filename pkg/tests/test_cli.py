import hashlib
import json
import signal

import numpy as np
import pytest

from slowfast_nse import cli, diagnostics
from slowfast_nse.coefficients import builtin
from slowfast_nse.dynamics import CoupledEnsemble
from slowfast_nse.snapshot import read_nsef

FAST = ["--set", "N=8", "--set", "T=0.05"]


def run(tmp_path, *args, out="out"):
    return cli.main([*args, "--out", str(tmp_path / out)])


def artifacts(folder):
    # the manifest carries wall-clock timestamps and is excluded from byte identity
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if not p.name.endswith(".manifest.json")}


def manifest(folder, command):
    return json.loads((folder / f"run.{command}.manifest.json").read_text())


# -- exit codes -----------------------------------------------------------------


def test_converge_writes_one_row_per_eps(tmp_path):
    assert run(tmp_path, "converge", *FAST, "--eps", "0.1,0.01", "--samples", "2") == 0
    lines = (tmp_path / "out" / "run.converge.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("eps,")
    m = manifest(tmp_path / "out", "converge")
    assert m["exit_status"] == 0 and m["command"] == "converge"
    assert all(p.startswith(str(tmp_path)) for p in m["outputs"]) and len(m["outputs"]) == 2


def test_manifest_hash_matches_consumed_config_bytes(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_bytes(b'{"N": 8, "T": 0.05, "samples": 2, "eps": [0.1]}\n')
    assert run(tmp_path, "converge", str(cfg)) == 0
    m = manifest(tmp_path / "out", "converge")
    assert m["config_sha256"] == hashlib.sha256(cfg.read_bytes()).hexdigest()
    assert m["config_path"] == str(cfg)


def test_config_errors_exit_2_with_line_anchor(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "N": 8,\n  "bogus": 1\n}\n')
    assert run(tmp_path, "converge", str(cfg)) == 2
    assert "bad.json:3: " in capsys.readouterr().err
    cfg.write_text('{\n  "N": 8\n  "T": 1\n}\n')
    assert run(tmp_path, "converge", str(cfg)) == 2
    assert "bad.json:3:" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_inadmissible_coefficients_exit_3_naming_margin(tmp_path, capsys):
    code = run(tmp_path, "converge", *FAST, "--set", "coefficients.name=\"saturating\"",
               "--set", "coefficients.params={\"kappa\": 1.0, \"L_sigma2\": 1.0}")
    assert code == 3
    err = capsys.readouterr().err
    assert "margin" in err and "= -1" in err


def test_resume_with_other_config_exits_4(tmp_path):
    ckpt = _interrupted(tmp_path, "a")
    assert run(tmp_path, "simulate", *FAST, "--samples", "2", "--seed", "9", "--steps", "100",
               "--resume", str(ckpt), out="a") == 4
    assert run(tmp_path, "simulate", "--set", "N=12", "--set", "T=0.05", "--samples", "2", "--steps", "100",
               "--resume", str(ckpt), out="a") == 4


def test_resume_without_partial_output_exits_4(tmp_path):
    ckpt = _interrupted(tmp_path, "a")
    (tmp_path / "a" / "run.simulate.csv.partial").unlink()
    assert run(tmp_path, "simulate", *FAST, "--samples", "2", "--steps", "100", "--resume", str(ckpt), out="a") == 4


def test_corrupted_advection_exits_5(tmp_path, monkeypatch):
    monkeypatch.setattr(diagnostics, "_advection", diagnostics.miscomponent_advection)
    code = run(tmp_path, "diag", "inequalities", "--set", "diagnostics.inequalities.n_samples=200")
    assert code == 5
    summary = json.loads((tmp_path / "out" / "run.diag-inequalities.json").read_text())
    assert summary["violations"] > 0 and not summary["passed"]
    assert manifest(tmp_path / "out", "diag-inequalities")["exit_status"] == 5


def test_sound_advection_passes_inequalities(tmp_path):
    assert run(tmp_path, "diag", "inequalities", "--set", "diagnostics.inequalities.n_samples=200") == 0


# -- subcommands --------------------------------------------------------------------


def test_fbar_on_decoupled_set_is_f0(tmp_path):
    assert run(tmp_path, "fbar", "--set", "N=16", "--set", "coefficients.name=\"decoupled\"") == 0
    x, fb = read_nsef(tmp_path / "out" / "run.fbar.nsef")
    cs = builtin("decoupled")
    np.testing.assert_array_equal(fb, cs.averaged_drift(x))
    assert json.loads((tmp_path / "out" / "run.fbar.json").read_text())["mode"] == "closed_form"


@pytest.mark.parametrize("which", ["increments", "auxgap", "moments"])
def test_diag_tables_are_written(tmp_path, which):
    assert run(tmp_path, "diag", which, *FAST, "--samples", "2", "--eps", "0.1,0.01") == 0
    assert (tmp_path / "out" / f"run.diag-{which}.csv").stat().st_size > 0


def test_ergodicity_reports_positive_rate(tmp_path):
    assert run(tmp_path, "ergodicity", "--set", "N=8", "--samples", "4") == 0
    meta = json.loads((tmp_path / "out" / "run.ergodicity.json").read_text())
    assert meta["rate"] == pytest.approx(1.0, rel=0.1)


# -- reproducibility ----------------------------------------------------------------


@pytest.mark.parametrize("command", [["converge"], ["simulate", "--steps", "20"], ["fbar"], ["diag", "auxgap"]])
def test_reruns_are_byte_identical(tmp_path, command):
    args = [*command, *FAST, "--eps", "0.1", "--samples", "2", "--seed", "7"]
    assert run(tmp_path, *args) == 0
    first = artifacts(tmp_path / "out")
    for p in (tmp_path / "out").iterdir():
        p.unlink()
    assert run(tmp_path, *args) == 0
    assert artifacts(tmp_path / "out") == first and first


def _interrupted(tmp_path, out, at=60):
    """Start a 100-step run checkpointing every 50 and deliver SIGTERM at step ``at``."""
    real = CoupledEnsemble.step

    def step(self, *a, **k):
        real(self, *a, **k)
        if self.step_index == at:
            signal.raise_signal(signal.SIGTERM)

    mp = pytest.MonkeyPatch()
    mp.setattr(CoupledEnsemble, "step", step)
    try:
        code = run(tmp_path, "simulate", *FAST, "--samples", "2", "--steps", "100", "--checkpoint-every", "50", out=out)
    finally:
        mp.undo()
    assert code == 128 + signal.SIGTERM
    return tmp_path / out / "run.simulate.checkpoint.json"


def test_checkpoint_resume_is_bit_exact(tmp_path):
    base = ["simulate", *FAST, "--samples", "2", "--steps", "100"]
    assert run(tmp_path, *base, out="whole") == 0

    ckpt = _interrupted(tmp_path, "cut")
    assert json.loads(ckpt.read_text())["step"] == 60
    assert manifest(tmp_path / "cut", "simulate")["exit_status"] == 128 + signal.SIGTERM
    assert not (tmp_path / "cut" / "run.simulate.csv").exists()
    assert run(tmp_path, *base, "--resume", str(ckpt), out="cut") == 0

    whole, cut = artifacts(tmp_path / "whole"), artifacts(tmp_path / "cut")
    assert sorted(cut) == ["run.simulate.csv", "run.simulate.json", "run.simulate.nsef"]
    assert cut == whole


def test_resume_from_scheduled_checkpoint_at_step_50(tmp_path):
    base = ["simulate", *FAST, "--samples", "2", "--steps", "100"]
    assert run(tmp_path, *base, out="whole") == 0
    ckpt = _interrupted(tmp_path, "fifty", at=50)
    assert json.loads(ckpt.read_text())["step"] == 50
    assert run(tmp_path, *base, "--resume", str(ckpt), out="fifty") == 0
    assert artifacts(tmp_path / "fifty") == artifacts(tmp_path / "whole")
    assert not ckpt.exists()
