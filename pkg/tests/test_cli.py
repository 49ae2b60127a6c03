from __future__ import annotations

import hashlib
import subprocess
import sys

import pytest

from mfchaos.chaos import fit_rate
from mfchaos.cli import main
from mfchaos.measures import RateTable

WEAK = """\
model: linear-mean-field
statistic: weak
N_list: [8, 32, 128]
R: 300
M: 1024
dt: 0.05
seed: 11
"""


def manifest(out):
    lines = (out / "manifest.txt").read_text().splitlines()
    return dict(line.split(": ", 1) for line in lines)


@pytest.fixture
def weak_cfg(tmp_path):
    path = tmp_path / "weak.yaml"
    path.write_text(WEAK)
    return path


def test_chaos_weak_is_byte_reproducible(tmp_path, weak_cfg):
    runs = []
    for i, threads in enumerate((1, 4)):
        out = tmp_path / f"run{i}"
        assert main(["chaos-weak", "--config", str(weak_cfg), "--out", str(out), "--threads", str(threads)]) == 0
        runs.append(out)
    a, b = ((r / "chaos_weak_table.csv").read_bytes() for r in runs)
    assert a == b
    m = manifest(runs[0])
    canon = (runs[0] / "config.canonical.yaml").read_bytes()
    assert m["config_hash"] == hashlib.sha256(canon).hexdigest()
    assert m["seed"] == "11" and m["verdict_0"] == "pass" and m["command"] == "chaos-weak"
    assert (runs[0] / "chaos_weak_plot.csv").read_text().splitlines()[0] == "logN,logError,fit"


def test_seed_flag_overrides_config(tmp_path, weak_cfg):
    out = tmp_path / "o"
    assert main(["chaos-weak", "--config", str(weak_cfg), "--out", str(out), "--seed", "5"]) == 0
    assert manifest(out)["seed"] == "5"
    assert "seed: 5" in (out / "config.canonical.yaml").read_text()


def test_parametrix_check_constant_passes(tmp_path):
    assert main(["parametrix-check", "--out", str(tmp_path)]) == 0
    assert "verdict: pass" in (tmp_path / "parametrix_check_summary.txt").read_text()


def test_pde_residual_constant_passes(tmp_path):
    assert main(["pde-residual", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "pde_residual_residual.txt").read_text()
    assert text.startswith("verdict: pass")


def test_rates_matches_fit_rate(tmp_path):
    table = RateTable()
    for n, e in ((16, 0.07), (64, 0.02), (256, 0.004), (1024, 0.0011)):
        table.add(n, e, e / 10)
    table.to_csv(tmp_path / "t.csv")
    assert main(["rates", str(tmp_path / "t.csv"), "--out", str(tmp_path)]) == 0
    fields = dict(line.split(": ", 1) for line in (tmp_path / "rates_fit.txt").read_text().splitlines())
    assert float(fields["slope"]) == fit_rate(RateTable.from_csv(tmp_path / "t.csv")).slope


def test_failing_verdict_exits_one(tmp_path):
    table = RateTable()
    for n, e in ((16, 0.07), (64, 0.02), (256, 0.004)):
        table.add(n, e, 0.0)
    table.to_csv(tmp_path / "t.csv")
    assert main(["rates", str(tmp_path / "t.csv"), "--out", str(tmp_path), "--expected", "0.0"]) == 1
    assert manifest(tmp_path)["verdict_0"] == "fail"


def test_bad_config_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(WEAK.replace("N_list", "NN_list"))
    assert main(["chaos-weak", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "status: error" in err and "NN_list" in err


def test_statistic_mismatch_rejected(tmp_path, weak_cfg):
    assert main(["chaos-path", "--config", str(weak_cfg), "--out", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mfchaos.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("mfchaos ")
