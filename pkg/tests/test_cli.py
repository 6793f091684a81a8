import json
import subprocess
import sys

import pytest

from glauber_exclusion.cli import config_hash, main


def run(args, capsys):
    code = main(args)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_classify_reports_regime(capsys):
    code, out, _ = run(["classify", "--gamma", "0.25"], capsys)
    assert code == 0
    data = json.loads(out)
    assert data["regime"] == "High"
    assert data["R_coeffs"] == pytest.approx([0.0, -1.0, 0.0, -0.125])
    assert data["_meta"]["seed"] == 0


def test_hydro_output_has_header_and_is_reproducible(capsys):
    args = ["hydro", "--T", "0.05", "--step", "0.01"]
    code, first, _ = run(args, capsys)
    _, second, _ = run(args, capsys)
    assert code == 0 and first == second
    lines = first.splitlines()
    assert lines[0].startswith("# glauber_exclusion ") and "seed=0" in lines[0]
    assert lines[1] == "t,rho_plus,rho_minus,phi,theta"
    assert len(lines) == 8


def test_mix_is_byte_identical_across_runs(tmp_path, capsys):
    args = ["mix", "--L", "8", "--times", "0.5,1", "--reps", "20", "--seed", "4"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b), "--workers", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert b"t_mix_lower_point" in a.read_bytes()


def test_seed_changes_header(capsys):
    _, a, _ = run(["hydro", "--T", "0.02", "--seed", "1"], capsys)
    _, b, _ = run(["hydro", "--T", "0.02", "--seed", "2"], capsys)
    assert a.splitlines()[0] != b.splitlines()[0]


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


@pytest.mark.parametrize("args", [
    ["mix", "--L", "8", "--times", "2,1"],
    ["hydro", "--model", "no-such-model.json"],
    ["classify", "--model", "demasi", "--d", "2"],
    ["mix", "--times", "1"],
])
def test_configuration_errors_exit_2(args, capsys):
    code, _, _ = run(args, capsys)
    assert code == 2


def test_runtime_guard_exits_3(capsys):
    code, _, err = run(["mix", "--L", "100000", "--times", "1"], capsys)
    assert code == 3 and "runtime guard" in err


def test_anticoncentration_exact_mode(capsys):
    code, out, _ = run(["anticonc", "--L", "16,32", "--exact"], capsys)
    assert code == 0
    assert len([ln for ln in out.splitlines() if not ln.startswith("#")]) == 3


def test_regions_and_dual_run(capsys):
    assert run(["regions", "--L", "16", "--times", "0,0.5"], capsys)[0] == 0
    assert run(["dual", "--times", "0.5", "--reps", "200"], capsys)[0] == 0


def test_console_script_module_entry():
    proc = subprocess.run([sys.executable, "-m", "glauber_exclusion.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout
