import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from hyperstab.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out.strip(), out.err.strip()


def _write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_list_prints_every_builtin(capsys):
    code, out, _ = _run(capsys, "list")
    assert code == 0
    for name in ("transport", "f1ex1", "ex11", "example", "reactor2", "reactor3", "control", "bjj"):
        assert name in out


def test_extinction_reactor2(capsys, tmp_path):
    code, out, _ = _run(capsys, "extinction", "--config", str(CONFIGS / "reactor2_extinction.yaml"),
                        "--out", str(tmp_path / "r2"))
    assert code == 0
    assert "extinction order k=2" in out
    data = json.loads((tmp_path / "r2_extinction.json").read_text())
    assert data["order"] == 2


def test_spectrum_example(capsys, tmp_path):
    code, out, _ = _run(capsys, "spectrum", "--config", str(CONFIGS / "example_spectrum.yaml"),
                        "--out", str(tmp_path / "s"))
    assert code == 0
    assert "rightmost z=-1 " in out
    data = json.loads((tmp_path / "s_spectrum.json").read_text())
    assert data["quasi"]["rightmost_z"] == pytest.approx([-1.0, 0.0], abs=1e-12)


def test_simulate_transport(capsys, tmp_path):
    code, out, _ = _run(capsys, "simulate", "--config", str(CONFIGS / "transport_simulate.yaml"),
                        "--out", str(tmp_path / "t"))
    assert code == 0
    with open(tmp_path / "t_norms.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[-1]["l2"]) < 1e-10
    assert (tmp_path / "t_trajectory.csv").exists()
    summary = json.loads((tmp_path / "t_summary.json").read_text())
    assert summary["diverged"] is False


def test_reruns_are_byte_identical(capsys, tmp_path):
    for tag in ("a", "b"):
        assert _run(capsys, "extinction", "--config", str(CONFIGS / "bjj0_extinction.yaml"),
                    "--out", str(tmp_path / tag))[0] == 0
    assert (tmp_path / "a_extinction.json").read_bytes() == (tmp_path / "b_extinction.json").read_bytes()


def test_seed_override_changes_probes(capsys, tmp_path):
    _run(capsys, "extinction", "--config", str(CONFIGS / "bjj_perturbed_extinction.yaml"),
         "--out", str(tmp_path / "a"), "--seed", "1")
    _run(capsys, "extinction", "--config", str(CONFIGS / "bjj_perturbed_extinction.yaml"),
         "--out", str(tmp_path / "b"), "--seed", "2")
    a = json.loads((tmp_path / "a_extinction.json").read_text())
    b = json.loads((tmp_path / "b_extinction.json").read_text())
    assert a["order"] is None and b["order"] is None
    assert a["residuals"] != b["residuals"]


FAST = ["transport_simulate", "f1ex1_simulate", "example_spectrum", "example_classify",
        "reactor2_extinction", "reactor3_extinction", "control_simulate", "control_extinction",
        "bjj0_extinction", "bjj_perturbed_extinction", "bjj_simulate", "inline_simulate",
        "ex11_gamma", "example_stable_decay", "example_sweep", "reactor2_sweep", "ex11_stable_decay"]


@pytest.mark.parametrize("name", FAST)
def test_shipped_configs_run(capsys, tmp_path, name):
    import yaml
    action = yaml.safe_load((CONFIGS / f"{name}.yaml").read_text())["action"]
    code, out, err = _run(capsys, action, "--config", str(CONFIGS / f"{name}.yaml"),
                          "--out", str(tmp_path / name))
    assert code == 0, err
    assert out
    assert any(p.name.startswith(name) for p in tmp_path.iterdir())


def test_classify_csv(capsys, tmp_path):
    cfg = _write(tmp_path, "action: classify\nparams: {mus: [1.0], nus: [0.5, 4.0]}\n")
    assert _run(capsys, "classify", "--config", cfg, "--out", str(tmp_path / "c"))[0] == 0
    with open(tmp_path / "c_classification.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["class"] for r in rows] == ["stable", "unstable"]


def _assert_located(err, path, line, key):
    assert err.startswith(f"{path}:{line}:"), err
    assert f"[{key}]" in err


def test_bad_yaml_exits_2(capsys, tmp_path):
    cfg = _write(tmp_path, "action: simulate\nsystem: {builtin: transport\n")
    code, _, err = _run(capsys, "simulate", "--config", cfg)
    assert code == 2
    assert err.startswith(f"{cfg}:")


def test_unknown_key_located(capsys, tmp_path):
    cfg = _write(tmp_path, "action: simulate\nsystem: {builtin: transport}\nbogus: 1\n")
    code, _, err = _run(capsys, "simulate", "--config", cfg)
    assert code == 2
    _assert_located(err, cfg, 3, "bogus")


def test_bad_expression_located(capsys, tmp_path):
    cfg = _write(tmp_path, "action: simulate\nsystem: {builtin: transport}\n"
                           "grid: {nx: 11, cfl: 1.0}\ntime: {tau: 0, t_end: 0.5}\n"
                           "initial: [\"sin(pi*x\"]\n")
    code, _, err = _run(capsys, "simulate", "--config", cfg)
    assert code == 2
    assert f"{cfg}:5:" in err


def test_missing_key_reported(capsys, tmp_path):
    cfg = _write(tmp_path, "action: simulate\nsystem: {builtin: transport}\n"
                           "grid: {nx: 11, cfl: 1.0}\ninitial: [\"0\"]\n")
    code, _, err = _run(capsys, "simulate", "--config", cfg)
    assert code == 2
    assert "[time.t_end] missing required key" in err


def test_missing_builtin_parameter(capsys, tmp_path):
    cfg = _write(tmp_path, "action: extinction\nsystem: {builtin: reactor2, params: {mu: 1.0}}\n")
    code, _, err = _run(capsys, "extinction", "--config", cfg)
    assert code == 2
    assert "system" in err


def test_action_mismatch(capsys, tmp_path):
    code, _, err = _run(capsys, "simulate", "--config", str(CONFIGS / "reactor2_extinction.yaml"))
    assert code == 2
    assert "[action]" in err


def test_missing_config_file(capsys, tmp_path):
    code, _, err = _run(capsys, "simulate", "--config", str(tmp_path / "nope.yaml"))
    assert code == 2
    assert "cannot read config" in err


def test_blowup_is_not_an_error(capsys, tmp_path):
    cfg = _write(tmp_path, "action: simulate\nsystem: {builtin: ex11, params: {nu: 30.0}}\n"
                           "grid: {nx: 41, cfl: 1.0}\ntime: {tau: 0, t_end: 40}\n"
                           "initial: [\"sin(pi*x)\", \"0\"]\n")
    code, out, _ = _run(capsys, "simulate", "--config", cfg, "--out", str(tmp_path / "b"))
    assert code == 0
    assert json.loads((tmp_path / "b_summary.json").read_text())["diverged"] is True


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hyperstab", "list"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "reactor3" in res.stdout
