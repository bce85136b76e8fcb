import json
import os
import subprocess
import sys

import pytest

from mulnoise import analysis, cli


def _run(tmp_path, command, cfg=None, extra=(), name="out"):
    argv = [command, "--out", str(tmp_path / name)]
    if cfg is not None:
        p = tmp_path / f"{command}.json"
        p.write_text(json.dumps(cfg))
        argv += ["--config", str(p)]
    code = cli.main(argv + list(extra))
    dirs = os.listdir(tmp_path / name) if (tmp_path / name).exists() else []
    return code, [tmp_path / name / d for d in dirs]


SIM = {"a": 1.42, "trials": 2000, "horizon": 30, "seed": 5}
CONV = {"trials": 50, "horizon": 20, "seed": 1,
        "probe": {"trials": 200, "horizon": 20, "M": [1.0, 100.0]}}


def test_thresholds(tmp_path, capsys):
    code, dirs = _run(tmp_path, "thresholds", None, ["--summary"])
    assert code == 0
    text = (dirs[0] / "thresholds.csv").read_text()
    assert text.startswith("quantity,value")
    assert "a_star" in capsys.readouterr().out


def test_simulate_deterministic(tmp_path):
    c1, d1 = _run(tmp_path, "simulate", SIM, name="r1")
    c2, d2 = _run(tmp_path, "simulate", SIM, name="r2", extra=["--threads", "3"])
    assert c1 == c2 == 0
    assert d1[0].name == d2[0].name
    for f in ("ensemble.csv", "summary.json", "config.json"):
        assert (d1[0] / f).read_bytes() == (d2[0] / f).read_bytes()
    summary = json.loads((d1[0] / "summary.json").read_text())
    assert summary["schema_version"] == 1


def test_seed_flag_overrides(tmp_path):
    _, d1 = _run(tmp_path, "simulate", SIM, name="r1")
    _, d2 = _run(tmp_path, "simulate", SIM, name="r2", extra=["--seed", "6"])
    assert d1[0].name != d2[0].name


def test_converse_deterministic(tmp_path):
    c1, d1 = _run(tmp_path, "converse", CONV, name="r1")
    c2, d2 = _run(tmp_path, "converse", CONV, name="r2")
    assert c1 == c2 == 0
    names = sorted(os.listdir(d1[0]))
    assert {"trace_0.csv", "psilem.csv", "kn_exceedance.csv", "instability_probe.csv",
            "summary.json"} <= set(names)
    for f in names:
        assert (d1[0] / f).read_bytes() == (d2[0] / f).read_bytes()


def test_verify_ok(tmp_path):
    code, dirs = _run(tmp_path, "verify", {"sigmas": [0.5, 1.0]})
    assert code == 0
    assert (dirs[0] / "certificates.csv").read_text().startswith("name,params,value,error,passed")


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    bad = [analysis.Certificate("gaussian_sgn_bound", "sigma=1", -1.0, 0.0, False)]
    monkeypatch.setattr(analysis, "run_certificates", lambda **kw: bad)
    code, _ = _run(tmp_path, "verify", {})
    assert code == 2


def test_sweep(tmp_path):
    code, dirs = _run(tmp_path, "sweep", {"trials": 4000, "horizon": 100, "width": 0.04})
    assert code == 0
    s = json.loads((dirs[0] / "summary.json").read_text())
    lo, hi = s["bracket"]
    assert lo <= 2 ** 0.5 <= hi


def test_clt(tmp_path):
    code, dirs = _run(tmp_path, "clt", {"a": 1.5, "horizons": [20, 40], "trials": 200,
                                        "calibration": 10000})
    assert code == 0
    assert (dirs[0] / "clt.csv").read_text().startswith("n,ks_pvalue,p_log_abs_above_n_quarter")


@pytest.mark.parametrize("command, cfg", [
    ("simulate", {"trails": 10}),
    ("simulate", {"strategy": {"kind": "bogus"}}),
    ("simulate", {"model": {"kind": "gaussian_mean_one", "sigma": -1}}),
    ("converse", {"constants": {"T": 2}}),
    ("thresholds", {"a": "big"}),
])
def test_bad_config_exit_one(tmp_path, command, cfg, capsys):
    code, _ = _run(tmp_path, command, cfg)
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_usage_error_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["nocommand"])
    assert exc.value.code == 1
    assert cli.main(["thresholds", "--threads", "0", "--out", str(tmp_path)]) == 1


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mulnoise", "thresholds", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert r.stdout.strip().startswith(str(tmp_path))
