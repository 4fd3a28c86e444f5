import csv
import hashlib
import json
import subprocess
import sys

import pytest

from biasreversal.cli import main

POPA_SWEEP = {
    "population": "pop_a",
    "rule": {"c": 0.45},
    "sweep": {"tau_grid": [0.0, 0.3, 0.45], "c_min": 0.45},
}


def _write(path, doc):
    path.write_text(json.dumps(doc, indent=2))
    return path


def _read_csv(path):
    return list(csv.DictReader(path.open()))


def test_sweep_pop_a_tables(tmp_path):
    cfg = _write(tmp_path / "pop-a-sweep.json", POPA_SWEEP)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = _read_csv(tmp_path / "o" / "sweep.csv")
    want = {"y_given_selected": [0.5, 0.4, 0.3], "s_full": [1 / 3, 2 / 3, 1.0],
            "ys_full": [1 / 6, 4 / 15, 0.3]}
    for ex, vals in want.items():
        got = [float(r["prediction"]) for r in rows
               if r["exercise"] == ex and r["x"] == "0" and r["r"] == "1"]
        assert got == pytest.approx(vals, abs=1e-12)
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["command"] == "sweep"
    for name, digest in man["artifacts"].items():
        assert hashlib.sha256((tmp_path / "o" / name).read_bytes()).hexdigest() == digest
    assert "sweep_s_full_top_share.svg" in man["artifacts"]


def test_manifest_rerun_identical_any_threads(tmp_path):
    doc = {"population": {"random": {"seed": 3, "n_x": 3, "n_u": 4}},
           "rule": {"c": 0.3, "noise": {"family": "logistic", "scale": 0.1}},
           "sweep": {"tau_grid": {"start": 0.0, "stop": 0.3, "num": 5}, "mode": "monte_carlo",
                     "n": 20000, "group_blind": [False, True]},
           "seed": 17}
    cfg = _write(tmp_path / "mc.json", doc)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--format", "csv"]) == 0
    assert main(["sweep", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b"),
                 "--threads", "4"]) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    assert (tmp_path / "a" / "mlr.json").read_bytes() == (tmp_path / "b" / "mlr.json").read_bytes()
    assert not (tmp_path / "b" / "sweep_s_full_top_share.svg").exists()   # format carried over


def test_seed_flag_overrides(tmp_path):
    doc = dict(POPA_SWEEP, sweep={"tau_grid": [0.0, 0.2], "mode": "monte_carlo", "n": 2000})
    cfg = _write(tmp_path / "c.json", doc)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 2
    assert (tmp_path / "a" / "sweep.csv").read_text() != (tmp_path / "b" / "sweep.csv").read_text()


def test_population_from_file_and_cells(tmp_path):
    cells = [{"x": 0, "u": u, "r": r, "mass": 0.25, "mu": 0.2 + 0.5 * u} for u in (0, 1) for r in (0, 1)]
    (tmp_path / "pop.json").write_text(json.dumps({"cells": cells}))
    a = _write(tmp_path / "a.json", {"population": {"path": "pop.json"}, "rule": {"c": 0.5}})
    b = _write(tmp_path / "b.json", {"population": {"cells": cells}, "rule": {"c": 0.5}})
    assert main(["sweep", "--config", str(a), "--out", str(tmp_path / "oa"), "--format", "csv"]) == 0
    assert main(["sweep", "--config", str(b), "--out", str(tmp_path / "ob"), "--format", "csv"]) == 0
    assert (tmp_path / "oa" / "sweep.csv").read_text() == (tmp_path / "ob" / "sweep.csv").read_text()


def test_malformed_json_line_reference(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "population": "pop_a",\n  "rule": {"c": 0.45,}\n}\n')
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert f"{bad}:3:" in capsys.readouterr().err


@pytest.mark.parametrize("doc, key, fragment", [
    ({"population": "pop_a", "rule": {"c": 1.5}}, None, "c must"),
    ({"population": "pop_a", "rule": {"c": 0.45}, "sweep": {"mode": "monte_carlo"}}, "mode", "seed"),
    ({"population": {"fixture": "pop_z"}, "rule": {"c": 0.45}}, "fixture", "pop_z"),
    ({"rule": {"c": 0.45}}, None, "population"),
    ({"population": "pop_a", "rule": {"c": 0.45}, "sweep": {"tau_grid": [0.3, 0.1]}}, None, "ascending"),
])
def test_validation_errors(tmp_path, capsys, doc, key, fragment):
    cfg = _write(tmp_path / "c.json", doc)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert fragment in err
    if key:
        line = next(i for i, t in enumerate(cfg.read_text().splitlines(), 1) if f'"{key}"' in t)
        assert f"c.json:{line}:" in err


def test_missing_config_file(tmp_path, capsys):
    assert main(["sweep", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert "cannot read" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_manifest_command_mismatch(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", POPA_SWEEP)
    main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert main(["generate", "--config", str(tmp_path / "o" / "manifest.json"), "--out", str(tmp_path / "g")]) == 1
    assert "written by" in capsys.readouterr().err


def test_property_violation_exit_code(tmp_path, monkeypatch):
    import biasreversal.cli as cli
    monkeypatch.setattr(cli, "check_properties", lambda res: ["forced"])
    cfg = _write(tmp_path / "c.json", POPA_SWEEP)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert (tmp_path / "o" / "manifest.json").exists()


def test_generate_then_sqf_from_csv(tmp_path):
    gen = _write(tmp_path / "g.json", {"n": 30000})
    assert main(["generate", "--config", str(gen), "--out", str(tmp_path / "g"), "--seed", "5"]) == 0
    stops = tmp_path / "g" / "stops.csv"
    assert stops.read_text().startswith("age,sex,build")
    cfg = _write(tmp_path / "s.json", {"data": {"csv": "g/stops.csv"},
                                       "pipeline": {"share_grid": [0.8, 0.9], "bootstrap": 5},
                                       "seed": 1})
    code = main(["sqf", "--config", str(cfg), "--out", str(tmp_path / "s")])
    assert code in (0, 2)
    assert (tmp_path / "s" / "figure1.csv").exists() and (tmp_path / "s" / "figure1.svg").exists()
    man = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert man["inputs"][str(stops.resolve())] == hashlib.sha256(stops.read_bytes()).hexdigest()
    assert main(["sqf", "--config", str(tmp_path / "s" / "manifest.json"), "--out", str(tmp_path / "s2"),
                 "--threads", "2"]) == code
    assert (tmp_path / "s" / "figure1.csv").read_bytes() == (tmp_path / "s2" / "figure1.csv").read_bytes()
    stops.write_text(stops.read_text() + "40,M,T,75,1400,B,N,N,N,N,N,N,N,N,N,N,N,\n")
    assert main(["sqf", "--config", str(tmp_path / "s" / "manifest.json"), "--out", str(tmp_path / "s3")]) == 1


def test_sqf_and_generate_need_seed(tmp_path, capsys):
    gen = _write(tmp_path / "g.json", {"n": 10})
    assert main(["generate", "--config", str(gen), "--out", str(tmp_path / "g")]) == 1
    assert "seed" in capsys.readouterr().err


def test_oracle_check_subset(tmp_path, monkeypatch, capsys):
    import biasreversal.oracle as oracle
    full = oracle._checks
    monkeypatch.setattr(oracle, "_checks", lambda: [c for c in full() if "POP-A tables" in c[0]])
    assert main(["oracle-check", "--out", str(tmp_path)]) == 0
    assert "PASS" in capsys.readouterr().out
    assert (tmp_path / "oracle_check.txt").exists()
    monkeypatch.setattr(oracle, "_checks", lambda: [("always fails", lambda: (False, "no"))])
    assert main(["oracle-check"]) == 2


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path / "c.json", POPA_SWEEP)
    out = subprocess.run([sys.executable, "-m", "biasreversal", "sweep", "--config", str(cfg),
                          "--out", str(tmp_path / "o"), "--format", "csv"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "sweep.csv" in out.stdout
