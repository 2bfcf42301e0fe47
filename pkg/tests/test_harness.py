import csv
import json
import math

import numpy as np
import pytest

from ima_bss import __version__
from ima_bss.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, main
from ima_bss.errors import ConfigError
from ima_bss.harness import KINDS, list_experiments, parse_config_text, resolve_threads, run_experiment, validate
from ima_bss.harness import experiments
from ima_bss.harness.experiments import Task

TINY_TRAIN = {"iterations": 20, "batch_size": 64}
TINY_DATA = {"n_train": 200, "n_test": 100}
TINY_FLOW = {"n_blocks": 2, "hidden": 8}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return p


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tiny_darmois(seeds=(0, 1)):
    return {
        "kind": "darmois-cima",
        "seeds": list(seeds),
        "train": TINY_TRAIN,
        "data": TINY_DATA,
        "flow": TINY_FLOW,
        "contrast": {"n_samples": 40},
    }


def test_list_experiments(capsys):
    text = list_experiments()
    for k in KINDS:
        assert k in text
    assert len(KINDS) == 6
    assert main(["list-experiments"]) == EXIT_OK
    out = capsys.readouterr().out
    assert all(k in out for k in KINDS)


def test_validate_missing_seeds(tmp_path, capsys):
    with pytest.raises(ConfigError) as info:
        validate({"kind": "mlp-depth"})
    assert info.value.field == "seeds"
    p = _write(tmp_path, {"kind": "mlp-depth"})
    assert main(["validate", str(p)]) == EXIT_CONFIG
    assert "seeds" in capsys.readouterr().err


def test_validate_negative_lambda_is_range_error(tmp_path, capsys):
    text = '{\n  "kind": "regularized-mle",\n  "seeds": [0],\n  "lambdas": [0.0, -1.0]\n}\n'
    with pytest.raises(ConfigError) as info:
        validate(parse_config_text(text), text)
    assert "range error" in str(info.value)
    assert info.value.line == 4
    text = '{\n  "kind": "darmois-cima",\n  "seeds": [0],\n  "train": {\n    "lam": -0.5\n  }\n}\n'
    p = tmp_path / "neg.json"
    p.write_text(text)
    assert main(["validate", str(p)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert f"{p}:5:" in err and "range error" in err


@pytest.mark.parametrize(
    "cfg, field",
    [
        ({"kind": "nope", "seeds": [0]}, "kind"),
        ({"kind": "mlp-depth", "seeds": [0, 0]}, "seeds"),
        ({"kind": "mlp-depth", "seeds": [-1]}, "seeds"),
        ({"kind": "mlp-depth", "seeds": [0], "colour": "red"}, "colour"),
        ({"kind": "mpa-sweep", "seeds": [0], "n": 3}, "n"),
        ({"kind": "darmois-cima", "seeds": [0], "mixing": {"kind": "moebius", "eps": 1}}, "eps"),
        ({"kind": "darmois-cima", "seeds": [0], "flow": {"n_sublayers": 1}}, "n_sublayers"),
        ({"kind": "darmois-cima", "seeds": [0], "train": {"base": "cauchy"}}, "base"),
        ({"kind": "mlp-depth", "seeds": [0], "depths": [0, 2]}, "depths"),
        ({"kind": "polar-check", "seeds": [0], "R": -1}, "R"),
    ],
)
def test_validate_rejects(cfg, field):
    with pytest.raises(ConfigError) as info:
        validate(cfg)
    assert field in str(info.value)


def test_invalid_json_is_line_anchored(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "kind": "mlp-depth",\n  "seeds": [0,]\n}\n')
    assert main(["validate", str(p)]) == EXIT_CONFIG
    assert f"{p}:3:" in capsys.readouterr().err


def test_validate_runs_no_numerics(tmp_path, monkeypatch):
    def boom(cfg):
        raise AssertionError("validate must not build tasks")

    for k in KINDS:
        monkeypatch.setitem(experiments.TASKS, k, boom)
    assert main(["validate", str(_write(tmp_path, tiny_darmois()))]) == EXIT_OK


def test_defaults_are_filled():
    cfg = validate({"kind": "regularized-mle", "seeds": [1]})
    assert cfg["lambdas"] == [0.0, 1.0]
    assert cfg["train"]["base"] == "standard-logistic"
    assert cfg["flow"]["n_blocks"] == 8


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv("IMA_BSS_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("IMA_BSS_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    with pytest.raises(ValueError):
        resolve_threads(0)


def test_darmois_run_is_reproducible_and_ordered(tmp_path):
    cfg = tiny_darmois(seeds=(3, 1, 2))
    p = _write(tmp_path, cfg)
    assert main(["run", str(p), "--out", str(tmp_path / "a"), "--threads", "1"]) == EXIT_OK
    assert main(["run", str(p), "--out", str(tmp_path / "b"), "--threads", "3"]) == EXIT_OK
    a = (tmp_path / "a" / "rows.csv").read_bytes()
    assert a == (tmp_path / "b" / "rows.csv").read_bytes()
    rows = _rows(tmp_path / "a" / "rows.csv")
    assert [r["seed"] for r in rows] == ["1", "2", "3"]
    for r in rows:
        assert float(r["cima_darmois"]) > 0
        assert math.isfinite(float(r["igci"]))
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["version"] == __version__
    assert report["config"]["train"]["iterations"] == 20
    assert report["status"] == "ok"
    assert report["aggregates"]["darmois"]["rows"] == 3
    assert (tmp_path / "a" / "panel_cima_hist.csv").exists()


def test_seeds_override(tmp_path):
    p = _write(tmp_path, {"kind": "mlp-depth", "seeds": [0], "contrast": {"n_samples": 100}})
    assert main(["run", str(p), "--out", str(tmp_path / "o"), "--seeds-override", "4,5,6"]) == EXIT_OK
    rows = _rows(tmp_path / "o" / "rows.csv")
    # row count = conditions x seeds
    assert len(rows) == 2 * 3
    assert [(r["condition"], r["seed"]) for r in rows] == [
        ("L=2", "4"), ("L=2", "5"), ("L=2", "6"), ("L=4", "4"), ("L=4", "5"), ("L=4", "6")
    ]


def test_failed_run_flushes_partial_results(tmp_path, monkeypatch, capsys):
    real = experiments.TASKS["mlp-depth"]

    def flaky(cfg):
        tasks = real(cfg)

        def explode():
            raise FloatingPointError("synthetic failure")

        return [Task(t.condition, t.seed, explode) if t.seed == 1 else t for t in tasks]

    monkeypatch.setitem(experiments.TASKS, "mlp-depth", flaky)
    p = _write(tmp_path, {"kind": "mlp-depth", "seeds": [0, 1], "contrast": {"n_samples": 100}})
    out = tmp_path / "o"
    assert main(["run", str(p), "--out", str(out)]) == EXIT_FAILED
    assert "synthetic failure" in capsys.readouterr().err
    rows = _rows(out / "rows.csv")
    assert sorted(r["seed"] for r in rows) == ["0", "0"]
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "failed" and report["n_completed"] == 2 and report["n_tasks"] == 4


def test_mpa_sweep_panel(tmp_path):
    cfg = validate({"kind": "mpa-sweep", "seeds": [0], "theta_points": 8, "contrast": {"n_samples": 2000}})
    report = run_experiment(cfg, tmp_path)
    curve = _rows(tmp_path / "panel_theta_curve.csv")
    assert len(curve) == 8 and len(report["rows"]) == 8
    vals = np.array([float(r["cima"]) for r in curve])
    assert np.all(np.abs(vals[::2]) <= 1e-6)   # theta = k pi / 2
    assert vals[1] > 0.05                      # theta = pi / 4
    np.testing.assert_allclose(vals[:4], vals[4:], atol=1e-12)


def test_regularized_mle_table(tmp_path):
    cfg = validate({
        "kind": "regularized-mle", "seeds": [0], "train": TINY_TRAIN, "data": TINY_DATA,
        "flow": TINY_FLOW, "contrast": {"n_samples": 100},
    })
    report = run_experiment(cfg, tmp_path)
    conds = [r["condition"] for r in report["rows"]]
    assert conds == ["lambda=0", "lambda=1"]
    for r in report["rows"]:
        for k in ("mcc", "n_amari", "kl", "cima"):
            assert math.isfinite(r[k])
    assert set(report["aggregates"]["lambda=1"]) >= {"mcc", "n_amari", "kl"}


def test_polar_and_properties_runs(tmp_path):
    rep = run_experiment(validate({"kind": "polar-check", "seeds": [0]}), tmp_path / "polar")
    by_variant = {r["variant"]: r for r in rep["rows"]}
    assert abs(by_variant["simplified"]["marginal_mass"] - 1) < 1e-4
    assert by_variant["exact"]["integrand_min"] >= 0
    assert abs(by_variant["exact"]["true_cima_mc"]) <= 1e-12
    rep = run_experiment(validate({"kind": "properties", "seeds": [0], "n_matrices": 500}), tmp_path / "props")
    assert len(rep["rows"]) == 9 and all(r["passed"] for r in rep["rows"])
