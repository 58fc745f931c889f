import json

import pytest

from wasd.cli import EXIT_OK, EXIT_PARTIAL, EXIT_RUNTIME, EXIT_USAGE, main
from wasd.model import PlantedModel, PlantedModelSpec
from wasd.search import Rule

from conftest import CONFIGS, DATA, ROOT


@pytest.fixture(autouse=True)
def _in_root(monkeypatch):
    monkeypatch.chdir(ROOT)
    monkeypatch.delenv("WASD_OUTPUT_DIR", raising=False)


def _run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out), "--quiet"])
    return code, out


def _artifact(out, stem):
    return json.loads((out / f"{stem}.json").read_text())


def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


STALL = PlantedModel(PlantedModelSpec(16, 6, ((1, 0.9), (4, 0.9)), 2, 280)).to_spec()


def test_explain_planted_matches_golden(tmp_path):
    code, out = _run(tmp_path, "explain", "--config", str(CONFIGS / "planted_explain.json"))
    assert code == EXIT_OK
    golden = json.loads((DATA / "expected_planted_rules.json").read_text())["rules"]
    res = _artifact(out, "explain")["result"]["results"]
    assert len(res) == 50
    for r in res:
        assert Rule.from_json(r["rule"]).neurons() == Rule.from_json(golden[str(r["instance"])]).neurons()
    assert (out / "explain.txt").read_text().startswith("# instance 0")
    assert set(json.loads((out / "explain.timing.json").read_text())) == {"wall_time_s", "parallelism"}


def test_repeat_runs_identical(tmp_path):
    argv = ["explain", "--config", str(CONFIGS / "planted_explain.json"), "--instance", "3"]
    _, a = _run(tmp_path, *argv, name="a")
    _, b = _run(tmp_path, *argv, "--parallelism", "4", name="b")
    assert (a / "explain.json").read_bytes() == (b / "explain.json").read_bytes()


def test_missing_files_are_usage_errors(tmp_path):
    assert _run(tmp_path, "explain", "--suite", "nope.json")[0] == EXIT_USAGE
    assert _run(tmp_path, "explain", "--config", "nope.json")[0] == EXIT_USAGE
    bad = _write(tmp_path, "bad.json", {"tau": 0.9, "colour": "red"})
    assert _run(tmp_path, "explain", "--config", bad)[0] == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["explain", "--tau", "high"])
    assert e.value.code == EXIT_USAGE


def test_malformed_rule(tmp_path):
    bad = _write(tmp_path, "rule.json", {"rule": [{"layer": 0}]})
    assert _run(tmp_path, "intervene", "--rule", bad, "--prompt", "1,2")[0] == EXIT_USAGE
    assert _run(tmp_path, "intervene", "--prompt", "1,2")[0] == EXIT_USAGE


def test_partial_exit_code(tmp_path):
    cfg = _write(tmp_path, "c.json", {"model": STALL, "prompt": [5, 10, 3], "max_edits": 1,
                                      "attributor": "planted_exact"})
    code, out = _run(tmp_path, "explain", "--config", cfg)
    assert code == EXIT_PARTIAL
    assert _artifact(out, "explain")["result"]["all_reached_tau"] is False
    assert _run(tmp_path, "explain", "--config", cfg, "--allow-partial")[0] == EXIT_OK


def test_intervene_planted(tmp_path):
    model = PlantedModel(PlantedModelSpec(16, 6, ((1, 0.9), (4, 0.9)), 2, 280))
    rule = _write(tmp_path, "rule.json", {"rule": Rule.from_json(
        [{"layer": 0, "channel": c, "pos_from_end": 0, "value": 1.0} for c in (1, 4)]).to_json()})
    cfg = _write(tmp_path, "c.json", {"model": STALL, "prompt": [0, 0, 1]})
    code, out = _run(tmp_path, "intervene", "--config", cfg, "--rule", rule, "--steps", "6")
    assert code == EXIT_OK
    assert _artifact(out, "intervene")["result"]["outputs"][0]["tokens"] == [2] * 6
    empty = _write(tmp_path, "empty.json", [])
    _, out = _run(tmp_path, "intervene", "--config", cfg, "--rule", empty, "--steps", "3", name="e")
    seq, plain = [0, 0, 1], []
    for _ in range(3):
        plain.append(model.forward(seq).next_token)
        seq.append(plain[-1])
    assert _artifact(out, "intervene")["result"]["outputs"][0]["tokens"] == plain


def test_oracle(tmp_path):
    code, out = _run(tmp_path, "oracle", "--config", str(CONFIGS / "planted_explain.json"), "--instance", "1")
    assert code == EXIT_OK
    r = _artifact(out, "oracle")["result"]["results"][0]
    assert r["found"] and r["size"] == 3
    assert _run(tmp_path, "oracle", "--config", str(CONFIGS / "planted_explain.json"), "--instance", "1",
                "--oracle-bound", "2")[0] == EXIT_RUNTIME
    # a non-planted oracle run needs an enumerated neighborhood
    assert _run(tmp_path, "oracle", "--prompt", "1,2,3")[0] == EXIT_USAGE


def test_experiment_table(tmp_path):
    suite = json.loads((DATA / "planted_suite.json").read_text())
    suite["instances"] = suite["instances"][:5]
    small = _write(tmp_path, "s.json", suite)
    code, out = _run(tmp_path, "experiment", "--config", str(CONFIGS / "planted_experiment.json"), "--suite", small)
    assert code == EXIT_OK
    header = (out / "experiment.txt").read_text().splitlines()[0].split()
    assert header == ["Method", "Task", "Precision", "Instability", "Size"]
    assert _artifact(out, "experiment")["result"]["summary"]["wasd"]["precision"] == 1.0


def test_config_precedence(tmp_path):
    cfg = _write(tmp_path, "c.json", {"model": {"kind": "toy", "seed": 42}, "prompt": [1, 2, 3], "tau": 0.8,
                                      "lam": 2.0, "perturb": {"sample_count": 20}})
    _, out = _run(tmp_path, "explain", "--config", cfg, "--tau", "0.7", "--allow-partial")
    c = _artifact(out, "explain")["config"]
    assert (c["tau"], c["lam"]) == (0.7, 2.0)  # flag beats file, file beats defaults
    assert c["perturb"]["sample_count"] == 20 and c["perturb"]["per_position_edit_prob"] == 0.3
    assert c["max_edits"] is None


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("WASD_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["grid-search", "--prompt", "1,2,3", "--samples", "10", "--lambda-grid", "1,6.5", "--quiet"]) == 0
    body = json.loads((tmp_path / "env" / "grid_search.json").read_text())["result"]
    assert [r["lambda"] for r in body["table"]] == [1.0, 6.5]
