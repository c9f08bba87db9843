import json

import pytest

from prefcal.cli import main
from prefcal.config import DEFAULTS, build_config, flat_defaults, load_config
from prefcal.errors import ConfigError


def test_defaults_build():
    cfg = build_config()
    assert cfg.seed == 42 and cfg.hybrid.K == 20 and cfg.rating.mu0 == 25.0
    assert cfg.temps.observer == 0.3 and cfg.search.trials == 15


def test_every_violation_listed():
    with pytest.raises(ConfigError) as info:
        build_config({"bogus": 1, "data": {"ratio": 1.5}, "scoring": {"mode": 9}, "hybrid": {"tau": 2}})
    text = str(info.value)
    for part in ("bogus", "data.ratio", "scoring.mode", "hybrid.tau"):
        assert part in text


def test_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(p)


def test_overrides_merge(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"paths": {"out_dir": "x"}}), encoding="utf-8")
    cfg = load_config(p, {"paths": {"comparisons": "v.csv"}, "seed": 7})
    assert cfg.section("paths")["out_dir"] == "x" and cfg.section("paths")["comparisons"] == "v.csv"
    assert cfg.seed == 7


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        main(["run", "--help"])
    out = capsys.readouterr().out
    for key, value in flat_defaults(DEFAULTS):
        assert f"{key} = {json.dumps(value)}" in out


@pytest.fixture
def synth_dir(tmp_path):
    assert main(["synth", "--out", str(tmp_path)]) == 0
    return tmp_path


def _run(d, *args):
    return main([args[0], "--config", str(d / "config.json"), *args[1:]])


def test_run_writes_report(synth_dir, capsys):
    assert _run(synth_dir, "run") == 0
    report = json.loads((synth_dir / "run" / "report.json").read_text())
    assert set(report["categories"]) == set(DEFAULTS["categories"])
    assert "Avg" in capsys.readouterr().out


def test_rerun_is_idempotent(synth_dir):
    assert _run(synth_dir, "run") == 0
    run = synth_dir / "run"
    before = {p: (p.read_bytes(), p.stat().st_mtime_ns) for p in run.rglob("*") if p.is_file()}
    assert _run(synth_dir, "run") == 0
    after = {p: (p.read_bytes(), p.stat().st_mtime_ns) for p in run.rglob("*") if p.is_file()}
    assert before == after


def test_missing_artifact_names_producer(synth_dir, capsys):
    assert _run(synth_dir, "calibrate", "--category", "safety") == 1
    assert "score" in capsys.readouterr().err


def test_stages_in_order(synth_dir):
    for stage in ("ingest", "rate", "mine", "score", "calibrate", "evaluate"):
        assert _run(synth_dir, stage, "--category", "lively") == 0
    assert (synth_dir / "run" / "lively" / "evaluate" / "report.json").exists()


def test_mine_keeps_existing_unless_forced(synth_dir):
    for stage in ("ingest", "rate", "mine"):
        assert _run(synth_dir, stage, "--category", "safety") == 0
    dims = synth_dir / "run" / "safety" / "mine" / "dimensions.json"
    mtime = dims.stat().st_mtime_ns
    assert _run(synth_dir, "mine", "--category", "safety") == 0
    assert dims.stat().st_mtime_ns == mtime
    assert _run(synth_dir, "mine", "--category", "safety", "--force") == 0


def test_sweep_rows(synth_dir, capsys):
    assert _run(synth_dir, "run", "--category", "safety") == 0
    capsys.readouterr()
    assert _run(synth_dir, "sweep", "--category", "safety", "--param", "K", "--values", "10,20,30,50") == 0
    doc = json.loads((synth_dir / "run" / "sweep" / "K.json").read_text())
    assert [r["value"] for r in doc["rows"]] == [10, 20, 30, 50]
    assert len(capsys.readouterr().out.strip().splitlines()) == 5


def test_sweep_rejects_bad_values(synth_dir):
    assert _run(synth_dir, "run", "--category", "safety") == 0
    assert _run(synth_dir, "sweep", "--category", "safety", "--param", "K", "--values", "a,b") == 1


def test_optimize_and_resume(synth_dir, capsys):
    for stage in ("ingest", "rate"):
        assert _run(synth_dir, stage, "--category", "safety") == 0
    capsys.readouterr()
    assert _run(synth_dir, "optimize", "--category", "safety") == 0
    first = capsys.readouterr().out
    trials = sorted((synth_dir / "run" / "optimize" / "trials").glob("trial_*.json"))
    assert trials
    assert _run(synth_dir, "optimize", "--category", "safety", "--resume") == 0
    assert capsys.readouterr().out.splitlines()[1] == first.splitlines()[1]
    assembly = json.loads((synth_dir / "run" / "optimize" / "assembly.json").read_text())
    assert assembly["safety"]["status"] == "ok"


def test_config_error_exit(synth_dir, capsys):
    cfg = json.loads((synth_dir / "config.json").read_text())
    cfg["hybrid"] = {"K": 0}
    (synth_dir / "config.json").write_text(json.dumps(cfg))
    assert _run(synth_dir, "run") == 1
    assert "K" in capsys.readouterr().err


def test_http_without_key_is_backend_error(synth_dir, monkeypatch, capsys):
    monkeypatch.delenv("PREFCAL_API_KEY", raising=False)
    cfg = json.loads((synth_dir / "config.json").read_text())
    cfg["backend"]["kind"] = "http"
    (synth_dir / "config.json").write_text(json.dumps(cfg))
    assert _run(synth_dir, "run", "--category", "safety") == 3
    assert "PREFCAL_API_KEY" in capsys.readouterr().err


def test_missing_input_file(tmp_path, capsys):
    (tmp_path / "config.json").write_text("{}")
    assert _run(tmp_path, "ingest") in (1, 2)
    assert "comparisons.csv" in capsys.readouterr().err
