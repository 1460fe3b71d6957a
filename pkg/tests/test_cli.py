import json

import pytest
import yaml

from marsvid.cli import main
from marsvid.provider import MockScript
from marsvid.store import RunStore
from conftest import decision_json


def run(*argv):
    return main([str(a) for a in argv])


def cond_dirs(out):
    return sorted(p.parent for p in out.glob("*/run.json"))


def test_run_eval_report(tmp_path, manifest_path, capsys):
    out = tmp_path / "out"
    assert run("run", "--manifest", manifest_path, "--out", out, "--jobs", 2) == 0
    (cond,) = cond_dirs(out)
    assert len(RunStore(out)) == 40
    assert len((cond / "predictions.jsonl").read_text().splitlines()) == 10
    assert json.loads((out / "config.json").read_text())["strategy"]["name"] == "mars"

    assert run("eval", "--out", out) == 0
    first = (cond / "eval.json").read_bytes()
    table = capsys.readouterr().out
    assert "Acc" in table and "mars" in table
    assert run("eval", "--out", out) == 0
    assert (cond / "eval.json").read_bytes() == first

    capsys.readouterr()
    assert run("report", out, "--report", "machine") == 0
    assert json.loads(capsys.readouterr().out)


def test_rerun_makes_no_calls(tmp_path, manifest_path, capsys):
    out = tmp_path / "out"
    run("run", "--manifest", manifest_path, "--out", out, "--strategy", "simple")
    capsys.readouterr()
    run("run", "--manifest", manifest_path, "--out", out, "--strategy", "simple")
    assert "0 provider calls" in capsys.readouterr().out


def test_sweep_rows(tmp_path, manifest_path, capsys):
    out = tmp_path / "out"
    assert run("sweep", "--manifest", manifest_path, "--out", out, "--frames", "2,4,8", "--base-frames", 4) == 0
    text = capsys.readouterr().out
    for row in ("2 frames", "4 frames", "8 frames", "Full", "w/o ObjDesc", "w/o Assumption"):
        assert row in text
    assert len(cond_dirs(out)) == 5  # "Full" at 4 frames is shared with the frame sweep


def test_bad_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run("run", "--strategy", "bogus")
    assert exc.value.code == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert run("run", "--manifest", tmp_path / "missing.jsonl", "--out", tmp_path / "o") == 1
    assert "marsvid: error:" in capsys.readouterr().err
    assert run("eval", "--out", tmp_path / "empty") == 1


def test_config_file_with_flag_override(tmp_path, manifest_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"manifest": str(manifest_path), "out": str(tmp_path / "out"),
                                   "strategy": {"name": "cot", "frames": 4}}))
    assert run("run", "--config", cfg, "--frames", 2) == 0
    echoed = json.loads((tmp_path / "out" / "config.json").read_text())
    assert echoed["strategy"]["name"] == "cot" and echoed["strategy"]["frames"] == 2
    (cond,) = cond_dirs(tmp_path / "out")
    assert json.loads((cond / "run.json").read_text())["condition"]["frames_n"] == 2


def test_mock_script_and_decisions_redaction(tmp_path, manifest_path, capsys):
    script = MockScript()
    script.set("v000", "simple", decision_json("hateful", 0.9))
    path = tmp_path / "script.json"
    path.write_text(json.dumps(script.to_dict()))
    out = tmp_path / "out"
    run("run", "--manifest", manifest_path, "--out", out, "--strategy", "simple", "--mock-script", path)
    run("eval", "--out", out)
    capsys.readouterr()
    run("report", "--out", out, "--decisions")
    redacted = capsys.readouterr().out
    assert "scripted hateful" not in redacted and "v000" in redacted
    run("report", "--out", out, "--decisions", "--include-content")
    assert "scripted hateful" in capsys.readouterr().out


def test_replay_uses_stored_responses(tmp_path, manifest_path, capsys):
    src = tmp_path / "src"
    run("run", "--manifest", manifest_path, "--out", src, "--strategy", "simple")
    (cond,) = cond_dirs(src)
    assert run("run", "--manifest", manifest_path, "--out", tmp_path / "replayed", "--strategy", "simple",
               "--provider", "replay", "--replay-from", src) == 0
    (rcond,) = cond_dirs(tmp_path / "replayed")
    assert (rcond / "results.jsonl").read_bytes() == (cond / "results.jsonl").read_bytes()


def test_replay_miss_is_error(tmp_path, manifest_path, capsys):
    assert run("run", "--manifest", manifest_path, "--out", tmp_path / "r", "--strategy", "simple",
               "--provider", "replay", "--replay-from", tmp_path / "nothing") == 0
    (cond,) = cond_dirs(tmp_path / "r")
    assert len(json.loads((cond / "run.json").read_text())["errors"]) == 10


def test_sample(tmp_path, manifest_path, capsys):
    out = tmp_path / "out"
    assert run("sample", "--manifest", manifest_path, "--out", out, "--frames", 4) == 0
    assert len(list((out / "frames" / "v000").iterdir())) == 4
    assert len((out / "frames" / "manifest.jsonl").read_text().splitlines()) == 10
