from __future__ import annotations

import json
import os

import pytest

from riskloop.cli import main
from riskloop.trace import read_trace


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle)


@pytest.fixture
def workdir(tmp_path):
    config = {"budget": 80.0, "seed": 5, "initial_temperature": 0.5}
    _write_json(tmp_path / "config.json", config)
    tasks = {"kind": "synthetic", "tasks": [
        {"task_id": f"t{i}", "statement": "plain task",
         "steps": [{"interpretations": [["A", 1.0]], "correct_index": 0}]}
        for i in range(10)]}
    _write_json(tmp_path / "tasks.json", tasks)
    return tmp_path


class TestRun:
    def test_zero_ambiguity_stream_routes_direct(self, workdir, capsys):
        out_dir = workdir / "out"
        code = main(["run", "--config", str(workdir / "config.json"),
                     "--tasks", str(workdir / "tasks.json"),
                     "--out", str(out_dir)])
        assert code == 0
        captured = capsys.readouterr().out
        assert "accuracy      100.0%" in captured
        traces = [p for p in os.listdir(out_dir) if p.endswith(".jsonl")]
        assert len(traces) == 1
        records = read_trace(str(out_dir / traces[0]))
        direct = sum(1 for r in records if r.mode.value == "Direct")
        assert direct / len(records) >= 0.9

    def test_empty_task_file(self, workdir, capsys):
        _write_json(workdir / "empty.json", {"kind": "synthetic", "tasks": []})
        code = main(["run", "--config", str(workdir / "config.json"),
                     "--tasks", str(workdir / "empty.json"),
                     "--out", str(workdir / "out")])
        assert code == 0
        assert "0 problems" in capsys.readouterr().out

    def test_malformed_config_exits_nonzero(self, workdir, tmp_path):
        bad = workdir / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        out_dir = tmp_path / "never"
        code = main(["run", "--config", str(bad),
                     "--tasks", str(workdir / "tasks.json"),
                     "--out", str(out_dir)])
        assert code != 0
        assert not out_dir.exists()

    def test_unknown_config_key_exits_nonzero(self, workdir, tmp_path):
        _write_json(workdir / "typo.json", {"budgett": 10})
        code = main(["run", "--config", str(workdir / "typo.json"),
                     "--tasks", str(workdir / "tasks.json"),
                     "--out", str(tmp_path / "never")])
        assert code != 0

    def test_ablate_flag_applies(self, workdir, capsys):
        out_dir = workdir / "out-ablate"
        code = main(["run", "--config", str(workdir / "config.json"),
                     "--tasks", str(workdir / "tasks.json"),
                     "--out", str(out_dir), "--ablate", "branching"])
        assert code == 0
        assert "Direct 100.0%" in capsys.readouterr().out

    def test_summary_carries_calibration_state(self, workdir):
        out_dir = workdir / "out-cal"
        main(["run", "--config", str(workdir / "config.json"),
              "--tasks", str(workdir / "tasks.json"), "--out", str(out_dir)])
        summary_file = next(p for p in os.listdir(out_dir)
                            if p.endswith(".summary.json"))
        with open(out_dir / summary_file, encoding="utf-8") as handle:
            summary = json.load(handle)
        calibration = summary["calibration"]
        assert 0.5 <= calibration["temperature"] <= 2.0
        assert calibration["observations"] == 10
        assert calibration["low_bucket"]["count"] == 10  # all zero-entropy
        assert calibration["low_bucket"]["pass_rate"] == 1.0


class TestSweep:
    def test_rows_per_value(self, workdir, capsys):
        code = main(["sweep", "--config", str(workdir / "config.json"),
                     "--tasks", str(workdir / "tasks.json"),
                     "--param", "N", "--values", "3", "5", "7"])
        assert code == 0
        out = capsys.readouterr().out
        assert out.count("100.0%") == 3

    def test_unknown_param(self, workdir, capsys):
        code = main(["sweep", "--config", str(workdir / "config.json"),
                     "--tasks", str(workdir / "tasks.json"),
                     "--param", "gamma", "--values", "1"])
        assert code != 0
        assert "unknown sweep parameter" in capsys.readouterr().err

    def test_empty_value_list(self, workdir, capsys):
        code = main(["sweep", "--config", str(workdir / "config.json"),
                     "--tasks", str(workdir / "tasks.json"),
                     "--param", "N", "--values"])
        assert code == 0

    def test_k_max_direction_on_high_ambiguity(self, tmp_path, capsys):
        # wider branch capacity should not cost accuracy on ambiguous work
        _write_json(tmp_path / "config.json",
                    {"budget": 120.0, "seed": 1, "kappa": 8.0})
        tasks = {"kind": "synthetic", "tasks": [
            {"task_id": f"h{i}", "statement": "hard task",
             "steps": [{
                 "interpretations": [["w1", 0.45], ["c", 0.30],
                                     ["w2", 0.15], ["w3", 0.10]],
                 "correct_index": 1,
                 "conservative": [0.15, 0.55, 0.15, 0.15]}],
             "embedding_noise": 0.02}
            for i in range(60)]}
        _write_json(tmp_path / "tasks.json", tasks)
        code = main(["sweep", "--config", str(tmp_path / "config.json"),
                     "--tasks", str(tmp_path / "tasks.json"),
                     "--param", "K_max", "--values", "3", "7",
                     "--out", str(tmp_path / "sweep")])
        assert code == 0
        with open(tmp_path / "sweep" / "sweep_K_max.json", encoding="utf-8") as handle:
            rows = json.load(handle)
        by_value = {row["value"]: row["accuracy"] for row in rows}
        assert by_value["7"] >= by_value["3"]


class TestReportAndReplay:
    def _run_once(self, workdir):
        out_dir = workdir / "out"
        main(["run", "--config", str(workdir / "config.json"),
              "--tasks", str(workdir / "tasks.json"), "--out", str(out_dir)])
        return out_dir

    def test_report(self, workdir, capsys):
        out_dir = self._run_once(workdir)
        capsys.readouterr()
        code = main(["report", "--traces", str(out_dir)])
        assert code == 0
        out = capsys.readouterr().out
        assert "risk decile report" in out
        assert "binned Spearman" in out

    def test_report_empty_dir(self, tmp_path, capsys):
        code = main(["report", "--traces", str(tmp_path)])
        assert code != 0
        assert "no .jsonl trace files" in capsys.readouterr().err

    def test_replay_clean(self, workdir, capsys):
        out_dir = self._run_once(workdir)
        capsys.readouterr()
        code = main(["replay", "--traces", str(out_dir)])
        assert code == 0
        assert "replay ok" in capsys.readouterr().out

    def test_replay_detects_tampering(self, workdir, capsys):
        out_dir = self._run_once(workdir)
        trace_file = next(p for p in os.listdir(out_dir) if p.endswith(".jsonl"))
        path = out_dir / trace_file
        lines = path.read_text(encoding="utf-8").strip().splitlines()
        record = json.loads(lines[0])
        record["u_tilde"] = min(1.0, record["u_tilde"] + 0.05)
        record["r"] = max(record["r"], record["u_tilde"])
        lines[0] = json.dumps(record, sort_keys=True, separators=(",", ":"))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        capsys.readouterr()
        code = main(["replay", "--traces", str(out_dir)])
        assert code == 1

    def test_run_twice_identical_trace_bytes(self, workdir):
        out_a = workdir / "a"
        out_b = workdir / "b"
        for out in (out_a, out_b):
            main(["run", "--config", str(workdir / "config.json"),
                  "--tasks", str(workdir / "tasks.json"), "--out", str(out)])
        name_a = next(p for p in os.listdir(out_a) if p.endswith(".jsonl"))
        name_b = next(p for p in os.listdir(out_b) if p.endswith(".jsonl"))
        assert name_a == name_b
        assert (out_a / name_a).read_bytes() == (out_b / name_b).read_bytes()
