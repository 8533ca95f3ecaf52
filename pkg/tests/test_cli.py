"""Command line interface: subcommands, exit codes, output shapes."""

import json
from pathlib import Path

import pytest

import protomerge
from protomerge.cli import main


PROGRAMS = Path(protomerge.__file__).parent / "programs"

RING = """
if rank = size - 1 {
  send to 0 float
} else {
  send to (rank + 1) float
};
if rank = 0 {
  recv from (size - 1) float
} else {
  recv from (rank - 1) float
}
"""


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    return _write


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestInfer:
    def test_bundled_pipeline_program(self, capsys):
        code, out, err = run(capsys, "infer", str(PROGRAMS / "nbody.proc"), "--size", "3")
        assert code == 0
        assert err == ""
        assert out.startswith("foreach iter: 1..5000000 {\n")
        assert "message 0 1 float[1000000 / 3 * 4];" in out
        assert "allreduce min float" in out

    def test_deterministic_output(self, capsys):
        argv = ("infer", str(PROGRAMS / "nbody.proc"), "--size", "3")
        first = run(capsys, *argv)
        second = run(capsys, *argv)
        assert first == second

    def test_per_rank_files(self, capsys, write):
        files = [write(f"r{r}.proc", "allreduce min float") for r in range(3)]
        code, out, _ = run(capsys, "infer", *files, "--size", "3")
        assert code == 0
        assert out == "allreduce min float\n"

    def test_trace_goes_to_stderr(self, capsys, write):
        f = write("p.proc", RING)
        code, out, err = run(capsys, "infer", f, "--size", "3", "--trace")
        assert code == 1  # the symmetric ring deadlocks
        f2 = write("ok.proc", "allreduce min float")
        code, out, err = run(capsys, "infer", f2, "--size", "2", "--trace")
        assert code == 0
        assert out == "allreduce min float\n"
        assert "merge #0 rule=allred-allred" in err
        assert "premise op-equal: min = min -> equal" in err

    def test_json_success_shape(self, capsys, write):
        f = write("ok.proc", "allreduce min float")
        code, out, _ = run(capsys, "infer", f, "--size", "2", "--json")
        assert code == 0
        doc = json.loads(out)
        assert doc["status"] == "ok"
        assert doc["protocol"] == "allreduce min float"
        step = doc["traces"][0][0]
        assert set(step) == {"rule", "left", "right", "premises"}
        assert step["premises"][0] == {
            "name": "op-equal",
            "formula": "min = min",
            "verdict": "equal",
        }

    def test_deadlock_diagnostic_text(self, capsys, write):
        f = write("ring.proc", RING)
        code, out, err = run(capsys, "infer", f, "--size", "3")
        assert code == 1
        assert out == ""
        lines = err.splitlines()
        assert lines[0] == "error: DeadlockSuspected at merging rank 2 into ranks [0, 1]: seq.first"
        assert any(line.startswith("  msg-msg-eq: ") for line in lines[1:])

    def test_deadlock_diagnostic_json(self, capsys, write):
        f = write("ring.proc", RING)
        code, out, _ = run(capsys, "infer", f, "--size", "2", "--json")
        assert code == 1
        doc = json.loads(out)
        assert doc["status"] == "error"
        assert doc["kind"] == "DeadlockSuspected"
        assert doc["location"].startswith("merging rank 1 into ranks [0]")
        assert all(set(a) == {"rule", "failed_premise"} for a in doc["rule_trace"])

    def test_order_flag(self, capsys, write):
        files = [write(f"r{r}.proc", "allreduce min float") for r in range(3)]
        code, out, _ = run(capsys, "infer", *files, "--size", "3", "--order", "2,0,1")
        assert code == 0
        assert out == "allreduce min float\n"

    def test_size_too_small(self, capsys, write):
        f = write("p.proc", "skip")
        code, _, err = run(capsys, "infer", f, "--size", "1")
        assert code == 4
        assert err.startswith("protomerge: error: --size must be at least 2")

    def test_wrong_file_count(self, capsys, write):
        files = [write(f"r{r}.proc", "skip") for r in range(2)]
        code, _, err = run(capsys, "infer", *files, "--size", "3")
        assert code == 4
        assert "expected 1 process file or 3 per-rank files" in err


class TestExtract:
    def test_fan_out_rank_zero(self, capsys):
        code, out, _ = run(
            capsys, "extract", str(PROGRAMS / "one_to_all.proc"), "--rank", "0", "--size", "3"
        )
        assert code == 0
        assert out == "foreach i: 1..2 {\n  message 0 i float[n * 4]\n}\n"

    def test_fan_out_receiver(self, capsys):
        code, out, _ = run(
            capsys, "extract", str(PROGRAMS / "one_to_all.proc"), "--rank", "2", "--size", "3"
        )
        assert code == 0
        assert out == "message 0 2 float[n * 4]\n"

    def test_json_shape(self, capsys):
        code, out, _ = run(
            capsys,
            "extract",
            str(PROGRAMS / "one_to_all.proc"),
            "--rank",
            "1",
            "--size",
            "3",
            "--json",
        )
        assert code == 0
        assert json.loads(out) == {"status": "ok", "local_type": "message 0 1 float[n * 4]"}

    def test_rank_out_of_range(self, capsys):
        code, _, err = run(
            capsys, "extract", str(PROGRAMS / "one_to_all.proc"), "--rank", "3", "--size", "3"
        )
        assert code == 4
        assert "--rank must lie in 0..2" in err


class TestMerge:
    def test_ring_first_step(self, capsys, write):
        left = write("left.ptype", "message 0 1 float;\nmessage 2 0 float")
        right = write("right.ptype", "message 0 1 float;\nmessage 1 2 float")
        code, out, err = run(
            capsys, "merge", left, right, "--size", "3", "--merged", "0", "--k", "1"
        )
        assert code == 0
        assert out == "message 0 1 float;\nmessage 1 2 float;\nmessage 2 0 float\n"
        assert err == ""

    def test_trace_lines(self, capsys, write):
        left = write("left.ptype", "message 0 1 float;\nmessage 2 0 float")
        right = write("right.ptype", "message 0 1 float;\nmessage 1 2 float")
        _, _, err = run(
            capsys, "merge", left, right, "--size", "3", "--merged", "0", "--k", "1", "--trace"
        )
        rules = [line.split()[2] for line in err.splitlines() if line.startswith("merge #0")]
        assert rules == ["rule=seq-seq", "rule=msg-msg-eq", "rule=msg-msg-right"]

    def test_undecidable_payload_exits_3(self, capsys, write):
        left = write("left.ptype", "message 0 1 {x: float | x < 1}")
        right = write("right.ptype", "message 0 1 {x: float | x < 2}")
        code, _, err = run(
            capsys, "merge", left, right, "--size", "3", "--merged", "0", "--k", "1"
        )
        assert code == 3
        assert err.startswith("error: EntailmentUndecidable at root")

    def test_k_inside_merged_set_rejected(self, capsys, write):
        left = write("left.ptype", "skip")
        right = write("right.ptype", "skip")
        code, _, err = run(
            capsys, "merge", left, right, "--size", "3", "--merged", "0,1", "--k", "0"
        )
        assert code == 4
        assert err.startswith("protomerge: error: rank 0 is already part of the merged set")


class TestSimulate:
    def test_completed_with_events(self, capsys, write):
        a = write("a.ptype", "message 0 1 float; allreduce min float")
        b = write("b.ptype", "message 0 1 float; allreduce min float")
        code, out, _ = run(capsys, "simulate", a, b, "--size", "2")
        assert code == 0
        assert out == "Completed\n  message 0 -> 1: float\n  allreduce min: float\n"

    def test_deadlock(self, capsys, write):
        a = write("a.ptype", "message 0 1 float")
        b = write("b.ptype", "message 1 0 float")
        code, out, err = run(capsys, "simulate", a, b, "--size", "2")
        assert code == 1
        assert out == ""
        assert err == "Deadlocked: rank 0: send float to 1; rank 1: send float to 0\n"

    def test_mismatch(self, capsys, write):
        a = write("a.ptype", "message 0 1 float")
        b = write("b.ptype", "message 0 1 integer")
        code, _, err = run(capsys, "simulate", a, b, "--size", "2")
        assert code == 1
        assert err == "Mismatch: rank 0 sends float but rank 1 expects integer\n"

    def test_json_completed_shape(self, capsys, write):
        a = write("a.ptype", "message 0 1 float")
        b = write("b.ptype", "message 0 1 float")
        code, out, _ = run(capsys, "simulate", a, b, "--size", "2", "--json")
        assert code == 0
        doc = json.loads(out)
        assert doc == {
            "status": "ok",
            "result": "Completed",
            "trace": [{"event": "message", "src": 0, "dst": 1, "payload": "float"}],
        }

    def test_loops_are_capped_by_unroll(self, capsys, write):
        a = write("a.ptype", "foreach i: 1..5000000 { message 0 1 float }")
        b = write("b.ptype", "foreach i: 1..5000000 { message 0 1 float }")
        code, out, _ = run(capsys, "simulate", a, b, "--size", "2")
        assert code == 0
        assert out.count("message 0 -> 1") == 2

    def test_state_cap_exits_3(self, capsys, write):
        text = ";\n".join(["message 0 1 float"] * 6)
        a = write("a.ptype", text)
        b = write("b.ptype", text)
        code, _, err = run(capsys, "simulate", a, b, "--size", "2", "--state-cap", "5")
        assert code == 3
        assert err.startswith("error: StateSpaceExceeded:")

    def test_file_count_must_match_size(self, capsys, write):
        a = write("a.ptype", "skip")
        code, _, err = run(capsys, "simulate", a, "--size", "2")
        assert code == 4
        assert "expected 2 protocol files" in err


class TestErrorChannel:
    def test_parse_error_text(self, capsys, write):
        f = write("bad.proc", "send to\n  1 bogus float")
        code, _, err = run(capsys, "infer", f, "--size", "2")
        assert code == 2
        assert err.startswith(f"parse error at {f}:2:5:")

    def test_parse_error_json(self, capsys, write):
        f = write("bad.ptype", "message 0 1")
        code, out, _ = run(
            capsys, "merge", f, f, "--size", "2", "--merged", "0", "--k", "1", "--json"
        )
        assert code == 2
        doc = json.loads(out)
        assert doc["status"] == "error"
        assert doc["kind"] == "ParseError"
        assert doc["file"] == f
        assert doc["line"] == 1

    def test_missing_file(self, capsys):
        code, _, err = run(capsys, "infer", "/nonexistent/x.proc", "--size", "2")
        assert code == 4
        assert err.startswith("protomerge: error:")

    def test_missing_subcommand(self, capsys):
        assert main([]) == 4

    def test_unknown_flag(self, capsys):
        assert main(["infer", "x.proc", "--size", "2", "--bogus"]) == 4

    def test_residual_conditional_is_rejected(self, capsys, write):
        f = write("open.proc", "if n = 0 { skip } else { skip }")
        code, _, err = run(capsys, "infer", f, "--size", "2")
        assert code == 1
        assert err.startswith("error: ResidualConditional:")
