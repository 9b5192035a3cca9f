import json

import pytest

from cli_cases import MOE_SIM, TP_SIM, subcommand_cases, write_sim
from hybridpar.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main


def run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, argv):
    code, out, err = run(capsys, argv)
    assert code == EXIT_OK, err
    return json.loads(out)


CASES = ["plan", "simulate-tp", "simulate-moe", "memory", "maxmodel", "volume", "curves",
         "curves-json", "moe", "tiledopt-bench"]


@pytest.mark.parametrize("case", CASES)
def test_each_subcommand_is_deterministic(case, tmp_path, capsys):
    argv = subcommand_cases(tmp_path)[case]
    first = run(capsys, argv)
    second = run(capsys, argv)
    assert first[0] == EXIT_OK, first[2]
    assert first[1] == second[1]
    if case != "curves":
        doc = json.loads(first[1])
        m = doc["manifest"]
        assert set(m) == {"subcommand", "config_digest", "version", "seed"}
        assert len(m["config_digest"]) == 64


def test_digest_follows_inputs(capsys):
    a = run_json(capsys, ["maxmodel", "--mem", "40e9", "--tensor", "8"])
    b = run_json(capsys, ["maxmodel", "--mem", "40e9", "--tensor", "4"])
    c = run_json(capsys, ["maxmodel", "--mem", "40000000000", "--tensor", "8"])
    assert a["manifest"]["config_digest"] != b["manifest"]["config_digest"]
    assert a["manifest"]["config_digest"] == c["manifest"]["config_digest"]


def test_plan_heuristic_choice(capsys):
    doc = run_json(capsys, ["plan", "--gpus", "16", "--hidden", "4096", "--layers", "44",
                            "--batch", "64", "--params", "9e9", "--mem", "40e9",
                            "--max-tensor", "16", "--min-tensor", "8", "--top", "3"])
    c = doc["chosen"]["config"]
    assert (c["data_degree"], c["tensor_rows"], c["tensor_cols"]) == (2, 2, 4)
    assert len(doc["plans"]) == 3


def test_plan_csv(capsys):
    code, out, _ = run(capsys, ["plan", "--gpus", "8", "--format", "csv"])
    assert code == EXIT_OK
    lines = out.strip().splitlines()
    assert lines[0].startswith("rank,data_degree")
    assert len(lines) > 1


def test_plan_infeasible_exit(capsys):
    code, _, err = run(capsys, ["plan", "--gpus", "4", "--params", "1e12", "--mem", "1e9"])
    assert code == EXIT_INFEASIBLE
    assert "infeasible" in err


@pytest.mark.parametrize("argv", [
    ["nonsense"],
    ["maxmodel", "--mem", "lots"],
    ["maxmodel", "--mem", "40e9"],
    ["memory", "--gpus", "6", "--tensor-rows", "4", "--base-params", "1e9"],
    ["memory", "--format", "csv", "--gpus", "1", "--base-params", "1e9"],
    ["simulate"],
    ["volume", "--batch", "4", "--model", "fc", "--k", "3", "--n", "4", "--tensor-rows", "2"],
])
def test_usage_errors(argv, capsys):
    code, _, err = run(capsys, argv)
    assert code == EXIT_USAGE
    assert err


def test_simulate_unknown_field(tmp_path, capsys):
    path = write_sim(tmp_path, dict(TP_SIM, colour="blue"))
    assert run(capsys, ["simulate", "--config", path])[0] == EXIT_USAGE


def test_simulate_tp_verify_passes(tmp_path, capsys):
    doc = run_json(capsys, ["simulate", "--config", write_sim(tmp_path, TP_SIM), "--verify"])
    assert doc["verdict"] == "pass"
    names = {c["name"] for c in doc["checks"]}
    assert {"forward_matches_serial", "tensor_bytes_match_prediction",
            "data_bytes_match_prediction", "backward_dW_matches_serial"} <= names


def test_simulate_without_verify_is_skipped(tmp_path, capsys):
    doc = run_json(capsys, ["simulate", "--config", write_sim(tmp_path, TP_SIM)])
    assert doc["verdict"] == "skipped" and doc["checks"] == []


def test_simulate_bad_expectation_exits_3(tmp_path, capsys):
    spec = dict(TP_SIM, expected={"tensor_bytes_per_rank": 1, "forward_all_reduces": 3})
    code, out, err = run(capsys, ["simulate", "--config", write_sim(tmp_path, spec), "--verify"])
    assert code == EXIT_VERIFY
    doc = json.loads(out)
    failed = {c["name"] for c in doc["checks"] if not c["passed"]}
    assert failed == {"expected_tensor_bytes"}
    assert "expected_tensor_bytes" in err


def test_simulate_trivial_grid_has_no_volume(tmp_path, capsys):
    spec = dict(TP_SIM, parallel={"total_gpus": 2, "data_degree": 2, "tensor_rows": 1,
                                  "tensor_cols": 1, "expert_degree": 1, "gpus_per_node": 4},
                data_parallel_grads=False, expected={"tensor_bytes_per_rank": 0})
    doc = run_json(capsys, ["simulate", "--config", write_sim(tmp_path, spec), "--verify"])
    assert doc["verdict"] == "pass"


def test_simulate_explicit_weights(tmp_path, capsys):
    spec = {"parallel": {"total_gpus": 4, "data_degree": 1, "tensor_rows": 2, "tensor_cols": 2,
                         "expert_degree": 1, "gpus_per_node": 4},
            "layers": [{"weights": {"rows": 2, "cols": 2, "data": [1, 2, 3, 4]}}],
            "input": {"rows": 2, "cols": 2, "data": [1, 0, 0, 1]}, "batch_rows": 2}
    doc = run_json(capsys, ["simulate", "--config", write_sim(tmp_path, spec), "--verify"])
    assert doc["verdict"] == "pass"


def test_simulate_moe(tmp_path, capsys):
    doc = run_json(capsys, ["simulate", "--config", write_sim(tmp_path, MOE_SIM), "--verify"])
    assert doc["verdict"] == "pass"
    assert doc["tally"]["stash_entries"] == 6


def test_moe_tally(capsys):
    base = ["moe", "--experts", "4", "--tensor-rows", "2", "--tokens", "8", "--hidden", "4",
            "--checkpointing"]
    plain = run_json(capsys, base)
    cac = run_json(capsys, base + ["--cac"])
    assert plain["calls_total"] == 12 and cac["calls_total"] == 8


def test_memory_fits_flag(capsys):
    argv = ["memory", "--gpus", "32", "--expert-degree", "32", "--base-params", "2.7e9"]
    assert run_json(capsys, argv + ["--mem", "40e9"])["fits"] is True
    assert run_json(capsys, argv + ["--mem", "1e9"])["fits"] is False


def test_curves_csv_header(capsys):
    code, out, _ = run(capsys, ["curves", "--gpus", "32,64"])
    assert code == EXIT_OK
    assert len(out.strip().splitlines()) == 3


def test_output_file(tmp_path, capsys):
    target = tmp_path / "out.json"
    assert main(["maxmodel", "--mem", "40e9", "--tensor", "8", "--output", str(target)]) == 0
    assert capsys.readouterr().out == ""
    assert json.loads(target.read_text())["max_base_params"] == 80_000_000_000


def test_volume_fc(capsys):
    doc = run_json(capsys, ["volume", "--batch", "4", "--k", "8", "--n", "8",
                            "--tensor-rows", "2", "--tensor-cols", "2", "--element-bytes", "2"])
    assert doc["model_total_bytes"] == 2 * doc["model_total_elements"]
