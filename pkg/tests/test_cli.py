"""End-to-end checks of the command-line harness.

Everything runs main() in-process: the console entry point is the same
function, and in-process runs keep the suite fast and let capsys see the
output.
"""

import csv
import json

import numpy as np
import pytest

from robustlqr import cli
from robustlqr.cli import main
from robustlqr.errors import InputError


GOLDEN_K = -0.61803398875  # scalar a=b=q=r=1 optimal gain


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def rows_without_walltime(path):
    return [[c for i, c in enumerate(row) if i != 4] for row in read_csv(path)]


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def test_solve_golden_scalar(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["solve", "--layer", "nominal", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "-0.61803398875" in text
    sol = json.loads((out / "solution.json").read_text())
    assert sol["k"][0][0] == pytest.approx(GOLDEN_K, abs=1e-8)
    assert sol["status"] == "optimal"
    assert set(sol["residuals"]) >= {"primal", "dual", "gap"}
    # run dir carries the replayable resolved config
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["command"] == "solve" and cfg["layer"] == "nominal"


def test_solve_robust_certainty_equivalence(tmp_path):
    cfg = write_config(tmp_path, "rob.json", {
        "layer": "robust", "d": [[1e6, 0.0], [0.0, 1e6]], "sigma": 1.0,
    })
    out = tmp_path / "run"
    assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
    sol = json.loads((out / "solution.json").read_text())
    assert abs(sol["k"][0][0] - GOLDEN_K) < 1e-3
    assert sol["worst_case_cost"] > 0.0


def test_solve_robust_without_d_is_input_error(tmp_path):
    cfg = write_config(tmp_path, "rob.json", {"layer": "robust"})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


def test_malformed_config_exits_2_without_output(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ this is not json")
    out = tmp_path / "never"
    assert main(["solve", "--config", str(bad), "--out", str(out)]) == 2
    assert not out.exists()


def test_unknown_config_key_rejected(tmp_path):
    cfg = write_config(tmp_path, "c.json", {"layr": "nominal"})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


def test_config_precedence_file_env_flag(tmp_path, monkeypatch):
    cfg_path = write_config(tmp_path, "c.json", {"seed": 3, "iterations": 7})
    parser = cli._build_parser()

    args = parser.parse_args(["imitate", "--config", cfg_path])
    assert cli.resolve_config("imitate", args)["seed"] == 3

    monkeypatch.setenv("ROBUSTLQR_SEED", "9")
    args = parser.parse_args(["imitate", "--config", cfg_path])
    resolved = cli.resolve_config("imitate", args)
    assert resolved["seed"] == 9  # env beats file
    assert resolved["iterations"] == 7

    args = parser.parse_args(["imitate", "--config", cfg_path, "--seed", "11"])
    assert cli.resolve_config("imitate", args)["seed"] == 11  # flag beats env


def test_env_vars_outside_schema_ignored(monkeypatch):
    monkeypatch.setenv("ROBUSTLQR_INSTANCES", "5")  # gradcheck key, not solve's
    args = cli._build_parser().parse_args(["solve"])
    resolved = cli.resolve_config("solve", args)
    assert "instances" not in resolved


def test_imitate_single_iteration_csv(tmp_path):
    cfg = write_config(tmp_path, "c.json", {"demo_count": 8, "minibatch": 4})
    out = tmp_path / "run"
    assert main(["imitate", "--config", cfg, "--layer", "finite",
                 "--scenario", "2", "--seed", "5", "--iters", "1",
                 "--out", str(out)]) == 0
    rows = read_csv(out / "results.csv")
    assert rows[0] == list(cli.CSV_COLUMNS)
    assert len(rows) == 2
    assert rows[1][0] == "0"
    assert rows[1][5] in ("implicit", "finite_diff", "skipped")
    # floats round-trip through the fixed 12-significant-digit format
    for cell in rows[1][1:5]:
        assert cell == "%.12g" % float(cell)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["replay_seed"] == 5
    assert "final_validation_cost" in summary["final"]


def test_imitate_rerun_is_deterministic(tmp_path):
    cfg = write_config(tmp_path, "c.json", {"demo_count": 8, "minibatch": 4})
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["imitate", "--config", cfg, "--layer", "finite",
                     "--scenario", "2", "--seed", "5", "--iters", "2",
                     "--out", str(out)]) == 0
        outs.append(out)
    assert (rows_without_walltime(outs[0] / "results.csv")
            == rows_without_walltime(outs[1] / "results.csv"))
    summaries = []
    for out in outs:
        s = json.loads((out / "summary.json").read_text())
        s.pop("timing")
        summaries.append(s)
    assert summaries[0] == summaries[1]
    configs = [json.loads((o / "config.json").read_text()) for o in outs]
    for c in configs:
        c.pop("out")  # the only run-specific field is the directory itself
    assert configs[0] == configs[1]


def test_adp_linear_smoke(tmp_path):
    out = tmp_path / "run"
    assert main(["adp", "--layer", "linear", "--seed", "2", "--iters", "2",
                 "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert "final_objective" in summary["final"]
    assert len(read_csv(out / "results.csv")) == 3


def test_adp_rejects_imitation_only_layer():
    with pytest.raises(SystemExit) as exc:
        main(["adp", "--layer", "finite"])
    assert exc.value.code == 2


def test_bench_smoke_batch_one(tmp_path):
    cfg = write_config(tmp_path, "c.json",
                       {"batch": 1, "repeats": 1, "horizons": [10, 50]})
    out = tmp_path / "run"
    assert main(["bench", "--config", cfg, "--seed", "4", "--out", str(out)]) == 0
    rows = read_csv(out / "bench.csv")
    assert rows[0] == ["method", "horizon", "batch", "seconds"]
    assert len(rows) == 1 + 2 * 3  # two horizons, three methods
    methods = {r[0] for r in rows[1:]}
    assert methods == {"finite_horizon", "nominal_lmi", "robust_lmi"}
    assert all(float(r[3]) > 0.0 for r in rows[1:])


def test_gradcheck_passes_and_reports(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["gradcheck", "--instances", "2", "--seed", "11",
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] is True
    assert all(err < report["threshold"] for err in report["max_rel_err"].values())
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_degenerate_sigma_zero_uses_fallback(tmp_path, capsys):
    cfg = write_config(tmp_path, "c.json", {"sigma": 0.0, "instances": 1})
    out = tmp_path / "run"
    assert main(["gradcheck", "--config", cfg, "--seed", "11",
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "fallback used on 1/1" in text
    report = json.loads((out / "report.json").read_text())
    assert report["fallbacks"] == 1 and report["passed"] is True


def test_gradcheck_zero_instances_is_input_error(tmp_path):
    assert main(["gradcheck", "--instances", "0",
                 "--out", str(tmp_path / "x")]) == 2


def test_default_out_directory_under_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["solve", "--layer", "nominal"]) == 0
    assert (tmp_path / "runs" / "solve" / "solution.json").exists()


def test_scenario_validation():
    assert cli._scenario_constant(1) == "known_model_unknown_D"
    assert cli._scenario_constant(2) == "known_D_unknown_model"
    with pytest.raises(InputError):
        cli._scenario_constant(3)


def test_bad_scenario_in_config_exits_2(tmp_path):
    cfg = write_config(tmp_path, "c.json", {"scenario": 7})
    assert main(["imitate", "--config", cfg, "--iters", "1",
                 "--out", str(tmp_path / "x")]) == 2
