import json
import math

import pytest

from optrule.cli import main
from optrule.report import parse_report, serialize_report


def run_cli(*args):
    return main(list(args))


def read(path):
    return path.read_text(encoding="utf-8")


@pytest.fixture
def sim_files(tmp_path):
    data = tmp_path / "d.csv"
    truth = tmp_path / "t.csv"
    code = run_cli(
        "simulate", "--dgp", "linear_cate", "--n", "300", "--seed", "7",
        "--out-data", str(data), "--out-truth", str(truth),
    )
    assert code == 0
    return data, truth


class TestSerializeReport:
    def test_round_trip_byte_identical(self):
        report = {
            "schema_version": 1,
            "values": [0.1, 2.0, 1e-9, float("nan"), float("inf")],
            "nested": {"a": None, "b": True, "c": "text"},
            "empty": [],
        }
        text = serialize_report(report)
        again = serialize_report(parse_report(text))
        assert text == again

    def test_seventeen_significant_digits(self):
        text = serialize_report({"x": 0.1})
        assert "0.10000000000000001" in text

    def test_non_finite_tokens(self):
        text = serialize_report({"nan": float("nan"), "inf": float("-inf")})
        assert "NaN" in text and "-Infinity" in text
        back = parse_report(text)
        assert math.isnan(back["nan"]) and back["inf"] == float("-inf")


class TestSimulate:
    def test_byte_identical_outputs(self, tmp_path):
        paths = {}
        for tag in ("one", "two"):
            d = tmp_path / f"d_{tag}.csv"
            t = tmp_path / f"t_{tag}.csv"
            assert run_cli(
                "simulate", "--dgp", "null_effect", "--n", "100", "--seed", "7",
                "--out-data", str(d), "--out-truth", str(t),
            ) == 0
            paths[tag] = (d, t)
        assert read(paths["one"][0]) == read(paths["two"][0])
        assert read(paths["one"][1]) == read(paths["two"][1])

    def test_report_echoes_config(self, tmp_path):
        rep = tmp_path / "r.json"
        run_cli(
            "simulate", "--dgp", "linear_cate", "--n", "50", "--seed", "1",
            "--out-data", str(tmp_path / "d.csv"), "--out-truth", str(tmp_path / "t.csv"),
            "--report", str(rep),
        )
        payload = parse_report(read(rep))
        assert payload["command"] == "simulate"
        assert payload["config"]["seed"] == 1
        assert payload["timing"] is None
        assert payload["results"]["true_psi_unconstrained"] == 0.125


class TestFit:
    def test_fit_report_and_determinism(self, sim_files, tmp_path):
        data, _ = sim_files
        rep = tmp_path / "fit.json"
        reports = []
        for _ in range(2):  # identical config and seed, same output path
            code = run_cli(
                "fit", "--data", str(data), "--context", "unconstrained",
                "--learners", "constant,linear", "--seed", "3", "--report", str(rep),
            )
            assert code == 0
            reports.append(read(rep))
        assert reports[0] == reports[1]
        payload = parse_report(reports[0])
        assert payload["results"]["tmle"] is not None
        assert payload["results"]["oracle_comparison"] is None
        assert abs(payload["results"]["tmle"]["diagnostics"]["score_equation_residual"]) <= 1e-8

    def test_constant_outcome_warns_and_zeroes(self, tmp_path):
        data = tmp_path / "d.csv"
        rows = "\n".join(f"2.5,{i % 2},0.5,{i / 60:.3f}" for i in range(60))
        data.write_text("y,a,p,c1\n" + rows + "\n", encoding="utf-8")
        rep = tmp_path / "r.json"
        code = run_cli(
            "fit", "--data", str(data), "--context", "unconstrained",
            "--learners", "constant", "--report", str(rep),
        )
        assert code == 0
        payload = parse_report(read(rep))
        assert payload["results"]["tmle"]["psi_hat"] == 0
        assert any("constant outcome" in w for w in payload["warnings"])

    def test_rule_only_contexts_skip_inference(self, sim_files, tmp_path):
        data, _ = sim_files
        rep = tmp_path / "r.json"
        code = run_cli(
            "fit", "--data", str(data), "--context", "heterogeneity",
            "--learners", "constant,linear", "--report", str(rep),
        )
        assert code == 0
        payload = parse_report(read(rep))
        assert payload["results"]["tmle"] is None
        assert payload["results"]["evaluation"]["plugin"] is True

    def test_missing_q_for_constrained(self, sim_files, tmp_path):
        data, _ = sim_files
        code = run_cli(
            "fit", "--data", str(data), "--context", "constrained",
            "--report", str(tmp_path / "r.json"),
        )
        assert code == 1

    def test_cost_context_with_budget(self, tmp_path):
        data = tmp_path / "d.csv"
        rows = "\n".join(
            f"{0.1 * i},{i % 2},0.5,{0.5 + 0.05 * (i % 7)},{i / 80:.4f}" for i in range(80)
        )
        data.write_text("y,a,p,cost,c1\n" + rows + "\n", encoding="utf-8")
        rep = tmp_path / "r.json"
        code = run_cli(
            "fit", "--data", str(data), "--context", "cost", "--budget", "0.3",
            "--learners", "constant,linear", "--report", str(rep),
        )
        assert code == 0
        payload = parse_report(read(rep))
        assert payload["results"]["rule"]["cost_scaled"] is True
        assert payload["results"]["tmle"] is None

    def test_cost_context_delta_const(self, sim_files, tmp_path):
        data, _ = sim_files
        rep = tmp_path / "r.json"
        code = run_cli(
            "fit", "--data", str(data), "--context", "cost", "--delta-const", "0.1",
            "--learners", "constant,linear", "--report", str(rep),
        )
        assert code == 0
        payload = parse_report(read(rep))
        assert payload["results"]["rule"]["context"]["delta_const"] == pytest.approx(0.1)


class TestErrorRecords:
    def test_validation_error_is_single_line_json(self, tmp_path, capsys):
        code = run_cli(
            "fit", "--data", str(tmp_path / "missing.csv"), "--context", "unconstrained",
            "--report", str(tmp_path / "r.json"),
        )
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert "\n" not in err
        record = json.loads(err)
        assert set(record) == {"error", "message"}

    def test_unknown_flag_rejected(self, tmp_path, capsys):
        code = run_cli(
            "simulate", "--dgp", "linear_cate", "--n", "10",
            "--out-data", str(tmp_path / "d.csv"), "--out-truth", str(tmp_path / "t.csv"),
            "--frobnicate",
        )
        assert code == 1
        record = json.loads(capsys.readouterr().err.strip())
        assert "unrecognized" in record["message"]

    def test_file_errors_are_validation_errors(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("y,a,c1\n1.0,5,0.2\n", encoding="utf-8")
        code = run_cli(
            "fit", "--data", str(bad), "--context", "unconstrained", "--randomized", "0.5",
            "--report", str(tmp_path / "r.json"),
        )
        assert code == 1
        assert "row 1" in json.loads(capsys.readouterr().err.strip())["message"]


class TestOracleCommand:
    def test_all_contexts_reported(self, sim_files, tmp_path):
        _, truth = sim_files
        rep = tmp_path / "oracle.json"
        code = run_cli("oracle", "--truth", str(truth), "--q", "0.2", "--report", str(rep))
        assert code == 0
        payload = parse_report(read(rep))
        res = payload["results"]
        assert res["constrained"]["treated_mass_fraction"] == pytest.approx(0.2)
        assert res["unconstrained"]["threshold"] == 0
        assert res["cost"] is None
        assert res["heterogeneity"]["value"] > 0

    def test_budget_without_cost_column_fails(self, sim_files, tmp_path, capsys):
        _, truth = sim_files
        code = run_cli(
            "oracle", "--truth", str(truth), "--budget", "0.5",
            "--report", str(tmp_path / "r.json"),
        )
        assert code == 1
        assert "cost" in json.loads(capsys.readouterr().err.strip())["message"]

    def test_cost_context_with_costs(self, tmp_path):
        truth = tmp_path / "t.csv"
        truth.write_text(
            "y0,y1,cost,c1\n0.0,4.0,1.0,4.0\n0.0,1.0,1.0,1.0\n", encoding="utf-8"
        )
        rep = tmp_path / "r.json"
        assert run_cli(
            "oracle", "--truth", str(truth), "--budget", "0.5", "--report", str(rep)
        ) == 0
        res = parse_report(read(rep))["results"]["cost"]
        assert res["treated_count"] == 1
        assert res["threshold"] == 1

    def test_oracle_never_reads_propensities(self, sim_files, tmp_path):
        # truth files reject observed-data columns outright
        _, truth = sim_files
        poisoned = tmp_path / "poisoned.csv"
        lines = read(truth).splitlines()
        lines[0] = lines[0] + ",p"
        poisoned.write_text(
            "\n".join(line + ",0.5" if i else line for i, line in enumerate(lines)) + "\n",
            encoding="utf-8",
        )
        code = run_cli("oracle", "--truth", str(poisoned), "--report", str(tmp_path / "r.json"))
        assert code == 1


class TestEvaluateCommand:
    def test_fit_then_evaluate(self, sim_files, tmp_path):
        data, truth = sim_files
        rule = tmp_path / "rule.json"
        assert run_cli(
            "fit", "--data", str(data), "--context", "unconstrained",
            "--learners", "constant,linear", "--seed", "3",
            "--rule-out", str(rule), "--report", str(tmp_path / "fit.json"),
        ) == 0
        rep = tmp_path / "eval.json"
        assert run_cli(
            "evaluate", "--rule", str(rule), "--truth", str(truth), "--report", str(rep)
        ) == 0
        payload = parse_report(read(rep))
        ev = payload["results"]["evaluation"]
        assert ev["baselines"]["treat_none"] <= ev["value"] + 0.01
        assert payload["results"]["rule"]["context"]["kind"] == "unconstrained"

    def test_evaluation_ignores_unused_observed_file(self, sim_files, tmp_path):
        # corrupting the observed-data file must not change rule evaluation
        data, truth = sim_files
        rule = tmp_path / "rule.json"
        run_cli(
            "fit", "--data", str(data), "--context", "unconstrained",
            "--learners", "constant,linear", "--seed", "3",
            "--rule-out", str(rule), "--report", str(tmp_path / "fit.json"),
        )
        rep = tmp_path / "eval.json"
        run_cli("evaluate", "--rule", str(rule), "--truth", str(truth), "--report", str(rep))
        first = read(rep)
        data.write_text("y,a\n", encoding="utf-8")  # corrupt the unused input
        run_cli("evaluate", "--rule", str(rule), "--truth", str(truth), "--report", str(rep))
        assert first == read(rep)


class TestCompareCommand:
    def test_regret_nonnegative_and_small(self, tmp_path):
        rep = tmp_path / "cmp.json"
        code = run_cli(
            "compare", "--dgp", "linear_cate", "--n", "5000", "--seed", "11",
            "--learners", "constant,linear", "--report", str(rep),
        )
        assert code == 0
        payload = parse_report(read(rep))
        regret = payload["results"]["regret"]
        assert regret >= 0.0
        assert regret <= 0.02

    def test_fit_never_reads_truth(self, tmp_path, monkeypatch):
        # fit must not even attempt to open a truth file
        import optrule.cli as cli_mod

        def poisoned_loader(path):
            raise AssertionError("fit touched a truth file")

        monkeypatch.setattr(cli_mod, "load_truth_csv", poisoned_loader)
        data = tmp_path / "d.csv"
        truth = tmp_path / "t.csv"
        monkeypatch.undo()
        run_cli(
            "simulate", "--dgp", "linear_cate", "--n", "200", "--seed", "2",
            "--out-data", str(data), "--out-truth", str(truth),
        )
        monkeypatch.setattr(cli_mod, "load_truth_csv", poisoned_loader)
        code = run_cli(
            "fit", "--data", str(data), "--context", "unconstrained",
            "--learners", "constant", "--report", str(tmp_path / "r.json"),
        )
        assert code == 0

    def test_compare_determinism(self, tmp_path):
        rep = tmp_path / "cmp.json"
        texts = []
        for _ in range(2):
            run_cli(
                "compare", "--dgp", "crossover_cate", "--n", "400", "--seed", "9",
                "--learners", "constant,linear", "--context", "constrained", "--q", "0.25",
                "--report", str(rep),
            )
            texts.append(read(rep))
        assert texts[0] == texts[1]

    def test_heterogeneity_compare(self, tmp_path):
        rep = tmp_path / "cmp.json"
        code = run_cli(
            "compare", "--dgp", "crossover_cate", "--n", "600", "--seed", "4",
            "--context", "heterogeneity", "--learners", "constant,linear",
            "--report", str(rep),
        )
        assert code == 0
        assert parse_report(read(rep))["results"]["regret"] >= -1e-9
