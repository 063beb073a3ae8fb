import json

import pytest

from fedcarbon.carbon import synth_trace, write_trace
from fedcarbon.cli import main
from fedcarbon.config import ExperimentPlan, parse_config, parse_config_text, parse_sweep, serialize_plan
from fedcarbon.errors import ConfigurationError
from fedcarbon.experiment import (
    metrics_filename,
    parse_metrics_filename,
    read_metrics_csv,
    run_plan,
    selection_count_report,
    write_metrics_csv,
)
from fedcarbon.sim import STRATEGIES, SimConfig, Simulation, replace_config, run_simulation

SMALL = """
rounds = 4
num_clients = 6
clients_per_round = 2
local_epochs = 1
n_samples = 600
n_features = 5
n_classes = 3
hidden_units = 6
noisy_client_ids = 0,1
min_samples_per_client = 10
"""


class TestConfigFile:
    def test_empty_gives_defaults(self):
        plan = parse_config_text("")
        assert plan.base_config == SimConfig()
        assert plan.seeds == (0,)
        assert plan.strategies == STRATEGIES
        assert plan.budget_sweep == tuple(round(0.1 * i, 10) for i in range(11))

    def test_comments_and_blank_lines(self):
        plan = parse_config_text("# header\n\nrounds = 7  # inline\nseeds = 1, 2\n")
        assert plan.base_config.rounds == 7 and plan.seeds == (1, 2)

    def test_constraint_names_key(self):
        with pytest.raises(ConfigurationError, match="clients_per_round"):
            parse_config_text("clients_per_round = 40\nnum_clients = 30\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="learning_rate"):
            parse_config_text("learning_rate = 0.1\n")

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigurationError, match="rounds"):
            parse_config_text("rounds = many\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigurationError, match=":2:"):
            parse_config_text("rounds = 3\nrounds 4\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigurationError, match="more than once"):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_plan_validation(self):
        with pytest.raises(ConfigurationError, match="seeds"):
            parse_config_text("seeds = 1,1\n")
        with pytest.raises(ConfigurationError, match="strategies"):
            parse_config_text("strategies = oort,greedy\n")
        with pytest.raises(ConfigurationError, match="budget_sweep"):
            parse_config_text("budget_sweep = 0.5,0.2\n")

    def test_round_trip(self, tmp_path):
        text = SMALL + "seeds = 3,5\nbudget_sweep = 0,0.25,1\nstrategies = oort,oort_ca\nbudget_g = 12.5\nlr = 0.003\n"
        plan = parse_config_text(text)
        path = tmp_path / "plan.cfg"
        path.write_text(serialize_plan(plan))
        assert parse_config(path) == plan

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            parse_config(tmp_path / "absent.cfg")

    def test_sweep_forms(self):
        assert parse_sweep("0:1:0.25") == (0.0, 0.25, 0.5, 0.75, 1.0)
        assert parse_sweep("0.3:0.3:0.1") == (0.3,)
        assert parse_sweep("0, 0.5") == (0.0, 0.5)
        with pytest.raises(ValueError):
            parse_sweep("1:0:0.1")


class TestMetricsFiles:
    def test_names(self):
        assert metrics_filename("oort_ca", 0.4, 2) == "metrics_oort_ca_0.4_2.csv"
        assert metrics_filename("random_wt", None, 0) == "metrics_random_wt_inf_0.csv"
        assert parse_metrics_filename("metrics_oort_ca_wt_0.1_7.csv") == ("oort_ca_wt", "0.1", 7)
        with pytest.raises(ConfigurationError):
            parse_metrics_filename("summary.json")

    def test_round_trip_exact(self, tmp_path):
        cfg = parse_config_text(SMALL + "strategy = oort_ca\nbudget_fraction = 0.5\n").base_config
        history = run_simulation(cfg)
        path = tmp_path / "m.csv"
        write_metrics_csv(history, path)
        assert read_metrics_csv(path) == history


@pytest.fixture(scope="module")
def plan_output(tmp_path_factory):
    out = tmp_path_factory.mktemp("results")
    plan = parse_config_text(SMALL + f"seeds = 0,1\nbudget_sweep = 0,0.5,1\nstrategies = oort_ca\noutput_dir = {out}\n")
    return plan, run_plan(plan), out


class TestRunPlan:
    def test_output_files(self, plan_output):
        _, summaries, out = plan_output
        names = sorted(p.name for p in out.glob("metrics_*.csv"))
        expected = sorted(metrics_filename("oort_ca", f, s) for s in (0, 1) for f in (0.0, 0.5, 1.0))
        assert names == expected
        assert len(summaries) == 6
        assert (out / "summary.json").exists() and (out / "selection_counts.csv").exists()

    def test_full_fraction_equals_baseline(self, plan_output):
        _, summaries, _ = plan_output
        for s in summaries:
            if s.budget_fraction == 1.0:
                assert s.budget_g == s.baseline_g

    def test_baseline_is_unconstrained_oort(self, plan_output):
        plan, summaries, _ = plan_output
        for seed in (0, 1):
            sim = Simulation(replace_config(plan.base_config, seed=seed, strategy="oort"))
            sim.run()
            assert {s.baseline_g for s in summaries if s.seed == seed} == {sim.ledger.cumulative}

    def test_summary_matches_metrics(self, plan_output):
        _, _, out = plan_output
        payload = json.loads((out / "summary.json").read_text())
        assert set(payload["baselines_g"]) == {"0", "1"}
        for run in payload["runs"]:
            history = read_metrics_csv(out / run["metrics_file"])
            best = max(history, key=lambda m: (m.test_accuracy, -m.round))
            assert run["max_accuracy"] == best.test_accuracy
            assert run["emissions_at_max_accuracy_g"] == best.cumulative_emissions_g
            assert run["total_emissions_g"] == history[-1].cumulative_emissions_g

    def test_emissions_monotone_in_budget(self, plan_output):
        _, summaries, _ = plan_output
        for seed in (0, 1):
            runs = sorted((s for s in summaries if s.seed == seed), key=lambda s: s.budget_fraction)
            training = [s.training_emissions_g for s in runs]
            assert training == sorted(training)
            for s in runs:
                assert s.training_emissions_g <= s.budget_g + 1e-6

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        plan = parse_config_text(SMALL + f"strategies = random\noutput_dir = {blocker / 'sub'}\n")
        with pytest.raises(ConfigurationError):
            run_plan(plan)


class TestSelectionCounts:
    def test_counts_sum_over_files(self, plan_output):
        _, summaries, out = plan_output
        files = sorted(out.glob("metrics_*.csv"))
        table = selection_count_report(files, 6, {0, 1})
        assert table.strategies == ["oort_ca"]
        total = sum(row["oort_ca"] for row in table.rows)
        assert total == sum(sum(s.per_client_selection_counts.values()) for s in summaries)
        assert [row["corrupted"] for row in table.rows] == [1, 1, 0, 0, 0, 0]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            selection_count_report([tmp_path / "metrics_oort_inf_0.csv"], 3, set())


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(SMALL)
        out = tmp_path / "out"
        code = main(["--config", str(cfg), "--output", str(out), "--seeds", "0", "--strategy", "random,oort_ca",
                     "--budget-sweep", "0.5", "--log-level", "WARNING"])
        assert code == 0
        assert sorted(p.name for p in out.glob("metrics_*.csv")) == [
            "metrics_oort_ca_0.5_0.csv",
            "metrics_random_inf_0.csv",
        ]
        assert "final_acc" in capsys.readouterr().out

    def test_trace_env(self, tmp_path, monkeypatch):
        trace_path = tmp_path / "trace.csv"
        write_trace(synth_trace(3, 4, seed=1, curtail_prob=1.0), trace_path)
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(SMALL)
        monkeypatch.setenv("FEDCARBON_TRACE", str(trace_path))
        out = tmp_path / "out"
        assert main(["--config", str(cfg), "--output", str(out), "--strategy", "random", "--log-level", "ERROR"]) == 0
        assert all(m.emissions_g == 0.0 for m in read_metrics_csv(out / "metrics_random_inf_0.csv"))

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("clients_per_round = 40\n")
        assert main(["--config", str(cfg), "--log-level", "ERROR"]) == 2
        assert "clients_per_round" in capsys.readouterr().err

    def test_missing_trace_exit_code(self, tmp_path, monkeypatch):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(SMALL)
        monkeypatch.setenv("FEDCARBON_TRACE", str(tmp_path / "absent.csv"))
        assert main(["--config", str(cfg), "--output", str(tmp_path / "o"), "--strategy", "random", "--log-level", "ERROR"]) == 2


def test_plan_defaults_object():
    assert ExperimentPlan().output_dir == "results"
