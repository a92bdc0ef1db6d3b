"""Pipeline and CLI tests: config diagnostics, artifacts, resume, exit codes."""

import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

import tracealloc.simulator as sim
from tracealloc.cli import main
from tracealloc.pipeline import (
    STAGES,
    ConfigError,
    PipelineConfig,
    StageError,
    config_from_dict,
    load_config,
    run_pipeline,
    run_stage,
    stage_seed,
)

SMALL = {
    "seed": 11,
    "simulator": {"base_rate": 100, "windows": 3, "window_length_s": 5,
                  "seeds": [0], "strategies": ["opt1"]},
}


@pytest.fixture(scope="module")
def pipeline_out(tmp_path_factory):
    """One completed small pipeline run shared across artifact tests."""
    out = tmp_path_factory.mktemp("pipe")
    cfg = config_from_dict(dict(SMALL, out=str(out)))
    sim._BUNDLES.clear()
    run_pipeline(cfg, out)
    return out


class TestConfig:
    def test_defaults_valid(self):
        cfg = config_from_dict({})
        assert cfg.seed == 0
        assert cfg.simulator.scenario == "gradual_rise"

    def test_all_errors_collected_and_named(self):
        doc = {
            "seed": -3,
            "bogus": 1,
            "fingerprint": {"theta": 1.5, "mystery": 2},
            "simulator": {"scenario": "nope", "strategies": ["opt9"]},
            "min_samples": 0,
        }
        with pytest.raises(ConfigError) as exc:
            config_from_dict(doc)
        msg = str(exc.value)
        assert "seed" in msg
        assert "bogus: unknown field" in msg
        assert "theta" in msg and "(0, 1]" in msg
        assert "fingerprint.mystery: unknown field" in msg
        assert "simulator.scenario" in msg
        assert "opt9" in msg
        assert "min_samples" in msg

    def test_budget_fraction_bounds(self):
        cfg = config_from_dict({"optimizer": {"budget_fraction": 0.4}})
        assert cfg.budget_fraction == 0.4
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"optimizer": {"budget_fraction": 1.5}})
        assert "budget_fraction" in str(exc.value)

    def test_yaml_loading(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(SMALL))
        cfg = load_config(path)
        assert cfg.seed == 11
        assert cfg.simulator.windows == 3

    def test_non_mapping_root_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("- just\n- a list\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/cfg.yaml")


class TestStageSeeds:
    def test_deterministic_and_distinct(self):
        seeds = [stage_seed(7, s) for s in STAGES]
        assert seeds == [stage_seed(7, s) for s in STAGES]
        assert len(set(seeds)) == len(seeds)
        assert stage_seed(8, "ingest") != stage_seed(7, "ingest")


class TestArtifacts:
    def test_all_expected_files(self, pipeline_out):
        expected = [
            "traces.jsonl", "labels.csv", "signatures.jsonl",
            "assignments.csv", "clusters.json", "rates.csv", "forecasts.csv",
            "qps.csv", "cache.csv", "plan.csv", "plan_summary.csv",
            "simulation.csv", "latencies.csv", "coverage.csv",
            "strategy_summary.csv", "efficiency_matrix.csv",
            "coverage.png", "compliance.png", "efficiency.png",
        ]
        for name in expected:
            path = pipeline_out / name
            assert path.exists() and path.stat().st_size > 0, name

    def test_assignments_cover_all_traces(self, pipeline_out):
        n_traces = sum(1 for line in open(pipeline_out / "traces.jsonl")
                       if '"parent_id": ""' in line)
        rows = (pipeline_out / "assignments.csv").read_text().strip().splitlines()
        assert len(rows) - 1 == n_traces

    def test_plan_has_every_window(self, pipeline_out):
        rows = (pipeline_out / "plan_summary.csv").read_text().strip().splitlines()
        windows = [int(r.split(",")[0]) for r in rows[1:]]
        assert windows == list(range(SMALL["simulator"]["windows"]))

    def test_clusters_document_shape(self, pipeline_out):
        doc = json.loads((pipeline_out / "clusters.json").read_text())
        assert doc["clusters"]
        share = sum(c["trace_share"] for c in doc["clusters"])
        assert share == pytest.approx(1.0, abs=1e-9)

    def test_resume_reproduces_plan(self, pipeline_out):
        before = (pipeline_out / "plan.csv").read_bytes()
        cfg = config_from_dict(dict(SMALL, out=str(pipeline_out)))
        executed = run_pipeline(cfg, pipeline_out, start="optimize")
        assert executed == ["optimize", "simulate", "report"]
        assert (pipeline_out / "plan.csv").read_bytes() == before

    def test_missing_artifact_raises_stage_error(self, tmp_path):
        cfg = config_from_dict(dict(SMALL, out=str(tmp_path)))
        with pytest.raises(StageError):
            run_stage("fingerprint", cfg, tmp_path)

    def test_unknown_stage_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            run_stage("mystery", PipelineConfig(), tmp_path)
        with pytest.raises(ConfigError):
            run_pipeline(PipelineConfig(), tmp_path, start="mystery")


class TestExternalIngest:
    def test_external_traces_parsed(self, tmp_path, pipeline_out):
        cfg = config_from_dict({
            "input": str(pipeline_out / "traces.jsonl"),
            "out": str(tmp_path),
        })
        run_stage("ingest", cfg, tmp_path)
        assert (tmp_path / "traces.jsonl").exists()
        assert (tmp_path / "ingest_issues.csv").exists()

    def test_missing_input_fails(self, tmp_path):
        cfg = config_from_dict({"input": "/does/not/exist.jsonl",
                                "out": str(tmp_path)})
        with pytest.raises(StageError):
            run_stage("ingest", cfg, tmp_path)


class TestCli:
    def test_stage_subcommands_registered(self):
        runner = CliRunner()
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for stage in STAGES + ("run",):
            assert stage in result.output

    def test_invalid_config_exits_1(self, tmp_path):
        cfg_path = tmp_path / "bad.yaml"
        cfg_path.write_text(yaml.safe_dump({"fingerprint": {"theta": 1.5}}))
        runner = CliRunner()
        result = runner.invoke(main, ["ingest", "--config", str(cfg_path)])
        assert result.exit_code == 1
        assert "theta" in result.output

    def test_missing_artifact_exits_2(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(main, ["cluster", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_negative_seed_rejected_by_click(self):
        runner = CliRunner()
        result = runner.invoke(main, ["ingest", "--seed", "-1"])
        assert result.exit_code == 2  # click usage error

    def test_run_from_resumes(self, tmp_path, pipeline_out):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(dict(SMALL, out=str(pipeline_out))))
        runner = CliRunner()
        result = runner.invoke(main, ["run", "--config", str(cfg_path),
                                      "--from", "report"])
        assert result.exit_code == 0
        assert "completed stages: report" in result.output

    def test_ingest_stage_success(self, tmp_path):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(dict(SMALL, out=str(tmp_path / "o"))))
        runner = CliRunner()
        result = runner.invoke(main, ["ingest", "--config", str(cfg_path)])
        assert result.exit_code == 0
        assert (tmp_path / "o" / "traces.jsonl").exists()
