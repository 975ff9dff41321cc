# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

import json

import pandas as pd
import pytest

from alphaloop.__main__ import EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME, main
from alphaloop.config import RunConfig, load_config
from alphaloop.loop import classical_library
from alphaloop.panel import load_panel

CONFIG = """\
[run]
workspace = {root}/workspace
data_dir = {root}/data
initial_capital = 1000000

[splits]
train = 2020-01-01..2020-03-31
backtest = 2020-04-01..2020-08-07

[miner]
budget = 4
max_new = 2
cadence = 30
mining_window = 60

[screener]
min_factors = 1
k = 2

[trader]
n_long = 3, 5
lookback = 20
min_lookback = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("alphaloop")
    config = root / "run.ini"
    config.write_text(CONFIG.format(root=root.as_posix()))
    spec = root / "spec.json"
    spec.write_text(json.dumps({"seed": 3, "assets": 12, "days": 160, "strength": 0.5}))

    base = ["--config", str(config)]
    data = str(root / "data")
    assert main(["ingest", *base, "--synthetic", str(spec), "--data", data]) == 0
    classical_library(load_panel(data, "csi")).save(root / "workspace" / "factors")
    assert main(["run", *base]) == 0
    assert main(["ablate", *base, "--mode", "no-trader"]) == 0
    return root


def runs(root):
    return root / "workspace" / "runs"


def read_json(path):
    return json.loads(path.read_text())


def error_line(capsys):
    return json.loads(capsys.readouterr().err.splitlines()[-1])


class TestConfigCommand:
    def test_prints_loadable_defaults(self, capsys, tmp_path):
        assert main(["config"]) == 0
        path = tmp_path / "example.ini"
        path.write_text(capsys.readouterr().out)
        assert load_config(path) == RunConfig()


class TestExitCodes:
    def test_config_error(self, capsys, tmp_path):
        code = main(["mine", "--config", str(tmp_path / "missing.ini")])
        assert code == EXIT_CONFIG
        error = error_line(capsys)
        assert error["error"] == "ConfigError"
        assert "Cannot read config" in error["message"]

    def test_bad_theta(self, workspace, capsys):
        code = main(
            ["backtest", "--config", str(workspace / "run.ini"), "--theta", "1,2"]
        )
        assert code == EXIT_CONFIG
        assert "--theta" in error_line(capsys)["message"]

    def test_data_error(self, capsys, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "AAA.csv").write_text("date,open\n2024-01-02,1\n")
        assert main(["ingest", "--data", str(bad)]) == EXIT_DATA
        error = error_line(capsys)
        assert error["error"] == "MalformedCsv"

    def test_empty_data_dir(self, capsys, monkeypatch, tmp_path):
        monkeypatch.chdir(tmp_path)
        assert main(["ingest", "--data", str(tmp_path)]) == EXIT_DATA
        assert error_line(capsys)["error"] == "EmptyUniverse"

    def test_runtime_error(self, capsys, tmp_path):
        code = main(["report", "--run", str(tmp_path / "nowhere")])
        assert code == EXIT_RUNTIME
        assert error_line(capsys)["error"] == "FileNotFoundError"


class TestIngest:
    def test_cache(self, workspace):
        summary = read_json(workspace / "workspace" / "cache" / "panel.json")
        assert summary["assets"] == 12
        assert summary["days"] == 160
        assert summary["first"] == "2020-01-01"
        assert {"close", "volume", "pb"} <= set(summary["fields"])
        assert "index.csv" in summary["data"]
        cached = (workspace / "workspace" / "cache" / "panel.txt").read_text()
        assert cached.startswith("# market=csi\n")


class TestRun:
    def test_artifacts(self, workspace):
        out = runs(workspace) / "run-none-s0"
        for name in (
            "equity.csv",
            "trades.csv",
            "memory.ndjson",
            "accounts.ndjson",
            "assessments.json",
            "net_positions.csv",
            "snapshots.json",
            "metrics.json",
            "memory_summary.json",
            "manifest.json",
        ):
            assert (out / name).is_file(), name
        equity = pd.read_csv(out / "equity.csv")
        assert equity["nav"].iloc[0] == 1_000_000
        assert equity["day"].iloc[0] == "2020-03-31"
        assert equity["day"].iloc[-1] == "2020-08-07"
        manifest = read_json(out / "manifest.json")
        assert manifest["command"] == "run"
        assert manifest["ablation"] == "NONE"
        assert manifest["window"] == "2020-04-01..2020-08-07"
        assert len(manifest["library"]) == 20
        assert set(read_json(out / "metrics.json")) >= {"ar", "sr", "mdd"}

    def test_ablation_manifest(self, workspace):
        out = runs(workspace) / "ablate-no-trader-s0"
        manifest = read_json(out / "manifest.json")
        assert manifest["command"] == "ablate"
        assert manifest["ablation"] == "NO_TRADER"
        kinds = {
            json.loads(line)["kind"]
            for line in (out / "memory.ndjson").read_text().splitlines()
        }
        assert "search" not in kinds

    def test_trials(self, workspace, capsys):
        config = str(workspace / "run.ini")
        code = main(
            ["ablate", "--config", config, "--mode", "no-miner", "--trials", "2"]
        )
        assert code == 0
        assert set(json.loads(capsys.readouterr().out)) == {"ar", "sr", "mdd"}
        out = runs(workspace) / "ablate-no-miner-s0"
        assert len(read_json(out / "trials.json")["trials"]) == 2
        assert len(read_json(out / "trial_snapshots.json")) == 2


class TestCommands:
    def test_mine(self, workspace, capsys, tmp_path):
        config = str(workspace / "run.ini")
        assert main(["mine", "--config", config, "--out", str(tmp_path)]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["evaluated"] <= 4
        assert result["library"] >= 20
        assert read_json(tmp_path / "manifest.json")["command"] == "mine"

    def test_screen(self, workspace, capsys, tmp_path):
        config = str(workspace / "run.ini")
        code = main(
            [
                "screen",
                "--config",
                config,
                "--day",
                "2020-05-01",
                "--out",
                str(tmp_path),
            ]
        )
        assert code == 0
        ensemble = json.loads(capsys.readouterr().out)
        assert len(ensemble["entries"]) == 2
        assert read_json(tmp_path / "ensemble.json") == ensemble

    def test_backtest(self, workspace, capsys, tmp_path):
        config = str(workspace / "run.ini")
        args = ["backtest", "--config", config, "--out", str(tmp_path)]
        assert main([*args, "--theta", "3,0,0.8,1", "--dump-targets"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["profile"] == "csi"
        targets = pd.read_csv(tmp_path / "targets.csv")
        assert list(targets.columns) == ["day", "asset", "score", "target_qty"]
        assert (targets["target_qty"] % 100 == 0).all()
        manifest = read_json(tmp_path / "manifest.json")
        assert manifest["theta"] == {
            "n_long": 3,
            "n_short": 0,
            "beta": 0.8,
            "gamma": 1.0,
        }

    def test_backtest_with_ensemble(self, workspace, capsys, tmp_path):
        config = str(workspace / "run.ini")
        screen_out = tmp_path / "screen"
        args = ["screen", "--config", config, "--day", "2020-04-01"]
        assert main([*args, "--out", str(screen_out)]) == 0
        capsys.readouterr()
        code = main(
            [
                "backtest",
                "--config",
                config,
                "--ensemble",
                str(screen_out / "ensemble.json"),
                "--out",
                str(tmp_path / "bt"),
            ]
        )
        assert code == 0
        equity = pd.read_csv(tmp_path / "bt" / "equity.csv")
        assert equity["day"].iloc[0] == "2020-03-31"

    def test_report(self, workspace, capsys):
        run = runs(workspace) / "run-none-s0"
        ablate = runs(workspace) / "ablate-no-trader-s0"
        assert main(["report", "--run", str(run), "--run", str(ablate)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split() == ["run", "AR", "SR", "MDD"]
        assert lines[1].startswith("run-none-s0")
        assert lines[2].startswith("ablate-no-trader-s0")


class TestAnalyze:
    @pytest.fixture
    def run_dir(self, workspace):
        return runs(workspace) / "run-none-s0"

    def analyze(self, workspace, kind, run_dir, out, *extra):
        config = str(workspace / "run.ini")
        return main(
            [
                "analyze",
                kind,
                "--config",
                config,
                "--run",
                str(run_dir),
                "--out",
                str(out),
                *extra,
            ]
        )

    def test_coherence(self, workspace, run_dir, tmp_path, capsys):
        assert self.analyze(workspace, "coherence", run_dir, tmp_path, "--no-svg") == 0
        assert set(json.loads(capsys.readouterr().out)) == {"trend", "vol", "corr"}
        assert (tmp_path / "coherence_trend.csv").is_file()
        assert not (tmp_path / "coherence_trend.svg").exists()

    def test_exposure(self, workspace, run_dir, tmp_path, capsys):
        assert self.analyze(workspace, "exposure", run_dir, tmp_path) == 0
        assert set(json.loads(capsys.readouterr().out)) == {"slope", "pearson_r"}
        frame = pd.read_csv(tmp_path / "exposure.csv")
        assert list(frame.columns) == ["sample_day", "V", "E"]

    def test_diversity(self, workspace, run_dir, tmp_path, capsys):
        assert self.analyze(workspace, "diversity", run_dir, tmp_path) == 0
        report = json.loads(capsys.readouterr().out)
        assert len(report["trials"]) == 1
        assert report["trials"][0]["factors"] >= 1

    def test_friction(self, workspace, run_dir, tmp_path, capsys):
        assert self.analyze(workspace, "friction", run_dir, tmp_path) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["max_turnover"] > 0
        assert (tmp_path / "friction.csv").is_file()

    def test_decay(self, workspace, run_dir, tmp_path, capsys):
        assert self.analyze(workspace, "decay", run_dir, tmp_path, "--k", "3") == 0
        rows = json.loads(capsys.readouterr().out)
        assert {row["mode"] for row in rows} == {
            "global_topk",
            "periodic_topk",
            "adaptive_library",
        }
        assert (tmp_path / "decay_report.csv").is_file()
