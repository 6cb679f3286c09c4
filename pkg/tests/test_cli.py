import pytest
import json
from pathlib import Path
from click.testing import CliRunner
from unittest.mock import patch

from dpo_lab import __version__
from dpo_lab.cli import main
from dpo_lab.config import RunConfig, get_config_path
from dpo_lab.errors import ConfigError
from dpo_lab.oracle import CheckResult
from dpo_lab.trainer import TrainSummary, UpdateCounts


def fake_summary(out_dir="runs/dpo"):
    return TrainSummary(steps=128, out_dir=Path(out_dir), counts=UpdateCounts(128, 12, 40, 40, 4), final_return=-12.5)


class TestTrainCommand:
    """Test cases for 'dpo train' command"""

    def test_train_flags_override_defaults(self, clean_environment):
        """Test that command-line flags reach the run configuration"""
        runner = CliRunner()

        with patch("dpo_lab.cli.Trainer") as mock_trainer_class:
            mock_trainer_class.return_value.run.return_value = fake_summary()

            result = runner.invoke(main, ["train", "--env", "lqr1d", "--learner", "a2c", "-n", "128", "-s", "4"])

            assert result.exit_code == 0
            config = mock_trainer_class.call_args.args[0]
            assert (config.env, config.learner, config.total_steps, config.seed) == ("lqr1d", "a2c", 128, 4)
            assert "Final eval return: -12.5000" in result.output
            assert "Policy updates: 40" in result.output

    def test_train_reads_config_file(self, clean_environment, tiny_config_file):
        """Test that --config values are used and flags still win"""
        runner = CliRunner()

        with patch("dpo_lab.cli.Trainer") as mock_trainer_class:
            mock_trainer_class.return_value.run.return_value = fake_summary()

            result = runner.invoke(main, ["train", "-c", str(tiny_config_file), "--seed", "8"])

            assert result.exit_code == 0
            config = mock_trainer_class.call_args.args[0]
            assert (config.env, config.seed, config.hidden_sizes) == ("pendulum", 8, (8, 8))

    def test_train_json_output(self, clean_environment):
        """Test the JSON summary"""
        runner = CliRunner()

        with patch("dpo_lab.cli.Trainer") as mock_trainer_class:
            mock_trainer_class.return_value.run.return_value = fake_summary("out")

            result = runner.invoke(main, ["train", "-o", "json"])

            assert result.exit_code == 0
            data = json.loads(result.output)
            assert data["steps"] == 128
            assert data["out_dir"] == "out"
            assert data["final_return"] == -12.5
            assert data["counts"]["policy"] == 40

    def test_train_json_without_evaluation(self, clean_environment):
        """Test that a NaN return becomes null in JSON"""
        runner = CliRunner()
        summary = fake_summary()
        summary.final_return = float("nan")

        with patch("dpo_lab.cli.Trainer") as mock_trainer_class:
            mock_trainer_class.return_value.run.return_value = summary
            result = runner.invoke(main, ["train", "-o", "json"])

        assert json.loads(result.output)["final_return"] is None

    def test_train_bad_config(self, clean_environment, tmp_path):
        """Test that a configuration error exits with status 1"""
        runner = CliRunner()
        with patch("dpo_lab.cli.load_config", side_effect=ConfigError("run.cfg:3: unknown key 'gama'")):
            result = runner.invoke(main, ["train"])

        assert result.exit_code == 1
        assert "Error: run.cfg:3: unknown key 'gama'" in result.output

    def test_train_unknown_environment(self):
        """Test that click rejects an unknown environment name"""
        runner = CliRunner()
        result = runner.invoke(main, ["train", "--env", "cartpole"])
        assert result.exit_code == 2

    def test_train_end_to_end(self, clean_environment, tiny_config_file, tmp_path):
        """Test a real short run from the fixture configuration"""
        runner = CliRunner()
        out = tmp_path / "run"

        result = runner.invoke(main, ["train", "-c", str(tiny_config_file), "--out", str(out), "-o", "json"])

        assert result.exit_code == 0, result.output
        assert json.loads(result.output)["steps"] == 64
        assert (out / "metrics.csv").exists()
        assert RunConfig.from_file(out / "config.cfg").env == "pendulum"


class TestVerifyCommand:
    """Test cases for 'dpo verify' command"""

    def test_verify_all_pass(self):
        """Test that passing checks print the report and exit 0"""
        runner = CliRunner()

        with patch("dpo_lab.cli.run_suite") as mock_run:
            mock_run.return_value = [CheckResult("gae_specialization", 1e-14, 1e-12, True)]

            result = runner.invoke(main, ["verify", "estimators", "--quick", "--seed", "2"])

            assert result.exit_code == 0
            assert "gae_specialization 1e-14 1e-12 PASS" in result.output
            assert "1/1 checks passed" in result.output
            mock_run.assert_called_once_with("estimators", quick=True, seed=2)

    def test_verify_failure_exits_nonzero(self):
        """Test that any failed check gives exit status 1"""
        runner = CliRunner()

        with patch("dpo_lab.cli.run_suite") as mock_run:
            mock_run.return_value = [
                CheckResult("a", 0.0, 1.0, True),
                CheckResult("theorem1_q", 5.0, 1.0, False),
            ]
            result = runner.invoke(main, ["verify", "theorems"])

        assert result.exit_code == 1
        assert "theorem1_q 5 1 FAIL" in result.output

    def test_verify_json(self):
        """Test the JSON list of check results"""
        runner = CliRunner()

        with patch("dpo_lab.cli.run_suite") as mock_run:
            mock_run.return_value = [CheckResult("bound_invariance", 0.0, 1e-12, True, {"cases": 10})]
            result = runner.invoke(main, ["verify", "policy", "-o", "json"])

        data = json.loads(result.output)
        assert data[0]["name"] == "bound_invariance"
        assert data[0]["details"] == {"cases": 10}

    def test_verify_unknown_suite(self):
        """Test that click rejects an unknown suite"""
        runner = CliRunner()
        result = runner.invoke(main, ["verify", "everything"])
        assert result.exit_code == 2

    def test_verify_runs_real_suite(self):
        """Test the critic suite end to end"""
        runner = CliRunner()
        result = runner.invoke(main, ["verify", "critic", "--quick"])
        assert result.exit_code == 0, result.output
        assert "checks passed" in result.output


class TestDiagnoseCommand:
    """Test cases for 'dpo diagnose' command"""

    def test_diagnose_text(self, tmp_path):
        """Test one line per diagnostic"""
        runner = CliRunner()

        with patch("dpo_lab.cli.run_diagnostics") as mock_diagnose:
            mock_diagnose.return_value = {"vpu": 0.25, "tv": 0.5}
            result = runner.invoke(main, ["diagnose", str(tmp_path), "--samples", "100"])

        assert result.exit_code == 0
        assert "vpu: 0.25" in result.output
        mock_diagnose.assert_called_once_with(str(tmp_path), samples=100, seed=0)

    def test_diagnose_json_with_missing_values(self, tmp_path):
        """Test that NaN diagnostics become null"""
        runner = CliRunner()

        with patch("dpo_lab.cli.run_diagnostics") as mock_diagnose:
            mock_diagnose.return_value = {"vpu": 0.0, "onpolicy_grad_var": float("nan")}
            result = runner.invoke(main, ["diagnose", str(tmp_path), "-o", "json"])

        assert json.loads(result.output) == {"vpu": 0.0, "onpolicy_grad_var": None}

    def test_diagnose_incomplete_run(self, tmp_path):
        """Test that a directory without a run exits with status 1"""
        runner = CliRunner()
        result = runner.invoke(main, ["diagnose", str(tmp_path)])
        assert result.exit_code == 1
        assert "Error:" in result.output


class TestConfigCommand:
    """Test cases for 'dpo config' command"""

    def test_config_creates_home_file(self, clean_environment):
        """Test that the default configuration is written to the home directory"""
        runner = CliRunner()
        result = runner.invoke(main, ["config"])

        assert result.exit_code == 0
        assert "Configuration written to:" in result.output
        assert RunConfig.from_file(get_config_path()) == RunConfig()

    def test_config_existing(self, clean_environment):
        """Test that an existing configuration is kept without --reset"""
        RunConfig(seed=5).to_file(get_config_path())
        runner = CliRunner()

        result = runner.invoke(main, ["config"])

        assert result.exit_code == 0
        assert "Configuration already exists at:" in result.output
        assert RunConfig.from_file(get_config_path()).seed == 5

    def test_config_reset(self, clean_environment):
        """Test that --reset overwrites the existing configuration"""
        RunConfig(seed=5).to_file(get_config_path())
        runner = CliRunner()

        result = runner.invoke(main, ["config", "--reset"])

        assert result.exit_code == 0
        assert RunConfig.from_file(get_config_path()).seed == 0

    def test_config_custom_path(self, clean_environment):
        """Test writing a local dpo.cfg"""
        runner = CliRunner()
        result = runner.invoke(main, ["config", "--path", "dpo.cfg"])

        assert result.exit_code == 0
        assert Path("dpo.cfg").exists()

    def test_config_custom_path_existing(self, clean_environment):
        """Test that an existing --path file is kept without --reset"""
        RunConfig(seed=5).to_file("dpo.cfg")
        runner = CliRunner()

        result = runner.invoke(main, ["config", "--path", "dpo.cfg"])

        assert result.exit_code == 0
        assert "Configuration already exists at: dpo.cfg" in result.output
        assert RunConfig.from_file("dpo.cfg").seed == 5

    def test_config_custom_path_reset(self, clean_environment):
        """Test that --reset overwrites an existing --path file"""
        RunConfig(seed=5).to_file("dpo.cfg")
        runner = CliRunner()

        result = runner.invoke(main, ["config", "--path", "dpo.cfg", "--reset"])

        assert result.exit_code == 0
        assert RunConfig.from_file("dpo.cfg").seed == 0

    def test_config_write_failure(self, clean_environment):
        """Test that a write failure exits with status 1"""
        runner = CliRunner()
        with patch("dpo_lab.cli.write_default_config", side_effect=ConfigError("Permission denied while creating config")):
            result = runner.invoke(main, ["config"])

        assert result.exit_code == 1
        assert "Permission denied" in result.output


def test_version():
    """Test the --version flag"""
    result = CliRunner().invoke(main, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output
