import csv
import json
from pathlib import Path

from click.testing import CliRunner

import widthlab.cli as cli_module
from widthlab.cli import cli
from widthlab.errors import NumericalOverflow

FIXTURES = Path(__file__).parent / "fixtures"


def _rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_cli_help():
    """Test that CLI help lists the workflows."""
    runner = CliRunner()
    result = runner.invoke(cli, ['--help'])

    assert result.exit_code == 0
    assert 'widthlab' in result.output.lower()
    for command in ('classify', 'nt-limit', 'mu-limit', 'train', 'sweep', 'ket-run'):
        assert command in result.output


def test_classify_preset():
    """Test classifying muP prints the feature-learning regime."""
    runner = CliRunner()
    result = runner.invoke(cli, ['classify', '--preset', 'muP', '--L', '3'])

    assert result.exit_code == 0
    assert 'regime=feature_learning r=0' in result.output


def test_classify_json_and_out(tmp_path):
    """Test JSON output and the classification.json artifact."""
    runner = CliRunner()
    result = runner.invoke(cli, ['classify', '--preset', 'NTP', '--json', '--out', str(tmp_path)])

    assert result.exit_code == 0
    data = json.loads((tmp_path / "classification.json").read_text())
    assert data["regime"] == "operator_regime"
    assert data["parametrization"]["name"] == "NTP"
    assert "created" in data


def test_classify_explicit_lists():
    """Test explicit exponent lists with the wrong length exit with code 1."""
    runner = CliRunner()
    result = runner.invoke(cli, ['classify', '--L', '2', '--a', '0,0', '--b', '0,0,0',
                                 '--c', '0,0,0', '--d', '0,0,0'])

    assert result.exit_code == 1
    assert "✗ Error: field 'a'" in result.output


def test_classify_needs_all_lists():
    """Test omitting a list without a preset is an error."""
    runner = CliRunner()
    result = runner.invoke(cli, ['classify', '--a', '0,0,1'])

    assert result.exit_code == 1
    assert "needed without --preset" in result.output


def test_nt_limit_writes_traces(tmp_path):
    """Test nt-limit writes the limit trace and tracked kernels."""
    runner = CliRunner()
    result = runner.invoke(cli, ['nt-limit', '--config', str(FIXTURES / 'nt-small.yaml'),
                                 '--out', str(tmp_path)])

    assert result.exit_code == 0, result.output
    rows = _rows(tmp_path / "limit_trace.csv")
    assert rows[0] == ["step", "input", "f_value", "mc_stderr"]
    assert len(rows) == 1 + 3 * 5
    assert (tmp_path / "kernel_l2.csv").exists()


def test_missing_workflow_section(tmp_path):
    """Test asking for a workflow the config lacks exits with code 1."""
    runner = CliRunner()
    result = runner.invoke(cli, ['mu-limit', '--config', str(FIXTURES / 'nt-small.yaml'),
                                 '--out', str(tmp_path)])

    assert result.exit_code == 1
    assert "Missing required field: mu" in result.output


def test_train_writes_trace(tmp_path):
    """Test train writes one row per width, trial, step and input."""
    config = tmp_path / "train.yaml"
    config.write_text("version: 1\ndata: {input_dim: 2, samples: 3, test_inputs: 0}\n"
                      "train:\n  widths: [8, 16]\n  trials: 2\n  steps: 2\n  network: {depth: 1}\n")
    runner = CliRunner()
    result = runner.invoke(cli, ['train', '--config', str(config), '--out', str(tmp_path / "out"),
                                 '--threads', '1'])

    assert result.exit_code == 0, result.output
    rows = _rows(tmp_path / "out" / "trace.csv")
    assert rows[0] == ["width", "trial", "step", "input", "f_value"]
    assert len(rows) == 1 + 2 * 2 * 3 * 3
    assert "Trained 4 networks" in result.output


def test_sweep_mu(tmp_path):
    """Test a small mu sweep writes the report and per-input CSVs."""
    runner = CliRunner()
    result = runner.invoke(cli, ['sweep', '--mode', 'mu', '--config',
                                 str(FIXTURES / 'sweep-small.yaml'), '--out', str(tmp_path),
                                 '--threads', '1'])

    assert result.exit_code == 0, result.output
    assert "mu sweep: muP" in result.output
    report = json.loads((tmp_path / "sweep.json").read_text())
    assert report["widths"] == [8, 16, 32]
    rows = _rows(tmp_path / "sweep_input_4.csv")
    assert rows[0] == ["step", "width", "mean", "std"]
    assert rows[-1][1] == "limit"


def test_sweep_widths_override(tmp_path):
    """Test --widths replaces the configured widths."""
    runner = CliRunner()
    result = runner.invoke(cli, ['sweep', '--config', str(FIXTURES / 'sweep-small.yaml'),
                                 '--widths', '8,32', '--steps', '1', '--out', str(tmp_path),
                                 '--threads', '1'])

    assert result.exit_code == 0, result.output
    assert json.loads((tmp_path / "sweep.json").read_text())["widths"] == [8, 32]


def test_ket_run_program(tmp_path):
    """Test ket-run prints limit scalars and writes a snapshot."""
    runner = CliRunner()
    result = runner.invoke(cli, ['ket-run', '--config', str(FIXTURES / 'gram-program.yaml'),
                                 '--out', str(tmp_path), '--dot-mode', 'stein'])

    assert result.exit_code == 0, result.output
    assert "c = " in result.output
    assert (tmp_path / "kets.npz").exists()
    assert (tmp_path / "program.json").exists()


def test_ket_run_requires_config():
    """Test ket-run without --check needs a program config."""
    runner = CliRunner()
    result = runner.invoke(cli, ['ket-run'])

    assert result.exit_code != 0
    assert "--config is required" in result.output


def test_ket_run_check(tmp_path):
    """Test the scalar convergence check writes ketcheck.json."""
    config = tmp_path / "check.yaml"
    config.write_text("version: 1\nketcheck:\n  program: {builtin: gram}\n  scalar: c\n"
                      "  limit_value: 1.0\n  widths: [16, 32, 64]\n  trials: 4\n")
    runner = CliRunner()
    result = runner.invoke(cli, ['ket-run', '--check', '--config', str(config),
                                 '--out', str(tmp_path), '--threads', '1'])

    assert result.exit_code == 0, result.output
    data = json.loads((tmp_path / "ketcheck.json").read_text())
    assert data["widths"] == [16, 32, 64]
    assert "slope" in result.output


def test_backprop_check_command():
    """Test the gradient cross-check passes on a small network."""
    runner = CliRunner()
    result = runner.invoke(cli, ['backprop-check', '--width', '6', '--L', '2'])

    assert result.exit_code == 0, result.output
    assert "All gradients match" in result.output


def test_numerical_failure_exit_code(monkeypatch):
    """Test numerical failures exit with code 2."""
    def overflow(*args, **kwargs):
        raise NumericalOverflow(3)

    monkeypatch.setattr(cli_module, "backprop_check", overflow)
    runner = CliRunner()
    result = runner.invoke(cli, ['backprop-check'])

    assert result.exit_code == 2
    assert "✗ Numerical failure: non-finite value at instruction 3" in result.output
