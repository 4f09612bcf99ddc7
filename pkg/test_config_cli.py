"""
Tests for the flat configuration format and the command-line entry point.
"""
import numpy as np
import pytest

from bilevel_pinn import cli
from bilevel_pinn.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, aggregate_over_seeds, main
from bilevel_pinn.config import (ExperimentConfig, apply_overrides, flat_keys, format_config, load_config,
                                 parse_config_text, parse_sweep_spec, parse_value)
from bilevel_pinn.errors import ConfigError, TrainingAborted
from bilevel_pinn.reference import ControlGrid, GridAxis, write_control_csv

TINY_RUN = """\
problem = poisson1d
method = bpn-cg
state_widths = 1,4,1
bilevel.warmup_epochs = 10
bilevel.finetune_epochs = 2
bilevel.max_outer_iters = 1
bilevel.checkpoints = false
sampling.n_interior = 16
sampling.n_boundary = 1
"""


def write_config(tmp_path, text=TINY_RUN):
    path = tmp_path / 'run.txt'
    path.write_text(text)
    return path


# ===== Values =====

@pytest.mark.parametrize("raw,expected", [
    ('16', 16),
    ('-3', -3),
    ('1e-3', 1e-3),
    ('0.5', 0.5),
    ('true', True),
    ('False', False),
    ('none', None),
    ('plus-identity', 'plus-identity'),
    ('1,16,16,1', [1, 16, 16, 1]),
    ('"2024"', '2024'),
    ("'runs/a,b'", 'runs/a,b'),
])
def test_parse_value(raw, expected):
    assert parse_value(raw) == expected


# ===== Configuration files =====

def test_numeric_looking_output_dir_stays_text():
    config = parse_config_text("output_dir = 2024\n")
    assert config.output_dir == '2024'
    assert parse_config_text(format_config(config)).output_dir == '2024'
    assert apply_overrides(config, {'output_dir': '7'}).output_dir == '7'


def test_parse_sections_and_comments():
    config = parse_config_text("# toy\nproblem = heat2d   # trailing\n\nbroyden.rank = 8\nbroyden.b0 = plus-identity\n"
                               "bilevel.outer_lr = 0.01\nstate_widths = 3,32,1\n")
    assert config.problem == 'heat2d'
    assert config.broyden.rank == 8
    assert config.broyden.b0 == 'plus-identity'
    assert config.bilevel.outer_lr == 0.01
    assert config.state_widths == [3, 32, 1]
    assert config.cg.iters == 50


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("problem = poisson1d\nseed = 1\nfoo = 3\n")
    assert info.value.line == 3
    assert info.value.key == 'foo'
    assert 'line 3' in str(info.value)


def test_unknown_section_key():
    with pytest.raises(ConfigError) as info:
        parse_config_text("broyden.foo = 1\n")
    assert info.value.key == 'broyden.foo' and info.value.line == 1


def test_negative_value_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("problem = heat2d\n\nbroyden.rank = -1\n")
    assert info.value.line == 3
    assert info.value.key == 'broyden.rank'


def test_invalid_choice():
    with pytest.raises(ConfigError) as info:
        parse_config_text("method = bpn-newton\n")
    assert info.value.key == 'method'


def test_duplicate_key():
    with pytest.raises(ConfigError) as info:
        parse_config_text("seed = 1\nseed = 2\n")
    assert info.value.line == 2


def test_line_without_equals():
    with pytest.raises(ConfigError) as info:
        parse_config_text("problem heat2d\n")
    assert info.value.line == 1


def test_widths_need_two_positive_entries():
    with pytest.raises(ConfigError):
        parse_config_text("state_widths = 4\n")
    with pytest.raises(ConfigError):
        parse_config_text("control_widths = 1,0,1\n")


def test_effective_config_reads_back():
    config = parse_config_text("problem = burgers1d\nmethod = penalty\nbroyden.tol = 1e-8\n"
                               "fidelity_methods = cg\nsampling.n_objective = 100\n")
    again = parse_config_text(format_config(config))
    assert again == config
    assert again.fidelity_methods == ['cg']


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'missing.txt')


def test_method_tags():
    assert ExperimentConfig(method='bpn-cg').to_bilevel_config().method == 'cg'
    assert ExperimentConfig(method='penalty').hypergrad_method is None
    bilevel = parse_config_text("bilevel.warmup_epochs = 7\nseed = 3\n").to_bilevel_config()
    assert bilevel.warmup_epochs == 7 and bilevel.seed == 3


def test_overrides():
    config = apply_overrides(ExperimentConfig(), {'broyden.rank': '8', 'seed': 4, 'output_dir': 'runs/x'})
    assert config.broyden.rank == 8 and config.seed == 4 and config.output_dir == 'runs/x'
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), {'broyden.rank': '-2'})


def test_sweep_spec():
    axes = parse_sweep_spec(['broyden.rank=4,8', 'seed=0,1,2'])
    assert axes == [('broyden.rank', ['4', '8']), ('seed', ['0', '1', '2'])]
    assert parse_sweep_spec([]) == []
    with pytest.raises(ConfigError):
        parse_sweep_spec(['broyden.size=4'])
    with pytest.raises(ConfigError):
        parse_sweep_spec(['broyden.rank'])


def test_flat_keys_cover_sections():
    keys = flat_keys()
    assert 'broyden.rank' in keys and 'bilevel.warmup_epochs' in keys and 'problem' in keys


# ===== Command line =====

def test_evaluate_toy_optimum(tmp_path, capsys):
    path = write_control_csv(ControlGrid('poisson1d', (GridAxis('theta', 0.0, 1.0, 2),), np.array([0.0, 1.0])),
                             tmp_path / 'control.csv')
    assert main(['evaluate', 'poisson1d', str(path)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == 'J_ref = 0.0'


def test_evaluate_malformed_csv(tmp_path):
    path = tmp_path / 'control.csv'
    path.write_text("theta,value\n0,0\n1,1\n")
    assert main(['evaluate', 'poisson1d', str(path)]) == EXIT_USAGE


def test_evaluate_unknown_problem(tmp_path):
    path = write_control_csv(ControlGrid('poisson1d', (GridAxis('theta', 0.0, 1.0, 2),), np.zeros(2)),
                             tmp_path / 'control.csv')
    assert main(['evaluate', 'poisson3d', str(path)]) == EXIT_USAGE


def test_missing_subcommand():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == EXIT_USAGE


def test_train_with_bad_config(tmp_path, capsys):
    path = write_config(tmp_path, "problem = poisson1d\nfoo = 1\n")
    assert main(['train', '--config', str(path)]) == EXIT_USAGE
    assert 'line 2' in capsys.readouterr().err


def test_hypergrad_check_rejects_other_problems(tmp_path):
    path = write_config(tmp_path, "problem = heat2d\n")
    assert main(['hypergrad-check', '--config', str(path), '--out', str(tmp_path / 'out')]) == EXIT_USAGE


def test_train_tiny_run(tmp_path, capsys):
    out = tmp_path / 'out'
    assert main(['train', '--config', str(write_config(tmp_path)), '--out', str(out), '--seed', '2']) == EXIT_OK
    assert 'final J_ref = ' in capsys.readouterr().out
    effective = (out / 'config.effective.txt').read_text()
    assert 'seed = 2\n' in effective
    assert (out / 'run_record.csv').exists()


def test_numeric_abort_exit_status(tmp_path, monkeypatch):
    def abort(*args, **kwargs):
        raise TrainingAborted("forced")

    monkeypatch.setattr(cli, 'run_bpn', abort)
    assert main(['train', '--config', str(write_config(tmp_path)), '--out', str(tmp_path / 'out')]) == EXIT_NUMERIC


def test_sweep_grid(tmp_path):
    out = tmp_path / 'sweep'
    status = main(['sweep', '--config', str(write_config(tmp_path)), '--out', str(out),
                   '--sweep', 'broyden.rank=4,8', '--sweep', 'seed=0,1'])
    assert status == EXIT_OK
    lines = (out / 'sweep_results.csv').read_text().splitlines()
    assert lines[0].startswith('broyden.rank,seed,final_J_ref')
    assert len(lines) == 5
    summary = (out / 'aggregate_summary.csv').read_text().splitlines()
    assert len(summary) == 3
    assert (out / 'broyden.rank-4_seed-1' / 'run_record.csv').exists()


def test_sweep_unknown_key(tmp_path):
    assert main(['sweep', '--config', str(write_config(tmp_path)), '--out', str(tmp_path / 's'),
                 '--sweep', 'broyden.size=1,2']) == EXIT_USAGE


def test_sweep_with_aborted_cell(tmp_path, monkeypatch):
    real = cli.run_experiment

    def sometimes(config, output_dir=None):
        if config.seed == 1:
            raise TrainingAborted("forced")
        return real(config, output_dir)

    monkeypatch.setattr(cli, 'run_experiment', sometimes)
    out = tmp_path / 'sweep'
    status = main(['sweep', '--config', str(write_config(tmp_path)), '--out', str(out), '--sweep', 'seed=0,1'])
    assert status == EXIT_NUMERIC
    assert 'aborted: TrainingAborted' in (out / 'sweep_results.csv').read_text()


def test_aggregate_over_seeds():
    cells = [{'broyden.rank': '4', 'seed': '0'}, {'broyden.rank': '4', 'seed': '1'},
             {'broyden.rank': '8', 'seed': '0'}, {'broyden.rank': '8', 'seed': '1'}]
    results = [{'final_J_ref': v} for v in (1.0, 3.0, 2.0, float('nan'))]
    rows = aggregate_over_seeds(['broyden.rank', 'seed'], cells, results)
    assert rows[0] == ['4', 2.0, 1.0, 2, 2]
    assert rows[1] == ['8', 2.0, 0.0, 2, 1]
