"""
Command-line entry point.

    python -m bilevel_pinn.cli train --config configs/toy.txt --out runs/toy
    python -m bilevel_pinn.cli hypergrad-check --config configs/toy.txt
    python -m bilevel_pinn.cli evaluate heat2d runs/heat/checkpoints/control_final.csv
    python -m bilevel_pinn.cli sweep --config configs/heat2d.txt --sweep broyden.rank=8,16 --jobs 4

Exit status: 0 on success, 1 for usage and configuration errors, 2 when a
run aborts numerically.
"""
import argparse
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bilevel import RunRecord, run_bpn, run_fidelity_study, run_penalty_baseline
from .config import (ExperimentConfig, apply_overrides, format_config, load_config,
                     parse_sweep_spec)
from .errors import (BilevelPinnError, NumericFailure, OracleError, SolverDivergence,
                     TrainingAborted)
from .io_utils import atomic_write_text, write_csv
from .problems import get_problem, heat2d_objective_conventions, reference_evaluate
from .reference import read_control_csv

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

NUMERIC_ERRORS = (NumericFailure, SolverDivergence, TrainingAborted, OracleError)
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
EFFECTIVE_CONFIG = 'config.effective.txt'
SWEEP_COLUMNS = ('final_J_ref', 'best_J_ref', 'final_J_mc', 'outer_iters', 'status')


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='bilevel_pinn', description="Bilevel PINN optimization of PDE controls")
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    sub = parser.add_subparsers(dest='command', required=True)

    def add_run_flags(p):
        p.add_argument('--config', type=Path, help="flat key = value configuration file")
        p.add_argument('--out', type=Path, help="output directory (overrides output_dir)")
        p.add_argument('--seed', type=int, help="run seed (overrides seed)")

    p = sub.add_parser('train', help="run one bilevel or penalty optimization")
    add_run_flags(p)

    p = sub.add_parser('hypergrad-check', help="hypergradient fidelity study on the toy problem")
    add_run_flags(p)

    p = sub.add_parser('evaluate', help="reference objective of an exported control grid")
    p.add_argument('problem', help="problem name")
    p.add_argument('control_csv', type=Path, help="control grid CSV")

    p = sub.add_parser('sweep', help="Cartesian sweep over configuration keys")
    add_run_flags(p)
    p.add_argument('--sweep', action='append', default=[], metavar='KEY=V1,V2',
                   help="swept key and its values; repeat for more axes")
    p.add_argument('--jobs', type=int, default=1, help="concurrent sweep cells")
    return parser


# ===== Shared plumbing =====

def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.out is not None:
        overrides['output_dir'] = str(args.out)
    return apply_overrides(config, overrides) if overrides else config


def run_experiment(config: ExperimentConfig, output_dir: Optional[Path] = None) -> RunRecord:
    """Run the configured method on the configured problem, writing into output_dir."""
    out = Path(output_dir or config.output_dir)
    atomic_write_text(out / EFFECTIVE_CONFIG, format_config(config))
    problem = get_problem(config.problem)
    bilevel = config.to_bilevel_config()
    run = run_penalty_baseline if config.method == 'penalty' else run_bpn
    return run(problem, bilevel, state_widths=config.state_widths,
               control_widths=config.control_widths, output_dir=out)


# ===== Subcommands =====

def cmd_train(args) -> int:
    config = _load(args)
    log.info(f"training {config.problem} with {config.method} into {config.output_dir}")
    record = run_experiment(config)
    print(f"final J_ref = {record.final_J_ref!r}")
    print(f"best J_ref = {record.best_J_ref!r}")
    if config.problem == 'heat2d' and record.control is not None:
        conv = heat2d_objective_conventions(get_problem('heat2d'), record.control)
        print(f"heat2d J_ref with 1/2 factor = {conv['half']!r}, without = {conv['full']!r}")
    return EXIT_OK


def cmd_hypergrad_check(args) -> int:
    config = _load(args)
    if config.problem != 'poisson1d':
        raise ValueError(f"hypergrad-check needs problem = poisson1d, got '{config.problem}'")
    out = Path(config.output_dir)
    atomic_write_text(out / EFFECTIVE_CONFIG, format_config(config))
    bilevel = config.to_bilevel_config().model_copy(
        update={'max_outer_iters': config.fidelity_outer_iters})
    report, _ = run_fidelity_study(get_problem(config.problem), bilevel,
                                   methods=config.fidelity_methods,
                                   broyden_iters=config.fidelity_broyden_iters,
                                   state_widths=config.state_widths, output_dir=out)
    medians = report.medians()
    failures = report.failures()
    print(f"{'method':<14}{'median cosine':>16}{'failed':>8}")
    for method in report.methods():
        print(f"{method:<14}{medians.get(method, float('nan')):>16.6f}{failures[method]:>8d}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    problem = get_problem(args.problem)
    grid = read_control_csv(args.control_csv)
    value = reference_evaluate(problem, grid)
    print(f"J_ref = {value!r}")
    if problem.name == 'heat2d':
        print(f"J_ref without 1/2 factor = {2.0 * value!r}")
    return EXIT_OK


def _cell_name(cell: Dict[str, str]) -> str:
    return '_'.join(f"{key}-{value}" for key, value in cell.items()) or 'cell'


def _run_cell(config_data: dict, output_dir: str) -> dict:
    """Sweep worker; module level so a process pool can pickle it."""
    config = ExperimentConfig.model_validate(config_data)
    try:
        record = run_experiment(config, Path(output_dir))
    except BilevelPinnError as exc:
        log.error(f"[SWEEP] cell {output_dir} aborted: {exc}")
        return {'final_J_ref': float('nan'), 'best_J_ref': float('nan'), 'final_J_mc': float('nan'),
                'outer_iters': 0, 'status': f"aborted: {type(exc).__name__}"}
    row = record.final_row
    return {'final_J_ref': row.J_ref, 'best_J_ref': record.best_J_ref, 'final_J_mc': row.J_mc,
            'outer_iters': row.outer_iter, 'status': 'ok'}


def aggregate_over_seeds(keys: Sequence[str], cells: List[Dict[str, str]],
                         results: List[dict]) -> List[list]:
    """Mean and std of the final J_ref across seeds for every other swept cell."""
    others = [k for k in keys if k != 'seed']
    groups: Dict[tuple, List[float]] = {}
    for cell, result in zip(cells, results):
        groups.setdefault(tuple(cell[k] for k in others), []).append(result['final_J_ref'])
    rows = []
    for group, values in groups.items():
        values = np.asarray(values, dtype=np.float64)
        finite = values[np.isfinite(values)]
        mean = float(np.mean(finite)) if finite.size else float('nan')
        std = float(np.std(finite)) if finite.size else float('nan')
        rows.append(list(group) + [mean, std, int(values.size), int(finite.size)])
    return rows


def cmd_sweep(args) -> int:
    config = _load(args)
    axes = parse_sweep_spec(args.sweep)
    if args.jobs < 1:
        raise ValueError("--jobs must be at least 1")
    out = Path(config.output_dir)
    if not axes:
        log.info("[SWEEP] empty sweep, single run")
        record = run_experiment(config, out)
        print(f"final J_ref = {record.final_J_ref!r}")
        return EXIT_OK

    keys = [key for key, _ in axes]
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(values for _, values in axes))]
    # Every cell is validated before anything runs
    dirs = [str(out / _cell_name(cell)) for cell in cells]
    configs = [apply_overrides(config, {**cell, 'output_dir': d}) for cell, d in zip(cells, dirs)]
    log.info(f"[SWEEP] {len(cells)} cells over {', '.join(keys)} with {args.jobs} job(s)")
    payloads = [c.model_dump() for c in configs]
    if args.jobs == 1:
        results = [_run_cell(p, d) for p, d in zip(payloads, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, payloads, dirs))

    rows = [[cell[k] for k in keys] + [r[c] for c in SWEEP_COLUMNS] for cell, r in zip(cells, results)]
    write_csv(out / 'sweep_results.csv', keys + list(SWEEP_COLUMNS), rows)
    for row in rows:
        print(', '.join(str(v) for v in row))
    if 'seed' in keys:
        others = [k for k in keys if k != 'seed']
        write_csv(out / 'aggregate_summary.csv',
                  others + ['mean_final_J_ref', 'std_final_J_ref', 'seeds', 'finite_seeds'],
                  aggregate_over_seeds(keys, cells, results))
    aborted = sum(r['status'] != 'ok' for r in results)
    if aborted:
        log.error(f"[SWEEP] {aborted} of {len(cells)} cells aborted")
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'hypergrad-check': cmd_hypergrad_check,
    'evaluate': cmd_evaluate,
    'sweep': cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return COMMANDS[args.command](args)
    except NUMERIC_ERRORS as exc:
        log.error(f"aborted: {exc}")
        return EXIT_NUMERIC
    except (BilevelPinnError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
