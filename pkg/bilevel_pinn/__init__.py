"""
Bilevel PINN Package

Physics-informed neural networks for PDE-constrained optimization, with
outer-loop hypergradients from the implicit function theorem solved by a
low-rank Broyden method.
"""
from .autodiff import Tape, Var, grad, hvp, grad2_contract, spatial_derivs
from .nets import Mlp, mlp_init, mlp_forward, flatten, unflatten, save_checkpoint, load_checkpoint
from .problems import (
    PdeProblem, ControlParams, CollocationSet, get_problem, sample_collocation,
    pde_loss, objective, exact_hypergrad_toy, reference_evaluate, export_control_grid
)
from .hypergrad import (
    Linearization, HypergradResult, linearize, ift_residual, broyden_solve, broyden_ift,
    neumann_solve, cg_solve, t1t2_hypergrad, trmd_hypergrad, oracle_hypergrad,
    compute_hypergrad, cosine_similarity
)
from .bilevel import RunRecord, inner_train, run_bpn, run_penalty_baseline, run_fidelity_study
from .config import BilevelConfig, ExperimentConfig, load_config

__all__ = [
    'Tape', 'Var', 'grad', 'hvp', 'grad2_contract', 'spatial_derivs',
    'Mlp', 'mlp_init', 'mlp_forward', 'flatten', 'unflatten', 'save_checkpoint', 'load_checkpoint',
    'PdeProblem', 'ControlParams', 'CollocationSet', 'get_problem', 'sample_collocation',
    'pde_loss', 'objective', 'exact_hypergrad_toy', 'reference_evaluate', 'export_control_grid',
    'Linearization', 'HypergradResult', 'linearize', 'ift_residual', 'broyden_solve', 'broyden_ift',
    'neumann_solve', 'cg_solve', 't1t2_hypergrad', 'trmd_hypergrad', 'oracle_hypergrad',
    'compute_hypergrad', 'cosine_similarity',
    'RunRecord', 'inner_train', 'run_bpn', 'run_penalty_baseline', 'run_fidelity_study',
    'BilevelConfig', 'ExperimentConfig', 'load_config',
]
