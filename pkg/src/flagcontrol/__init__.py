"""Flag-assisted optimal control for post-selected state preparation.

Submodules:
    hilbert: composite cavity (x) qubit space and operator builders.
    lindblad: system models, pulses, objectives and the master-equation oracle.
    trajectories: accelerated no-jump / single-jump trajectory estimator.
    chain: propagator derivatives and chain-insertion gradients.
    grape: closed-system GRAPE and the shared optimizer loop.
    flag: post-selected (Flag-GRAPE) objectives and gradients.
    catcode: four-component cat code states and decoded tomography operators.
    experiments: ensemble runs, sweeps, statistics and the command-line tool.
"""
from .catcode import CatCodeParams, cat_logical_target, logical_target, tomography_set, x_cat, y_cat, z_cat
from .errors import ConfigError, DegeneratePostSelection, NoJumpMass, OptimizationDiverged, TruncationWarning
from .flag import FlagProblem, flag_gradient, flag_objective, single_jump_objective
from .grape import (
    ClosedProblem,
    ConvergenceTrace,
    OptimizerConfig,
    closed_gradient,
    closed_objective,
    load_pulses,
    optimize,
    random_init,
    save_pulses,
)
from .hilbert import HilbertSpace, coherent_state, displacement, fock_annihilation, pauli, tensor
from .lindblad import (
    Constraint,
    LogicalTarget,
    ObjectiveSpec,
    OracleResult,
    PulseSchedule,
    SystemModel,
    build_baseline_model,
    evaluate,
    infidelity_post,
    infidelity_pre,
    propagate_master,
)
from .trajectories import assemble_expectation, build_chain, build_ensemble, run_no_jump

__version__ = "0.1.0"
