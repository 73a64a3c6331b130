"""State preparation and gate synthesis on spin-1/2 chains by optimizing
piecewise-constant local magnetic fields under fixed couplings."""

__version__ = "0.1.0"

from .control import (
    LossKind,
    OptimizerState,
    adam_step,
    expm_directional_derivative,
    finite_difference_gradient,
    loss_value,
    schedule_gradient,
)
from .dynamics import (
    ControlSchedule,
    EigenData,
    Trajectory,
    evolve,
    evolve_unitary,
    fidelity,
    fidelity_trajectory,
    step_unitary,
)
from .groundstate import GroundStateResult, ground_state, target_state
from .hilbert import Model, ModelSpec, all_up_state, build_hamiltonian, site_operator
from .protocols import (
    Protocol,
    ProtocolConfig,
    RunResult,
    fine_grain,
    fit_exponential_scaling,
    init_fields,
    run_fgto,
    run_gto,
    run_protocol,
    run_sto,
    synthesize_gate,
)
