"""Sequential effort allocation for estimating sparse signals.

The package tracks a per-component belief (support probability, amplitude
mean and variance), allocates a sensing budget across stages with
water-filling based policies, and evaluates them by Monte Carlo.
"""

from .allocator import AllocationProblem, AllocationResult, solve, solve_general, waterfill_power_law
from .belief import (
    IDENTITY,
    BeliefState,
    EffortFunction,
    PriorParams,
    init_state,
    snr_to_sigma_sq,
    update,
)
from .calibration import CalibrationTable, fit_parameter_curves, load_shipped, run_calibration
from .errors import (
    BudgetViolationError,
    ConvergenceError,
    DependencyError,
    NoObservationError,
    NumericalError,
    ParameterError,
    SparseSenseError,
)
from .losses import MAE, MSE, LossSpec, g_kernel
from .policies import (
    AllocationPlan,
    PolicyParams,
    beta_to_alpha,
    ds_fractions,
    gamma_schedule,
    nonadaptive_allocate,
    olfc_allocate,
    oracle_allocate,
    rollout_allocate,
)

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan", "AllocationProblem", "AllocationResult", "BeliefState", "BudgetViolationError",
    "CalibrationTable", "ConvergenceError", "DependencyError", "EffortFunction", "IDENTITY", "LossSpec", "MAE",
    "MSE", "NoObservationError", "NumericalError", "ParameterError", "PolicyParams", "PriorParams",
    "SparseSenseError", "beta_to_alpha", "ds_fractions", "fit_parameter_curves", "g_kernel", "gamma_schedule",
    "init_state", "load_shipped", "nonadaptive_allocate", "olfc_allocate", "oracle_allocate", "rollout_allocate",
    "run_calibration", "snr_to_sigma_sq", "solve", "solve_general", "update", "waterfill_power_law",
]
