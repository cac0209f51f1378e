"""Monte Carlo simulation of stochastic delay equations and their expectation functionals."""

__version__ = "0.1.0"

from .segment import (QuasiTameFunctional, Segment, SegmentError, SegmentGrid, eval_quasi_tame,
                      extend_frozen, l2_norm, new_segment, roll, shift_operator_fd, value_at)
from .rng import NoiseStream, derive_seed, gaussian_increments, normal_block, uniform_block
from .engine import (CoefficientModel, Observer, PathState, SimulationError, StepScheme,
                     euler_step, init_state, simulate_path)
from .feynman_kac import (KillingSpec, McConfig, McEstimate, TerminalFunctional, TowerReport,
                          fk_forward, fk_terminal, fk_terminal_time_dep, tower_check)
from .boundary import (DomainSpec, ExitCurve, ExitRecord, exit_distribution, fk_dirichlet_mixed,
                       fk_poisson, is_interior, simulate_killed)
from .models import (EcoliModel, LinearSddeParams, MarketModel, build_ecoli, build_linear_sdde,
                     build_market, price_european, run_length_distribution)
from .oracles import OracleResult
