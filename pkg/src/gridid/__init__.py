"""Admittance-matrix identification from noisy synchrophasor measurements.

The package covers the full pipeline: synthetic feeder and load simulation,
polar measurement noise with exact Cartesian moment formulas, closed-form
OLS/TLS estimators, the error-in-variables maximum-likelihood and
maximum-a-posteriori solvers, Fisher information, and a batch CLI.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, GridIdError, NumericalError, StructureError,
                     UnsupportedPriorError)
from .grid import (AdmittanceMatrix, GridTopology, LineSpec, StructureReport,
                   build_admittance, kron_reduce, load_grid, save_grid,
                   validate_structure)
from .phasors import (NoiseSpec, PhasorSeries, assemble_block_covariance,
                      bias_significance, cartesian_moments_exact,
                      cartesian_moments_measured, center_voltages, corrupt,
                      debias, moving_average_downsample)
from .vectorize import ReductionMap, build_reduction, real_stack, ve, vec
from .estimators import (EstimationResult, PriorStack, PriorTerm,
                         default_map_priors, estimate_ols, estimate_tls,
                         fisher_map, fisher_mle, frobenius_error)
from .solvers import (EivProblem, SolverConfig, solve_admm, solve_bar,
                      solve_bcd, solve_eiv)
from .simulator import (LoadParams, Scenario, generate_feeder, generate_loads,
                        load_scenario, run_scenario, save_scenario,
                        solve_power_flow)
