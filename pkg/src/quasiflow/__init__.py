"""Numerical laboratory for quasi-invariance of Lebesgue measure under
stochastic flows with singular drift.

The pipeline regularizes a singular-drift SDE through the parabolic
coordinate change x -> x + u(t,x), simulates the original and transformed
flows under common noise, evaluates the explicit Radon-Nikodym densities
along trajectories, and verifies them against finite-difference Jacobian
oracles.
"""

from .config import ExperimentConfig
from .density import (DensityRecordSet, build_density_records,
                      integral_convergence, k_along_trajectory,
                      positivity_scan, rho_bar_along_path,
                      rho_bar_from_accums, rho_from_rho_bar)
from .drift import (DriftField, MollifiedDrift, MollifiedSequence,
                    ProblemSpec, SpaceQuadrature, kr_condition, lqp_norm,
                    make_drift, mollification_error)
from .flow import (BrownianDriver, FlowEnsemble, conjugate_flow, exp_moment,
                   fd_jacobian, inverse_flow_1d, simulate_x_flow,
                   simulate_y_flow, uniform_grid_1d)
from .pde import (GridSpec, ParabolicSolution, gradient_sup, select_lambda,
                  manufactured_case, sobolev_surrogate_report, solve_backward)
from .zvonkin import (CallableCoefficients, TransformedCoefficients,
                      ZvonkinMap, regularity_probe, transformed_coefficients)

__version__ = "0.1.0"
