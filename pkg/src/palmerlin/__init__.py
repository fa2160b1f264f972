"""Numerical linearization of nonautonomous quasilinear ODEs.

Computes the topological conjugacy H between x' = A(t)x + f(t, x) and its
linear part, the derivatives of H, numerical checks of the standing
hypotheses, and density functions transported through H.
"""

from .conjugacy import (
    ConjugacyResult,
    DichotomyBounds,
    H_eval,
    H_hessian,
    H_hessian_all,
    H_jacobian,
    H_on_trajectory,
    H_with_jacobian,
    L_eval,
    TruncationConfig,
    conjugacy_defect,
    conjugacy_defects,
    truncation_point,
)
from .density import (
    DensityPair,
    LinearDensity,
    change_of_variables_check,
    choose_beta,
    integrability_check,
    lyapunov_P,
    make_linear_density,
    rho_bar,
    rho_bar_divergence_check,
    rho_bar_divergence_transport,
    rho_linear,
    rho_linear_divergence,
)
from .errors import *  # noqa: F401,F403
from .hypotheses import (
    GridSpec,
    HypothesisReport,
    check_d1,
    check_d2,
    check_d3,
    check_gronwall,
    check_h4,
    check_h5,
    corollary_split,
    estimate_dichotomy,
    estimate_f_bounds,
    run_hypothesis_suite,
)
from .ode import IntegratorConfig, Trajectory, eval_dense, inf_norm, integrate, integrate_flow, transition_matrix
from .system import GSystem, SystemDef, check_derivatives
from .systems import PRESETS, build_preset, corollary_example, corollary_example_g, example4, linear_diag
from .variational import F_matrix, Z_solve, first_variation, second_variation

__version__ = "0.1.0"
