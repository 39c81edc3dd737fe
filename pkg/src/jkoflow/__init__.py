"""Multi-species nonlinear-diffusion / nonlocal-interaction simulator.

A minimizing-movement (JKO) time discretization with the interaction
potential frozen at the previous iterate, exact 1-D and entropic transport
solvers, and a diagnostics suite that verifies the scheme's estimates,
optimality identities, and uniqueness contraction at desk scale.
"""

import os as _os

# honor the thread-count override before the numerical stack initializes
if "JKOFLOW_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["JKOFLOW_THREADS"])
del _os

from .grid import (Density, Grid, GridError, GridField, convolve,
                   discrete_gradient, integrate, load_density, save_density,
                   second_moment)
from .energy import (EnergyError, InternalEnergy, check_class_Hm, check_mccann,
                     eval_F, eval_functional, kl_prox, pressure)
from .interaction import (ExternalPotential, InteractionError, InteractionSpec,
                          Kernel, assemble_gradient, assemble_potential,
                          certify_hypotheses, eval_interaction_functional,
                          zero_interaction)
from .transport import (TransportError, TransportResult, brute_force_ot,
                        displacement_interpolate_1d, sinkhorn,
                        sinkhorn_divergence, w1_exact_1d, w2_exact_1d)
from .jko import (QuantileState, SolverError, SpeciesSystem, StepRecord,
                  Trajectory, jko_step, optimality_residual, run_scheme)
from .diagnostics import (DiagnosticsReport, benamou_brenier_action,
                          closed_form_baseline, contraction_check,
                          displacement_energy_profile, gradient_estimate_L1W11,
                          gradient_estimate_L2H1, holder_constant)
from .config import ConfigError, RunConfig, load_config
from .reporting import Check, Report

__version__ = "0.1.0"
