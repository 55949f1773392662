"""Constructive reachability for linear systems under conic control constraints.

Pipeline: describe a constraint cone through a bounded generating set, form
the dual objective from its support function along adjoint trajectories,
minimize it, and synthesize a bang-bang style control from the support
argmax. Divergence of the dual certifies unreachability. An independent
primal oracle cross-checks every solve.
"""

from .sets import (BathtubBox, ConstraintSet, EuclideanBall, FaceResult,
                   FaceStatus, KSparseBox, ToyHalfMix, conjugacy_residual,
                   make_set)
from .lti import (LtiSystem, TimeGrid, adjoint_trajectory, apply_LT, expm,
                  kalman_rank, node_kernels, rank_family_test,
                  simulate_forward, strong_kalman_check)
from .dual import (ConeVerdict, CStarEstimate, DualSolution,
                   ReachabilityProblem, SolveStatus, SolverOptions,
                   check_cone_condition, estimate_c_star, eval_J, minimize_J,
                   subgrad_J)
from .synth import (SynthesizedControl, VerificationReport, control_to_csv,
                    extremality_check, quadrature_allowance,
                    reconstruct_control, singular_occupancy, verify)
from .oracle import (PrimalIterate, double_integrator_cone, hum_closed_form,
                     solve_primal_direct)

__version__ = "0.1.0"
