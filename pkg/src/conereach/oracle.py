"""Independent ground truth for validating the dual pipeline.

A direct discretized primal solve (penalty continuation on the terminal
ball, exact gauge epigraphs, conic programming backend), the closed-form
Gramian solution for the unit-ball set, and the exact reachable cone of the
nonnegative double integrator. Nothing here calls the dual solver or the
reconstruction code; agreement between the two routes is the check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import cvxpy as cp
import numpy as np
import scipy.linalg

from .dual import ReachabilityProblem
from .sets import BathtubBox, EuclideanBall, KSparseBox, ToyHalfMix

_MAX_NODES = 512
_MAX_STATE_CONTROL = 64
_RHO_SCHEDULE = (1e2, 1e4, 1e6)


@dataclass
class PrimalIterate:
    u: np.ndarray                # (N, m) gridded control
    objective: float             # primal cost of u
    feasibility_residual: float  # max(0, |L_T u - ytilde| - eps)


def _gauge_epigraph(cset, u: cp.Variable, s: cp.Variable) -> list:
    """Conic constraints expressing gauge(u_i) <= s_i row by row."""
    N, m = u.shape
    s_col = cp.reshape(s, (N, 1), order="C") @ np.ones((1, m))
    if isinstance(cset, EuclideanBall):
        return [cp.norm(u, 2, axis=1) <= s]
    if isinstance(cset, KSparseBox):
        return [cp.norm(u, 1, axis=1) <= cset.k * s,
                u <= s_col, -u <= s_col]
    if isinstance(cset, ToyHalfMix):
        # gauge of a hull of two pieces splits as an infimal convolution
        a = cp.Variable((N, m))
        b = cp.Variable((N, m))
        return [u == a + b, a[:, 0] >= 0, b[:, 0] <= 0,
                cp.norm(a, 2, axis=1) + cp.norm(b, 1, axis=1) <= s]
    if isinstance(cset, BathtubBox):
        return [u >= 0, u <= s_col,
                cp.sum(u, axis=1) * cset.dx <= cset.mass * s]
    raise ValueError(f"no gauge epigraph known for {type(cset).__name__}")


def solve_primal_direct(prob: ReachabilityProblem,
                        rho_schedule=_RHO_SCHEDULE,
                        deadline_s: Optional[float] = None) -> PrimalIterate:
    """Direct primal solve with quadratic penalty continuation on the target.

    Minimizes cost(u) + rho * max(0, |L_T u - ytilde| - eps)^2 for an
    increasing penalty schedule and reports the remaining feasibility
    residual, which stays positive on unreachable targets. Desk scale only.
    """
    N, n, m = prob.grid.N, prob.sys.n, prob.sys.m
    if N > _MAX_NODES:
        raise ValueError(f"oracle limited to {_MAX_NODES} grid nodes, got {N}")
    if n * m > _MAX_STATE_CONTROL:
        raise ValueError(f"oracle limited to n*m <= {_MAX_STATE_CONTROL}, got {n * m}")

    K = prob.kernels
    w = prob.grid.weights
    # C-ordered flattening of u matches rows of the stacked kernel matrix
    M_flat = (w[:, None, None] * K).transpose(1, 0, 2).reshape(n, N * m)
    sqrt_weight = math.sqrt(prob.x_weight)

    u = cp.Variable((N, m))
    s = cp.Variable(N, nonneg=True)
    r = cp.Variable(nonneg=True)
    rho = cp.Parameter(nonneg=True)
    lt_u = M_flat @ cp.reshape(u, (N * m,), order="C")
    residual_norm = sqrt_weight * cp.norm(lt_u - prob.y_tilde, 2)
    constraints = _gauge_epigraph(prob.cset, u, s)
    constraints.append(r >= residual_norm - prob.eps)
    objective = 0.5 * cp.sum(cp.multiply(w, cp.square(s))) + rho * cp.square(r)
    problem = cp.Problem(cp.Minimize(objective), constraints)

    start = time.monotonic()
    for rho_val in rho_schedule:
        rho.value = float(rho_val)
        problem.solve(solver=cp.CLARABEL, warm_start=True)
        if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            raise RuntimeError(f"oracle solve failed with status {problem.status}")
        if deadline_s is not None and time.monotonic() - start > deadline_s:
            break

    u_val = np.asarray(u.value, dtype=float)
    if isinstance(prob.cset, BathtubBox):
        # conic solvers leave 1e-10 scale sign noise; project back to feasibility
        u_val = np.maximum(u_val, 0.0)
    gauges = prob.cset.gauge_batch(u_val)
    objective_val = 0.5 * float(w @ gauges ** 2)
    resid = prob.x_norm(prob.push_control(u_val) - prob.y_tilde)
    return PrimalIterate(u=u_val, objective=objective_val,
                         feasibility_residual=max(0.0, resid - prob.eps))


def hum_closed_form(prob: ReachabilityProblem):
    """Gramian solution (p_f, optimal cost) for the unit-ball constraint set."""
    if not isinstance(prob.cset, EuclideanBall):
        raise ValueError("closed form requires the EuclideanBall set")
    K = prob.kernels
    W = np.einsum("inm,ikm->nk", prob.grid.weights[:, None, None] * K, K)
    eigs = scipy.linalg.eigvalsh(W)
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > 1e12:
        raise ValueError("Gramian numerically singular (condition above 1e12)")
    c, low = scipy.linalg.cho_factor(W)
    p_f = scipy.linalg.cho_solve((c, low), prob.y_tilde)
    value = 0.5 * float(prob.y_tilde @ p_f)
    return p_f, value


def double_integrator_cone(y, T: float) -> bool:
    """Exact membership in the reachable cone of the nonnegative double integrator.

    From rest, nonnegative scalar acceleration reaches exactly the origin
    plus the half-open wedge 0 < y1 <= T * y2.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (2,):
        raise ValueError(f"expected a 2-vector, got shape {y.shape}")
    if y[0] == 0.0 and y[1] == 0.0:
        return True
    return bool(0.0 < y[0] <= T * y[1])
