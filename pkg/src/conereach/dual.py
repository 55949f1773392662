"""Dual functional of the constrained reachability problem and its minimization.

The dual objective for a terminal tolerance eps is

    J_eps(p) = 0.5 * sum_i w_i * support(q_i)^2 - <ytilde, p> + eps * ||p||

with q_i the adjoint trajectory samples of p. Minimizers certify
reachability and generate controls through the support argmax; unbounded
descent (norm blowup while the value keeps falling) certifies that the
reachability condition fails, so divergence is a diagnosis rather than an
error.

State-space inner products carry the weight of the control set (cell width
for bathtub sets) so that primal and dual pairings stay consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .lti import LtiSystem, TimeGrid, expm, node_kernels
from .sets import ConstraintSet, FaceBatch

_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 60
_NONMONOTONE_WINDOW = 10
_RATIO_DIVERGENCE = 1e6
#: iterates this close in value count as ties, resolved by subgradient norm
_VALUE_SLACK = 1e-6


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 5000
    grad_tol: float = 1e-8
    n_restarts: int = 4
    divergence_norm: float = 1e8
    seed: int = 0

    def validate(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.n_restarts < 0:
            raise ValueError("n_restarts must be >= 0")
        if self.divergence_norm <= 0:
            raise ValueError("divergence_norm must be positive")


class SolveStatus(Enum):
    CONVERGED = "converged"
    DIVERGING = "diverging"
    MAX_ITER = "max_iter"


@dataclass
class DualSolution:
    p_f_star: np.ndarray
    J_value: float
    grad_norm: float
    iterations: int
    status: SolveStatus
    F_star_value: float
    norm_trace: Optional[list] = None


@dataclass
class CStarEstimate:
    """Best reachability-constant ratio found on the unit sphere.

    ``value`` may be math.inf when the ratio blows up along directions whose
    support energy vanishes. ``attained`` reports sphere stationarity of the
    best iterate; it is a numerical flag, not a proof of attainment.
    """

    value: float
    attained: bool
    stationarity: float


class ConeVerdict(Enum):
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    NOT_APPLICABLE = "not_applicable"


class ReachabilityProblem:
    """System, constraint set, endpoints, horizon, tolerance and time grid."""

    def __init__(self, sys: LtiSystem, cset: ConstraintSet, y0, yf,
                 T: float, eps: float, grid: Optional[TimeGrid] = None,
                 grid_N: int = 2000):
        if cset.dim != sys.m:
            raise ValueError(
                f"set dimension {cset.dim} does not match control dimension {sys.m}")
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        self.sys = sys
        self.cset = cset
        self.y0 = np.asarray(y0, dtype=float)
        self.yf = np.asarray(yf, dtype=float)
        for name, v in (("y0", self.y0), ("yf", self.yf)):
            if v.shape != (sys.n,):
                raise ValueError(f"{name} has shape {v.shape}, expected ({sys.n},)")
        self.T = float(T)
        self.eps = float(eps)
        self.grid = grid if grid is not None else TimeGrid(self.T, grid_N)
        if abs(self.grid.T - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError("grid horizon does not match problem horizon")
        self.x_weight = cset.weight
        self.S_T = expm(sys.A, self.T)
        self.y_tilde = self.yf - self.S_T @ self.y0
        self._kernels: Optional[np.ndarray] = None
        self._kernels_flat: Optional[np.ndarray] = None

    @property
    def kernels(self) -> np.ndarray:
        # lazily built, then immutable; a benign race recomputes the same array
        if self._kernels is None:
            K = node_kernels(self.sys, self.grid)
            self._kernels_flat = np.ascontiguousarray(
                K.transpose(1, 0, 2).reshape(self.sys.n, -1))
            self._kernels = K
        return self._kernels

    @property
    def _kflat(self) -> np.ndarray:
        if self._kernels_flat is None:
            _ = self.kernels
        return self._kernels_flat

    def x_inner(self, a, b) -> float:
        return self.x_weight * float(np.dot(a, b))

    def x_norm(self, a) -> float:
        return math.sqrt(self.x_weight) * float(np.linalg.norm(a))

    def adjoint_samples(self, p_f: np.ndarray) -> np.ndarray:
        return (p_f @ self._kflat).reshape(self.grid.N, self.sys.m)

    def push_control(self, u: np.ndarray) -> np.ndarray:
        """Quadrature image of a gridded control in the state space."""
        return self._kflat @ (self.grid.weights[:, None] * u).ravel()


def _face_eval(prob: ReachabilityProblem, p: np.ndarray):
    """Value, subgradient selection and face data of J_eps at p."""
    Q = prob.adjoint_samples(p)
    fb = prob.cset.face_batch(Q)
    w = prob.grid.weights
    f_star = 0.5 * float(w @ fb.sigma ** 2)
    p_norm = prob.x_norm(p)
    J = f_star - prob.x_inner(prob.y_tilde, p) + prob.eps * p_norm
    u_sel = fb.sigma[:, None] * fb.vertex
    g = prob.push_control(u_sel) - prob.y_tilde
    if prob.eps > 0.0 and p_norm > 0.0:
        g = g + prob.eps * p / p_norm
    return J, g, fb, f_star


def eval_J(prob: ReachabilityProblem, p_f) -> float:
    p_f = _check_state(prob, p_f)
    return _face_eval(prob, p_f)[0]


def subgrad_J(prob: ReachabilityProblem, p_f) -> np.ndarray:
    p_f = _check_state(prob, p_f)
    return _face_eval(prob, p_f)[1]


def _descend(prob: ReachabilityProblem, p0: np.ndarray, opts: SolverOptions) -> DualSolution:
    """Armijo-backtracked subgradient descent with Barzilai-Borwein steps.

    The sufficient-decrease test compares against the worst of the last few
    accepted values (nonmonotone reference), which lets the spectral step run
    at full length. Two iterates are tracked: the lowest value seen, and the
    smallest subgradient selection among iterates within a value slack of it.
    The latter wins ties, because near a kink-type minimum the selection norm
    is exactly the terminal residual of the reconstructed control.
    """
    p = np.asarray(p0, dtype=float).copy()
    J, g, _, f_star = _face_eval(prob, p)
    g_norm = prob.x_norm(g)
    best_J = (J, p.copy(), g_norm, f_star)
    cands = [(J, g_norm, p.copy(), f_star)]
    step = 1.0 / max(1.0, float(np.linalg.norm(g)))
    recent = [J]
    trace = []
    accepted_steps = [step]
    it = 0
    stalled = 0
    last_improve = 0
    for it in range(1, opts.max_iter + 1):
        g_norm = prob.x_norm(g)
        p_norm = prob.x_norm(p)
        trace.append(p_norm)
        if g_norm <= opts.grad_tol:
            return DualSolution(p, J, g_norm, it - 1, SolveStatus.CONVERGED, f_star)
        # a vanished support energy with positive target pairing certifies an
        # unreachability direction: the objective is unbounded along it
        on_recession_ray = (f_star <= 1e-14 * (1.0 + abs(J)) and J < 0.0
                            and prob.x_inner(prob.y_tilde, p) > 0.0)
        if p_norm > opts.divergence_norm or on_recession_ray:
            return DualSolution(p, J, g_norm, it - 1, SolveStatus.DIVERGING,
                                f_star, norm_trace=trace[-200:])
        g_sq = prob.x_weight * float(g @ g)
        J_ref = max(recent)
        t = step
        backtracks = 0
        accepted = False
        for backtracks in range(_MAX_BACKTRACKS):
            p_new = p - t * g
            J_new, g_new, _, fs_new = _face_eval(prob, p_new)
            if J_new <= J_ref - _ARMIJO_C1 * t * g_sq:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        s = p_new - p
        y = g_new - g
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 1e-300 else 2.0 * t
        # subgradient jumps at face switches poison the spectral step; keep it
        # within a band of the recently accepted steps instead of collapsing
        accepted_steps.append(t)
        if len(accepted_steps) > 25:
            accepted_steps.pop(0)
        t_med = float(np.median(accepted_steps))
        step = min(max(step, 1e-2 * t_med, 1e-16), 1e2 * t_med, 1e16)
        if backtracks == 0:
            # clean accept: keep growing through flat recession regions
            step = max(step, 2.0 * t)
        moved = float(np.linalg.norm(s))
        p, J, g, f_star = p_new, J_new, g_new, fs_new
        g_norm = prob.x_norm(g)
        recent.append(J)
        if len(recent) > _NONMONOTONE_WINDOW:
            recent.pop(0)
        if J < best_J[0] - 1e-12 * (1.0 + abs(best_J[0])):
            best_J = (J, p.copy(), g_norm, f_star)
            last_improve = it
        elif J < best_J[0]:
            best_J = (J, p.copy(), g_norm, f_star)
        cands.append((J, g_norm, p.copy(), f_star))
        # iterates pinned to a kink: moves at rounding noise or a long run
        # without value improvement both mean the floor is reached
        if moved <= 1e-13 * (1.0 + float(np.linalg.norm(p))):
            stalled += 1
            if stalled >= 5:
                break
        else:
            stalled = 0
        if it - last_improve > 200:
            break
    J_b = best_J[0]
    slack = _VALUE_SLACK * (1.0 + abs(J_b))
    J_r, g_r, p_r, fs_r = min(((Jc, gc, pc, fc) for (Jc, gc, pc, fc) in cands
                               if Jc <= J_b + slack), key=lambda c: c[1])
    status = SolveStatus.CONVERGED if g_r <= opts.grad_tol else SolveStatus.MAX_ITER
    return DualSolution(p_r, J_r, g_r, it, status, fs_r)


def _switch_system(prob: ReachabilityProblem, p: np.ndarray, fb: FaceBatch):
    """Residual of the vertex selection and the near-active face directions.

    Where the support maximizer changes between consecutive nodes, or a node
    is flagged singular outright, the subdifferential contains every blend
    of the two competing selections. Columns of D are the residual shifts of
    swapping one node's selection, so {R + D lam, lam in [0,1]^k} samples
    the approximate subdifferential at p.
    """
    V = fb.vertex
    u = fb.sigma[:, None] * V
    u[fb.zero] = 0.0
    R = prob.push_control(u) - prob.y_tilde
    p_norm = prob.x_norm(p)
    if prob.eps > 0.0 and p_norm > 0.0:
        R = R + prob.eps * p / p_norm
    active = ~fb.zero
    # a genuine face flip moves the vertex by order one; smooth drift of a
    # curved-face maximizer moves it by order of the node spacing
    diff = np.abs(np.diff(V, axis=0)).sum(axis=1)
    switch = np.nonzero((diff > 0.25) & active[:-1] & active[1:])[0]
    boundary = np.nonzero(active[:-1] != active[1:])[0]
    nodes, alts = [], []
    seen = set()
    # one candidate per node: a shared node between two switches cannot carry
    # two independent blends and stay inside the set
    for i in switch:
        for j, other in ((int(i), int(i) + 1), (int(i) + 1, int(i))):
            if j not in seen:
                seen.add(j)
                nodes.append(j)
                alts.append(V[other].copy())
    # crossings of the zero-support boundary blend toward the null control
    for i in boundary:
        j = int(i) if active[int(i)] else int(i) + 1
        if j not in seen:
            seen.add(j)
            nodes.append(j)
            alts.append(np.zeros(prob.sys.m))
    sing_idx = np.nonzero(fb.singular)[0]
    if sing_idx.size:
        Q = prob.adjoint_samples(p)
        for j in sing_idx:
            if int(j) not in seen:
                seen.add(int(j))
                nodes.append(int(j))
                alts.append(prob.cset._witness(Q[int(j)], V[int(j)].copy()))
    if not nodes:
        return R, None, [], []
    w = prob.grid.weights
    cols = [w[j] * fb.sigma[j] * (prob.kernels[j] @ (alt - V[j]))
            for j, alt in zip(nodes, alts)]
    return R, np.stack(cols, axis=1), nodes, alts


def _blend_weights(D: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Bounded least-squares weights for R + D lam, sparsified greedily.

    The full fit sets the reachable residual; columns are then readmitted in
    order of contribution until that residual is matched within 5 percent,
    which keeps the number of blended (flagged) nodes minimal.
    """
    import scipy.optimize

    fit = scipy.optimize.lsq_linear(D, -R, bounds=(0.0, 1.0))
    lam_full = np.asarray(fit.x)
    res_full = float(np.linalg.norm(D @ lam_full + R))
    target = max(1.05 * res_full, 1e-14 * float(np.linalg.norm(R)))
    contrib = lam_full * np.linalg.norm(D, axis=0)
    order = np.argsort(-contrib)
    keep: list = []
    lam = np.zeros_like(lam_full)
    for j in order:
        if contrib[j] <= 0.0:
            break
        keep.append(int(j))
        sub = scipy.optimize.lsq_linear(D[:, keep], -R, bounds=(0.0, 1.0))
        lam_try = np.zeros_like(lam_full)
        lam_try[keep] = sub.x
        if float(np.linalg.norm(D @ lam_try + R)) <= target:
            return lam_try
        lam = lam_try
    return lam if keep else lam_full


def _min_norm_subgradient(prob: ReachabilityProblem, p: np.ndarray):
    """Smallest certified subgradient over the identified adjacent faces."""
    import scipy.optimize

    J, _, fb, f_star = _face_eval(prob, p)
    R, D, nodes, alts = _switch_system(prob, p, fb)
    if D is None:
        return J, R, f_star
    fit = scipy.optimize.lsq_linear(D, -R, bounds=(0.0, 1.0))
    g_min = R + D @ np.asarray(fit.x)
    if float(np.linalg.norm(g_min)) < float(np.linalg.norm(R)):
        return J, g_min, f_star
    return J, R, f_star


def _bundle_phase(prob: ReachabilityProblem, sol: DualSolution,
                  opts: SolverOptions, max_rounds: int = 120) -> DualSolution:
    """Finish a stalled descent with min-norm subgradient steps.

    Kink-type minima pin support-face switches to grid nodes; plain
    backtracked descent stalls there because every single-vertex selection
    keeps a one-node residual. Steps along the negative of the min-norm
    element of the sampled subdifferential keep decreasing the value, and
    its norm is the honest stationarity certificate reported back.
    """
    p = sol.p_f_star.copy()
    J, g_min, f_star = _min_norm_subgradient(prob, p)
    best = (prob.x_norm(g_min), J, p.copy(), f_star)
    step = 1.0
    for _ in range(max_rounds):
        gn = prob.x_norm(g_min)
        if gn <= opts.grad_tol:
            break
        g_sq = prob.x_weight * float(g_min @ g_min)
        t = step
        accepted = False
        for _ in range(_MAX_BACKTRACKS):
            p_new = p - t * g_min
            J_new = eval_J(prob, p_new)
            if J_new <= J - _ARMIJO_C1 * t * g_sq:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        step = 2.0 * t
        p = p_new
        J, g_min, f_star = _min_norm_subgradient(prob, p)
        gn = prob.x_norm(g_min)
        if gn < best[0]:
            best = (gn, J, p.copy(), f_star)
    gn_b, J_b, p_b, fs_b = best
    if gn_b >= sol.grad_norm:
        return sol
    status = SolveStatus.CONVERGED if gn_b <= opts.grad_tol else SolveStatus.MAX_ITER
    return DualSolution(p_b, J_b, gn_b, sol.iterations, status, fs_b,
                        norm_trace=sol.norm_trace)


def minimize_J(prob: ReachabilityProblem, opts: SolverOptions = SolverOptions()) -> DualSolution:
    """Minimize the dual objective from the origin plus seeded restarts.

    The null minimizer is returned outright when the shifted target already
    fits in the eps ball. A run whose iterate norm passes the divergence
    threshold ends the search with a DIVERGING diagnosis. Runs that stall on
    a subgradient kink get a residual polish before the best iterate is
    selected (lowest value, ties by selection norm, then lexicographic).
    """
    opts.validate()
    n = prob.sys.n
    if prob.x_norm(prob.y_tilde) <= prob.eps:
        return DualSolution(np.zeros(n), 0.0, 0.0, 0, SolveStatus.CONVERGED, 0.0)
    rng = np.random.default_rng(opts.seed)
    starts = [np.zeros(n)]
    for r in range(opts.n_restarts):
        v = rng.standard_normal(n)
        v /= max(np.linalg.norm(v), 1e-300)
        starts.append(10.0 ** (r % 3) * v)
    runs = []
    for p0 in starts:
        sol = _descend(prob, p0, opts)
        if sol.status is SolveStatus.DIVERGING:
            return sol
        runs.append(sol)
    J_min = min(s.J_value for s in runs)
    slack = _VALUE_SLACK * (1.0 + abs(J_min))
    near = [s for s in runs if s.J_value <= J_min + slack]
    near.sort(key=lambda s: (s.grad_norm, s.J_value, tuple(s.p_f_star)))
    winner = near[0]
    if winner.grad_norm > opts.grad_tol:
        winner = _bundle_phase(prob, winner, opts)
    if winner.status is not SolveStatus.CONVERGED:
        # a stalled run far from the origin usually chases a recession ray;
        # confirm with a ratio ascent from the winning direction
        p_norm = prob.x_norm(winner.p_f_star)
        if p_norm > 1e2 * (1.0 + prob.x_norm(prob.y_tilde)):
            blew_up, _, _ = _ratio_ascent(prob, winner.p_f_star / p_norm, 200,
                                          pairing_floor=prob.eps,
                                          use_ratio_cap=prob.eps == 0.0)
            if blew_up:
                trace = winner.norm_trace or []
                return DualSolution(winner.p_f_star, winner.J_value,
                                    winner.grad_norm, winner.iterations,
                                    SolveStatus.DIVERGING, winner.F_star_value,
                                    norm_trace=trace)
    return winner


def _ratio_terms(prob: ReachabilityProblem, q: np.ndarray):
    """Pairing, support energy, ratio and its sphere gradient at q."""
    Qs = prob.adjoint_samples(q)
    fb = prob.cset.face_batch(Qs)
    w = prob.grid.weights
    f_star = 0.5 * float(w @ fb.sigma ** 2)
    a = prob.x_inner(prob.y_tilde, q)
    if f_star <= 0.0:
        return a, f_star, None, None
    ratio = a / math.sqrt(f_star)
    gF = prob.push_control(fb.sigma[:, None] * fb.vertex)
    grad = prob.y_tilde / math.sqrt(f_star) - a * gF / (2.0 * f_star ** 1.5)
    return a, f_star, ratio, grad


def _ratio_ascent(prob: ReachabilityProblem, q0: np.ndarray, max_iter: int,
                  pairing_floor: float = 0.0, use_ratio_cap: bool = True):
    """Backtracked sphere ascent of the reachability ratio from one start.

    Returns (blew_up, ratio, stationarity). A blowup means the iterates found
    a unit direction with pairing above ``pairing_floor`` and (numerically)
    vanishing support energy, or, with the cap enabled, drove the ratio past
    the divergence threshold.
    """
    q = q0.copy()
    a, f_star, ratio, grad = _ratio_terms(prob, q)
    if f_star <= 0.0:
        blown = a > pairing_floor
        return blown, (math.inf if blown else None), math.inf
    step = 1.0
    stat = math.inf
    for _ in range(max_iter):
        if use_ratio_cap and ratio > _RATIO_DIVERGENCE:
            return True, math.inf, math.inf
        gt = grad - prob.x_inner(grad, q) * q
        stat = prob.x_norm(gt)
        if stat <= 1e-9 * (1.0 + abs(ratio)):
            break
        t = step
        moved = False
        for _ in range(_MAX_BACKTRACKS):
            q_new = q + t * gt
            q_new /= max(prob.x_norm(q_new), 1e-300)
            a2, fs2, ratio2, grad2 = _ratio_terms(prob, q_new)
            if fs2 <= 0.0:
                if a2 > pairing_floor:
                    return True, math.inf, math.inf
                t *= 0.5
                continue
            if ratio2 >= ratio + _ARMIJO_C1 * t * stat ** 2:
                moved = True
                break
            t *= 0.5
        if not moved:
            break
        step = min(max(2.0 * t, 1e-12), 1e12)
        q, a, f_star, ratio, grad = q_new, a2, fs2, ratio2, grad2
    return False, ratio, stat


def estimate_c_star(prob: ReachabilityProblem, opts: SolverOptions = SolverOptions()) -> CStarEstimate:
    """Projected-gradient ascent of the reachability ratio on the unit sphere.

    The ratio <ytilde, q> / sqrt(F*(q)) is scale free, so the search lives on
    the sphere of the weighted state space. Stationary points with positive
    ratio are global by convexity of the underlying objective. A vanishing
    support energy with positive pairing, or a ratio beyond 1e6, is reported
    as infinity, not attained.
    """
    opts.validate()
    y_t = prob.y_tilde
    ytn = prob.x_norm(y_t)
    if ytn == 0.0:
        return CStarEstimate(0.0, True, 0.0)
    rng = np.random.default_rng(opts.seed)
    starts = [y_t / ytn]
    for _ in range(max(opts.n_restarts - 1, 0)):
        v = rng.standard_normal(prob.sys.n)
        if prob.x_inner(y_t, v) < 0:
            v = -v
        starts.append(v / max(prob.x_norm(v), 1e-300))
    best_value = 0.0
    best_stat = math.inf
    for q0 in starts:
        blew_up, ratio, stat = _ratio_ascent(prob, q0, opts.max_iter)
        if blew_up:
            return CStarEstimate(math.inf, False, math.inf)
        if ratio is not None and ratio > best_value:
            best_value, best_stat = ratio, stat
    attained = math.isfinite(best_value) and best_stat <= 1e-6 * (1.0 + best_value)
    return CStarEstimate(max(best_value, 0.0), attained, best_stat)


def check_cone_condition(prob: ReachabilityProblem, p_f, tol: float = 1e-9) -> ConeVerdict:
    """Polar-cone certificate check for a candidate direction.

    When every adjoint sample has (numerically) zero support, the direction
    certifies unreachability unless its pairing with the shifted target is
    nonpositive.
    """
    p_f = _check_state(prob, p_f)
    Qs = prob.adjoint_samples(p_f)
    sigma = prob.cset.face_batch(Qs).sigma
    if float(sigma.max(initial=0.0)) <= tol * prob.x_norm(p_f):
        if prob.x_inner(prob.y_tilde, p_f) > tol:
            return ConeVerdict.VIOLATED
        return ConeVerdict.SATISFIED
    return ConeVerdict.NOT_APPLICABLE


def _check_state(prob: ReachabilityProblem, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (prob.sys.n,):
        raise ValueError(f"p_f has shape {p.shape}, expected ({prob.sys.n},)")
    return p
