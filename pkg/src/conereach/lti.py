"""Finite-dimensional linear system machinery.

Matrix exponentials, the input-to-state quadrature map and its adjoint on a
midpoint time grid, forward simulation, and the algebraic rank tests used to
certify that adjoint trajectories avoid singular directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


@dataclass(frozen=True)
class LtiSystem:
    """Matrices of the control system ydot = A y + B u."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError(f"B must have {A.shape[0]} rows, got shape {B.shape}")
        if not (np.isfinite(A).all() and np.isfinite(B).all()):
            raise ValueError("system matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class TimeGrid:
    """Midpoint rule on (0, T): nodes (i + 1/2) T/N, uniform weights T/N."""

    T: float
    N: int
    nodes: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("final time T must be positive")
        if self.N < 2:
            raise ValueError("grid must have at least 2 intervals")
        h = self.T / self.N
        object.__setattr__(self, "nodes", (np.arange(self.N) + 0.5) * h)
        object.__setattr__(self, "weights", np.full(self.N, h))

    @property
    def h(self) -> float:
        return self.T / self.N


def expm(M, t: float = 1.0) -> np.ndarray:
    """Matrix exponential e^{t M} (scaling and squaring, Pade core)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expm needs a square matrix, got shape {M.shape}")
    if not np.isfinite(M).all():
        raise ValueError("expm input must be finite")
    return scipy.linalg.expm(t * M)


def node_kernels(sys: LtiSystem, grid: TimeGrid) -> np.ndarray:
    """Array K with K[i] = e^{(T - t_i) A} B for every grid node.

    Built blockwise: exact exponentials every 128 steps, single-step
    multiplications in between, keeping roundoff drift negligible.
    """
    N, h = grid.N, grid.h
    A, B = sys.A, sys.B
    Eh = expm(A, h)
    K = np.empty((N, sys.n, sys.m))
    block = 128
    for start in range(0, N, block):
        M = expm(A, (start + 0.5) * h)
        for j in range(start, min(start + block, N)):
            K[N - 1 - j] = M @ B
            M = Eh @ M
    return K


def adjoint_trajectory(sys: LtiSystem, p_f, grid: TimeGrid) -> np.ndarray:
    """Samples q_i = B^T e^{(T - t_i) A^T} p_f of the adjoint trajectory."""
    p_f = _check_vec(p_f, sys.n, "p_f")
    K = node_kernels(sys, grid)
    return np.einsum("inm,n->im", K, p_f)


def apply_LT(sys: LtiSystem, u, grid: TimeGrid) -> np.ndarray:
    """Quadrature of the input-to-state integral for a gridded control."""
    u = _check_control(u, sys.m, grid.N)
    K = node_kernels(sys, grid)
    return np.einsum("inm,im->n", K, grid.weights[:, None] * u)


def simulate_forward(sys: LtiSystem, y0, u, grid: TimeGrid) -> np.ndarray:
    """Terminal state e^{T A} y0 plus the control contribution."""
    y0 = _check_vec(y0, sys.n, "y0")
    return expm(sys.A, grid.T) @ y0 + apply_LT(sys, u, grid)


def controllability_matrix(sys: LtiSystem) -> np.ndarray:
    blocks = []
    M = sys.B.copy()
    for _ in range(sys.n):
        blocks.append(M)
        M = sys.A @ M
    return np.hstack(blocks)


def kalman_rank(sys: LtiSystem) -> int:
    """Numerical rank of [B, AB, ..., A^{n-1} B]."""
    C = controllability_matrix(sys)
    s = np.linalg.svd(C, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int((s > sys.n * s[0] * 1e-12).sum())


def strong_kalman_check(sys: LtiSystem) -> bool:
    """True when every column pair sum and difference is itself controllable."""
    if sys.m < 2:
        raise ValueError("strong Kalman test needs at least 2 control columns")
    n = sys.n
    for j in range(sys.m):
        for l in range(j + 1, sys.m):
            for col in (sys.B[:, j] + sys.B[:, l], sys.B[:, j] - sys.B[:, l]):
                single = LtiSystem(sys.A, col.reshape(-1, 1))
                if kalman_rank(single) < n:
                    return False
    return True


def rank_family_test(sys: LtiSystem, basis_b) -> bool:
    """True when {A^j b : b in basis, j < n} spans the whole state space.

    Powers beyond n - 1 are redundant by Cayley-Hamilton, so the family is
    truncated there.
    """
    basis = [np.asarray(b, dtype=float) for b in np.atleast_2d(basis_b)]
    if len(basis) == 0:
        raise ValueError("rank_family_test needs a nonempty basis")
    vecs = []
    for b in basis:
        if b.shape != (sys.n,):
            raise ValueError(f"basis vector has shape {b.shape}, expected ({sys.n},)")
        v = b.copy()
        for _ in range(sys.n):
            vecs.append(v)
            v = sys.A @ v
    F = np.stack(vecs, axis=0)
    s = np.linalg.svd(F, compute_uv=False)
    if s[0] == 0.0:
        return False
    return int((s > max(F.shape) * s[0] * 1e-12).sum()) == sys.n


def _check_vec(v, n: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


def _check_control(u, m: int, N: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (N, m):
        raise ValueError(f"control has shape {u.shape}, expected ({N}, {m})")
    return u
