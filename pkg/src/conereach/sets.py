"""Generating constraint sets and their exact convex geometry.

Each set describes a bounded convex body containing the origin (the relaxed
generating set) together with the possibly nonconvex cone it was built from.
The solver layers only ever need four callables per set:

- ``gauge``: Minkowski functional of the relaxed set,
- ``support``: support function of the relaxed set,
- ``support_face``: value plus argmax structure of the support problem,
- ``in_original_cone``: membership test for the original constraint cone.

All operations are pure and vectorized variants (``*_batch``) operate on
arrays with one row per query vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np


class FaceStatus(Enum):
    ZERO_SUPPORT = "zero_support"
    UNIQUE = "unique_maximizer"
    SINGULAR = "singular"


@dataclass(frozen=True)
class FaceResult:
    """Support value of a direction plus the structure of its maximizers.

    ``vector`` is an extreme-point maximizer (None when the support is zero).
    ``witness`` is a second, distinct maximizer and is set only in the
    singular case. ``fractional_index`` marks the one knapsack boundary cell
    that may be filled partially (bathtub sets only, never rounded away).
    """

    value: float
    status: FaceStatus
    vector: Optional[np.ndarray] = None
    witness: Optional[np.ndarray] = None
    fractional_index: Optional[int] = None


@dataclass
class FaceBatch:
    """Vectorized face data for a stack of directions (one row each).

    ``vertex`` rows are valid maximizers even at singular rows (a
    deterministic representative is chosen). Rows with ``zero`` set have a
    zero vertex. ``fractional`` holds the partially filled cell index or -1.
    """

    sigma: np.ndarray
    vertex: np.ndarray
    singular: np.ndarray
    zero: np.ndarray
    fractional: np.ndarray


class ConstraintSet:
    """Base class: dimension, tolerances and the scalar/batch operation API."""

    dim: int
    #: weight of the control-space inner product (cell width for bathtub sets)
    weight: float = 1.0

    def __init__(self, dim: int, tol_singular: float = 1e-9):
        if dim < 1:
            raise ValueError(f"set dimension must be >= 1, got {dim}")
        if tol_singular < 0:
            raise ValueError("tol_singular must be nonnegative")
        self.dim = int(dim)
        self.tol_singular = float(tol_singular)

    # -- inner product of the control space ---------------------------------
    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return self.weight * float(np.dot(a, b))

    # -- scalar API ----------------------------------------------------------
    def gauge(self, u) -> float:
        """Minkowski functional of the relaxed set (math.inf if infeasible)."""
        u = self._check_vec(u, "u")
        return float(self.gauge_batch(u[None, :])[0])

    def support(self, q) -> float:
        q = self._check_vec(q, "q")
        return float(self.face_batch(q[None, :]).sigma[0])

    def support_face(self, q) -> FaceResult:
        q = self._check_vec(q, "q")
        fb = self.face_batch(q[None, :])
        value = float(fb.sigma[0])
        frac = int(fb.fractional[0])
        frac_idx = None if frac < 0 else frac
        if fb.zero[0]:
            return FaceResult(value=value, status=FaceStatus.ZERO_SUPPORT)
        if fb.singular[0]:
            rep = fb.vertex[0].copy()
            wit = self._witness(q, rep)
            return FaceResult(value=value, status=FaceStatus.SINGULAR,
                              vector=rep, witness=wit, fractional_index=frac_idx)
        return FaceResult(value=value, status=FaceStatus.UNIQUE,
                          vector=fb.vertex[0].copy(), fractional_index=frac_idx)

    def in_original_cone(self, u, tol: float) -> bool:
        u = self._check_vec(u, "u")
        return bool(self.in_cone_batch(u[None, :], tol)[0])

    # -- batch API (implemented per variant) ---------------------------------
    def gauge_batch(self, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def face_batch(self, Q: np.ndarray) -> FaceBatch:
        raise NotImplementedError

    def in_cone_batch(self, U: np.ndarray, tol: float) -> np.ndarray:
        raise NotImplementedError

    def _witness(self, q: np.ndarray, rep: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- helpers --------------------------------------------------------------
    def _check_vec(self, v, name: str) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(
                f"{name} has shape {v.shape}, expected ({self.dim},) for {type(self).__name__}")
        return v

    def _check_mat(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[1] != self.dim:
            raise ValueError(
                f"batch has shape {V.shape}, expected (N, {self.dim}) for {type(self).__name__}")
        return V

    def describe(self) -> str:
        return f"{type(self).__name__}(dim={self.dim})"


def _row_norms(V: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", V, V))


class EuclideanBall(ConstraintSet):
    """Unit Euclidean ball; the generated cone is the whole space."""

    def gauge_batch(self, U):
        U = self._check_mat(U)
        return _row_norms(U)

    def face_batch(self, Q):
        Q = self._check_mat(Q)
        n = Q.shape[0]
        nq = _row_norms(Q)
        zero = nq <= 0.0
        safe = np.where(zero, 1.0, nq)
        vertex = Q / safe[:, None]
        vertex[zero] = 0.0
        return FaceBatch(sigma=nq, vertex=vertex,
                         singular=np.zeros(n, dtype=bool), zero=zero,
                         fractional=np.full(n, -1, dtype=int))

    def in_cone_batch(self, U, tol):
        U = self._check_mat(U)
        return np.ones(U.shape[0], dtype=bool)

    def _witness(self, q, rep):  # pragma: no cover - no singular directions
        raise RuntimeError("EuclideanBall has no singular directions")


class KSparseBox(ConstraintSet):
    """Controls with at most k active components, generated by the unit box.

    The relaxed set is the intersection of the supremum-norm unit ball with
    the one-norm ball of radius k. Its support of q sums the k largest
    absolute entries; the argmax is the sign pattern on those entries and is
    unique exactly when the k-th and (k+1)-th largest magnitudes differ.
    """

    def __init__(self, dim: int, k: int, tol_singular: float = 1e-9):
        super().__init__(dim, tol_singular)
        if not 1 <= k <= dim:
            raise ValueError(f"sparsity k={k} must satisfy 1 <= k <= {dim}")
        self.k = int(k)

    def gauge_batch(self, U):
        U = self._check_mat(U)
        A = np.abs(U)
        return np.maximum(A.sum(axis=1) / self.k, A.max(axis=1))

    def face_batch(self, Q):
        Q = self._check_mat(Q)
        n, m, k = Q.shape[0], self.dim, self.k
        A = np.abs(Q)
        S = -np.sort(-A, axis=1)
        sigma = S[:, :k].sum(axis=1)
        nq = _row_norms(Q)
        band = self.tol_singular * nq
        kth = S[:, k - 1]
        next_ = S[:, k] if k < m else np.zeros(n)
        zero = sigma <= band
        singular = ((kth - next_) <= band) & ~zero
        # representative: sign pattern on the k stable-sorted top slots
        order = np.argsort(-A, axis=1, kind="stable")[:, :k]
        vertex = np.zeros_like(Q)
        signs = np.sign(np.take_along_axis(Q, order, axis=1))
        np.put_along_axis(vertex, order, signs, axis=1)
        vertex[zero] = 0.0
        return FaceBatch(sigma=sigma, vertex=vertex, singular=singular,
                         zero=zero, fractional=np.full(n, -1, dtype=int))

    def in_cone_batch(self, U, tol):
        U = self._check_mat(U)
        return (np.abs(U) > tol).sum(axis=1) <= self.k

    def _witness(self, q, rep):
        # swap the k-th occupied slot with the tied next-largest magnitude
        order = np.argsort(-np.abs(q), kind="stable")
        wit = rep.copy()
        i_k, i_k1 = order[self.k - 1], order[self.k] if self.k < self.dim else None
        wit[i_k] = 0.0
        if i_k1 is not None:
            s = np.sign(q[i_k1])
            wit[i_k1] = s if s != 0.0 else 1.0
        else:
            wit[i_k] = -rep[i_k] if rep[i_k] != 0.0 else 1.0
        return wit


class ToyHalfMix(ConstraintSet):
    """Planar set: half Euclidean disk (u1 >= 0) glued to half diamond (u1 <= 0).

    Generates the cone {u1 >= 0} union the nonpositive u1 axis. Singular
    directions are the two open rays through (-1, 1) and (-1, -1).
    """

    _V_UP = np.array([0.0, 1.0])
    _V_DOWN = np.array([0.0, -1.0])
    _V_LEFT = np.array([-1.0, 0.0])

    def __init__(self, dim: int = 2, tol_singular: float = 1e-9):
        if dim != 2:
            raise ValueError("ToyHalfMix is two-dimensional")
        super().__init__(2, tol_singular)

    def gauge_batch(self, U):
        U = self._check_mat(U)
        l1 = np.abs(U).sum(axis=1)
        l2 = _row_norms(U)
        return np.where(U[:, 0] > 0.0, l2, l1)

    def face_batch(self, Q):
        Q = self._check_mat(Q)
        n = Q.shape[0]
        q1, q2 = Q[:, 0], Q[:, 1]
        nq = _row_norms(Q)
        band = self.tol_singular * nq
        right = q1 > 0.0
        sigma = np.where(right, nq, np.maximum(np.abs(q1), np.abs(q2)))
        zero = sigma <= band
        singular = (q1 < 0.0) & ((np.abs(q1 + q2) <= band) | (np.abs(q2 - q1) <= band))
        singular &= ~zero

        vertex = np.zeros_like(Q)
        safe = np.where(nq > 0.0, nq, 1.0)
        vertex[right] = (Q / safe[:, None])[right]
        left = ~right
        up = left & (q2 > -q1)
        down = left & (q2 < q1)
        mid = left & ~up & ~down
        vertex[up] = self._V_UP
        vertex[down] = self._V_DOWN
        vertex[mid] = self._V_LEFT
        vertex[zero] = 0.0
        return FaceBatch(sigma=sigma, vertex=vertex, singular=singular,
                         zero=zero, fractional=np.full(n, -1, dtype=int))

    def in_cone_batch(self, U, tol):
        U = self._check_mat(U)
        return (U[:, 0] >= -tol) | (np.abs(U[:, 1]) <= tol)

    def _witness(self, q, rep):
        # upper ray exposes the face [(-1,0),(0,1)], lower ray [(-1,0),(0,-1)]
        on_upper = abs(q[0] + q[1]) <= abs(q[1] - q[0])
        other = self._V_UP if on_upper else self._V_DOWN
        if np.allclose(rep, other):
            return self._V_LEFT.copy()
        return other.copy()


class BathtubBox(ConstraintSet):
    """Cell-discretized nonnegative controls with a total mass budget.

    The relaxed set is {0 <= u <= 1, sum(u) * dx <= mass}; the original cone
    consists of two-level profiles M * indicator with indicator mass at most
    ``mass``. Support maximization is a fractional knapsack: fill cells by
    descending positive value until the budget runs out, at most one cell
    partially. Inner products carry the cell width dx.
    """

    def __init__(self, cells: int, dx: float, mass: float, tol_singular: float = 1e-9):
        super().__init__(cells, tol_singular)
        if dx <= 0:
            raise ValueError("cell width dx must be positive")
        if mass <= 0:
            raise ValueError("mass budget must be positive")
        self.dx = float(dx)
        self.mass = float(mass)
        self.weight = float(dx)
        # budget in cells; full cells f plus fractional remainder r
        self._cell_budget = self.mass / self.dx
        self._full = int(math.floor(self._cell_budget))
        self._frac = self._cell_budget - self._full

    def inner(self, a, b) -> float:
        return self.dx * float(np.dot(a, b))

    def gauge_batch(self, U):
        U = self._check_mat(U)
        out = np.maximum(U.max(axis=1, initial=0.0),
                         U.sum(axis=1) * self.dx / self.mass)
        out = np.where((U < 0.0).any(axis=1), math.inf, out)
        return out

    def face_batch(self, Q):
        Q = self._check_mat(Q)
        n, nc = Q.shape
        f, r, c = self._full, self._frac, self._cell_budget
        pos = np.maximum(Q, 0.0)
        S = -np.sort(-pos, axis=1)
        if c >= nc:
            sigma = self.dx * S.sum(axis=1)
        else:
            sigma = self.dx * (S[:, :f].sum(axis=1) + r * S[:, f])
        nq = _row_norms(Q)
        band = self.tol_singular * nq
        zero = sigma <= band

        npos = (Q > band[:, None]).sum(axis=1)
        has_zero_cell = (np.abs(Q) <= band[:, None]).any(axis=1)
        binding = npos > c
        slack = c - npos
        sing_nb = has_zero_cell & (slack > 1e-12 * max(1.0, c))
        if c >= nc:
            singular = sing_nb
        else:
            if r > 0.0:
                theta = S[:, f]
                tie = np.zeros(n, dtype=bool)
                if f >= 1:
                    tie |= (S[:, f - 1] - theta) <= band
                if f + 1 < nc:
                    tie |= (theta - S[:, f + 1]) <= band
                sing_b = tie
            else:
                sing_b = (S[:, f - 1] - S[:, f]) <= band
            singular = np.where(binding, sing_b, sing_nb)
        singular = singular & ~zero

        # representative: greedy fill of strictly positive cells, stable order
        order = np.argsort(-pos, axis=1, kind="stable")
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(nc)[None, :].repeat(n, axis=0), axis=1)
        if c >= nc:
            fill = np.ones((n, nc))
        else:
            fill = np.where(ranks < f, 1.0, np.where(ranks == f, r, 0.0))
        vertex = np.where(Q > 0.0, fill, 0.0)
        vertex[zero] = 0.0

        fractional = np.full(n, -1, dtype=int)
        if 0.0 < r < 1.0 and c < nc:
            frac_cell = order[:, f]
            frac_val = np.take_along_axis(Q, frac_cell[:, None], axis=1)[:, 0]
            ok = (frac_val > 0.0) & ~zero
            fractional[ok] = frac_cell[ok]
        return FaceBatch(sigma=sigma, vertex=vertex, singular=singular,
                         zero=zero, fractional=fractional)

    def in_cone_batch(self, U, tol):
        U = self._check_mat(U)
        level = U.max(axis=1, initial=0.0)
        nonneg = (U >= -tol).all(axis=1)
        near0 = np.abs(U) <= tol
        nearM = np.abs(U - level[:, None]) <= tol
        two_level = (near0 | nearM).all(axis=1) & nonneg
        count = nearM.sum(axis=1)
        mass_ok = count * self.dx <= self.mass + tol
        zero_ctrl = (np.abs(U) <= tol).all(axis=1)
        return zero_ctrl | (two_level & mass_ok & (level > tol))

    def _witness(self, q, rep):
        f, r, c = self._full, self._frac, self._cell_budget
        nq = float(np.linalg.norm(q))
        band = self.tol_singular * nq
        pos = np.maximum(q, 0.0)
        order = np.argsort(-pos, kind="stable")
        npos = int((q > band).sum())
        wit = rep.copy()
        if npos <= c:
            # slack case: load one zero-valued cell with the spare budget
            zero_cells = np.nonzero(np.abs(q) <= band)[0]
            j = int(zero_cells[0])
            wit[j] = min(1.0, c - npos)
            return wit
        theta_pos = f if (r > 0.0 and c < self.dim) else f - 1
        theta = pos[order[theta_pos]]
        tied = [i for i in order if abs(pos[i] - theta) <= band]
        lo, hi = tied[0], tied[-1]
        wit[lo], wit[hi] = rep[hi], rep[lo]
        if np.allclose(wit, rep):
            # redistribute the marginal fill between two tied cells
            delta = min(rep[lo] if rep[lo] > 0 else rep[hi], 1.0 - min(rep[lo], rep[hi]), 0.5)
            wit[lo] = rep[lo] - delta
            wit[hi] = rep[hi] + delta
        return wit

    def describe(self) -> str:
        return f"BathtubBox(cells={self.dim}, dx={self.dx}, mass={self.mass})"


def conjugacy_residual(cset: ConstraintSet, samples, grid_step: float = 1e-2,
                       radius: Optional[float] = None) -> float:
    """Worst-case mismatch between half the squared gauge and the discrete
    conjugate of half the squared support, over the given sample points.

    A brute-force grid kernel for property tests; rejects dimension > 3.
    Samples with infinite gauge are skipped (the grid maximum is finite).
    """
    if cset.dim > 3:
        raise ValueError("conjugacy_residual is limited to dimension <= 3")
    X = cset._check_mat(np.atleast_2d(np.asarray(samples, dtype=float)))
    gauges = cset.gauge_batch(X)
    finite = np.isfinite(gauges)
    if not finite.any():
        return 0.0
    X, gauges = X[finite], gauges[finite]
    if radius is None:
        rng = np.random.default_rng(12345)
        dirs = rng.standard_normal((512, cset.dim))
        dirs /= _row_norms(dirs)[:, None]
        sig = cset.face_batch(dirs).sigma
        ok = sig > 1e-12
        rho = float((np.abs(dirs[ok]).max(axis=1) / sig[ok]).max())
        radius = 1.1 * rho * max(float(gauges.max()), 1.0) + grid_step
    axes = [np.arange(-radius, radius + grid_step / 2, grid_step)] * cset.dim
    mesh = np.meshgrid(*axes, indexing="ij")
    Y = np.stack([m.ravel() for m in mesh], axis=1)
    if Y.shape[0] > 3_000_000:
        raise ValueError("conjugate grid too large; coarsen grid_step or shrink radius")
    half_sig2 = 0.5 * cset.face_batch(Y).sigma ** 2
    XY = cset.weight * (X @ Y.T)
    conj = (XY - half_sig2[None, :]).max(axis=1)
    return float(np.abs(0.5 * gauges ** 2 - conj).max())


def make_set(spec: dict) -> ConstraintSet:
    """Build a constraint set from a scenario table (variant plus parameters)."""
    if "variant" not in spec:
        raise ValueError("set table is missing the 'variant' field")
    variant = spec["variant"]
    tol = float(spec.get("tol_singular", 1e-9))
    try:
        if variant == "euclidean_ball":
            return EuclideanBall(int(spec["dim"]), tol_singular=tol)
        if variant == "k_sparse_box":
            return KSparseBox(int(spec["dim"]), int(spec["k"]), tol_singular=tol)
        if variant == "toy_half_mix":
            return ToyHalfMix(int(spec.get("dim", 2)), tol_singular=tol)
        if variant == "bathtub_box":
            return BathtubBox(int(spec["cells"]), float(spec["dx"]),
                              float(spec["mass"]), tol_singular=tol)
    except KeyError as exc:
        raise ValueError(f"set variant '{variant}' is missing field {exc}") from None
    raise ValueError(f"unknown set variant '{variant}'")
