"""Gram matrices of derivative functionals, jittered Cholesky, Nystrom
subsampling and the block-arrowhead normal-equation solver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as la

from .kernels import Kernel

__all__ = [
    "Block",
    "NotPositiveDefinite",
    "gram_blocks",
    "gram_functionals",
    "cross_gram",
    "chol_jitter",
    "chol_solve_T",
    "eigh_factor",
    "ArrowheadSystem",
    "arrowhead_solve",
    "arrowhead_dense",
    "nystrom_select",
]

log = logging.getLogger(__name__)

# A block of functionals: one multi-index applied at every row of ``points``.
Block = tuple[tuple[int, ...], np.ndarray]


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky failed for every jitter level tried."""


def gram_blocks(k: Kernel, rows: Sequence[Block], cols: Sequence[Block]) -> np.ndarray:
    """Matrix of ``D_x^a D_y^b k(p, p')`` for row functionals ``(a, p)`` and
    column functionals ``(b, p')``, laid out block by block."""
    n_rows = sum(len(p) for _, p in rows)
    n_cols = sum(len(p) for _, p in cols)
    out = np.empty((n_rows, n_cols))
    i = 0
    for a, P in rows:
        j = 0
        for b, Q in cols:
            if len(P) and len(Q):
                out[i : i + len(P), j : j + len(Q)] = k.deriv(P, Q, a, b)
            j += len(Q)
        i += len(P)
    return out


def _group(functionals, grid: np.ndarray) -> tuple[list[Block], np.ndarray]:
    """Group ``DiffFunctional``-like items by multi-index; return the blocks
    and the permutation mapping block order back to input order."""
    order: dict[tuple[int, ...], list[int]] = {}
    for pos, phi in enumerate(functionals):
        order.setdefault(tuple(phi.op), []).append(pos)
    blocks, perm = [], []
    for op, positions in order.items():
        idx = [functionals[p].index for p in positions]
        blocks.append((op, grid[idx]))
        perm.extend(positions)
    return blocks, np.asarray(perm, dtype=int)


def gram_functionals(k: Kernel, functionals, grid) -> np.ndarray:
    """Symmetric Gram matrix among functionals ``delta_{y_i} o D^{a_i}``."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 1 and k.dim == 1:
        grid = grid.reshape(-1, 1)
    blocks, perm = _group(list(functionals), grid)
    G = gram_blocks(k, blocks, blocks)
    out = np.empty_like(G)
    out[np.ix_(perm, perm)] = G
    return 0.5 * (out + out.T)


def cross_gram(k: Kernel, functionals, grid, points, op=None) -> np.ndarray:
    """``U(phi, y)`` for every functional (rows) and point (columns); ``op``
    optionally applies a derivative in the second argument."""
    grid = np.asarray(grid, dtype=float).reshape(-1, k.dim)
    points = np.asarray(points, dtype=float).reshape(-1, k.dim)
    functionals = list(functionals)
    if not functionals:
        return np.zeros((0, len(points)))
    blocks, perm = _group(functionals, grid)
    b = (0,) * k.dim if op is None else tuple(op)
    G = gram_blocks(k, blocks, [(b, points)])
    out = np.empty_like(G)
    out[perm] = G
    return out


def chol_jitter(A, base_jitter: float | None = None, max_tries: int = 8) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + jitter * I`` with escalating jitter.

    The first attempt uses ``base_jitter`` (default ``1e-10 * trace(A) / n``),
    each failure multiplies the jitter by ten.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    scale = max(float(np.trace(A)) / n, np.finfo(float).tiny)
    default = 1e-10 * scale
    jitter = default if base_jitter is None else float(base_jitter)
    eye = np.eye(n)
    for attempt in range(max_tries):
        try:
            L = la.cholesky(A + jitter * eye, lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                if attempt:
                    log.debug("cholesky succeeded with jitter %.3e after %d tries", jitter, attempt + 1)
                return L, jitter
        except la.LinAlgError:
            pass
        jitter = jitter * 10.0 if jitter > 0 else default
    raise NotPositiveDefinite(f"matrix not positive definite after {max_tries} jitter levels")


def eigh_factor(A, rtol: float = 1e-10) -> np.ndarray:
    """Tall factor ``C`` with ``C C^T ~= A`` from the eigenpairs above
    ``rtol * max eigenvalue``; the rank-revealing alternative to Cholesky."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] == 0:
        return np.zeros((0, 0))
    w, V = la.eigh(0.5 * (A + A.T), check_finite=False)
    keep = w > rtol * max(float(w[-1]), np.finfo(float).tiny)
    return V[:, keep] * np.sqrt(w[keep])


def chol_solve_T(L: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``M @ L^{-T}`` for lower-triangular ``L``."""
    if L.shape[0] == 0:
        return np.zeros((M.shape[0], 0))
    return la.solve_triangular(L, M.T, lower=True, check_finite=False).T


@dataclass
class ArrowheadSystem:
    """Symmetric system ``[[A_P, B^T], [B, D]] [x_P; x_U] = [F_P; F_U]``.

    ``D`` is block diagonal with blocks ``D_U[m]``; ``B_UP[m]`` couples
    block ``m`` to the dense corner ``A_P``.
    """

    A_P: np.ndarray
    B_UP: list[np.ndarray]
    D_U: list[np.ndarray]
    F_P: np.ndarray
    F_U: list[np.ndarray]
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n_p = self.A_P.shape[0]
        if self.A_P.shape != (n_p, n_p) or self.F_P.shape != (n_p,):
            raise ValueError("A_P/F_P shapes are inconsistent")
        if not (len(self.B_UP) == len(self.D_U) == len(self.F_U)):
            raise ValueError("B_UP, D_U and F_U must have one entry per block")
        for B, D, F in zip(self.B_UP, self.D_U, self.F_U):
            n_m = D.shape[0]
            if D.shape != (n_m, n_m) or B.shape != (n_m, n_p) or F.shape != (n_m,):
                raise ValueError("block shapes are inconsistent")

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Assemble the full matrix and right-hand side."""
        return arrowhead_dense(self)


def arrowhead_dense(sys: ArrowheadSystem) -> tuple[np.ndarray, np.ndarray]:
    sizes = [D.shape[0] for D in sys.D_U]
    n_p = sys.A_P.shape[0]
    n = n_p + sum(sizes)
    A = np.zeros((n, n))
    A[:n_p, :n_p] = sys.A_P
    i = n_p
    for B, D in zip(sys.B_UP, sys.D_U):
        m = D.shape[0]
        A[i : i + m, i : i + m] = D
        A[i : i + m, :n_p] = B
        A[:n_p, i : i + m] = B.T
        i += m
    rhs = np.concatenate([sys.F_P, *sys.F_U]) if sys.F_U else sys.F_P.copy()
    return A, rhs


def _svd_solver(M: np.ndarray):
    U, s, Vt = la.svd(M, check_finite=False)
    cutoff = s[0] * max(M.shape) * np.finfo(float).eps if s.size else 0.0
    inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)

    def solve(R):
        return Vt.T @ (inv[:, None] * (U.T @ R)) if R.ndim == 2 else Vt.T @ (inv * (U.T @ R))

    return solve, "svd"


def _spd_solver(M: np.ndarray):
    try:
        c = la.cho_factor(M, lower=True, check_finite=False)
        if not np.all(np.isfinite(c[0])):
            raise la.LinAlgError("non-finite factor")
    except la.LinAlgError:
        return _svd_solver(M)
    return (lambda R: la.cho_solve(c, R, check_finite=False)), "cholesky"


def arrowhead_solve(sys: ArrowheadSystem, solver: str = "cholesky") -> np.ndarray:
    """Solve an :class:`ArrowheadSystem` by block elimination.

    Each diagonal block is factored once; the Schur complement
    ``A_P - sum B^T D^-1 B`` is solved by Cholesky, or by SVD
    (least-squares) when it is not numerically positive definite or when
    ``solver="svd"``.
    """
    n_p = sys.A_P.shape[0]
    C = sys.A_P.copy()
    r = sys.F_P.copy()
    solves = []
    methods = []
    for B, D, F in zip(sys.B_UP, sys.D_U, sys.F_U):
        if solver == "svd":
            solve, method = _svd_solver(D)
        else:
            solve, method = _spd_solver(D)
        methods.append(method)
        DiB = solve(B) if n_p else np.zeros_like(B)
        DiF = solve(F)
        if n_p:
            C -= B.T @ DiB
            r -= B.T @ DiF
        solves.append((DiB, DiF))
    if n_p:
        C = 0.5 * (C + C.T)
        if solver == "svd":
            solve_c, method = _svd_solver(C)
        else:
            solve_c, method = _spd_solver(C)
        x_p = solve_c(r)
        sys.info["schur"] = method
    else:
        x_p = np.zeros(0)
    sys.info["blocks"] = methods
    parts = [x_p]
    for DiB, DiF in solves:
        parts.append(DiF - DiB @ x_p if n_p else DiF)
    return np.concatenate(parts)


def nystrom_select(candidates, count: int, seed: int = 0) -> np.ndarray:
    """Uniform subsample without replacement of ``count`` rows of ``candidates``.

    Selected rows keep their original order. ``count == len(candidates)``
    returns every row.
    """
    candidates = np.asarray(candidates, dtype=float)
    n = len(candidates)
    if count > n:
        raise ValueError(f"cannot select {count} inducing points from {n} candidates")
    if count < 0:
        raise ValueError("inducing point count must be nonnegative")
    if count == n:
        return candidates.copy()
    rng = np.random.Generator(np.random.Philox(seed))
    idx = np.sort(rng.choice(n, size=count, replace=False))
    return candidates[idx].copy()
