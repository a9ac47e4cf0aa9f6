"""Solving a learned or known equation for new data: minimum-norm kernel
solution subject to penalised boundary and equation constraints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la

from .gram import chol_jitter, chol_solve_T, gram_blocks
from .kernels import Kernel
from .onestep import BlockLeastSquares, LMConfig, LMResult, lm_minimize
from .operators import DiffOperatorSet, KnownPart, SolutionModel
from .twostep import merge_points

__all__ = [
    "Constraint",
    "AnalyticEquation",
    "SolveSpec",
    "SolveResult",
    "solve_learned_pde",
    "forecast_ode",
]


@dataclass
class Constraint:
    """Values of ``D^op v`` at ``points`` (one multi-index for all rows)."""

    points: np.ndarray
    values: np.ndarray
    op: tuple[int, ...] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        self.points = np.asarray(self.points, dtype=float).reshape(len(self.values), -1)


@dataclass
class AnalyticEquation:
    """Closed-form unknown part ``P(s)`` with its gradient in ``s``."""

    fun: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    ops: DiffOperatorSet
    known: KnownPart = field(default_factory=KnownPart)

    def __call__(self, S) -> np.ndarray:
        return np.asarray(self.fun(np.asarray(S, dtype=float)), dtype=float)

    def gradient(self, S, coords: Sequence[int] | None = None) -> np.ndarray:
        G = np.asarray(self.grad(np.asarray(S, dtype=float)), dtype=float)
        return G if coords is None else G[:, list(coords)]


@dataclass
class SolveSpec:
    """Inputs of the penalised solve.

    ``equation`` needs ``__call__(S)``, ``gradient(S, coords)``, ``ops`` and
    ``known``; :class:`~keql.twostep.EquationModel` and
    :class:`AnalyticEquation` both qualify.
    """

    equation: object
    Y: np.ndarray
    rhs: np.ndarray
    constraints: list[Constraint]
    kernel: Kernel
    sigma_b2: float = 1e-8
    sigma_f2: float = 1e-8
    lam: float = 1.0
    config: LMConfig = field(default_factory=lambda: LMConfig(max_iters=200))

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1, self.kernel.dim)
        self.rhs = np.asarray(self.rhs, dtype=float).ravel()
        if len(self.rhs) != len(self.Y):
            raise ValueError(f"{len(self.rhs)} right-hand side values for {len(self.Y)} grid points")
        if not (self.sigma_b2 > 0 and self.sigma_f2 > 0 and self.lam > 0):
            raise ValueError("penalty weights must be positive")


@dataclass
class SolveResult:
    model: SolutionModel
    residual: float
    relative_residual: float
    lm: LMResult


class _SolveProblem(BlockLeastSquares):
    def __init__(self, spec: SolveSpec):
        eq = spec.equation
        self.spec = spec
        self.ops: DiffOperatorSet = eq.ops
        d, Q = self.ops.dim, self.ops.Q
        Z = spec.Y
        for c in spec.constraints:
            Z, _ = merge_points(Z, c.points)
        self.Z = Z
        self.template = SolutionModel(spec.kernel, Z, np.zeros(len(Z)), "reduced")
        G = self.template.norm_matrix()
        self.C, _ = chol_jitter(0.5 * (G + G.T))
        K = len(spec.Y)
        self.K = K
        Fjac = gram_blocks(spec.kernel, self.template.blocks, [(op, spec.Y) for op in self.ops]).T
        self.feature_w = chol_solve_T(self.C, Fjac)
        Pbar = np.zeros((K, len(Z)))
        for c, a in eq.known.terms:
            Pbar += c * self.template.basis_matrix(spec.Y, a)
        self.known_w = chol_solve_T(self.C, Pbar)
        rows = [self.template.basis_matrix(c.points, c.op) for c in spec.constraints]
        self.obs_w = chol_solve_T(self.C, np.vstack(rows)) if rows else np.zeros((0, len(Z)))
        self.g = np.concatenate([c.values for c in spec.constraints]) if rows else np.zeros(0)
        self.a_b = math.sqrt(1.0 / (2.0 * spec.sigma_b2))
        self.a_f = math.sqrt(1.0 / (2.0 * spec.sigma_f2))
        self.n_z = 0
        self.block_sizes = (len(Z),)
        self.c_z = 1.0
        self.c_w = spec.lam
        self._coords = list(range(d, d + Q))

    def features(self, w):
        vals = (self.feature_w @ w).reshape(self.ops.Q, self.K).T
        return np.column_stack([self.spec.Y, vals])

    def pde_residual(self, w):
        return self.spec.equation(self.features(w)) + self.known_w @ w - self.spec.rhs

    def residual_block(self, m, z, w):
        return np.concatenate([self.a_b * (self.obs_w @ w - self.g), self.a_f * self.pde_residual(w)])

    def jacobian_block(self, m, z, w):
        S = self.features(w)
        F = np.concatenate(
            [self.a_b * (self.obs_w @ w - self.g), self.a_f * (self.spec.equation(S) + self.known_w @ w - self.spec.rhs)]
        )
        grad = self.spec.equation.gradient(S, self._coords)
        J = self.known_w.copy()
        K = self.K
        for q in range(self.ops.Q):
            J += grad[:, q : q + 1] * self.feature_w[q * K : (q + 1) * K]
        Jw = np.vstack([self.a_b * self.obs_w, self.a_f * J])
        return F, np.zeros((len(F), 0)), Jw

    def boundary_interpolant(self, guide: Constraint | None = None) -> np.ndarray:
        """Minimiser of the norm plus constraint terms, optionally also
        fitting ``guide`` values with the same weight."""
        rows, g = self.obs_w, self.g
        if guide is not None:
            rows = np.vstack([rows, chol_solve_T(self.C, self.template.basis_matrix(guide.points, guide.op))])
            g = np.concatenate([g, guide.values])
        A = self.c_w * np.eye(len(self.Z)) + self.a_b**2 * rows.T @ rows
        return la.solve(A, self.a_b**2 * rows.T @ g, assume_a="pos", check_finite=False)

    def solution(self, w) -> SolutionModel:
        alpha = la.solve_triangular(self.C, w, lower=True, trans="T", check_finite=False)
        return self.template.with_alpha(alpha)


def solve_learned_pde(
    spec: SolveSpec, init: np.ndarray | None = None, guide: Constraint | None = None
) -> SolveResult:
    """Penalised minimum-norm solution of ``(P + P_bar)(v) = f`` on ``Y``
    with the constraints of ``spec``.

    The basis is ``U(Z, .)`` over the grid joined with the constraint
    points. LM starts from ``init`` (transformed coefficients) when given,
    otherwise from the interpolant of the constraints and of the optional
    ``guide`` values (e.g. a previous solution on part of the grid).
    """
    problem = _SolveProblem(spec)
    w0 = problem.boundary_interpolant(guide) if init is None else np.asarray(init, dtype=float)
    res = lm_minimize(problem, np.zeros(0), [w0], spec.config)
    w = res.state.w[0]
    r = problem.pde_residual(w)
    nrm = float(np.linalg.norm(spec.rhs))
    rel = float(np.linalg.norm(r)) / nrm if nrm > 0 else math.inf
    return SolveResult(problem.solution(w), float(np.linalg.norm(r)), rel, res)


def forecast_ode(
    equation,
    u0: float,
    v0: float,
    t_grid,
    forcing: Callable[[np.ndarray], np.ndarray],
    kernel: Kernel,
    continuation: float | None = None,
    **kwargs,
) -> SolveResult:
    """Second-order initial-value solve on ``t_grid`` with ``u(t0) = u0``
    and ``u'(t0) = v0`` imposed as constraint functionals.

    Parameters
    ----------
    continuation
        If given, solve on windows growing by this length and start each
        solve from a fit of the previous solution. A single global solve
        from the constraint interpolant tends to stall in spurious minima
        once the window spans several oscillations.
    """
    t_grid = np.asarray(t_grid, dtype=float).reshape(-1, 1)
    t0 = t_grid[:1]
    cons = [Constraint(t0, [u0], (0,)), Constraint(t0, [v0], (1,))]
    ends = [float(t_grid[-1, 0])]
    if continuation is not None:
        if not continuation > 0:
            raise ValueError("continuation length must be positive")
        ends = list(np.arange(float(t0[0, 0]) + continuation, ends[0], continuation)) + ends
    result, guide = None, None
    for end in ends:
        sub = t_grid[t_grid[:, 0] <= end + 1e-12]
        spec = SolveSpec(equation, sub, forcing(sub), cons, kernel, **kwargs)
        result = solve_learned_pde(spec, guide=guide)
        guide = Constraint(sub, result.model.evaluate(sub), (0,))
    return result
