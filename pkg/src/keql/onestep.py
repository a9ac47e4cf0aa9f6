"""One-step equation learning: joint recovery of the solutions and the
operator by a damped Levenberg-Marquardt iteration.

After the Cholesky change of variables ``w_m = C_U^T alpha_m`` and
``z = C_P^T beta`` the objective reads

    c_z |z|^2 + c_w sum_m |w_m|^2 + sum_m |F_m(z, w_m)|^2

with ``F_m`` stacking the weighted observation misfit and the weighted
equation residual on the collocation grid. Each residual block depends on
``z`` and on its own ``w_m`` only, so the normal equations of every LM
subproblem have block-arrowhead structure.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la

from .gram import (
    ArrowheadSystem,
    arrowhead_dense,
    arrowhead_solve,
    chol_jitter,
    chol_solve_T,
    eigh_factor,
    gram_blocks,
    nystrom_select,
)
from .kernels import HybridProduct, Kernel
from .operators import (
    DiffOperatorSet,
    KnownPart,
    SolutionModel,
    feature_map,
)
from .twostep import EquationModel, ObservationSet, TwoStepResult, fit_2step, merge_points

__all__ = [
    "LMConfig",
    "LMState",
    "LMResult",
    "BlockLeastSquares",
    "FunctionLeastSquares",
    "OneStepProblem",
    "OneStepResult",
    "Linearization",
    "nugget_weights",
    "build_problem",
    "objective",
    "linearize",
    "lm_step",
    "gain_ratio",
    "update_damping",
    "lm_minimize",
    "fit_1step",
    "history_csv",
]

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# generic damped LM over block-arrowhead least squares
# --------------------------------------------------------------------------


@dataclass
class LMConfig:
    """Damping and termination controls.

    The damping ``lam`` is rescaled by ``b`` according to the gain ratio:
    below ``c0`` the step is rejected, below ``c1`` damping grows, above
    ``c2`` it shrinks.
    """

    lam0: float = 1.0
    b: float = 2.0
    c0: float = 1e-4
    c1: float = 0.25
    c2: float = 0.75
    max_iters: int = 500
    obj_tol: float = 1e-10
    step_tol: float = 1e-10
    max_rejections: int = 25
    solver: str = "cholesky"
    lam_min: float = 1e-12
    lam_max: float = 1e16

    def __post_init__(self):
        if not 0 < self.c0 < self.c1 < self.c2 < 1:
            raise ValueError("thresholds must satisfy 0 < c0 < c1 < c2 < 1")
        if not self.b > 1:
            raise ValueError("adaptation multiplier b must exceed 1")
        if self.lam0 < 0:
            raise ValueError("initial damping must be nonnegative")
        if self.solver not in ("cholesky", "svd"):
            raise ValueError(f"unknown subproblem solver {self.solver!r}")


@dataclass
class LMState:
    z: np.ndarray
    w: list[np.ndarray]
    damping: float
    objective: float
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    def copy(self) -> "LMState":
        return LMState(self.z.copy(), [v.copy() for v in self.w], self.damping, self.objective, self.iteration, self.history)


@dataclass
class LMResult:
    state: LMState
    converged: bool
    reason: str


class BlockLeastSquares:
    """Interface for objectives ``c_z|z|^2 + c_w sum|w_m|^2 + sum|F_m(z, w_m)|^2``.

    Subclasses set ``n_z``, ``block_sizes``, ``c_z``, ``c_w`` and implement
    :meth:`residual_block` and :meth:`jacobian_block`.
    """

    n_z: int = 0
    block_sizes: tuple[int, ...] = ()
    c_z: float = 1.0
    c_w: float = 1.0

    def residual_block(self, m: int, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian_block(self, m: int, z: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(F_m, dF_m/dz, dF_m/dw_m)``."""
        raise NotImplementedError

    @property
    def M(self) -> int:
        return len(self.block_sizes)

    def residuals(self, z, w) -> list[np.ndarray]:
        return [self.residual_block(m, z, w[m]) for m in range(self.M)]

    def pack(self, z, w) -> np.ndarray:
        return np.concatenate([z, *w])

    def unpack(self, x) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=float)
        z = x[: self.n_z].copy()
        w, i = [], self.n_z
        for n in self.block_sizes:
            w.append(x[i : i + n].copy())
            i += n
        return z, w


class FunctionLeastSquares(BlockLeastSquares):
    """Wrap plain callables ``residual(m, z, w)`` and ``jacobian(m, z, w)``."""

    def __init__(self, residual: Callable, jacobian: Callable, n_z: int, block_sizes, c_z=1.0, c_w=1.0):
        self._res = residual
        self._jac = jacobian
        self.n_z = int(n_z)
        self.block_sizes = tuple(int(n) for n in block_sizes)
        self.c_z = float(c_z)
        self.c_w = float(c_w)

    def residual_block(self, m, z, w):
        return np.asarray(self._res(m, z, w), dtype=float)

    def jacobian_block(self, m, z, w):
        F = self.residual_block(m, z, w)
        Jz, Jw = self._jac(m, z, w)
        return F, np.asarray(Jz, dtype=float).reshape(len(F), self.n_z), np.asarray(Jw, dtype=float)


def objective(problem: BlockLeastSquares, z, w, residuals=None) -> float:
    """Value of the regularised least-squares objective."""
    if residuals is None:
        residuals = problem.residuals(z, w)
    val = problem.c_z * float(z @ z) + problem.c_w * sum(float(v @ v) for v in w)
    return val + sum(float(F @ F) for F in residuals)


@dataclass
class Linearization:
    """Residuals and Jacobians at an iterate, with the Gauss-Newton products."""

    F: list[np.ndarray]
    Jz: list[np.ndarray]
    Jw: list[np.ndarray]
    H_z: np.ndarray
    H_w: list[np.ndarray]
    B: list[np.ndarray]
    g_z: np.ndarray
    g_w: list[np.ndarray]

    def model(self, problem: BlockLeastSquares, z, w, dz, dw) -> float:
        """Linearised objective at ``(z + dz, w + dw)`` without damping."""
        val = problem.c_z * float((z + dz) @ (z + dz))
        for m in range(problem.M):
            wn = w[m] + dw[m]
            r = self.F[m] + self.Jz[m] @ dz + self.Jw[m] @ dw[m]
            val += problem.c_w * float(wn @ wn) + float(r @ r)
        return val


def linearize(problem: BlockLeastSquares, z, w) -> Linearization:
    F, Jz, Jw, H_w, B, g_w = [], [], [], [], [], []
    H_z = np.zeros((problem.n_z, problem.n_z))
    g_z = problem.c_z * z
    for m in range(problem.M):
        Fm, Jzm, Jwm = problem.jacobian_block(m, z, w[m])
        F.append(Fm)
        Jz.append(Jzm)
        Jw.append(Jwm)
        H_z += Jzm.T @ Jzm
        H_w.append(Jwm.T @ Jwm)
        B.append(Jwm.T @ Jzm)
        g_z = g_z + Jzm.T @ Fm
        g_w.append(problem.c_w * w[m] + Jwm.T @ Fm)
    return Linearization(F, Jz, Jw, H_z, H_w, B, g_z, g_w)


def _system(problem: BlockLeastSquares, lin: Linearization, damping: float) -> ArrowheadSystem:
    eye_z = np.eye(problem.n_z)
    A_P = lin.H_z + (problem.c_z + damping) * eye_z
    D = [H + (problem.c_w + damping) * np.eye(H.shape[0]) for H in lin.H_w]
    return ArrowheadSystem(A_P, list(lin.B), D, -lin.g_z, [-g for g in lin.g_w])


def lm_step(
    problem: BlockLeastSquares,
    state: LMState,
    config: LMConfig,
    lin: Linearization | None = None,
    dense: bool = False,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Minimiser of the damped linearised objective around ``state``.

    Returns the candidate ``(z+, w+)``. ``dense=True`` solves the assembled
    normal equations directly instead of by block elimination.
    """
    if lin is None:
        lin = linearize(problem, state.z, state.w)
    sys = _system(problem, lin, state.damping)
    if dense:
        A, rhs = arrowhead_dense(sys)
        step = la.solve(A, rhs, assume_a="sym", check_finite=False)
    else:
        step = arrowhead_solve(sys, solver=config.solver)
    dz, dw = problem.unpack(step)
    return state.z + dz, [v + d for v, d in zip(state.w, dw)]


def gain_ratio(
    problem: BlockLeastSquares,
    state: LMState,
    candidate: tuple[np.ndarray, list[np.ndarray]],
    lin: Linearization | None = None,
    new_objective: float | None = None,
) -> float | None:
    """Actual over predicted objective decrease; ``None`` signals rejection.

    The prediction uses the undamped linearised objective.
    """
    z_new, w_new = candidate
    dz = z_new - state.z
    dw = [a - b for a, b in zip(w_new, state.w)]
    if not (np.any(dz) or any(np.any(d) for d in dw)):
        return None
    if lin is None:
        lin = linearize(problem, state.z, state.w)
    predicted = lin.model(problem, state.z, state.w, dz, dw) - state.objective
    if not predicted < 0:
        return None
    if new_objective is None:
        new_objective = objective(problem, z_new, w_new)
    if not np.isfinite(new_objective):
        return -math.inf
    return (new_objective - state.objective) / predicted


def update_damping(damping: float, rho: float | None, config: LMConfig) -> tuple[float, bool]:
    """Damping for the next iteration and whether the step is accepted."""
    if rho is None or not rho >= config.c0:
        return min(damping * config.b, config.lam_max) if damping > 0 else config.lam_min, False
    if rho < config.c1:
        return min(damping * config.b, config.lam_max), True
    if rho > config.c2:
        return max(damping / config.b, config.lam_min), True
    return damping, True


def lm_minimize(
    problem: BlockLeastSquares,
    z0,
    w0,
    config: LMConfig | None = None,
    callback: Callable[[LMState], None] | None = None,
) -> LMResult:
    """Damped LM with gain-ratio adaptation.

    Stops on a small relative objective change, a small step, ``max_iters``
    or ``max_rejections`` consecutive rejected steps.
    """
    config = config or LMConfig()
    z = np.asarray(z0, dtype=float).copy()
    w = [np.asarray(v, dtype=float).copy() for v in w0]
    state = LMState(z, w, config.lam0, objective(problem, z, w))
    state.history.append(dict(iter=0, objective=state.objective, rho=math.nan, damping=state.damping, accepted=True))
    lin = None
    rejections = 0
    reason = "max_iters"
    converged = False
    for it in range(1, config.max_iters + 1):
        state.iteration = it
        if lin is None:
            lin = linearize(problem, state.z, state.w)
        z_new, w_new = lm_step(problem, state, config, lin)
        step = math.sqrt(float(np.sum((z_new - state.z) ** 2)) + sum(float(np.sum((a - b) ** 2)) for a, b in zip(w_new, state.w)))
        size = math.sqrt(float(state.z @ state.z) + sum(float(v @ v) for v in state.w))
        if not np.isfinite(step):
            rho, new_obj = None, math.inf
        elif step <= config.step_tol * (size + config.step_tol):
            reason, converged = "step_tol", True
            break
        else:
            new_obj = objective(problem, z_new, w_new)
            rho = gain_ratio(problem, state, (z_new, w_new), lin, new_obj)
        damping_old = state.damping
        state.damping, accepted = update_damping(state.damping, rho, config)
        state.history.append(
            dict(
                iter=it,
                objective=new_obj if accepted else state.objective,
                rho=math.nan if rho is None else rho,
                damping=damping_old,
                accepted=accepted,
            )
        )
        if accepted:
            change = abs(state.objective - new_obj) / max(abs(state.objective), np.finfo(float).tiny)
            state.z, state.w, state.objective = z_new, w_new, new_obj
            lin = None
            rejections = 0
            if callback is not None:
                callback(state)
            if change < config.obj_tol:
                reason, converged = "obj_tol", True
                break
        else:
            rejections += 1
            if rejections >= config.max_rejections:
                reason = "rejections"
                log.info("LM stopped after %d consecutive rejected steps (damping %.3e)", rejections, state.damping)
                break
    return LMResult(state, converged, reason)


def history_csv(history: Sequence[dict]) -> str:
    """CSV text with columns iter, objective, rho, lambda, accepted."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "objective", "rho", "lambda", "accepted"])
    for row in history:
        writer.writerow(
            [row["iter"], repr(float(row["objective"])), repr(float(row["rho"])), repr(float(row["damping"])), int(row["accepted"])]
        )
    return buf.getvalue()


# --------------------------------------------------------------------------
# the equation-learning problem
# --------------------------------------------------------------------------


def nugget_weights(
    N: int, M: int, I: int, theta_u: float, theta_p: float, variant: str = "MI"
) -> tuple[float, float]:
    """Nugget variances ``(sigma_u^2, sigma_P^2)`` from the tuning constants.

    ``sigma_u^2 = sqrt(theta_u / (N M))``; ``sigma_P^2 = sqrt(theta_p / (M I))``
    or ``sqrt(theta_p / I)`` for ``variant="I"``.
    """
    if theta_u <= 0 or theta_p <= 0:
        raise ValueError("tuning constants must be positive")
    su = math.sqrt(theta_u / (N * M))
    if variant == "MI":
        sp = math.sqrt(theta_p / (M * I))
    elif variant == "I":
        sp = math.sqrt(theta_p / I)
    else:
        raise ValueError(f"unknown nugget variant {variant!r}")
    return su, sp


class OneStepProblem(BlockLeastSquares):
    """Transformed joint recovery problem for ``M`` functions.

    Parameters are normally assembled by :func:`build_problem`.
    """

    def __init__(
        self,
        observations: Sequence[ObservationSet],
        Y: np.ndarray,
        obs_index: list[np.ndarray],
        rhs: list[np.ndarray],
        kernel_u: Kernel,
        kernel_p: Kernel,
        ops: DiffOperatorSet,
        known: KnownPart,
        basis: str,
        inducing: np.ndarray,
        sigma_u2: float,
        sigma_p2: float,
        lam: float = 1.0,
        omit_rkhs_terms: bool = False,
        scale: float = 1.0,
        p_factor: str = "cholesky",
    ):
        if len(observations) == 0:
            raise ValueError("no observation sets")
        if not (sigma_u2 > 0 and sigma_p2 > 0 and lam > 0 and scale > 0):
            raise ValueError("nugget weights, lambda and scale must be positive")
        if basis not in ("full", "reduced"):
            raise ValueError(f"unknown basis {basis!r}")
        self.observations = list(observations)
        self.Y = np.asarray(Y, dtype=float)
        self.obs_index = [np.asarray(i, dtype=int) for i in obs_index]
        self.rhs = [np.asarray(f, dtype=float) for f in rhs]
        self.kernel_u = kernel_u
        self.kernel_p = kernel_p
        self.ops = ops
        self.known = known
        self.basis = basis
        self.inducing = np.asarray(inducing, dtype=float)
        self.sigma_u2 = float(sigma_u2)
        self.sigma_p2 = float(sigma_p2)
        self.lam = float(lam)
        self.omit_rkhs_terms = bool(omit_rkhs_terms)
        self.scale = float(scale)
        self.lstsq_cond = 1e-10
        self.c_z = 0.0 if omit_rkhs_terms else scale
        self.c_w = 0.0 if omit_rkhs_terms else scale * lam
        self.a_u = math.sqrt(scale / (2.0 * sigma_u2))
        self.a_p = math.sqrt(scale / (2.0 * sigma_p2))

        K, d, Q = len(self.Y), ops.dim, ops.Q
        self.template = SolutionModel(kernel_u, self.Y, np.zeros(K * Q if basis == "full" else K), basis, ops)
        G = self.template.norm_matrix()
        self.C_U, self.jitter_u = chol_jitter(0.5 * (G + G.T))
        n = G.shape[0]
        self.n_w = n
        # feature matrices in w-coordinates (rows q-major)
        Fjac = gram_blocks(kernel_u, self.template.blocks, [(op, self.Y) for op in ops]).T
        self.feature_w = chol_solve_T(self.C_U, Fjac)
        Pbar = np.zeros((K, n))
        for c, a in known.terms:
            Pbar += c * self.template.basis_matrix(self.Y, a)
        self.known_w = chol_solve_T(self.C_U, Pbar)
        self.obs_w = []
        for obs in self.observations:
            O = self.template.basis_matrix(obs.points)
            self.obs_w.append(chol_solve_T(self.C_U, O))
        P_II = kernel_p(self.inducing, self.inducing)
        if p_factor == "cholesky":
            self.C_P, self.jitter_p = chol_jitter(0.5 * (P_II + P_II.T))
            # beta = C_P^{-T} z
            self.z_to_beta = la.solve_triangular(self.C_P, np.eye(len(P_II)), lower=True, trans="T", check_finite=False)
        elif p_factor == "eigh":
            self.C_P, self.jitter_p = eigh_factor(P_II), 0.0
            self.z_to_beta = self.C_P / np.sum(self.C_P**2, axis=0)
        else:
            raise ValueError(f"unknown factorisation {p_factor!r}")
        self.p_factor = p_factor
        self.n_z = self.C_P.shape[1]
        self.block_sizes = (n,) * len(self.observations)
        self._state_coords = list(range(d, d + Q))
        # the spatial factor of a hybrid equation kernel only sees Y, so it is fixed
        self._spatial_SI = None
        if isinstance(kernel_p, HybridProduct) and kernel_p.spatial is not None:
            self._spatial_SI = kernel_p.spatial(self.Y, self.inducing[:, :d])

    @property
    def K(self) -> int:
        return len(self.Y)

    def features(self, w: np.ndarray) -> np.ndarray:
        vals = (self.feature_w @ w).reshape(self.ops.Q, self.K).T
        return np.column_stack([self.Y, vals])

    def equation(self, z: np.ndarray) -> EquationModel:
        beta = self.z_to_beta @ z
        return EquationModel(self.kernel_p, self.inducing, beta, self.known, self.ops)

    def solution(self, w: np.ndarray) -> SolutionModel:
        alpha = la.solve_triangular(self.C_U, w, lower=True, trans="T", check_finite=False)
        return self.template.with_alpha(alpha)

    def _p_rows(self, S: np.ndarray, beta: np.ndarray | None = None):
        """``P(S, I)`` and, given ``beta``, the state gradient of ``P(S, I) beta``."""
        if self._spatial_SI is None:
            P_SI = self.kernel_p(S, self.inducing)
            if beta is None:
                return P_SI, None
            eq = EquationModel(self.kernel_p, self.inducing, beta, self.known, self.ops)
            return P_SI, eq.gradient(S, self._state_coords)
        d, state = self.ops.dim, self.kernel_p.state
        X, I = S[:, d:], self.inducing[:, d:]
        P_SI = self._spatial_SI * state(X, I)
        if beta is None:
            return P_SI, None
        grad = np.empty((len(S), self.ops.Q))
        for q in range(self.ops.Q):
            e = [0] * self.ops.Q
            e[q] = 1
            grad[:, q] = (self._spatial_SI * state.deriv(X, I, e, None)) @ beta
        return P_SI, grad

    def residual_block(self, m, z, w):
        obs = self.a_u * (self.obs_w[m] @ w - self.observations[m].values)
        P_SI, _ = self._p_rows(self.features(w))
        pde = self.a_p * (P_SI @ (self.z_to_beta @ z) + self.known_w @ w - self.rhs[m])
        return np.concatenate([obs, pde])

    def jacobian_block(self, m, z, w):
        S = self.features(w)
        eq = self.equation(z)
        P_SI, grad = self._p_rows(S, eq.beta)
        F = np.concatenate(
            [
                self.a_u * (self.obs_w[m] @ w - self.observations[m].values),
                self.a_p * (P_SI @ eq.beta + self.known_w @ w - self.rhs[m]),
            ]
        )
        N = len(self.observations[m])
        Jz = np.zeros((N + self.K, self.n_z))
        Jz[N:] = self.a_p * (P_SI @ self.z_to_beta)
        Jw_pde = self.known_w.copy()
        K = self.K
        for q in range(self.ops.Q):
            Jw_pde += grad[:, q : q + 1] * self.feature_w[q * K : (q + 1) * K]
        Jw = np.vstack([self.a_u * self.obs_w[m], self.a_p * Jw_pde])
        return F, Jz, Jw

    def initial_point(self, two_step: TwoStepResult) -> tuple[np.ndarray, list[np.ndarray]]:
        """Embed the 2-step interpolants and fit ``z`` to them by least squares."""
        w = []
        K = self.K
        for m, model in enumerate(two_step.models):
            alpha = np.zeros(self.n_w)
            idx = self.obs_index[m]
            np.add.at(alpha, idx, model.alpha)
            w.append(self.C_U.T @ alpha)
        return self.best_z(w), w

    def best_z(self, w: list[np.ndarray]) -> np.ndarray:
        """Minimiser of the objective over ``z`` with ``w`` fixed (affine in ``z``)."""
        if self.n_z == 0:
            return np.zeros(0)
        rows, rhs = [], []
        zero = np.zeros(self.n_z)
        for m in range(self.M):
            S = self.features(w[m])
            Jz = self.a_p * (self._p_rows(S)[0] @ self.z_to_beta)
            rest = self.a_p * (self.known_w @ w[m] - self.rhs[m])
            rows.append(Jz)
            rhs.append(-rest)
        if self.c_z > 0:
            rows.append(math.sqrt(self.c_z) * np.eye(self.n_z))
            rhs.append(zero)
        # truncated SVD keeps z bounded when P(S_I, S_I) is rank deficient
        return la.lstsq(np.vstack(rows), np.concatenate(rhs), cond=self.lstsq_cond, check_finite=False)[0]

    def pretransform_objective(self, alphas: list[np.ndarray], beta: np.ndarray) -> float:
        """Objective in the original coefficients, evaluated without the Cholesky factors."""
        G = self.template.norm_matrix()
        P_II = self.kernel_p(self.inducing, self.inducing)
        val = self.c_z * float(beta @ P_II @ beta)
        eq = EquationModel(self.kernel_p, self.inducing, beta, self.known, self.ops)
        for m, alpha in enumerate(alphas):
            model = self.template.with_alpha(alpha)
            val += self.c_w * float(alpha @ G @ alpha)
            r_obs = model.evaluate(self.observations[m].points) - self.observations[m].values
            r_pde = eq.apply(model, self.Y) - self.rhs[m]
            val += self.a_u**2 * float(r_obs @ r_obs) + self.a_p**2 * float(r_pde @ r_pde)
        return val


def build_problem(
    observations: Sequence[ObservationSet],
    Y,
    kernel_u: Kernel,
    kernel_p: Kernel,
    ops: DiffOperatorSet,
    known: KnownPart | None = None,
    basis: str = "reduced",
    n_inducing: int | None = None,
    sigma_u2: float = 1e-6,
    sigma_p2: float = 1e-6,
    lam: float = 1.0,
    seed: int = 0,
    omit_rkhs_terms: bool = False,
    scale: float = 1.0,
    two_step: TwoStepResult | None = None,
    two_step_nuggets: tuple[float, float] | None = None,
    p_factor: str = "cholesky",
) -> tuple[OneStepProblem, TwoStepResult]:
    """Assemble a :class:`OneStepProblem` and the 2-step fit it starts from.

    Observation points missing from ``Y`` are appended to it. The inducing
    points are a seeded uniform subsample of the 2-step feature clouds
    ``Phi(u_m, Y)``; ``n_inducing=None`` keeps every feature point.
    """
    observations = list(observations)
    if len(observations) == 0:
        raise ValueError("no observation sets")
    known = known or KnownPart()
    Y = np.asarray(Y, dtype=float).reshape(-1, ops.dim)
    obs_index = []
    for obs in observations:
        Y, idx = merge_points(Y, obs.points)
        obs_index.append(idx)
    rhs = [obs.rhs_on(Y) for obs in observations]
    if two_step is None:
        nu, npde = two_step_nuggets if two_step_nuggets is not None else (2 * sigma_u2, 2 * sigma_p2)
        two_step = fit_2step(observations, Y, kernel_u, kernel_p, ops, nu, npde, known)
    clouds = np.vstack([feature_map(m, Y, ops) for m in two_step.models])
    count = len(clouds) if n_inducing is None else n_inducing
    inducing = nystrom_select(clouds, count, seed)
    problem = OneStepProblem(
        observations,
        Y,
        obs_index,
        rhs,
        kernel_u,
        kernel_p,
        ops,
        known,
        basis,
        inducing,
        sigma_u2,
        sigma_p2,
        lam,
        omit_rkhs_terms,
        scale,
        p_factor,
    )
    return problem, two_step


@dataclass
class OneStepResult:
    models: list[SolutionModel]
    equation: EquationModel
    history: list[dict]
    converged: bool
    reason: str
    state: LMState


def fit_1step(
    problem: OneStepProblem,
    config: LMConfig | None = None,
    init: TwoStepResult | tuple | None = None,
) -> OneStepResult:
    """Run LM from ``init`` (2-step result or ``(z, w)``) and map back to
    kernel-expansion coefficients."""
    if isinstance(init, TwoStepResult):
        z0, w0 = problem.initial_point(init)
    elif init is None:
        w0 = [np.zeros(problem.n_w) for _ in range(problem.M)]
        z0 = problem.best_z(w0)
    else:
        z0, w0 = init
    res = lm_minimize(problem, z0, w0, config)
    st = res.state
    models = [problem.solution(v) for v in st.w]
    return OneStepResult(models, problem.equation(st.z), st.history, res.converged, res.reason, st)
