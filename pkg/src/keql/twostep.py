"""Two-step equation learning: smooth each observed function with a kernel
interpolant, then regress the unknown operator on the induced feature clouds."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la

from .gram import chol_jitter, nystrom_select
from .kernels import Kernel, kernel_from_dict
from .operators import (
    DiffOperatorSet,
    KnownPart,
    SolutionModel,
    feature_map,
    known_part_values,
)

__all__ = [
    "ObservationSet",
    "EquationModel",
    "TwoStepResult",
    "fit_interpolant",
    "fit_equation_2step",
    "fit_2step",
    "hybrid_defaults",
    "feature_defaults",
    "merge_points",
]

log = logging.getLogger(__name__)


@dataclass
class ObservationSet:
    """Point observations of one function plus its right-hand side.

    Parameters
    ----------
    points : (N, d) array
        Observation locations; the last ``n_boundary`` rows lie on the
        domain boundary.
    values : (N,) array
        Observed values ``u(points)``.
    rhs : callable or None
        ``f(points) -> values``; needed for equation learning only.
    n_boundary : int
        Number of boundary rows at the end of ``points``.
    """

    points: np.ndarray
    values: np.ndarray
    rhs: Callable[[np.ndarray], np.ndarray] | None = None
    n_boundary: int = 0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] == 1 and np.ndim(self.values) and np.size(self.values) > 1:
            self.points = self.points.T
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.points) != len(self.values):
            raise ValueError(f"{len(self.points)} observation points but {len(self.values)} values")
        if not 0 <= self.n_boundary <= len(self.points):
            raise ValueError("n_boundary out of range")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.values)

    def rhs_on(self, Y) -> np.ndarray:
        if self.rhs is None:
            raise ValueError("observation set has no right-hand side")
        return np.asarray(self.rhs(np.asarray(Y, dtype=float)), dtype=float).ravel()


@dataclass
class EquationModel:
    """Learned operator ``s -> P(S_I, s)^T beta`` plus a known linear part.

    ``__call__`` and ``gradient`` act on feature points only; the known part
    is applied to functions through :meth:`apply`.
    """

    kernel: Kernel
    inducing: np.ndarray
    beta: np.ndarray
    known: KnownPart = field(default_factory=KnownPart)
    ops: DiffOperatorSet | None = None

    def __post_init__(self):
        self.inducing = np.asarray(self.inducing, dtype=float).reshape(-1, self.kernel.dim)
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        if len(self.beta) != len(self.inducing):
            raise ValueError(f"{len(self.beta)} coefficients for {len(self.inducing)} inducing points")
        if self.ops is not None and self.kernel.dim != self.ops.dim + self.ops.Q:
            raise ValueError("feature dimension does not match the operator set")

    @property
    def feature_dim(self) -> int:
        return self.kernel.dim

    def __call__(self, S) -> np.ndarray:
        S = np.asarray(S, dtype=float).reshape(-1, self.feature_dim)
        return self.kernel(S, self.inducing) @ self.beta

    def gradient(self, S, coords: Sequence[int] | None = None) -> np.ndarray:
        """Gradient in the feature point, shape ``(len(S), len(coords))``."""
        S = np.asarray(S, dtype=float).reshape(-1, self.feature_dim)
        coords = range(self.feature_dim) if coords is None else coords
        out = np.empty((len(S), len(coords)))
        D = self.feature_dim
        for col, j in enumerate(coords):
            e = [0] * D
            e[j] = 1
            out[:, col] = self.kernel.deriv(S, self.inducing, e, None) @ self.beta
        return out

    def apply(self, model: SolutionModel, Y) -> np.ndarray:
        """``(P_hat + P_bar)(v)`` on the grid ``Y``."""
        if self.ops is None:
            raise ValueError("equation model has no operator set")
        S = feature_map(model, Y, self.ops)
        return self(S) + known_part_values(self.known, model, Y)

    def to_dict(self) -> dict:
        out = {
            "kernel": self.kernel.to_dict(),
            "inducing": self.inducing.tolist(),
            "beta": self.beta.tolist(),
            "known": self.known.to_list(),
        }
        if self.ops is not None:
            out["ops"] = self.ops.to_list()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EquationModel":
        ops = data.get("ops")
        return cls(
            kernel=kernel_from_dict(data["kernel"]),
            inducing=np.asarray(data["inducing"], dtype=float),
            beta=np.asarray(data["beta"], dtype=float),
            known=KnownPart.from_list(data.get("known")),
            ops=None if ops is None else DiffOperatorSet(tuple(tuple(o) for o in ops)),
        )


@dataclass
class TwoStepResult:
    models: list[SolutionModel]
    equation: EquationModel
    nuggets: dict

    def to_dict(self) -> dict:
        return {
            "models": [m.to_dict() for m in self.models],
            "equation": self.equation.to_dict(),
            "nuggets": dict(self.nuggets),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TwoStepResult":
        return cls(
            models=[SolutionModel.from_dict(m) for m in data["models"]],
            equation=EquationModel.from_dict(data["equation"]),
            nuggets=dict(data.get("nuggets", {})),
        )


def fit_interpolant(obs: ObservationSet, kernel: Kernel, nugget: float = 0.0) -> SolutionModel:
    """Kernel smoother ``U(Y^m, .)^T (U(Y^m, Y^m) + nugget I)^{-1} u``."""
    if nugget < 0:
        raise ValueError("nugget must be nonnegative")
    K = kernel(obs.points, obs.points)
    K = 0.5 * (K + K.T) + nugget * np.eye(len(obs))
    L, _ = chol_jitter(K)
    alpha = la.cho_solve((L, True), obs.values, check_finite=False)
    return SolutionModel(kernel, obs.points, alpha, basis="reduced")


def _targets(models, Y, rhs_values, known: KnownPart, ops: DiffOperatorSet):
    if len(models) == 0:
        raise ValueError("equation learning needs at least one function")
    if len(rhs_values) != len(models):
        raise ValueError(f"{len(rhs_values)} right-hand sides for {len(models)} functions")
    Y = np.asarray(Y, dtype=float).reshape(-1, ops.dim)
    S, r = [], []
    for model, f in zip(models, rhs_values):
        f = np.asarray(f, dtype=float).ravel()
        if len(f) != len(Y):
            raise ValueError(f"right-hand side has {len(f)} values for {len(Y)} grid points")
        S.append(feature_map(model, Y, ops))
        r.append(f - known_part_values(known, model, Y))
    return np.vstack(S), np.concatenate(r)


def fit_equation_2step(
    models: Sequence[SolutionModel],
    Y,
    rhs_values: Sequence[np.ndarray],
    kernel: Kernel,
    nugget: float,
    known: KnownPart | None = None,
    ops: DiffOperatorSet | None = None,
    inducing: np.ndarray | None = None,
) -> EquationModel:
    """Regress ``f - P_bar(u)`` on the stacked feature clouds.

    Without ``inducing`` the expansion runs over every feature point and
    ``beta = (P(S, S) + nugget I)^{-1} r``. With inducing points ``S_I`` the
    coefficients minimise ``beta^T P(S_I, S_I) beta + |P(S, S_I) beta - r|^2 / nugget``,
    solved as a least-squares problem so rank-deficient kernels are fine.
    """
    known = known or KnownPart()
    if ops is None:
        raise ValueError("operator set is required")
    S, r = _targets(models, Y, rhs_values, known, ops)
    if inducing is None:
        G = kernel(S, S)
        G = 0.5 * (G + G.T) + nugget * np.eye(len(S))
        L, _ = chol_jitter(G)
        beta = la.cho_solve((L, True), r, check_finite=False)
        return EquationModel(kernel, S, beta, known, ops)
    inducing = np.asarray(inducing, dtype=float).reshape(-1, kernel.dim)
    P_SI = kernel(S, inducing)
    if nugget > 0:
        P_II = kernel(inducing, inducing)
        L, _ = chol_jitter(0.5 * (P_II + P_II.T))
        A = np.vstack([P_SI, np.sqrt(nugget) * L.T])
        rhs = np.concatenate([r, np.zeros(len(inducing))])
    else:
        A, rhs = P_SI, r
    beta = la.lstsq(A, rhs, check_finite=False)[0]
    return EquationModel(kernel, inducing, beta, known, ops)


def fit_2step(
    observations: Sequence[ObservationSet],
    Y,
    kernel_u: Kernel,
    kernel_p: Kernel,
    ops: DiffOperatorSet,
    nugget_u: float,
    nugget_p: float,
    known: KnownPart | None = None,
    n_inducing: int | None = None,
    seed: int = 0,
) -> TwoStepResult:
    """Both stages; with ``n_inducing`` the equation uses a Nystrom basis."""
    if len(observations) == 0:
        raise ValueError("no observation sets")
    Y = np.asarray(Y, dtype=float).reshape(-1, ops.dim)
    models = [fit_interpolant(obs, kernel_u, nugget_u) for obs in observations]
    rhs = [obs.rhs_on(Y) for obs in observations]
    inducing = None
    if n_inducing is not None:
        clouds = np.vstack([feature_map(m, Y, ops) for m in models])
        inducing = nystrom_select(clouds, n_inducing, seed)
    eq = fit_equation_2step(models, Y, rhs, kernel_p, nugget_p, known, ops, inducing)
    return TwoStepResult(models, eq, {"u": nugget_u, "P": nugget_p})


def feature_defaults(state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and inverse unbiased variance per column of ``state``.

    Columns with zero variance get scaling 1 and a warning.
    """
    state = np.atleast_2d(np.asarray(state, dtype=float))
    if len(state) < 2:
        raise ValueError("need at least two feature points")
    c = state.mean(axis=0)
    var = state.var(axis=0, ddof=1)
    degenerate = ~(var > 0)
    if np.any(degenerate):
        warnings.warn(
            f"zero variance in feature coordinates {np.flatnonzero(degenerate).tolist()}; using scale 1",
            RuntimeWarning,
            stacklevel=2,
        )
    B = np.where(degenerate, 1.0, 1.0 / np.where(degenerate, 1.0, var))
    return c, B


def hybrid_defaults(models: Sequence[SolutionModel], Y, ops: DiffOperatorSet) -> tuple[np.ndarray, np.ndarray]:
    """Shift and diagonal scaling for a polynomial kernel on the state
    coordinates of the feature clouds ``Phi(u_m, Y)``."""
    S = np.vstack([feature_map(m, Y, ops) for m in models])
    return feature_defaults(S[:, ops.dim :])


def merge_points(Y, points, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Append rows of ``points`` missing from ``Y``.

    Returns the enlarged grid and, for each row of ``points``, its index in
    that grid.
    """
    Y = np.asarray(Y, dtype=float)
    points = np.asarray(points, dtype=float).reshape(-1, Y.shape[1])
    rows = [r for r in Y]
    index = np.empty(len(points), dtype=int)
    for i, p in enumerate(points):
        d = np.max(np.abs(np.asarray(rows) - p), axis=1) if rows else np.array([])
        j = int(np.argmin(d)) if len(d) else -1
        if j >= 0 and d[j] <= tol:
            index[i] = j
        else:
            rows.append(p.copy())
            index[i] = len(rows) - 1
    return np.asarray(rows), index
