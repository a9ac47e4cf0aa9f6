"""Kernel families and their closed-form mixed partial derivatives.

Every kernel evaluates ``D_x^a D_y^b k(x, y)`` for multi-indices ``a`` and
``b`` of order at most two per argument. Derivatives are obtained by a
Faa di Bruno expansion of ``k = phi(q(x, y))`` where the inner function
``q`` is quadratic (stationary families) or bilinear (polynomial kernel),
so only first and second derivatives of ``q`` are nonzero and the
expansion reduces to a sum over partial matchings of the derivative
variables.

Lengthscales are stored as ``ell`` with ``Sigma = diag(ell**2)`` so that
``||x - y||_Sigma^2 = sum((x - y)**2 / ell**2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la

__all__ = [
    "MAX_ORDER_PER_ARG",
    "Kernel",
    "RBF",
    "Matern",
    "RationalQuadratic",
    "Polynomial",
    "HybridProduct",
    "KernelError",
    "evaluate",
    "evaluate_deriv",
    "grad_second_arg",
    "kernel_from_dict",
    "log_marginal_likelihood",
    "mle_lengthscales",
    "mle_coordinate_search",
]

MAX_ORDER_PER_ARG = 2


class KernelError(ValueError):
    """Raised for invalid kernel parameters or unsupported derivative orders."""


def _as_points(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if dim > 1 or X.size == dim else X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise KernelError(f"expected points of dimension {dim}, got shape {X.shape}")
    return X


def _as_index(a, dim: int) -> tuple[int, ...]:
    if a is None:
        return (0,) * dim
    a = tuple(int(v) for v in a)
    if len(a) != dim:
        raise KernelError(f"multi-index {a} does not match dimension {dim}")
    if any(v < 0 for v in a):
        raise KernelError(f"negative derivative order in {a}")
    if sum(a) > MAX_ORDER_PER_ARG:
        raise KernelError(
            f"derivative order {sum(a)} exceeds the supported {MAX_ORDER_PER_ARG} per argument"
        )
    return a


def _variables(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[tuple[int, int], ...]:
    out = []
    for i, n in enumerate(a):
        out.extend([(0, i)] * n)
    for i, n in enumerate(b):
        out.extend([(1, i)] * n)
    return tuple(out)


@lru_cache(maxsize=None)
def _matchings(n: int) -> tuple[tuple[tuple[int, ...], ...], ...]:
    """All partitions of ``range(n)`` into blocks of size one or two."""
    if n == 0:
        return ((),)
    out = []
    for rest in _matchings(n - 1):
        out.append(rest + ((n - 1,),))
    for j in range(n - 1):
        others = [i for i in range(n - 1) if i != j]
        for rest in _matchings(len(others)):
            relabeled = tuple(tuple(others[i] for i in blk) for blk in rest)
            out.append(relabeled + ((j, n - 1),))
    return tuple(out)


class Kernel:
    """Base class. Subclasses implement :meth:`deriv` and :meth:`to_dict`."""

    family: str = ""

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def __call__(self, X, Y) -> np.ndarray:
        return self.deriv(X, Y)

    def deriv(self, X, Y, a=None, b=None) -> np.ndarray:
        """Matrix of ``D_x^a D_y^b k(x_i, y_j)``."""
        raise NotImplementedError

    def check_orders(self, a, b) -> None:
        """Raise :class:`KernelError` if ``(a, b)`` is not supported."""
        _as_index(a, self.dim)
        _as_index(b, self.dim)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class _Stationary(Kernel):
    lengthscales: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if not ls or any(not np.isfinite(v) or v <= 0 for v in ls):
            raise KernelError(f"lengthscales must be positive, got {ls}")
        object.__setattr__(self, "lengthscales", ls)

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def _phi(self, rho: np.ndarray, kmax: int) -> list[np.ndarray]:
        raise NotImplementedError

    def deriv(self, X, Y, a=None, b=None) -> np.ndarray:
        X = _as_points(X, self.dim)
        Y = _as_points(Y, self.dim)
        a = _as_index(a, self.dim)
        b = _as_index(b, self.dim)
        self.check_orders(a, b)
        inv_ls2 = 1.0 / np.asarray(self.lengthscales) ** 2
        H = X[:, None, :] - Y[None, :, :]
        rho = 0.5 * np.einsum("nmd,d->nm", H * H, inv_ls2)
        variables = _variables(a, b)
        phis = self._phi(rho, len(variables))
        out = np.zeros_like(rho)
        for blocks in _matchings(len(variables)):
            coef = 1.0
            factors = []
            for blk in blocks:
                if len(blk) == 1:
                    side, i = variables[blk[0]]
                    coef *= inv_ls2[i] * (1.0 if side == 0 else -1.0)
                    factors.append(i)
                else:
                    (s1, i1), (s2, i2) = variables[blk[0]], variables[blk[1]]
                    if i1 != i2:
                        coef = 0.0
                        break
                    coef *= inv_ls2[i1] * (1.0 if s1 == s2 else -1.0)
            if coef == 0.0:
                continue
            term = coef * phis[len(blocks)]
            for i in factors:
                term = term * H[..., i]
            out += term
        return out


@dataclass(frozen=True, eq=False)
class RBF(_Stationary):
    """Squared-exponential kernel ``exp(-||x - y||_Sigma^2 / 2)``."""

    family = "rbf"

    def _phi(self, rho, kmax):
        base = np.exp(-rho)
        return [(-1.0) ** k * base for k in range(kmax + 1)]

    def to_dict(self):
        return {"family": "rbf", "lengthscales": list(self.lengthscales)}


@dataclass(frozen=True, eq=False)
class RationalQuadratic(_Stationary):
    """First-order rational quadratic kernel ``(1 + ||x - y||_Sigma^2)^-1``."""

    family = "rq"

    def _phi(self, rho, kmax):
        base = 1.0 / (1.0 + 2.0 * rho)
        return [(-2.0) ** k * math.factorial(k) * base ** (k + 1) for k in range(kmax + 1)]

    def to_dict(self):
        return {"family": "rq", "lengthscales": list(self.lengthscales)}


# Coefficients of T^j k(r) = exp(-a r) * poly_j(r), T = (1/r) d/dr, for the
# half-integer Matern kernels; poly_j is given lowest degree first.
_MATERN_TABLE = {
    1.5: (
        math.sqrt(3.0),
        [[1.0, math.sqrt(3.0)], [-3.0]],
    ),
    2.5: (
        math.sqrt(5.0),
        [[1.0, math.sqrt(5.0), 5.0 / 3.0], [-5.0 / 3.0, -5.0 * math.sqrt(5.0) / 3.0], [25.0 / 3.0]],
    ),
    3.5: (
        math.sqrt(7.0),
        [
            [1.0, math.sqrt(7.0), 14.0 / 5.0, 7.0 * math.sqrt(7.0) / 15.0],
            [-7.0 / 5.0, -7.0 * math.sqrt(7.0) / 5.0, -49.0 / 15.0],
            [49.0 / 15.0, 49.0 * math.sqrt(7.0) / 15.0],
            [-343.0 / 15.0],
        ],
    ),
}


@dataclass(frozen=True, eq=False)
class Matern(_Stationary):
    """Anisotropic Matern kernel with half-integer smoothness ``nu``.

    Derivatives of total order ``n`` (both arguments combined) require
    ``nu > n``.
    """

    nu: float = 2.5
    family = "matern"

    def __post_init__(self):
        super().__post_init__()
        if float(self.nu) not in _MATERN_TABLE:
            raise KernelError(f"Matern nu must be one of {sorted(_MATERN_TABLE)}, got {self.nu}")
        object.__setattr__(self, "nu", float(self.nu))

    def check_orders(self, a, b):
        super().check_orders(a, b)
        total = sum(_as_index(a, self.dim)) + sum(_as_index(b, self.dim))
        if not self.nu > total:
            raise KernelError(
                f"Matern nu={self.nu} is not smooth enough for total derivative order {total}"
            )

    def _phi(self, rho, kmax):
        rate, polys = _MATERN_TABLE[self.nu]
        r = np.sqrt(2.0 * rho)
        e = np.exp(-rate * r)
        return [np.polynomial.polynomial.polyval(r, polys[k]) * e for k in range(kmax + 1)]

    def to_dict(self):
        return {"family": "matern", "lengthscales": list(self.lengthscales), "nu": self.nu}


@dataclass(frozen=True, eq=False)
class Polynomial(Kernel):
    """Polynomial kernel ``((x - c)^T B (y - c) + 1)^degree`` with diagonal ``B``."""

    degree: int = 2
    shift: tuple[float, ...] = (0.0,)
    scaling: tuple[float, ...] = (1.0,)
    family = "polynomial"

    def __post_init__(self):
        shift = tuple(float(v) for v in np.atleast_1d(self.shift))
        scaling = tuple(float(v) for v in np.atleast_1d(self.scaling))
        if len(scaling) == 1 and len(shift) > 1:
            scaling = scaling * len(shift)
        if len(shift) != len(scaling):
            raise KernelError("polynomial shift and scaling must have equal length")
        if any(not np.isfinite(v) or v <= 0 for v in scaling):
            raise KernelError(f"polynomial scaling must be positive, got {scaling}")
        if int(self.degree) != self.degree or self.degree < 1:
            raise KernelError(f"polynomial degree must be a positive integer, got {self.degree}")
        object.__setattr__(self, "degree", int(self.degree))
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scaling", scaling)

    @property
    def dim(self) -> int:
        return len(self.shift)

    def deriv(self, X, Y, a=None, b=None) -> np.ndarray:
        X = _as_points(X, self.dim)
        Y = _as_points(Y, self.dim)
        a = _as_index(a, self.dim)
        b = _as_index(b, self.dim)
        c = np.asarray(self.shift)
        B = np.asarray(self.scaling)
        Xc = X - c
        Yc = Y - c
        q = 1.0 + (Xc * B) @ Yc.T
        variables = _variables(a, b)
        deg = self.degree
        out = np.zeros_like(q)
        for blocks in _matchings(len(variables)):
            k = len(blocks)
            if k > deg:
                continue
            coef = math.factorial(deg) / math.factorial(deg - k)
            term = None
            for blk in blocks:
                if len(blk) == 1:
                    side, i = variables[blk[0]]
                    # d/dx_i q = B_i (y_i - c_i), d/dy_i q = B_i (x_i - c_i)
                    f = B[i] * (Yc[None, :, i] if side == 0 else Xc[:, None, i])
                    term = f if term is None else term * f
                else:
                    (s1, i1), (s2, i2) = variables[blk[0]], variables[blk[1]]
                    if i1 != i2 or s1 == s2:
                        coef = 0.0
                        break
                    coef *= B[i1]
            if coef == 0.0:
                continue
            val = coef * q ** (deg - k)
            out += val if term is None else val * term
        return out

    def to_dict(self):
        return {
            "family": "polynomial",
            "degree": self.degree,
            "shift": list(self.shift),
            "scaling": list(self.scaling),
        }


@dataclass(frozen=True, eq=False)
class HybridProduct(Kernel):
    """Product ``k_spatial(x[:d], y[:d]) * k_state(x[d:], y[d:])``.

    ``spatial`` may be ``None`` for a kernel acting on the state coordinates
    only; ``spatial_dim`` then fixes ``d``.
    """

    spatial: Kernel | None = None
    state: Kernel | None = None
    spatial_dim: int | None = None
    family = "hybrid"

    def __post_init__(self):
        if self.state is None:
            raise KernelError("hybrid kernel needs a state kernel")
        if self.spatial is None:
            if self.spatial_dim is None:
                raise KernelError("hybrid kernel without spatial factor needs spatial_dim")
        elif self.spatial_dim is not None and self.spatial_dim != self.spatial.dim:
            raise KernelError("spatial_dim does not match the spatial kernel")
        else:
            object.__setattr__(self, "spatial_dim", self.spatial.dim)

    @property
    def dim(self) -> int:
        return self.spatial_dim + self.state.dim

    def check_orders(self, a, b):
        a = _as_index(a, self.dim)
        b = _as_index(b, self.dim)
        d = self.spatial_dim
        if self.spatial is not None:
            self.spatial.check_orders(a[:d], b[:d])
        self.state.check_orders(a[d:], b[d:])

    def deriv(self, X, Y, a=None, b=None) -> np.ndarray:
        X = _as_points(X, self.dim)
        Y = _as_points(Y, self.dim)
        a = _as_index(a, self.dim)
        b = _as_index(b, self.dim)
        d = self.spatial_dim
        state = self.state.deriv(X[:, d:], Y[:, d:], a[d:], b[d:])
        if self.spatial is None:
            if sum(a[:d]) or sum(b[:d]):
                return np.zeros_like(state)
            return state
        return self.spatial.deriv(X[:, :d], Y[:, :d], a[:d], b[:d]) * state

    def to_dict(self):
        out = {
            "family": "hybrid",
            "spatial": None if self.spatial is None else self.spatial.to_dict(),
            "state": self.state.to_dict(),
        }
        if self.spatial is None:
            out["spatial_dim"] = self.spatial_dim
        return out


def kernel_from_dict(data: dict) -> Kernel:
    """Inverse of ``Kernel.to_dict``."""
    family = data.get("family")
    if family == "rbf":
        return RBF(tuple(data["lengthscales"]))
    if family == "rq":
        return RationalQuadratic(tuple(data["lengthscales"]))
    if family == "matern":
        return Matern(tuple(data["lengthscales"]), nu=data.get("nu", 2.5))
    if family == "polynomial":
        return Polynomial(
            degree=data["degree"], shift=tuple(data["shift"]), scaling=tuple(data["scaling"])
        )
    if family == "hybrid":
        spatial = data.get("spatial")
        return HybridProduct(
            spatial=None if spatial is None else kernel_from_dict(spatial),
            state=kernel_from_dict(data["state"]),
            spatial_dim=data.get("spatial_dim"),
        )
    raise KernelError(f"unknown kernel family {family!r}")


def evaluate(k: Kernel, x, y) -> float:
    """Scalar ``k(x, y)``."""
    return float(k.deriv(np.atleast_1d(x).reshape(1, -1), np.atleast_1d(y).reshape(1, -1))[0, 0])


def evaluate_deriv(k: Kernel, a, b, x, y) -> float:
    """Scalar ``D_x^a D_y^b k(x, y)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, -1)
    return float(k.deriv(x, y, a, b)[0, 0])


def grad_second_arg(k: Kernel, s_first, s) -> np.ndarray:
    """Gradient of ``s -> k(s_first, s)``."""
    s_first = np.atleast_1d(np.asarray(s_first, dtype=float)).reshape(1, -1)
    s = np.atleast_1d(np.asarray(s, dtype=float)).reshape(1, -1)
    out = np.empty(k.dim)
    for i in range(k.dim):
        e = [0] * k.dim
        e[i] = 1
        out[i] = k.deriv(s_first, s, None, e)[0, 0]
    return out


def log_marginal_likelihood(k: Kernel, X, z, nugget: float) -> float:
    """GP log marginal likelihood of values ``z`` at ``X`` with noise ``nugget``."""
    from .gram import chol_jitter

    z = np.asarray(z, dtype=float).ravel()
    K = k(X, X) + nugget * np.eye(len(z))
    L, _ = chol_jitter(K, base_jitter=0.0)
    alpha = la.solve_triangular(L, z, lower=True)
    n = len(z)
    return float(-0.5 * alpha @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * math.log(2 * math.pi))


def mle_lengthscales(template: Kernel, candidates: Sequence, X, z, nugget: float):
    """Pick the candidate lengthscales with the largest log marginal likelihood.

    ``template`` is a stationary kernel whose ``lengthscales`` are replaced
    by each candidate in turn. Ties keep the first candidate.
    """
    if len(candidates) == 0:
        raise KernelError("empty candidate grid")
    best, best_ll = None, -np.inf
    for cand in candidates:
        ls = tuple(np.broadcast_to(np.asarray(cand, dtype=float), (template.dim,)))
        ll = log_marginal_likelihood(replace(template, lengthscales=ls), X, z, nugget)
        if ll > best_ll:
            best, best_ll = cand, ll
    if best is None:
        raise KernelError("log marginal likelihood is -inf for every candidate")
    return best


def mle_coordinate_search(
    template: Kernel,
    X,
    z,
    nugget: float,
    bounds: tuple[float, float] = (1e-2, 1e1),
    n_grid: int = 25,
    sweeps: int = 2,
) -> tuple[float, ...]:
    """Coordinate-wise log-grid MLE over each lengthscale in turn."""
    grid = np.geomspace(bounds[0], bounds[1], n_grid)
    ls = np.ones(template.dim) * float(np.sqrt(bounds[0] * bounds[1]))
    for _ in range(sweeps):
        for i in range(template.dim):
            cands = []
            for g in grid:
                c = ls.copy()
                c[i] = g
                cands.append(tuple(c))
            ls = np.asarray(mle_lengthscales(template, cands, X, z, nugget))
    return tuple(float(v) for v in ls)
