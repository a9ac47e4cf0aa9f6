"""Reference solutions and training data for the Duffing, Burgers and
Darcy benchmarks.

All randomness goes through :func:`make_rng`, a Philox counter-based
generator, so datasets are reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as la
from scipy.integrate import solve_ivp
from scipy.interpolate import RectBivariateSpline

from ..gram import chol_jitter
from ..kernels import RBF
from ..operators import DiffOperatorSet, KnownPart, SolutionModel
from ..twostep import ObservationSet

__all__ = [
    "make_rng",
    "chebyshev_nodes",
    "DuffingTrajectory",
    "duffing_trajectory",
    "duffing_residual",
    "gen_duffing",
    "BurgersSolution",
    "solve_burgers",
    "burgers_kl_ic",
    "burgers_shock_ic",
    "gen_burgers",
    "darcy_coefficient",
    "darcy_coefficient_grad",
    "DarcyFunction",
    "draw_darcy_function",
    "gen_darcy",
    "uniform_grid",
    "DUFFING_OPS",
    "BURGERS_OPS",
    "DARCY_OPS",
]


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


def chebyshev_nodes(n: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Chebyshev extrema ``cos(pi j / (n-1))`` mapped to ``[a, b]`` in ascending order."""
    j = np.arange(n)
    x = -np.cos(np.pi * j / (n - 1))
    return a + (b - a) * (x + 1) / 2


def uniform_grid(n: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Tensor grid ``n x n`` on ``[a, b]^2`` as rows ``(x1, x2)``."""
    x = np.linspace(a, b, n)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    return np.column_stack([X1.ravel(), X2.ravel()])


# --------------------------------------------------------------------------
# Duffing
# --------------------------------------------------------------------------

DUFFING_OPS = DiffOperatorSet(((0,), (1,)))
DUFFING_KNOWN = KnownPart(((1.0, (2,)),))


def duffing_forcing(t) -> np.ndarray:
    return np.cos(2.0 * np.asarray(t, dtype=float))


def duffing_true_p(S) -> np.ndarray:
    """Unknown part ``-3u + 3u^3 + 0.2 u_t`` on feature rows ``(t, u, u_t)``."""
    S = np.asarray(S, dtype=float)
    u, ut = S[:, 1], S[:, 2]
    return -3.0 * u + 3.0 * u**3 + 0.2 * ut


def duffing_true_p_grad(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    g = np.zeros_like(S)
    g[:, 1] = -3.0 + 9.0 * S[:, 1] ** 2
    g[:, 2] = 0.2
    return g


@dataclass
class DuffingTrajectory:
    """Dense-output solution of the Duffing initial-value problem."""

    sol: object
    t_end: float

    def __call__(self, t) -> np.ndarray:
        return self.sol.sol(np.asarray(t, dtype=float))[0]

    def velocity(self, t) -> np.ndarray:
        return self.sol.sol(np.asarray(t, dtype=float))[1]


def _duffing_rhs(t, y):
    return [y[1], math.cos(2.0 * t) + 3.0 * y[0] - 3.0 * y[0] ** 3 - 0.2 * y[1]]


def duffing_trajectory(u0: float = 0.0, v0: float = 0.0, t_end: float = 50.0, tol: float = 1e-8) -> DuffingTrajectory:
    """Integrate ``u'' - 3u + 3u^3 + 0.2u' = cos 2t`` with RK5(4)."""
    sol = solve_ivp(
        _duffing_rhs, (0.0, t_end), [u0, v0], method="RK45", rtol=tol, atol=tol, dense_output=True, first_step=1e-3
    )
    if not sol.success:
        raise RuntimeError(f"Duffing integration failed: {sol.message}")
    return DuffingTrajectory(sol, t_end)


def duffing_residual(traj: DuffingTrajectory, t, h: float = 1e-4) -> np.ndarray:
    """ODE residual of the dense output, with ``u''`` by central differences."""
    t = np.asarray(t, dtype=float)
    t = np.clip(t, h, traj.t_end - h)
    u = traj(t)
    ut = traj.velocity(t)
    utt = (traj.velocity(t + h) - traj.velocity(t - h)) / (2 * h)
    return utt - 3 * u + 3 * u**3 + 0.2 * ut - duffing_forcing(t)


@dataclass
class Dataset:
    """Training observations, grids and ground truth of one experiment."""

    experiment: str
    seed: int
    config: dict
    Y: np.ndarray
    observations: list[ObservationSet]
    test_points: np.ndarray
    truth: dict = field(default_factory=dict)

    def save(self, path) -> None:
        from .io import save_dataset

        save_dataset(self, path)


DUFFING_DEFAULTS = dict(
    t_end=50.0,
    n_collocation=1000,
    n_obs=32,
    n_test=5000,
    test_ics=[[0.0, 0.5], [0.0, 1.0], [0.0, -1.0]],
    windows=[3.0, 6.0, 10.0],
)


def gen_duffing(config: dict | None = None, seed: int = 0) -> Dataset:
    """Single trajectory observed at ``n_obs`` equispaced collocation nodes.

    The observation subsample starts at a seed-dependent offset within the
    first stride of the collocation grid and spans the whole window.
    """
    cfg = {**DUFFING_DEFAULTS, **(config or {})}
    T = float(cfg["t_end"])
    traj = duffing_trajectory(0.0, 0.0, T)
    Y = np.linspace(0.0, T, int(cfg["n_collocation"]))
    n_obs = int(cfg["n_obs"])
    # fractional stride so the subsample spans the whole window for any n_obs
    stride = (len(Y) - 1) / n_obs
    offset = int(make_rng(seed).integers(0, max(int(stride), 1)))
    idx = offset + np.round(stride * np.arange(n_obs)).astype(int)
    obs = ObservationSet(Y[idx, None], traj(Y[idx]), rhs=lambda P: duffing_forcing(P[:, 0]))
    t_test = np.linspace(0.0, T, int(cfg["n_test"]))
    truth = {"u_test": traj(t_test), "ut_test": traj.velocity(t_test)}
    for k, (u0, v0) in enumerate(cfg["test_ics"]):
        tr = duffing_trajectory(u0, v0, max(cfg["windows"]))
        for T_w in cfg["windows"]:
            tw = t_test[t_test <= T_w]
            truth[f"ic{k}_w{T_w:g}"] = tr(tw)
    return Dataset("duffing", seed, cfg, Y[:, None], [obs], t_test[:, None], truth)


# --------------------------------------------------------------------------
# Burgers
# --------------------------------------------------------------------------

BURGERS_OPS = DiffOperatorSet(((0, 0), (0, 1), (0, 2)))
BURGERS_KNOWN = KnownPart(((1.0, (1, 0)),))


def burgers_kl_ic(rng: np.random.Generator, n_modes: int = 50) -> Callable[[np.ndarray], np.ndarray]:
    """``u0(x) = sum_j Z_j sin(j pi x) / j^2`` with standard normal ``Z_j``."""
    Z = rng.standard_normal(n_modes)
    j = np.arange(1, n_modes + 1)

    def u0(x):
        x = np.asarray(x, dtype=float)
        return np.sin(np.pi * np.multiply.outer(x, j)) @ (Z / j**2)

    return u0


def burgers_shock_ic(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return 0.25 * (x * np.sin(np.pi * x) - np.sin(5 * np.pi * x) - np.sin(3 * np.pi * x))


def burgers_new_ic(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return -x * np.sin(2 * np.pi * x)


def _van_leer(a, b):
    ab = a * b
    return np.where(ab > 0, 2 * ab / np.where(ab > 0, a + b, 1.0), 0.0)


@dataclass
class BurgersSolution:
    """Reference field on a uniform space-time grid with a bicubic spline."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    _spline: RectBivariateSpline | None = field(default=None, repr=False)

    @property
    def spline(self) -> RectBivariateSpline:
        if self._spline is None:
            self._spline = RectBivariateSpline(self.t, self.x, self.u, kx=3, ky=3)
        return self._spline

    def __call__(self, points, dt: int = 0, dx: int = 0) -> np.ndarray:
        P = np.asarray(points, dtype=float).reshape(-1, 2)
        return self.spline.ev(P[:, 0], P[:, 1], dx=dt, dy=dx)


def solve_burgers(
    u0: Callable[[np.ndarray], np.ndarray],
    theta: float = 1.0,
    nu: float = 0.01,
    t_end: float = 1.0,
    nx: int = 1024,
    nt: int = 1024,
    cfl: float = 0.4,
) -> BurgersSolution:
    """Strang splitting for ``u_t + theta u u_x = nu u_xx`` with zero Dirichlet data.

    Half steps of Crank-Nicolson diffusion wrap a full step of conservative
    advection with van Leer limited MUSCL reconstruction, Rusanov fluxes
    and SSP-RK2. ``nx`` is the number of space intervals; the number of
    steps grows beyond ``nt`` whenever the CFL condition requires it. The
    stored field keeps ``nt + 1`` equispaced time levels.
    """
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    x = np.linspace(0.0, 1.0, nx + 1)
    h = x[1] - x[0]
    u = np.asarray(u0(x), dtype=float).copy()
    u[0] = u[-1] = 0.0
    umax = max(float(np.max(np.abs(u))), 1e-12)
    sub = max(1, math.ceil((t_end / nt) * abs(theta) * umax / (cfl * h)))
    dt = t_end / (nt * sub)

    n_int = nx - 1
    r = nu * (dt / 2) / h**2
    ab = np.zeros((3, n_int))
    ab[0, 1:] = -r / 2
    ab[1, :] = 1 + r
    ab[2, :-1] = -r / 2

    def diffuse(v):
        w = v[1:-1]
        rhs = (1 - r) * w
        rhs[1:] += (r / 2) * w[:-1]
        rhs[:-1] += (r / 2) * w[1:]
        out = np.zeros_like(v)
        out[1:-1] = la.solve_banded((1, 1), ab, rhs, check_finite=False)
        return out

    def advect_rate(v):
        # odd reflection across the Dirichlet ends
        g = np.concatenate([[-v[2], -v[1]], v, [-v[-2], -v[-3]]])
        d = np.diff(g)
        slope = _van_leer(d[:-1], d[1:])
        gc = g[1:-1]
        left = gc + 0.5 * slope
        right = gc - 0.5 * slope
        uL, uR = left[:-1], right[1:]
        a = abs(theta) * np.maximum(np.abs(uL), np.abs(uR))
        flux = 0.5 * theta * 0.5 * (uL**2 + uR**2) - 0.5 * a * (uR - uL)
        rate = -(flux[1:] - flux[:-1]) / h
        rate[0] = rate[-1] = 0.0
        return rate

    def advect(v, tau):
        v1 = v + tau * advect_rate(v)
        v2 = 0.5 * (v + v1 + tau * advect_rate(v1))
        v2[0] = v2[-1] = 0.0
        return v2

    out = np.empty((nt + 1, nx + 1))
    out[0] = u
    for n in range(nt):
        for _ in range(sub):
            u = diffuse(u)
            u = advect(u, dt)
            u = diffuse(u)
        out[n + 1] = u
    t = np.linspace(0.0, t_end, nt + 1)
    return BurgersSolution(t, x, out)


BURGERS_DEFAULTS = dict(
    theta=0.5,
    nu=0.01,
    ic="shock",
    nt_cheb=26,
    nx_cheb=26,
    n_interior=0,
    n_boundary=100,
    n_test=100,
    solver_nx=1024,
    solver_nt=1024,
    new_ic="new",
)


def _burgers_ic(name: str, rng):
    if name == "shock":
        return burgers_shock_ic
    if name == "new":
        return burgers_new_ic
    if name == "kl":
        return burgers_kl_ic(rng)
    raise ValueError(f"unknown Burgers initial condition {name!r}")


def burgers_boundary_order(T: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Indices of boundary nodes of a ``len(T) x len(X)`` grid: ``t=0`` line,
    then ``x=0``, ``x=1`` and finally the ``t=1`` line."""
    nt, nx = len(T), len(X)
    ids = [(0, j) for j in range(nx)]
    ids += [(i, 0) for i in range(1, nt)]
    ids += [(i, nx - 1) for i in range(1, nt)]
    ids += [(nt - 1, j) for j in range(1, nx - 1)]
    return np.asarray([i * nx + j for i, j in ids])


def gen_burgers(config: dict | None = None, seed: int = 0) -> Dataset:
    """Space-time observations of Burgers' equation on a Chebyshev grid.

    Boundary observations are taken in the order of
    :func:`burgers_boundary_order`; when more are requested than the grid has,
    extra boundary points at uniformly random positions on the ``x = 0`` and
    ``x = 1`` edges are added. Interior observations are drawn without
    replacement from the interior grid nodes.
    """
    cfg = {**BURGERS_DEFAULTS, **(config or {})}
    rng = make_rng(seed)
    u0 = _burgers_ic(cfg["ic"], rng)
    ref = solve_burgers(u0, cfg["theta"], cfg["nu"], nx=cfg["solver_nx"], nt=cfg["solver_nt"])
    T = chebyshev_nodes(cfg["nt_cheb"])
    X = chebyshev_nodes(cfg["nx_cheb"])
    TT, XX = np.meshgrid(T, X, indexing="ij")
    Y = np.column_stack([TT.ravel(), XX.ravel()])
    bidx = burgers_boundary_order(T, X)
    nb = int(cfg["n_boundary"])
    b_pts = Y[bidx[: min(nb, len(bidx))]]
    if nb > len(bidx):
        extra = nb - len(bidx)
        ts = rng.uniform(0.0, 1.0, extra)
        xs = np.where(np.arange(extra) % 2 == 0, 0.0, 1.0)
        b_pts = np.vstack([b_pts, np.column_stack([ts, xs])])
    interior = np.setdiff1d(np.arange(len(Y)), bidx)
    ni = int(cfg["n_interior"])
    i_pts = Y[np.sort(rng.choice(interior, size=ni, replace=False))] if ni else np.zeros((0, 2))
    pts = np.vstack([i_pts, b_pts])
    vals = ref(pts)
    vals[np.isclose(pts[:, 1], 0.0) | np.isclose(pts[:, 1], 1.0)] = 0.0
    obs = ObservationSet(pts, vals, rhs=lambda P: np.zeros(len(P)), n_boundary=len(b_pts))
    tt = np.linspace(0.0, 1.0, int(cfg["n_test"]))
    TT, XX = np.meshgrid(tt, tt, indexing="ij")
    test = np.column_stack([TT.ravel(), XX.ravel()])
    truth = {"u_test": ref(test)}
    if cfg.get("new_ic"):
        ref_new = solve_burgers(_burgers_ic(cfg["new_ic"], rng), cfg["theta"], cfg["nu"], nx=cfg["solver_nx"], nt=cfg["solver_nt"])
        truth["u_new_test"] = ref_new(test)
    return Dataset("burgers", seed, cfg, Y, [obs], test, truth)


# --------------------------------------------------------------------------
# Darcy
# --------------------------------------------------------------------------

DARCY_OPS = DiffOperatorSet(((0, 0), (1, 0), (2, 0), (0, 1), (0, 2), (1, 1)))


def darcy_coefficient(X) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    return np.exp(np.sin(np.cos(X[:, 0]) + np.cos(X[:, 1])))


def darcy_coefficient_grad(X) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    s = np.cos(X[:, 0]) + np.cos(X[:, 1])
    a = np.exp(np.sin(s))
    common = a * np.cos(s)
    return np.column_stack([-common * np.sin(X[:, 0]), -common * np.sin(X[:, 1])])


def darcy_true_p(S) -> np.ndarray:
    """``a (u_11 + u_22) + a_1 u_1 + a_2 u_2`` on feature rows
    ``(x1, x2, u, u_1, u_11, u_2, u_22, u_12)``."""
    S = np.asarray(S, dtype=float)
    a = darcy_coefficient(S[:, :2])
    g = darcy_coefficient_grad(S[:, :2])
    return a * (S[:, 4] + S[:, 6]) + g[:, 0] * S[:, 3] + g[:, 1] * S[:, 5]


def darcy_true_p_grad(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    a = darcy_coefficient(S[:, :2])
    g = darcy_coefficient_grad(S[:, :2])
    out = np.zeros_like(S)
    out[:, 3] = g[:, 0]
    out[:, 4] = a
    out[:, 5] = g[:, 1]
    out[:, 6] = a
    return out


@dataclass
class DarcyFunction:
    """A GP draw stored as a kernel expansion, with its Darcy right-hand side."""

    model: SolutionModel

    def __call__(self, X) -> np.ndarray:
        return self.model.evaluate(X)

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        return np.column_stack([X, *[self.model.evaluate(X, op) for op in DARCY_OPS]])

    def rhs(self, X) -> np.ndarray:
        return darcy_true_p(self.features(X))


def draw_darcy_function(rng: np.random.Generator, lengthscale: float = 0.5, n_nodes: int = 20, jitter: float = 1e-6) -> DarcyFunction:
    """Normal draw of nodal values under an RBF prior, interpolated by the
    same kernel (nodes on a uniform ``n_nodes x n_nodes`` grid of the unit square)."""
    k = RBF((lengthscale, lengthscale))
    nodes = uniform_grid(n_nodes)
    K = k(nodes, nodes)
    L, _ = chol_jitter(K, base_jitter=jitter)
    xi = rng.standard_normal(len(nodes))
    coef = la.solve_triangular(L, xi, lower=True, trans="T")
    return DarcyFunction(SolutionModel(k, nodes, coef, "reduced"))


DARCY_DEFAULTS = dict(
    M=8,
    n_interior=2,
    grid_size=15,
    n_test_grid=100,
    n_id=4,
    n_ood=4,
    lengthscale=0.5,
    lengthscale_ood=0.4,
)


def grid_boundary_mask(Y) -> np.ndarray:
    Y = np.asarray(Y)
    return np.any(np.isclose(Y, 0.0) | np.isclose(Y, 1.0), axis=1)


def gen_darcy(config: dict | None = None, seed: int = 0) -> Dataset:
    """``M`` training functions observed at every boundary node and
    ``n_interior`` random interior nodes of the collocation grid, plus
    in-distribution and out-of-distribution test functions."""
    cfg = {**DARCY_DEFAULTS, **(config or {})}
    rng = make_rng(seed)
    Y = uniform_grid(int(cfg["grid_size"]))
    bmask = grid_boundary_mask(Y)
    bidx = np.flatnonzero(bmask)
    iidx = np.flatnonzero(~bmask)
    test = uniform_grid(int(cfg["n_test_grid"]))
    train, observations = [], []
    for _ in range(int(cfg["M"])):
        fn = draw_darcy_function(rng, cfg["lengthscale"])
        idx = np.sort(rng.choice(iidx, size=int(cfg["n_interior"]), replace=False))
        pts = np.vstack([Y[idx], Y[bidx]])
        observations.append(ObservationSet(pts, fn(pts), rhs=fn.rhs, n_boundary=len(bidx)))
        train.append(fn)
    ids = [draw_darcy_function(rng, cfg["lengthscale"]) for _ in range(int(cfg["n_id"]))]
    oods = [draw_darcy_function(rng, cfg["lengthscale_ood"]) for _ in range(int(cfg["n_ood"]))]
    truth = {}
    for split, fns in (("train", train), ("ID", ids), ("OOD", oods)):
        truth[f"{split}_features"] = np.stack([fn.features(test) for fn in fns])
        truth[f"{split}_f"] = np.stack([darcy_true_p(S) for S in truth[f"{split}_features"]])
        truth[f"{split}_functions"] = fns
    return Dataset("darcy", seed, cfg, Y, observations, test, truth)
