"""End-to-end benchmark pipelines and the report writer behind ``keql run``."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..gram import NotPositiveDefinite
from ..kernels import RBF, HybridProduct, Kernel, Polynomial, kernel_from_dict, mle_coordinate_search
from ..onestep import LMConfig, build_problem, fit_1step, history_csv, nugget_weights
from ..operators import SolutionModel, feature_map
from ..opsolve import AnalyticEquation, Constraint, SolveSpec, forecast_ode, solve_learned_pde
from ..twostep import TwoStepResult, feature_defaults, fit_equation_2step, fit_interpolant, merge_points
from . import datasets as D
from .io import atomic_write, write_csv, write_json
from .metrics import r_eql, r_filter, r_opl, relative_sq_error

__all__ = [
    "ConfigError",
    "SolverFailure",
    "RunOutput",
    "EXPERIMENTS",
    "validate_config",
    "run_duffing",
    "run_burgers",
    "run_darcy",
    "darcy_solver_check",
    "run_single",
    "run_experiment",
    "ERROR_COLUMNS",
]

log = logging.getLogger(__name__)

ERROR_COLUMNS = ["experiment", "method", "seed", "metric", "split", "value", "wall_seconds"]
MODES = ("two_step", "one_step_full", "one_step_reduced")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class SolverFailure(RuntimeError):
    """A factorisation or integration step failed irrecoverably."""


@dataclass
class RunOutput:
    experiment: str
    seed: int
    rows: list[tuple] = field(default_factory=list)
    models: dict[str, dict] = field(default_factory=dict)
    histories: dict[str, list[dict]] = field(default_factory=dict)
    plotdata: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    wall_seconds: float = 0.0
    monotone: bool = True

    def add(self, method, metric, split, value):
        self.rows.append([self.experiment, method, self.seed, metric, split, float(value)])


EXPERIMENTS = {
    "duffing": dict(
        n_obs=32,
        n_collocation=1000,
        theta_u=5e-8,
        theta_p=1e-9,
        lam=1.0,
        n_inducing=500,
        nugget_variant="MI",
        u_kernel={"family": "rq", "lengthscales": [1.0]},
        p_kernel={"family": "rbf", "lengthscales": [1.0, 1.0, 1.0]},
        mode="one_step_reduced",
        windows=[3.0, 6.0, 10.0],
        test_ics=[[0.0, 0.5], [0.0, 1.0], [0.0, -1.0]],
        max_iters=500,
        forecast_sigma2=1e-8,
        forecast_iters=200,
        forecast_continuation=1.0,
        p_factor="cholesky",
    ),
    "burgers": dict(
        theta=0.5,
        nu=0.01,
        ic="shock",
        new_ic="new",
        nt_cheb=26,
        nx_cheb=26,
        n_interior=0,
        n_boundary=100,
        theta_u=100.0,
        theta_p=1.0,
        lam=1.0,
        n_inducing=676,
        nugget_variant="MI",
        u_sigma=[0.0125, 0.0125],
        p_degree=2,
        mode="one_step_reduced",
        omit_rkhs_terms=True,
        objective_scale=0.1,
        max_iters=500,
        solve_sigma2=1e-8,
        solve_iters=300,
        p_factor="eigh",
    ),
    "darcy": dict(
        M=8,
        n_interior=2,
        grid_size=15,
        n_test_grid=100,
        n_id=4,
        n_ood=4,
        theta_u=5e-12,
        theta_p=1e-12,
        lam=1.0,
        n_inducing=200,
        nugget_variant="I",
        u_lengthscale=0.5,
        p_spatial_lengthscale=0.4,
        p_degree=1,
        mode="one_step_reduced",
        max_iters=3000,
        opl=True,
        n_opl=2,
        solve_sigma2=1e-8,
        solve_iters=200,
        p_factor="eigh",
    ),
}


def validate_config(cfg: dict) -> dict:
    """Merge defaults and check types; raises :class:`ConfigError`."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if "experiment" not in cfg:
        raise ConfigError("missing required field 'experiment'")
    exp = cfg["experiment"]
    if exp not in EXPERIMENTS:
        raise ConfigError(f"field 'experiment' must be one of {sorted(EXPERIMENTS)}, got {exp!r}")
    merged = {**EXPERIMENTS[exp], **cfg}
    seeds = merged.get("seeds", [merged.get("seed", 0)])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("field 'seeds' must be a nonempty list of nonnegative integers")
    merged["seeds"] = seeds
    if merged["mode"] not in MODES:
        raise ConfigError(f"field 'mode' must be one of {list(MODES)}")
    for key in ("theta_u", "theta_p", "lam"):
        if not (isinstance(merged[key], (int, float)) and merged[key] > 0):
            raise ConfigError(f"field '{key}' must be a positive number")
    for key in ("n_inducing", "max_iters", "n_obs", "n_collocation", "M", "grid_size", "nt_cheb", "nx_cheb"):
        if key in merged and not (isinstance(merged[key], int) and merged[key] > 0):
            raise ConfigError(f"field '{key}' must be a positive integer")
    if exp == "darcy":
        interior = (merged["grid_size"] - 2) ** 2
        if not 0 < merged["n_interior"] <= interior:
            raise ConfigError(f"field 'n_interior' must lie in [1, {interior}]")
    if exp == "duffing" and merged["n_obs"] > merged["n_collocation"]:
        raise ConfigError("field 'n_obs' exceeds 'n_collocation'")
    return merged


def _lm(cfg, key="max_iters") -> LMConfig:
    return LMConfig(max_iters=int(cfg[key]))


def _record_history(out: RunOutput, name: str, history: list[dict]):
    out.histories[name] = history
    acc = [h["objective"] for h in history if h["accepted"]]
    if any(b >= a for a, b in zip(acc, acc[1:])):
        out.monotone = False
        log.error("non-monotone accepted objectives in %s", name)


def _model_dict(models, equation) -> dict:
    return {"models": [m.to_dict() for m in models], "equation": equation.to_dict()}


# --------------------------------------------------------------------------
# Duffing
# --------------------------------------------------------------------------


def run_duffing(cfg: dict, seed: int) -> RunOutput:
    out = RunOutput("duffing", seed)
    ds = D.gen_duffing(cfg, seed)
    obs = ds.observations
    ku = kernel_from_dict(cfg["u_kernel"])
    kp = kernel_from_dict(cfg["p_kernel"])
    N, M, I = len(obs[0]), len(obs), int(cfg["n_inducing"])
    su, sp = nugget_weights(N, M, I, cfg["theta_u"], cfg["theta_p"], cfg["nugget_variant"])
    basis = "full" if cfg["mode"] == "one_step_full" else "reduced"
    problem, two = build_problem(
        obs, ds.Y, ku, kp, D.DUFFING_OPS, D.DUFFING_KNOWN, basis, I, su, sp, cfg["lam"], seed, p_factor=cfg["p_factor"]
    )
    u_test = ds.truth["u_test"]
    methods = [("2step", two.models, two.equation)]
    out.add("2step", "filter", "train", r_filter([u_test], [two.models[0].evaluate(ds.test_points)]))
    out.models["2step"] = _model_dict(two.models, two.equation)
    if cfg["mode"] != "two_step":
        res = fit_1step(problem, _lm(cfg), init=two)
        _record_history(out, "1step", res.history)
        out.add("1step", "filter", "train", r_filter([u_test], [res.models[0].evaluate(ds.test_points)]))
        out.models["1step"] = _model_dict(res.models, res.equation)
        methods.append(("1step", res.models, res.equation))
    t = ds.test_points[:, 0]
    rows = [[ti, ui] + [m[1][0].evaluate(np.array([[ti]]))[0] for m in methods] for ti, ui in zip(t[::10], u_test[::10])]
    out.plotdata["filter"] = (["t", "u_true"] + [f"u_{m[0]}" for m in methods], rows)
    dt = ds.Y[1, 0] - ds.Y[0, 0]
    for name, _, eq in methods:
        for T_w in cfg["windows"]:
            n_w = int(round(T_w / dt)) + 1
            grid = np.linspace(0.0, T_w, n_w)[:, None]
            tw = t[t <= T_w]
            errs = []
            for k, (u0, v0) in enumerate(cfg["test_ics"]):
                sol = forecast_ode(
                    eq,
                    u0,
                    v0,
                    grid,
                    lambda P: D.duffing_forcing(P[:, 0]),
                    ku,
                    continuation=cfg["forecast_continuation"],
                    sigma_b2=cfg["forecast_sigma2"],
                    sigma_f2=cfg["forecast_sigma2"],
                    config=LMConfig(max_iters=int(cfg["forecast_iters"])),
                )
                pred = sol.model.evaluate(tw[:, None])
                truth = ds.truth[f"ic{k}_w{T_w:g}"]
                errs.append(relative_sq_error(truth, pred))
                if T_w == max(cfg["windows"]):
                    out.plotdata[f"forecast_ic{k}_{name}"] = (["t", "u_true", "u_pred"], [list(r) for r in zip(tw, truth, pred)])
            out.add(name, "opl", f"[0,{T_w:g}]", float(np.mean(errs)))
    return out


# --------------------------------------------------------------------------
# Burgers
# --------------------------------------------------------------------------


def _burgers_u_kernel(cfg, obs, nugget) -> Kernel:
    if cfg["u_sigma"] == "mle":
        ls = mle_coordinate_search(RBF((1.0, 1.0)), obs.points, obs.values, nugget)
        return RBF(ls)
    return RBF(tuple(math.sqrt(float(s)) for s in cfg["u_sigma"]))


def run_burgers(cfg: dict, seed: int) -> RunOutput:
    out = RunOutput("burgers", seed)
    ds = D.gen_burgers(cfg, seed)
    obs = ds.observations
    N, M, I = len(obs[0]), len(obs), int(cfg["n_inducing"])
    su, sp = nugget_weights(N, M, I, cfg["theta_u"], cfg["theta_p"], cfg["nugget_variant"])
    ku = _burgers_u_kernel(cfg, obs[0], 2 * su)
    ops, known = D.BURGERS_OPS, D.BURGERS_KNOWN
    models = [fit_interpolant(o, ku, 2 * su) for o in obs]
    S_obs = np.vstack([feature_map(m, o.points, ops) for m, o in zip(models, obs)])
    c, B = feature_defaults(S_obs[:, ops.dim :])
    kp = HybridProduct(None, Polynomial(int(cfg["p_degree"]), tuple(c), tuple(B)), spatial_dim=ops.dim)
    Y = ds.Y
    for o in obs:
        Y, _ = merge_points(Y, o.points)
    eq2 = fit_equation_2step(models, Y, [o.rhs_on(Y) for o in obs], kp, 2 * sp, known, ops)
    two = TwoStepResult(models, eq2, {"u": 2 * su, "P": 2 * sp})
    out.add("2step", "filter", "train", r_filter([ds.truth["u_test"]], [models[0].evaluate(ds.test_points)]))
    out.models["2step"] = _model_dict(two.models, two.equation)
    methods = [("2step", two.models, two.equation)]
    if cfg["mode"] != "two_step":
        basis = "full" if cfg["mode"] == "one_step_full" else "reduced"
        problem, _ = build_problem(
            obs,
            Y,
            ku,
            kp,
            ops,
            known,
            basis,
            I,
            su,
            sp,
            cfg["lam"],
            seed,
            omit_rkhs_terms=cfg["omit_rkhs_terms"],
            scale=cfg["objective_scale"],
            two_step=two,
            p_factor=cfg["p_factor"],
        )
        res = fit_1step(problem, _lm(cfg), init=two)
        _record_history(out, "1step", res.history)
        out.add("1step", "filter", "train", r_filter([ds.truth["u_test"]], [res.models[0].evaluate(ds.test_points)]))
        out.models["1step"] = _model_dict(res.models, res.equation)
        methods.append(("1step", res.models, res.equation))
    if "u_new_test" in ds.truth:
        bidx = D.burgers_boundary_order(D.chebyshev_nodes(cfg["nt_cheb"]), D.chebyshev_nodes(cfg["nx_cheb"]))
        # t = 0 line plus both spatial edges
        nb = cfg["nx_cheb"] + 2 * (cfg["nt_cheb"] - 1)
        pts = ds.Y[bidx[:nb]]
        vals = np.where(np.isclose(pts[:, 0], 0.0), D.burgers_new_ic(pts[:, 1]), 0.0)
        vals[np.isclose(pts[:, 1], 0.0) | np.isclose(pts[:, 1], 1.0)] = 0.0
        for name, _, eq in methods:
            spec = SolveSpec(
                eq,
                ds.Y,
                np.zeros(len(ds.Y)),
                [Constraint(pts, vals)],
                ku,
                sigma_b2=cfg["solve_sigma2"],
                sigma_f2=cfg["solve_sigma2"],
                config=LMConfig(max_iters=int(cfg["solve_iters"])),
            )
            sol = solve_learned_pde(spec)
            pred = sol.model.evaluate(ds.test_points)
            out.add(name, "opl", "new_ic", r_opl([ds.truth["u_new_test"]], [pred]))
            out.plotdata[f"opl_{name}"] = (["t", "x", "u_true", "u_pred"], [list(r) for r in zip(ds.test_points[::7, 0], ds.test_points[::7, 1], ds.truth["u_new_test"][::7], pred[::7])])
    out.plotdata["filter"] = (
        ["t", "x", "u_true"] + [f"u_{m[0]}" for m in methods],
        [
            list(r)
            for r in zip(
                ds.test_points[::7, 0], ds.test_points[::7, 1], ds.truth["u_test"][::7], *[m[1][0].evaluate(ds.test_points[::7]) for m in methods]
            )
        ],
    )
    return out


# --------------------------------------------------------------------------
# Darcy
# --------------------------------------------------------------------------


def _darcy_eql(eq, ds, split) -> float:
    S = ds.truth[f"{split}_features"]
    f = ds.truth[f"{split}_f"]
    return r_eql(list(f), [eq(Si) for Si in S])


def run_darcy(cfg: dict, seed: int) -> RunOutput:
    out = RunOutput("darcy", seed)
    ds = D.gen_darcy(cfg, seed)
    obs = ds.observations
    ops = D.DARCY_OPS
    N, M, I = len(obs[0]), len(obs), int(cfg["n_inducing"])
    su, sp = nugget_weights(N, M, I, cfg["theta_u"], cfg["theta_p"], cfg["nugget_variant"])
    lu = float(cfg["u_lengthscale"])
    ku = RBF((lu, lu))
    models = [fit_interpolant(o, ku, 2 * su) for o in obs]
    S = np.vstack([feature_map(m, ds.Y, ops) for m in models])
    c, B = feature_defaults(S[:, ops.dim :])
    ls = float(cfg["p_spatial_lengthscale"])
    kp = HybridProduct(RBF((ls, ls)), Polynomial(int(cfg["p_degree"]), tuple(c), tuple(B)))
    rhs = [o.rhs_on(ds.Y) for o in obs]
    eq2 = fit_equation_2step(models, ds.Y, rhs, kp, 2 * sp, None, ops)
    two = TwoStepResult(models, eq2, {"u": 2 * su, "P": 2 * sp})
    fns = ds.truth["train_functions"]
    test = ds.test_points
    truths = [fn(test) for fn in fns]
    methods = [("2step", models, eq2)]
    out.models["2step"] = _model_dict(models, eq2)
    if cfg["mode"] != "two_step":
        basis = "full" if cfg["mode"] == "one_step_full" else "reduced"
        problem, _ = build_problem(obs, ds.Y, ku, kp, ops, None, basis, I, su, sp, cfg["lam"], seed, two_step=two, p_factor=cfg["p_factor"]
        )
        res = fit_1step(problem, _lm(cfg), init=two)
        _record_history(out, "1step", res.history)
        out.models["1step"] = _model_dict(res.models, res.equation)
        methods.append(("1step", res.models, res.equation))
    bmask = D.grid_boundary_mask(ds.Y)
    for name, ms, eq in methods:
        out.add(name, "filter", "train", r_filter(truths, [m.evaluate(test) for m in ms]))
        for split in ("train", "ID", "OOD"):
            out.add(name, "eql", split, _darcy_eql(eq, ds, split))
        if cfg["opl"]:
            for split in ("ID", "OOD"):
                errs = []
                for fn in ds.truth[f"{split}_functions"][: int(cfg["n_opl"])]:
                    spec = SolveSpec(
                        eq,
                        ds.Y,
                        fn.rhs(ds.Y),
                        [Constraint(ds.Y[bmask], fn(ds.Y[bmask]))],
                        ku,
                        sigma_b2=cfg["solve_sigma2"],
                        sigma_f2=cfg["solve_sigma2"],
                        config=LMConfig(max_iters=int(cfg["solve_iters"])),
                    )
                    sol = solve_learned_pde(spec)
                    errs.append(relative_sq_error(fn(test), sol.model.evaluate(test)))
                out.add(name, "opl", split, float(np.mean(errs)))
    sub = slice(None, None, 37)
    out.plotdata["train0"] = (
        ["x1", "x2", "u_true"] + [f"u_{m[0]}" for m in methods],
        [list(r) for r in zip(test[sub, 0], test[sub, 1], truths[0][sub], *[m[1][0].evaluate(test[sub]) for m in methods])],
    )
    return out


def darcy_solver_check(seed: int = 0, grid_size: int = 15, lengthscale: float = 0.5, n_test_grid: int = 100, fn=None) -> float:
    """Relative l2 error of solving the true Darcy equation for a
    manufactured solution, measured on the test grid.

    ``fn`` defaults to a seeded prior draw; any object with ``__call__`` and
    ``rhs`` works.
    """
    if fn is None:
        fn = D.draw_darcy_function(D.make_rng(seed), 0.5)
    Y = D.uniform_grid(grid_size)
    b = D.grid_boundary_mask(Y)
    eq = AnalyticEquation(D.darcy_true_p, D.darcy_true_p_grad, D.DARCY_OPS)
    spec = SolveSpec(eq, Y, fn.rhs(Y), [Constraint(Y[b], fn(Y[b]))], RBF((lengthscale, lengthscale)), config=LMConfig(max_iters=50))
    sol = solve_learned_pde(spec)
    test = D.uniform_grid(n_test_grid)
    u = fn(test)
    return float(np.linalg.norm(sol.model.evaluate(test) - u) / np.linalg.norm(u))


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

RUNNERS = {"duffing": run_duffing, "burgers": run_burgers, "darcy": run_darcy}


def run_single(cfg: dict, seed: int) -> RunOutput:
    """One seed of a validated config, with wall time recorded."""
    t0 = time.perf_counter()
    try:
        out = RUNNERS[cfg["experiment"]](cfg, seed)
    except (NotPositiveDefinite, np.linalg.LinAlgError) as exc:
        raise SolverFailure(f"linear algebra failure: {exc}") from exc
    except RuntimeError as exc:
        if isinstance(exc, SolverFailure):
            raise
        raise SolverFailure(str(exc)) from exc
    out.wall_seconds = time.perf_counter() - t0
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def write_outputs(outputs: list[RunOutput], out_dir, cfg: dict, timing: bool = True) -> None:
    out_dir = Path(out_dir)
    rows = []
    for o in outputs:
        wall = o.wall_seconds if timing else 0.0
        rows.extend(r + [wall] for r in o.rows)
    write_csv(out_dir / "errors.csv", ERROR_COLUMNS, rows)
    first = None
    for o in outputs:
        tag = f"{o.experiment}_seed{o.seed}"
        for method, d in o.models.items():
            write_json(out_dir / "models" / f"{tag}_{method}.json", d)
        for method, hist in o.histories.items():
            text = history_csv(hist)
            atomic_write(out_dir / "history" / f"{tag}_{method}.csv", text)
            if first is None:
                first = text
        for name, (header, prow) in o.plotdata.items():
            write_csv(out_dir / "plotdata" / f"{tag}_{name}.csv", header, prow)
    atomic_write(out_dir / "history.csv", first if first is not None else history_csv([]))
    write_json(
        out_dir / "run.json",
        {
            "config": cfg,
            "config_hash": config_hash(cfg),
            "seeds": [o.seed for o in outputs],
            "monotone": all(o.monotone for o in outputs),
            "wall_seconds": {str(o.seed): (o.wall_seconds if timing else 0.0) for o in outputs},
        },
    )


def run_experiment(config, out_dir=None, overrides: dict | None = None, threads: int = 1, timing: bool = True) -> list[RunOutput]:
    """Validate ``config`` (path or dict), run every seed and write the reports.

    Raises :class:`ConfigError` or :class:`SolverFailure`.
    """
    if isinstance(config, (str, Path)):
        try:
            cfg = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config}: {exc}") from exc
    else:
        cfg = dict(config)
    cfg.update(overrides or {})
    cfg = validate_config(cfg)
    out_dir = Path(out_dir or cfg.get("out", f"results/{cfg['experiment']}"))
    seeds = cfg["seeds"]
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run_single, [cfg] * len(seeds), seeds))
    else:
        outputs = [run_single(cfg, s) for s in seeds]
    write_outputs(outputs, out_dir, cfg, timing)
    return outputs
