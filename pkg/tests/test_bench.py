import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keql.bench import cli
from keql.bench import datasets as D
from keql.bench import experiments as E
from keql.bench.io import load_dataset, save_dataset
from keql.bench.metrics import r_eql, r_filter, r_opl, relative_sq_error
from keql.kernels import RationalQuadratic
from keql.onestep import nugget_weights
from keql.operators import SolutionModel
from keql.twostep import fit_interpolant

# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def duffing_ds():
    return D.gen_duffing({}, 0)


def test_duffing_initial_state_exact(duffing_ds):
    assert duffing_ds.truth["u_test"][0] == 0.0
    assert duffing_ds.truth["ut_test"][0] == 0.0
    assert duffing_ds.test_points[0, 0] == 0.0


def test_duffing_reference_residual(duffing_ds):
    traj = D.duffing_trajectory()
    r = D.duffing_residual(traj, duffing_ds.test_points[:, 0])
    assert math.sqrt(np.mean(r**2)) <= 1e-4


def test_duffing_observations_span_window():
    for n in (16, 32, 64, 128):
        obs = D.gen_duffing({"n_obs": n}, 3).observations[0]
        assert len(obs) == n
        assert obs.points[-1, 0] >= 50.0 * (1 - 1.5 / n)


def test_dataset_files_deterministic(tmp_path):
    for k in ("a", "b"):
        save_dataset(D.gen_duffing({"n_test": 500}, 4), tmp_path / k)
    for name in ("dataset.json", "truth.npz"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_portable_rng_is_counter_based():
    g = D.make_rng(5, stream=2)
    assert type(g.bit_generator).__name__ == "Philox"
    np.testing.assert_array_equal(g.standard_normal(4), D.make_rng(5, stream=2).standard_normal(4))
    assert not np.array_equal(D.make_rng(5, 0).standard_normal(4), D.make_rng(5, 1).standard_normal(4))


@pytest.fixture(scope="module")
def burgers_small():
    return D.solve_burgers(D.burgers_shock_ic, 0.5, 0.01, nx=256, nt=256)


def test_burgers_dirichlet(burgers_small):
    assert np.abs(burgers_small.u[:, [0, -1]]).max() <= 1e-10
    ds = D.gen_burgers({"solver_nx": 128, "solver_nt": 128, "new_ic": None, "n_test": 20}, 0)
    obs = ds.observations[0]
    edge = np.isclose(obs.points[:, 1], 0.0) | np.isclose(obs.points[:, 1], 1.0)
    assert np.abs(obs.values[edge]).max() <= 1e-10
    assert len(obs) == 100


def test_burgers_refinement_is_second_order():
    probe = np.array([[0.3, 0.4], [0.7, 0.6], [1.0, 0.5], [0.5, 0.2], [0.9, 0.8]])
    vals = [D.solve_burgers(D.burgers_shock_ic, 0.5, 0.01, nx=n, nt=n)(probe) for n in (256, 512, 1024)]
    d1 = np.abs(vals[0] - vals[1]).max()
    d2 = np.abs(vals[1] - vals[2]).max()
    # successive changes shrink by about 2^2
    assert 3.0 <= d1 / d2 <= 5.0


def test_burgers_zero_advection_is_heat_equation():
    nu = 0.01
    s = D.solve_burgers(lambda x: np.sin(np.pi * x), theta=0.0, nu=nu, nx=256, nt=256)
    T, X = np.meshgrid(s.t, s.x, indexing="ij")
    assert np.abs(s.u - np.sin(np.pi * X) * np.exp(-nu * np.pi**2 * T)).max() <= 1e-4


def test_burgers_rejects_nonpositive_viscosity():
    with pytest.raises(ValueError):
        D.solve_burgers(D.burgers_shock_ic, nu=0.0)


def test_darcy_coefficient_value():
    assert D.darcy_coefficient([[0.0, 0.0]])[0] == pytest.approx(math.exp(math.sin(2.0)), rel=1e-14)
    assert D.darcy_coefficient([[0.0, 0.0]])[0] == pytest.approx(2.48258, abs=1e-5)


def test_darcy_rhs_matches_finite_differences():
    fn = D.draw_darcy_function(D.make_rng(1))
    X = D.make_rng(2).uniform(0.1, 0.9, size=(20, 2))
    h = 1e-4

    def flux(P, j):
        op = (1, 0) if j == 0 else (0, 1)
        return D.darcy_coefficient(P) * fn.model.evaluate(P, op)

    div = 0.0
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        div = div + (flux(X + e, j) - flux(X - e, j)) / (2 * h)
    f = fn.rhs(X)
    assert np.linalg.norm(f - div) <= 1e-4 * np.linalg.norm(f)


def test_darcy_zero_draw_has_zero_rhs():
    fn = D.DarcyFunction(SolutionModel(D.RBF((0.5, 0.5)), D.uniform_grid(5), np.zeros(25)))
    np.testing.assert_array_equal(fn.rhs(D.uniform_grid(7)), 0.0)


def test_darcy_dataset_layout():
    ds = D.gen_darcy({"M": 2, "n_id": 1, "n_ood": 1, "n_test_grid": 10}, 0)
    assert len(ds.Y) == 225
    assert all(o.n_boundary == 56 and len(o) == 58 for o in ds.observations)
    assert ds.truth["OOD_features"].shape == (1, 100, 8)


def test_dataset_io_roundtrip(tmp_path):
    ds = D.gen_darcy({"M": 2, "n_id": 1, "n_ood": 1, "n_test_grid": 10}, 0)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.experiment == "darcy" and back.seed == 0
    np.testing.assert_array_equal(back.Y, ds.Y)
    for a, b in zip(back.observations, ds.observations):
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_allclose(a.rhs_on(ds.Y), b.rhs_on(ds.Y), rtol=1e-14)
    np.testing.assert_array_equal(back.truth["ID_f"], ds.truth["ID_f"])


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def test_metric_examples():
    u = np.array([1.0, -2.0, 3.0])
    assert r_filter([u], [u]) == 0.0
    assert r_eql([u], [2 * u]) == 1.0
    assert r_opl([u, u], [u, 2 * u]) == 0.5
    assert math.isnan(relative_sq_error(np.zeros(3), u))
    with pytest.raises(ValueError):
        r_filter([], [])
    with pytest.raises(ValueError):
        relative_sq_error(u, u[:2])


@given(st.integers(0, 10_000), st.floats(1e-6, 1e6), st.booleans())
@settings(max_examples=50, deadline=None)
def test_metric_scale_invariance(seed, c, neg):
    rng = np.random.default_rng(seed)
    c = -c if neg else c
    t = [rng.normal(size=20) for _ in range(3)]
    e = [x + 0.1 * rng.normal(size=20) for x in t]
    for metric in (r_filter, r_eql, r_opl):
        a = metric(t, e)
        b = metric([c * x for x in t], [c * x for x in e])
        assert b == pytest.approx(a, rel=1e-12)


def test_two_step_filter_improves_with_more_observations():
    errs = []
    for n in (16, 32, 64, 128):
        ds = D.gen_duffing({"n_obs": n}, 0)
        su, _ = nugget_weights(n, 1, 500, 5e-8, 1e-9)
        m = fit_interpolant(ds.observations[0], RationalQuadratic((1.0,)), 2 * su)
        errs.append(r_filter([ds.truth["u_test"]], [m.evaluate(ds.test_points)]))
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs


# --------------------------------------------------------------------------
# configs, runs and the CLI
# --------------------------------------------------------------------------

SMOKE = {
    "experiment": "duffing",
    "n_collocation": 200,
    "n_obs": 16,
    "n_test": 400,
    "n_inducing": 40,
    "max_iters": 15,
    "windows": [3.0],
    "test_ics": [[0.0, 1.0]],
    "forecast_iters": 30,
    "seeds": [0],
}


def test_validate_config_errors():
    with pytest.raises(E.ConfigError, match="experiment"):
        E.validate_config({"seed": 1})
    with pytest.raises(E.ConfigError, match="mode"):
        E.validate_config({"experiment": "duffing", "mode": "three_step"})
    with pytest.raises(E.ConfigError, match="theta_u"):
        E.validate_config({"experiment": "darcy", "theta_u": -1})
    with pytest.raises(E.ConfigError, match="n_interior"):
        E.validate_config({"experiment": "darcy", "n_interior": 500})
    cfg = E.validate_config({"experiment": "burgers", "seed": 3})
    assert cfg["seeds"] == [3] and cfg["n_boundary"] == 100


def test_cli_missing_field_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1}))
    assert cli.main(["run", str(p)]) == cli.EXIT_CONFIG
    assert "'experiment'" in capsys.readouterr().err
    p.write_text("{not json")
    assert cli.main(["run", str(p)]) == cli.EXIT_CONFIG


def test_cli_solver_failure_exit_code(tmp_path, monkeypatch, capsys):
    def broken(cfg, seed):
        raise np.linalg.LinAlgError("singular matrix")

    monkeypatch.setitem(E.RUNNERS, "duffing", broken)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SMOKE))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == cli.EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    p = base / "c.json"
    p.write_text(json.dumps(SMOKE))
    outs = []
    for k in ("a", "b"):
        assert cli.main(["run", str(p), "--out", str(base / k), "--no-timing"]) == cli.EXIT_OK
        outs.append(base / k)
    return outs


def test_smoke_run_writes_all_file_groups(smoke_run):
    out = smoke_run[0]
    assert (out / "errors.csv").exists() and (out / "history.csv").exists()
    assert sorted(p.name for p in (out / "models").iterdir()) == ["duffing_seed0_1step.json", "duffing_seed0_2step.json"]
    assert any((out / "plotdata").glob("*.csv"))
    header = (out / "errors.csv").read_text().splitlines()[0]
    assert header == ",".join(E.ERROR_COLUMNS)
    hist = (out / "history.csv").read_text().splitlines()
    assert hist[0] == "iter,objective,rho,lambda,accepted"
    run = json.loads((out / "run.json").read_text())
    assert run["monotone"] is True


def test_errors_csv_byte_identical(smoke_run):
    a, b = smoke_run
    assert (a / "errors.csv").read_bytes() == (b / "errors.csv").read_bytes()


def test_error_rows_finite_nonnegative(smoke_run):
    with open(smoke_run[0] / "errors.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    vals = [float(r["value"]) for r in rows]
    assert vals and all(np.isfinite(v) and v >= 0 for v in vals)
    metrics = {(r["method"], r["metric"]) for r in rows}
    assert ("1step", "filter") in metrics and ("2step", "opl") in metrics


def test_cli_gen_and_errors(smoke_run, tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({k: SMOKE[k] for k in ("n_collocation", "n_obs", "n_test", "windows", "test_ics")}))
    ds_dir = tmp_path / "ds"
    assert cli.main(["gen", "duffing", "--seed", "0", "--out", str(ds_dir), "--config", str(cfg)]) == cli.EXIT_OK
    capsys.readouterr()
    model = smoke_run[0] / "models" / "duffing_seed0_2step.json"
    assert cli.main(["errors", str(model), str(ds_dir)]) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "metric,split,value"
    errors = (smoke_run[0] / "errors.csv").read_text()
    value = float(lines[1].split(",")[2])
    assert any(line.startswith("duffing,2step,0,filter,train,") and float(line.split(",")[5]) == pytest.approx(value, rel=1e-12)
               for line in errors.splitlines())


def test_cli_errors_missing_dataset(smoke_run, tmp_path):
    model = smoke_run[0] / "models" / "duffing_seed0_2step.json"
    assert cli.main(["errors", str(model), str(tmp_path)]) == cli.EXIT_CONFIG


def test_cli_solve(smoke_run, tmp_path):
    model = smoke_run[0] / "models" / "duffing_seed0_1step.json"
    t = np.linspace(0, 1, 11)
    spec = {
        "Y": t[:, None].tolist(),
        "rhs": np.cos(2 * t).tolist(),
        "kernel": {"family": "rq", "lengthscales": [1.0]},
        "constraints": [{"points": [[0.0]], "values": [0.0], "op": [0]}, {"points": [[0.0]], "values": [0.5], "op": [1]}],
        "max_iters": 50,
    }
    sp = tmp_path / "spec.json"
    sp.write_text(json.dumps(spec))
    out = tmp_path / "sol.json"
    assert cli.main(["solve", str(model), str(sp), "--out", str(out)]) == cli.EXIT_OK
    doc = json.loads(out.read_text())
    sol = SolutionModel.from_dict(doc["model"])
    assert sol.evaluate([[0.0]])[0] == pytest.approx(0.0, abs=1e-3)
    assert np.isfinite(doc["residual"])
    del spec["kernel"]
    sp.write_text(json.dumps(spec))
    assert cli.main(["solve", str(model), str(sp)]) == cli.EXIT_CONFIG
