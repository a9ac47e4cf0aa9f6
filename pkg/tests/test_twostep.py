import warnings

import numpy as np
import pytest

from keql.bench.datasets import BURGERS_KNOWN, BURGERS_OPS, DARCY_OPS, DUFFING_KNOWN, DUFFING_OPS
from keql.kernels import RBF, HybridProduct, Polynomial, RationalQuadratic
from keql.operators import DiffOperatorSet, KnownPart, feature_map, known_part_values
from keql.twostep import (
    EquationModel,
    ObservationSet,
    TwoStepResult,
    feature_defaults,
    fit_2step,
    fit_equation_2step,
    fit_interpolant,
    hybrid_defaults,
    merge_points,
)


def test_single_point_interpolation():
    m = fit_interpolant(ObservationSet([[0.4]], [3.0]), RBF((1.0,)))
    assert m.evaluate([[0.4]])[0] == pytest.approx(3.0, abs=1e-8)


def test_constant_data_interpolated():
    Y = np.linspace(0, 1, 5)[:, None]
    m = fit_interpolant(ObservationSet(Y, np.full(5, -1.25)), RBF((0.3,)))
    np.testing.assert_allclose(m.evaluate(Y), -1.25, atol=1e-8)


def test_interpolation_exact_with_zero_nugget():
    Y = np.random.default_rng(0).uniform(size=(12, 2))
    u = np.sin(3 * Y[:, 0]) + Y[:, 1]
    m = fit_interpolant(ObservationSet(Y, u), RBF((0.4, 0.4)))
    np.testing.assert_allclose(m.evaluate(Y), u, atol=1e-8)


@pytest.mark.xfail(strict=True, reason="max error 0.29 at unit lengthscale; endpoint error dominates (see ledger)")
def test_sine_on_long_window_rq():
    t = np.linspace(0, 50, 32)[:, None]
    m = fit_interpolant(ObservationSet(t, np.sin(t[:, 0])), RationalQuadratic((1.0,)))
    tt = np.linspace(0, 50, 5000)[:, None]
    assert np.abs(m.evaluate(tt) - np.sin(tt[:, 0])).max() <= 1e-2


def test_residual_monotone_in_nugget():
    Y = np.linspace(0, 1, 20)[:, None]
    u = np.cos(4 * Y[:, 0]) + 0.1 * np.random.default_rng(0).normal(size=20)
    obs = ObservationSet(Y, u)
    res = []
    for s in [0.0] + [10.0**e for e in range(-10, -1)]:
        m = fit_interpolant(obs, RBF((0.2,)), s)
        res.append(np.linalg.norm(m.evaluate(Y) - u))
    assert all(b >= a - 1e-10 for a, b in zip(res, res[1:]))


def test_rkhs_norm_identity():
    Y = np.linspace(0, 1, 10)[:, None]
    u = np.sin(5 * Y[:, 0])
    k = RBF((0.3,))
    s2 = 1e-3
    m = fit_interpolant(ObservationSet(Y, u), k, s2)
    K = k(Y, Y)
    Ai = np.linalg.inv(K + s2 * np.eye(10))
    assert m.rkhs_norm2() == pytest.approx(u @ Ai @ K @ Ai @ u, rel=1e-8)


def test_unknown_part_zero_gives_zero_beta():
    t = np.linspace(0, 2, 15)[:, None]
    m = fit_interpolant(ObservationSet(t, np.sin(t[:, 0])), RBF((0.5,)))
    Y = np.linspace(0.1, 1.9, 10)[:, None]
    f = known_part_values(DUFFING_KNOWN, m, Y)
    eq = fit_equation_2step([m], Y, [f], RBF((1.0, 1.0, 1.0)), 0.0, DUFFING_KNOWN, DUFFING_OPS)
    np.testing.assert_allclose(eq.beta, 0.0, atol=1e-12)


def test_no_functions_is_an_error():
    with pytest.raises(ValueError):
        fit_equation_2step([], np.zeros((3, 1)), [], RBF((1.0,)), 0.0, None, DiffOperatorSet(((0,),)))
    with pytest.raises(ValueError):
        fit_2step([], np.zeros((3, 1)), RBF((1.0,)), RBF((1.0,)), DiffOperatorSet(((0,),)), 0.0, 0.0)


def test_rhs_length_mismatch():
    m = fit_interpolant(ObservationSet([[0.1], [0.5]], [1.0, 2.0]), RBF((1.0,)))
    with pytest.raises(ValueError):
        fit_equation_2step([m], np.zeros((3, 1)), [np.zeros(2)], RBF((1.0, 1.0)), 0.0, None, DiffOperatorSet(((0,),)))


def _models(ops, fns, n=12):
    d = ops.dim
    g = np.linspace(0, 1, n)
    if d == 1:
        Y = g[:, None]
    else:
        Y = np.array([[a, b] for a in g for b in g])
    return [fit_interpolant(ObservationSet(Y, f(Y)), RBF((0.35,) * d)) for f in fns], Y


CASES = {
    "duffing": (DUFFING_OPS, [lambda Y: np.sin(3 * Y[:, 0]), lambda Y: Y[:, 0] ** 2 - Y[:, 0]]),
    "burgers": (BURGERS_OPS, [lambda Y: np.sin(np.pi * Y[:, 1]) * np.exp(-Y[:, 0])]),
    "darcy": (DARCY_OPS, [lambda Y: np.sin(2 * Y[:, 0]) * np.cos(Y[:, 1]), lambda Y: Y[:, 0] * Y[:, 1]]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_in_span_recovery(name):
    ops, fns = CASES[name]
    models, grid = _models(ops, fns)
    Y = grid[::3]
    d = ops.dim
    clouds = [feature_map(m, Y, ops) for m in models]
    S = np.vstack(clouds)
    c, B = feature_defaults(S[:, d:])
    kp = HybridProduct(None, Polynomial(2, tuple(c), tuple(B)), spatial_dim=d)
    # the unknown part is the square of the u coordinate
    rhs = [cl[:, d] ** 2 for cl in clouds]
    eq = fit_equation_2step(models, Y, rhs, kp, 0.0, None, ops)
    pts = S[np.random.default_rng(0).choice(len(S), 50)]
    np.testing.assert_allclose(eq(pts), pts[:, d] ** 2, rtol=1e-6, atol=1e-6 * np.abs(pts[:, d] ** 2).max())


def test_feature_defaults_examples():
    with pytest.warns(RuntimeWarning):
        c, B = feature_defaults(np.array([[0.0, 2.0], [0.0, 4.0]]))
    np.testing.assert_allclose(c, [0.0, 3.0])
    np.testing.assert_allclose(B, [1.0, 0.5])
    with pytest.warns(RuntimeWarning):
        c, B = feature_defaults(np.array([[1.0, -2.0]] * 4))
    np.testing.assert_allclose(c, [1.0, -2.0])
    np.testing.assert_array_equal(B, [1.0, 1.0])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        c, B = feature_defaults(np.array([[1.0, 0.0], [3.0, 0.0], [5.0, 3.0]]))
    np.testing.assert_allclose(B, [1 / 4.0, 1 / 3.0])
    with pytest.raises(ValueError):
        feature_defaults(np.array([[1.0, 2.0]]))


def test_hybrid_defaults_uses_state_coordinates():
    ops = DiffOperatorSet(((0,), (1,)))
    models, Y = _models(ops, [lambda Y: 2 * Y[:, 0]])
    c, B = hybrid_defaults(models, Y, ops)
    assert c.shape == (2,)
    assert c[1] == pytest.approx(2.0, abs=1e-3)


def test_merge_points():
    Y = np.array([[0.0], [0.5], [1.0]])
    Y2, idx = merge_points(Y, np.array([[0.5], [0.25]]))
    np.testing.assert_array_equal(Y2[:, 0], [0.0, 0.5, 1.0, 0.25])
    np.testing.assert_array_equal(idx, [1, 3])


def test_fit_2step_with_inducing_and_roundtrip():
    ops = DUFFING_OPS
    t = np.linspace(0, 3, 12)[:, None]
    obs = ObservationSet(t, np.sin(t[:, 0]), rhs=lambda P: np.cos(P[:, 0]))
    Y = np.linspace(0, 3, 30)[:, None]
    res = fit_2step([obs], Y, RBF((0.7,)), RBF((1.0, 1.0, 1.0)), ops, 1e-8, 1e-6, DUFFING_KNOWN, n_inducing=10, seed=1)
    assert len(res.equation.beta) == 10
    back = TwoStepResult.from_dict(res.to_dict())
    S = feature_map(res.models[0], Y, ops)
    np.testing.assert_array_equal(back.equation(S), res.equation(S))
    np.testing.assert_array_equal(back.models[0].evaluate(Y), res.models[0].evaluate(Y))


def test_equation_gradient_fd():
    rng = np.random.default_rng(3)
    eq = EquationModel(RBF((0.8, 1.2, 0.9)), rng.normal(size=(7, 3)), rng.normal(size=7), KnownPart(), DUFFING_OPS)
    S = rng.normal(size=(5, 3))
    G = eq.gradient(S, [1, 2])
    h = 1e-6
    for j, c in enumerate([1, 2]):
        e = np.zeros(3)
        e[c] = h
        np.testing.assert_allclose(G[:, j], (eq(S + e) - eq(S - e)) / (2 * h), rtol=1e-6, atol=1e-9)


def test_burgers_known_part_is_dt():
    assert BURGERS_KNOWN.terms == ((1.0, (1, 0)),)
