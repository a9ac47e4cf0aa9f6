import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keql.gram import (
    ArrowheadSystem,
    NotPositiveDefinite,
    arrowhead_dense,
    arrowhead_solve,
    chol_jitter,
    chol_solve_T,
    cross_gram,
    eigh_factor,
    gram_functionals,
    nystrom_select,
)
from keql.kernels import RBF, Matern, Polynomial, RationalQuadratic
from keql.operators import DiffFunctional, DiffOperatorSet, feature_map
from keql.twostep import ObservationSet, feature_defaults, fit_equation_2step, fit_interpolant


def _functionals(n, ops):
    return [DiffFunctional(i, op) for op in ops for i in range(n)]


def test_identity_functionals_give_kernel_matrix():
    k = RBF((0.4, 0.9))
    Y = np.random.default_rng(0).uniform(size=(6, 2))
    G = gram_functionals(k, _functionals(6, [(0, 0)]), Y)
    np.testing.assert_allclose(G, k(Y, Y), rtol=0, atol=1e-15)


def test_single_functional():
    k = RBF((0.7,))
    G = gram_functionals(k, [DiffFunctional(0, (1,))], np.array([[0.3]]))
    assert G.shape == (1, 1)
    assert G[0, 0] == pytest.approx(k.deriv([[0.3]], [[0.3]], (1,), (1,))[0, 0])


def test_gram_functionals_fd_oracle():
    k = RBF((0.8,))
    y = np.array([[0.1], [0.5], [0.9]])
    G = gram_functionals(k, _functionals(3, [(0,), (1,)]), y)
    h = 1e-4
    f = lambda a, b: k(np.array([[a]]), np.array([[b]]))[0, 0]
    for i in range(3):
        for j in range(3):
            a, b = y[i, 0], y[j, 0]
            d01 = (f(a, b + h) - f(a, b - h)) / (2 * h)
            d11 = (f(a + h, b + h) - f(a + h, b - h) - f(a - h, b + h) + f(a - h, b - h)) / (4 * h * h)
            assert G[i, 3 + j] == pytest.approx(d01, rel=1e-4, abs=1e-8)
            assert G[3 + i, 3 + j] == pytest.approx(d11, rel=1e-4, abs=1e-8)


def test_gram_functionals_symmetric_psd_random():
    rng = np.random.default_rng(11)
    ops = DiffOperatorSet(((0, 0), (1, 0), (0, 2), (1, 1)))
    for trial in range(30):
        k = [RBF((0.6, 0.9)), Matern((0.7, 0.7), nu=3.5), RationalQuadratic((1.0, 0.5))][trial % 3]
        use = ops.ops if not isinstance(k, Matern) else ops.ops[:2]
        Y = rng.uniform(size=(5, 2))
        G = gram_functionals(k, _functionals(5, use), Y)
        np.testing.assert_allclose(G, G.T, atol=1e-10)
        assert np.linalg.eigvalsh(G).min() >= -1e-8 * np.trace(G)


def test_cross_gram_submatrix_and_empty():
    k = RBF((0.5,))
    Y = np.linspace(0, 1, 7)[:, None]
    funcs = _functionals(7, [(0,)])
    G = gram_functionals(k, funcs, Y)
    C = cross_gram(k, funcs, Y, Y[[1, 4]])
    np.testing.assert_allclose(C, G[:, [1, 4]], atol=1e-15)
    assert cross_gram(k, funcs, Y, np.zeros((0, 1))).shape == (7, 0)


def test_cross_gram_direct_evaluation():
    k = RBF((0.5, 0.3))
    rng = np.random.default_rng(4)
    Y, P = rng.uniform(size=(4, 2)), rng.uniform(size=(3, 2))
    funcs = [DiffFunctional(2, (1, 0)), DiffFunctional(0, (0, 0)), DiffFunctional(1, (0, 2))]
    C = cross_gram(k, funcs, Y, P, op=(0, 1))
    for r, phi in enumerate(funcs):
        for c in range(3):
            assert C[r, c] == k.deriv(Y[phi.index][None], P[c][None], phi.op, (0, 1))[0, 0]


def test_chol_identity():
    L, j = chol_jitter(np.eye(4), base_jitter=0.0)
    np.testing.assert_array_equal(L, np.eye(4))
    assert j == 0.0


def test_chol_escalates_on_near_singular():
    A = np.diag([1.0, 1e-20])
    A[0, 1] = A[1, 0] = 1e-10
    L, j = chol_jitter(A, base_jitter=0.0)
    assert j > 0
    assert np.linalg.norm(L @ L.T - A) <= j * np.sqrt(2) + 1e-15


def test_chol_indefinite_raises():
    A = np.diag([1.0, -1.0])
    with pytest.raises(NotPositiveDefinite):
        chol_jitter(A, base_jitter=1e-12, max_tries=3)


@given(st.integers(2, 20), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_chol_reconstruction(n, seed):
    X = np.random.default_rng(seed).normal(size=(n, 1))
    A = RBF((0.5,))(X, X)
    L, j = chol_jitter(A)
    assert np.linalg.norm(L @ L.T - (A + j * np.eye(n))) <= 1e-8 * np.linalg.norm(A)


def test_chol_solve_T():
    rng = np.random.default_rng(0)
    L = np.tril(rng.normal(size=(5, 5))) + 5 * np.eye(5)
    M = rng.normal(size=(3, 5))
    np.testing.assert_allclose(chol_solve_T(L, M) @ L.T, M, atol=1e-12)


def test_eigh_factor_rank_deficient():
    X = np.random.default_rng(0).normal(size=(30, 2))
    A = Polynomial(1, (0.0, 0.0), (1.0, 1.0))(X, X)
    C = eigh_factor(A)
    assert C.shape == (30, 3)
    np.testing.assert_allclose(C @ C.T, A, atol=1e-10 * np.abs(A).max())


def _random_system(rng, M, n_p, sizes):
    blocks = []
    for n in sizes:
        X = rng.normal(size=(n + n_p + 2, n + n_p))
        blocks.append(X.T @ X + 0.1 * np.eye(n + n_p))
    # assemble a global SPD matrix with arrowhead sparsity
    A_P = np.eye(n_p) * 0.5
    B, D = [], []
    for n, G in zip(sizes, blocks):
        A_P += G[:n_p, :n_p]
        B.append(G[n_p:, :n_p])
        D.append(G[n_p:, n_p:])
    return ArrowheadSystem(A_P, B, D, rng.normal(size=n_p), [rng.normal(size=n) for n in sizes])


def test_arrowhead_matches_dense_on_50_systems():
    rng = np.random.default_rng(0)
    for _ in range(50):
        M = int(rng.integers(1, 6))
        n_p = int(rng.integers(1, 13))
        sizes = [int(s) for s in rng.integers(1, 13, size=M)]
        sys = _random_system(rng, M, n_p, sizes)
        A, rhs = arrowhead_dense(sys)
        x_dense = np.linalg.solve(A, rhs)
        for solver in ("cholesky", "svd"):
            x = arrowhead_solve(sys, solver)
            assert np.linalg.norm(x - x_dense) <= 1e-8 * np.linalg.norm(x_dense)


def test_arrowhead_decoupled_and_zero_rhs():
    rng = np.random.default_rng(1)
    sys = _random_system(rng, 3, 2, [4, 4, 4])
    sys.B_UP = [np.zeros_like(b) for b in sys.B_UP]
    x = arrowhead_solve(sys)
    np.testing.assert_allclose(x[:2], np.linalg.solve(sys.A_P, sys.F_P), rtol=1e-12)
    for m in range(3):
        np.testing.assert_allclose(x[2 + 4 * m : 6 + 4 * m], np.linalg.solve(sys.D_U[m], sys.F_U[m]), rtol=1e-10)
    sys.F_P[:] = 0
    sys.F_U = [np.zeros(4)] * 3
    np.testing.assert_array_equal(arrowhead_solve(sys), np.zeros(14))


def test_arrowhead_singular_schur_uses_svd():
    sys = ArrowheadSystem(np.ones((2, 2)), [np.zeros((1, 2))], [np.eye(1)], np.array([1.0, 1.0]), [np.ones(1)])
    x = arrowhead_solve(sys)
    np.testing.assert_allclose(x[:2], [0.5, 0.5], atol=1e-12)
    assert sys.info["schur"] == "svd"


def test_nystrom_full_set_and_determinism():
    C = np.random.default_rng(0).normal(size=(30, 3))
    np.testing.assert_array_equal(nystrom_select(C, 30, seed=5), C)
    a, b = nystrom_select(C, 10, seed=3), nystrom_select(C, 10, seed=3)
    np.testing.assert_array_equal(a, b)
    assert len({tuple(r) for r in a}) == 10
    with pytest.raises(ValueError):
        nystrom_select(C, 31)


def test_nystrom_golden_selection():
    # 8 functions x 225 grid points, as in the Darcy setup
    C = np.arange(8 * 225, dtype=float)[:, None]
    sel = nystrom_select(C, 200, seed=0)[:, 0].astype(int)
    assert len(sel) == 200 and np.all(np.diff(sel) > 0)
    np.testing.assert_array_equal(sel[:10], GOLDEN_FIRST10)


# recorded from the first run; guards against silent RNG changes
GOLDEN_FIRST10 = [5, 7, 19, 20, 22, 38, 48, 58, 63, 64]


def test_nystrom_exact_for_quadratic_kernel():
    ops = DiffOperatorSet(((0,), (1,)))
    t = np.linspace(0, 3, 25)[:, None]
    fns = [lambda x: np.sin(2 * x) * np.exp(0.3 * x), lambda x: np.cos(1.3 * x) + 0.2 * x**2, lambda x: x * np.exp(-x)]
    models = [fit_interpolant(ObservationSet(t, f(t[:, 0])), RBF((0.8,))) for f in fns]
    Y = np.linspace(0.05, 2.95, 30)[:, None]
    S = np.vstack([feature_map(m, Y, ops) for m in models])
    c, B = feature_defaults(S)
    kp = Polynomial(2, tuple(c), tuple(B))

    def truth(S):
        return 0.3 * S[:, 0] * S[:, 1] - S[:, 1] ** 2 + 0.5 * S[:, 2] + 1.0

    rhs = [truth(feature_map(m, Y, ops)) for m in models]
    full = fit_equation_2step(models, Y, rhs, kp, 0.0, None, ops)
    rng = np.random.default_rng(0)
    test = S[rng.choice(len(S), 100)] + 0.05 * rng.normal(size=(100, 3))
    # the quadratic feature space in three variables has dimension 10
    for count in (10, 12, 20):
        reduced = fit_equation_2step(models, Y, rhs, kp, 0.0, None, ops, inducing=nystrom_select(S, count, seed=0))
        a, b = full(test), reduced(test)
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)
