import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proplab import exprconfig as ec
from proplab import geometry as geo
from proplab import symbols as sy
from proplab.errors import IdentityInapplicable, NonNullPoint, NotElliptic, NotNormallyHyperbolic


def _frw_conn():
    conn = sy.BundleConnection.from_exprs(
        [[["0.3*x1", ["0.1", "0.2*x0"]], [["0.1", "-0.2*x0"], "sin(x0)"]],
         [["x0*x1", ["0", "0.5"]], [["0", "-0.5"], "cos(x1)"]]], 2)
    pot = sy.Potential.from_exprs([["1+x0^2", ["0.1", "0"]], [["0.1", "0"], "2"]], 2)
    return conn, pot


def _null_points(chart, rng, count, shrink=0.8):
    x = chart.sample_points(count, rng) * shrink
    xi = geo.random_null_covectors(chart, x, rng)
    return [geo.PhasePoint(a, b) for a, b in zip(x, xi)]


def _xi1(dim=2):
    """Symbol xi_1 times the identity (first-order, no subleading part)."""
    return sy.polynomial_symbol(1, [[((0, 1), [["1", "0"], ["0", "1"]])], []], dim, 2)


class TestTotalSymbol:
    def test_flat_wave(self):
        T = sy.total_symbol_halfdensity(sy.flat_wave_operator(2))
        xi = np.array([0.7, -1.3])
        assert T.component(0, [0.1, 0.2], xi)[0, 0] == pytest.approx(-0.49 + 1.69)
        assert T.component(1, [0.1, 0.2], xi)[0, 0] == 0
        assert T.component(2, [0.1, 0.2], xi)[0, 0] == 0

    def test_first_order_drift(self):
        # -d_x^2 + x d_x: p2 = xi^2, p1 = i x xi
        op = sy.SecondOrderOperator.from_exprs([["1"]], [[["x0"]]], dim=1)
        T = sy.total_symbol_halfdensity(op)
        assert T.component(0, [0.7], [1.3])[0, 0] == pytest.approx(1.69)
        assert T.component(1, [0.7], [1.3])[0, 0] == pytest.approx(0.91j)

    def test_frw_halfdensity_correction(self):
        # a = exp(t): box u = u_tt + u_t - exp(-2t) u_xx.  Conjugating by |g|^{1/4} = exp(t/2)
        # removes the first-order term and leaves -1/4 (hand computation).
        chart = geo.frw()
        op = sy.weitzenbock_assemble(chart, sy.BundleConnection.trivial(2))
        x = np.array([0.3, -0.4])
        A, B, C = op.coefficients(x)
        np.testing.assert_allclose(B[:, 0, 0], [1.0, 0.0], atol=1e-14)
        T = sy.total_symbol_halfdensity(op, chart)
        xi = np.array([0.5, 2.0])
        assert abs(T.component(1, x, xi)[0, 0]) <= 1e-14
        assert T.component(2, x, xi)[0, 0] == pytest.approx(-0.25, abs=1e-14)
        assert T.component(0, x, xi)[0, 0] == pytest.approx(-0.25 + np.exp(-0.6) * 4.0)


class TestSubprincipal:
    def test_flat_trivial(self):
        sub = sy.subprincipal(sy.flat_wave_operator(2, 2))
        assert np.all(sub.component(0, [0.3, 0.1], [1.0, 2.0]) == 0)

    def test_drift(self):
        op = sy.SecondOrderOperator.from_exprs([["1"]], [[["x0"]]], dim=1)
        assert sy.subprincipal(op).component(0, [0.7], [1.3])[0, 0] == pytest.approx(0.91j)

    def test_weitzenbock_formula(self, rng):
        # with nabla = d + i Gamma: sigma_sub = 2 g^{mu nu} xi_mu Gamma_nu
        chart = geo.frw()
        conn, pot = _frw_conn()
        sub = sy.subprincipal(sy.weitzenbock_assemble(chart, conn, pot), chart)
        for _ in range(10):
            x = chart.sample_points(1, rng)[0] * 0.8
            xi = rng.normal(size=2)
            ginv = geo.metric_data(chart, x).ginv
            ref = np.einsum("mn,m,nab->ab", 2 * ginv, xi, conn.at(x))
            np.testing.assert_allclose(sub.component(0, x, xi), ref, atol=1e-10)

    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=30)
    def test_invariant_under_constant_second_order(self, a, b, c):
        base = sy.SecondOrderOperator.from_exprs([["-1", "0"], ["0", "1+x0^2"]], [[["x1"]], [["sin(x0)"]]])
        shifted = sy.SecondOrderOperator.from_exprs([[f"-1+{a}", f"{b}"], [f"{b}", f"1+x0^2+{c}"]],
                                                    [[["x1"]], [["sin(x0)"]]])
        x, xi = np.array([0.2, -0.5]), np.array([1.1, 0.4])
        s1 = sy.subprincipal(base).component(0, x, xi)
        s2 = sy.subprincipal(shifted).component(0, x, xi)
        np.testing.assert_allclose(s1, s2, atol=1e-9)


class TestWeitzenbock:
    def test_flat_trivial_assembles_wave_operator(self):
        op = sy.weitzenbock_assemble(geo.minkowski(2), sy.BundleConnection.trivial(2))
        A, B, C = op.coefficients([0.3, 0.2])
        np.testing.assert_array_equal(A, np.diag([-1.0, 1.0]))
        assert not np.any(B) and not np.any(C)

    def test_flat_decomposes_to_zero(self):
        conn, pot = sy.weitzenbock_decompose(sy.flat_wave_operator(2), geo.minkowski(2))
        assert np.all(conn.at([0.1, 0.2]) == 0)
        assert np.all(pot.at([0.1, 0.2]) == 0)

    def test_klein_gordon_potential(self):
        # FRW with a = exp(t) in 1+1: R = 2 a''/a = 2
        m2, lam = 0.81, 0.25
        pot = sy.Potential.from_exprs([[f"{m2 + lam * 2.0}"]], 2)
        op = sy.weitzenbock_assemble(geo.frw(), sy.BundleConnection.trivial(2), pot)
        assert op.C([0.1, 0.3])[0, 0] == pytest.approx(m2 + 2 * lam)

    def test_round_trip_corpus(self):
        chart = geo.frw()
        rng = np.random.default_rng(11)
        pts = chart.sample_points(5, rng) * 0.8
        for _ in range(20):
            gam = [[[sy.random_coefficient(rng, 2, True) for _ in range(2)] for _ in range(2)] for _ in range(2)]
            V = [[sy.random_coefficient(rng, 2, True) for _ in range(2)] for _ in range(2)]
            conn = sy.BundleConnection.from_exprs(gam, 2)
            pot = sy.Potential(2, ec.ExprArray(V, 2, ndim=2).value)
            c2, p2 = sy.weitzenbock_decompose(sy.weitzenbock_assemble(chart, conn, pot), chart)
            for x in pts:
                np.testing.assert_allclose(c2.at(x), conn.at(x), atol=1e-10)
                np.testing.assert_allclose(p2.at(x), pot.at(x), atol=1e-10)

    def test_connection_laplacian_inducing_connection(self):
        chart = geo.minkowski(2)
        conn, _ = _frw_conn()
        c2, p2 = sy.weitzenbock_decompose(sy.weitzenbock_assemble(chart, conn), chart)
        x = np.array([0.4, -0.3])
        np.testing.assert_allclose(c2.at(x), conn.at(x), atol=1e-12)
        np.testing.assert_allclose(p2.at(x), 0, atol=1e-12)

    def test_not_normally_hyperbolic(self):
        op = sy.SecondOrderOperator.from_exprs([["-2", "0"], ["0", "1"]])
        with pytest.raises(NotNormallyHyperbolic):
            sy.weitzenbock_decompose(op, geo.minkowski(2))


class TestCompose:
    def test_d1_squared(self):
        D = _xi1()
        C = sy.compose_first_order(D, D)
        x, xi = np.array([0.3, 0.1]), np.array([0.5, 1.7])
        np.testing.assert_allclose(C.component(0, x, xi), 1.7 ** 2 * np.eye(2))
        assert not np.any(C.component(1, x, xi))

    def test_scalar_cross_term(self):
        # p = xi^2, q = x xi: subleading (1/i) 2 xi * xi = -2 i xi^2
        p = sy.polynomial_symbol(2, [[((2,), [["1"]])], []], 1)
        q = sy.polynomial_symbol(1, [[((1,), [["x0"]])], []], 1)
        c = sy.compose_first_order(p, q)
        assert c.component(1, [0.4], [1.5])[0, 0] == pytest.approx(-2j * 1.5 ** 2)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_on_plane_waves(self, seed):
        rng = np.random.default_rng(seed)
        P, pdata = _random_poly(rng)
        Q, qdata = _random_poly(rng)
        C = sy.compose_first_order(P, Q)
        for _ in range(3):
            x = rng.uniform(-1, 1, 2)
            xi = rng.normal(size=2)
            ref = _brute_force_degree3(pdata, qdata, x, xi)
            np.testing.assert_allclose(C.component(1, x, xi), ref, atol=1e-8)


def _random_poly(rng):
    """Random degree-2 polynomial symbol plus its raw data ``[(alpha, ExprArray)]`` per component."""
    data = []
    comps = []
    for k in range(2):
        terms = []
        raw = []
        for alpha in sy._multi_indices(2, 2 - k):
            mat = [[sy.random_coefficient(rng, 2, complex_valued=True) for _ in range(2)] for _ in range(2)]
            terms.append((alpha, mat))
            raw.append((np.array(alpha), ec.ExprArray(mat, 2, ndim=2)))
        comps.append(terms)
        data.append(raw)
    return sy.polynomial_symbol(2, comps, 2, 2), data


def _brute_force_degree3(pdata, qdata, x, xi):
    """Degree-3 part of exp(-i x.xi) Op(p) Op(q) exp(i x.xi), Op(xi_j) = -i d_j.

    Op(q) e = q(x, xi) e exactly; then Op(p) acts on q e by Leibniz,
    (-i d)^alpha (q e) = e sum_{beta <= alpha} C(alpha, beta) xi^{alpha-beta} (-i d)^beta q.
    The full result is a polynomial in lam for xi -> lam xi; its lam^3 coefficient is
    extracted exactly from five samples.
    """
    def q_derivs(xi_):
        val = sum(np.prod(xi_ ** a) * arr.value(x) for comp in qdata for a, arr in comp)
        grad = sum(np.prod(xi_ ** a) * arr.grad(x) for comp in qdata for a, arr in comp)
        hess = sum(np.prod(xi_ ** a) * arr.hess(x) for comp in qdata for a, arr in comp)
        return val, grad, hess

    def full(lam):
        xi_ = lam * xi
        q, dq, d2q = q_derivs(xi_)
        out = 0
        for comp in pdata:
            for a, arr in comp:
                pa = arr.value(x)
                acc = 0
                for b0 in range(a[0] + 1):
                    for b1 in range(a[1] + 1):
                        coef = _binom(a[0], b0) * _binom(a[1], b1) * xi_[0] ** (a[0] - b0) * xi_[1] ** (a[1] - b1)
                        order = b0 + b1
                        if order == 0:
                            term = q
                        elif order == 1:
                            term = dq[0] if b0 else dq[1]
                        else:
                            term = d2q[0, 0] if b0 == 2 else (d2q[1, 1] if b1 == 2 else d2q[0, 1])
                        acc = acc + coef * (-1j) ** order * term
                out = out + pa @ acc
        return out

    lams = np.arange(1.0, 6.0)
    vals = np.array([full(l) for l in lams])  # (5, 2, 2)
    V = np.vander(lams, 5, increasing=True)
    coeffs = np.linalg.solve(V, vals.reshape(5, -1))
    return coeffs[3].reshape(2, 2)


def _binom(n, k):
    from math import comb
    return comb(n, k)


class TestIdentities:
    def test_product_d1(self):
        D = _xi1()
        assert sy.verify_identity("product", D, D) == 0.0

    def test_power_two_drift(self):
        P = sy.polynomial_symbol(2, [[((2,), [["1"]])], [((1,), [[["0", "x0"]]])]], 1)
        assert sy.verify_identity("power", P, k=2, cloud=sy.sample_cloud(1, 50)) <= 1e-8

    def test_egorov_identity_map(self, rng):
        P = sy.random_polynomial_symbol(rng, scalar_principal=True)
        assert sy.verify_identity("egorov", P) == 0.0

    @pytest.mark.parametrize("kind", sy.IDENTITY_KINDS)
    def test_random_corpus(self, kind):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(5):
            Q = None
            kw = {}
            if kind == "product":
                P, Q = sy.random_polynomial_symbol(rng), sy.random_polynomial_symbol(rng)
            elif kind == "commutator":
                P, Q = sy.random_polynomial_symbol(rng, scalar_principal=True), sy.random_polynomial_symbol(rng)
            elif kind == "inverse":
                P = sy.random_polynomial_symbol(rng, elliptic=True)
            else:
                P = sy.random_polynomial_symbol(rng, scalar_principal=True)
            if kind == "egorov":
                kw = dict(kappa=lambda x, xi: (x + 0.1 * np.sin(x[::-1]), 1.5 * xi),
                          A=sy.random_polynomial_symbol(rng, degree=1), B=sy.random_polynomial_symbol(rng, degree=1))
            worst = max(worst, sy.verify_identity(kind, P, Q, k=3, cloud=sy.sample_cloud(2, 30, rng), **kw))
        assert worst <= 1e-6

    def test_power_requires_scalar(self, rng):
        with pytest.raises(IdentityInapplicable):
            sy.verify_identity("power", sy.random_polynomial_symbol(rng), k=2)

    def test_inverse_requires_ellipticity(self):
        with pytest.raises(IdentityInapplicable):
            sy.verify_identity("inverse", sy.total_symbol_halfdensity(sy.flat_wave_operator(2)),
                               cloud=[(np.zeros(2), np.array([1.0, 1.0]))])

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError):
            sy.verify_identity("jacobi", sy.random_polynomial_symbol(rng))


class TestCompatibility:
    @pytest.mark.parametrize("chart", [geo.minkowski(2), geo.frw()], ids=["flat", "frw"])
    def test_weitzenbock_connection(self, chart, rng):
        conn, pot = _frw_conn()
        op = sy.weitzenbock_assemble(chart, conn, pot)
        assert np.max(sy.compatibility_residual(op, conn, chart, _null_points(chart, rng, 100))) <= 1e-8

    def test_trivial_flat(self, rng):
        chart = geo.minkowski(2)
        op = sy.flat_wave_operator(2)
        res = sy.compatibility_residual(op, sy.BundleConnection.trivial(2), chart, _null_points(chart, rng, 20))
        assert np.all(res == 0)

    def test_perturbation_is_linear(self, rng):
        chart = geo.frw()
        conn, pot = _frw_conn()
        op = sy.weitzenbock_assemble(chart, conn, pot)
        pts = _null_points(chart, rng, 10)
        delta = np.array([[[1, 0], [0, 0]], [[0, 1j], [-1j, 0]]])
        for eps in (1e-2, 1e-3):
            res = sy.compatibility_residual(op, conn.perturbed(eps, lambda x: delta), chart, pts)
            for r, pt in zip(res, pts):
                xdot = 2 * geo.metric_data(chart, pt.x).ginv @ pt.xi
                ref = np.linalg.norm(eps * np.einsum("m,mab->ab", xdot, delta))
                assert r == pytest.approx(ref, rel=1e-6)

    def test_other_connection_fails(self, rng):
        chart = geo.frw()
        conn, pot = _frw_conn()
        op = sy.weitzenbock_assemble(chart, conn, pot)
        res = sy.compatibility_residual(op, sy.BundleConnection.trivial(2, 2), chart, _null_points(chart, rng, 20))
        assert np.min(res) > 1e-3

    def test_non_null_point(self):
        chart = geo.minkowski(2)
        with pytest.raises(NonNullPoint):
            sy.compatibility_residual(sy.flat_wave_operator(2), sy.BundleConnection.trivial(2), chart,
                                      [geo.PhasePoint(np.zeros(2), np.array([1.0, 0.0]))])


class TestSquareRoot:
    def test_flat(self):
        P = sy.polynomial_symbol(2, [[((2,), [["1"]])], []], 1)
        r = sy.square_root_symbols(P, lambda x, xi: np.array([[abs(xi[0])]]), cloud=sy.sample_cloud(1, 30))
        assert r.residual <= 1e-12

    def test_variable_speed_selfadjoint(self):
        # P = D a^2 D with a = 1 + 0.3 sin x: p = a^2 xi^2, p1 = -2 i a a' xi.  Adding c(x) xi
        # with real c leaves a hermitian residual which Q_1 must remove.
        a = "(1+0.3*sin(x0))"
        P = sy.polynomial_symbol(2, [[((2,), [[f"{a}^2"]])],
                                     [((1,), [[[ "0.5*cos(x0)", f"-0.6*{a}*cos(x0)"]]])]], 1)

        def q(x, xi):
            return np.array([[(1 + 0.3 * np.sin(x[0])) * abs(xi[0])]])

        cloud = sy.sample_cloud(1, 40)
        r = sy.square_root_symbols(P, q, K=1, cloud=cloud)
        assert r.residual_before > 1e-2
        assert r.residual <= 1e-8
        assert sy.square_root_symbols(P, q, K=0, cloud=cloud).residual > 1e-2

    def test_diagonal_matrix(self):
        P = sy.polynomial_symbol(2, [[((2,), [["1", "0"], ["0", "4"]])],
                                     [((1,), [["0.3", "0"], ["0", "-0.2"]])]], 1, 2)

        def q(x, xi):
            return np.diag([abs(xi[0]), 2 * abs(xi[0])]).astype(complex)

        r = sy.square_root_symbols(P, q, cloud=sy.sample_cloud(1, 30))
        assert r.residual <= 1e-8

    def test_not_elliptic(self):
        P = sy.polynomial_symbol(2, [[((2,), [["1"]])], []], 1)
        with pytest.raises(NotElliptic):
            sy.square_root_symbols(P, lambda x, xi: np.zeros((1, 1)), cloud=sy.sample_cloud(1, 5))


def test_homogeneity_of_random_symbols(rng):
    P = sy.random_polynomial_symbol(rng)
    for x, xi in sy.sample_cloud(2, 10, rng):
        assert P.homogeneity_defect(x, xi) <= 1e-12
