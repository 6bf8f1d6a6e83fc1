import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proplab import geometry as geo
from proplab.errors import ChartExit, NonNullPoint, OutOfChart, SignatureError, SingularMetric


@pytest.fixture(scope="module")
def frw():
    return geo.frw()


@pytest.fixture(scope="module")
def mink():
    return geo.minkowski(2)


def _p_fd(chart, x, xi, h=1e-6):
    """Central differences of p(x, xi) = g^{-1}(xi, xi) in both slots."""
    n = len(x)
    dx = np.zeros(n)
    dxi = np.zeros(n)
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        dx[a] = (geo.principal(chart, x + e, xi) - geo.principal(chart, x - e, xi)) / (2 * h)
        dxi[a] = (geo.principal(chart, x, xi + e) - geo.principal(chart, x, xi - e)) / (2 * h)
    return dx, dxi


class TestMetricData:
    def test_minkowski(self, mink):
        md = geo.metric_data(mink, [0.3, -1.0])
        np.testing.assert_array_equal(md.ginv, np.diag([-1.0, 1.0]))
        assert not np.any(md.dginv) and not np.any(md.christoffel)

    def test_frw_inverse(self, frw):
        x = np.array([0.4, 1.0])
        md = geo.metric_data(frw, x)
        np.testing.assert_allclose(md.ginv, np.diag([-1.0, np.exp(-2 * 0.4)]), rtol=1e-14)

    def test_perturbed_minkowski_inverse(self, rng):
        for _ in range(10):
            a, b, c = rng.uniform(-0.1, 0.1, 3)
            chart = geo.MetricChart([[f"-1+{a}*x1", f"{b}"], [f"{b}", f"1+{c}*x0"]], box=[(-1, 1), (-1, 1)])
            x = rng.uniform(-1, 1, 2)
            md = geo.metric_data(chart, x)
            np.testing.assert_allclose(md.g @ md.ginv, np.eye(2), atol=1e-12)

    def test_christoffel_frw(self, frw):
        # a = exp(t): Gamma^t_xx = a a' = exp(2t), Gamma^x_tx = a'/a = 1
        x = np.array([0.2, 0.0])
        G = geo.metric_data(frw, x).christoffel
        assert G[0, 1, 1] == pytest.approx(np.exp(0.4))
        assert G[1, 0, 1] == pytest.approx(1.0)
        assert G[1, 1, 0] == pytest.approx(1.0)

    def test_out_of_chart(self, frw):
        with pytest.raises(OutOfChart):
            geo.metric_data(frw, [3.0, 0.0])

    def test_riemannian_rejected(self):
        with pytest.raises(SignatureError):
            geo.MetricChart([["1", "0"], ["0", "1"]])

    def test_degenerate_rejected(self):
        with pytest.raises(SingularMetric):
            geo.MetricChart([["-1", "0"], ["0", "0"]])

    def test_named_charts(self):
        assert geo.named_chart("minkowski", 4).dim == 4
        assert "exp(2*x0)" in geo.named_chart("frw:a=exp(2*x0)").name
        with pytest.raises(ValueError):
            geo.named_chart("schwarzschild")


class TestHamiltonField:
    def test_minkowski(self, mink):
        # textbook sign: xdot = 2 g^{-1} xi
        xdot, xidot = geo.hamiltonian_field(mink, geo.PhasePoint(np.zeros(2), np.array([1.0, 1.0])))
        np.testing.assert_array_equal(xdot, [-2.0, 2.0])
        np.testing.assert_array_equal(xidot, [0.0, 0.0])

    def test_homogeneity(self, frw):
        x = np.array([0.1, 0.5])
        xi = np.array([0.7, -0.3])
        a1, b1 = geo.hamiltonian_field(frw, geo.PhasePoint(x, xi))
        a2, b2 = geo.hamiltonian_field(frw, geo.PhasePoint(x, 2 * xi))
        np.testing.assert_allclose(a2, 2 * a1, rtol=1e-14)
        np.testing.assert_allclose(b2, 4 * b1, rtol=1e-14)

    def test_matches_finite_differences(self, frw, rng):
        x = frw.sample_points(5, rng) * 0.5
        xi = geo.random_null_covectors(frw, x, rng)
        for a, b in zip(x, xi):
            xdot, xidot = geo.hamiltonian_field(frw, geo.PhasePoint(a, b))
            dpx, dpxi = _p_fd(frw, a, b)
            np.testing.assert_allclose(xdot, dpxi, rtol=1e-6, atol=1e-8)
            np.testing.assert_allclose(xidot, -dpx, rtol=1e-6, atol=1e-8)


class TestFlow:
    def test_straight_line(self, mink):
        c = geo.flow_bicharacteristic(mink, geo.PhasePoint(np.zeros(2), np.array([1.0, 1.0])), (0, 2), num=5)
        np.testing.assert_allclose(c.x, np.column_stack([-2 * c.s, 2 * c.s]), atol=1e-13)
        np.testing.assert_allclose(c.xi, np.ones((5, 2)), atol=1e-15)

    @pytest.mark.parametrize("chart_name", ["minkowski", "frw"])
    def test_null_conservation(self, chart_name, rng):
        chart = geo.minkowski(3) if chart_name == "minkowski" else geo.frw()
        orient = "any" if chart_name == "minkowski" else "future"
        x0 = chart.sample_points(10, rng)
        xi0 = geo.random_null_covectors(chart, x0, rng, orientation=orient)
        for a, b in zip(x0, xi0):
            c = geo.flow_bicharacteristic(chart, geo.PhasePoint(a, b), (0, 10))
            assert c.max_drift <= 1e-9

    def test_self_convergence(self, frw, rng):
        x0 = np.array([0.0, 0.0])
        xi0 = geo.random_null_covectors(frw, x0[None], rng, orientation="future")[0]
        pt = geo.PhasePoint(x0, xi0)
        a = geo.flow_bicharacteristic(frw, pt, (0, 0.5), rtol=1e-10, atol=1e-12)
        b = geo.flow_bicharacteristic(frw, pt, (0, 0.5), rtol=1e-12, atol=1e-14)
        assert np.max(np.abs(a.x[-1] - b.x[-1])) <= 1e-7

    def test_group_property(self, frw, rng):
        x0 = np.array([-0.2, 0.3])
        xi0 = geo.random_null_covectors(frw, x0[None], rng, orientation="future")[0]
        whole = geo.flow_bicharacteristic(frw, geo.PhasePoint(x0, xi0), (0, 0.4), samples=[0.0, 0.4])
        half = geo.flow_bicharacteristic(frw, geo.PhasePoint(x0, xi0), (0, 0.2), samples=[0.0, 0.2])
        mid = geo.PhasePoint(half.x[-1], half.xi[-1])
        rest = geo.flow_bicharacteristic(frw, mid, (0, 0.2), samples=[0.0, 0.2], null=False)
        np.testing.assert_allclose(rest.x[-1], whole.x[-1], atol=1e-7)
        np.testing.assert_allclose(rest.xi[-1], whole.xi[-1], atol=1e-7)

    def test_non_null_seed(self, mink):
        with pytest.raises(NonNullPoint):
            geo.flow_bicharacteristic(mink, geo.PhasePoint(np.zeros(2), np.array([1.0, 0.5])))

    def test_chart_exit(self, frw):
        pt = geo.PhasePoint(np.zeros(2), np.array([-1.0, 1.0]))
        c = geo.flow_bicharacteristic(frw, pt, (0, 50))
        assert c.exited and c.s[-1] < 50
        with pytest.raises(ChartExit):
            geo.flow_bicharacteristic(frw, pt, (0, 50), raise_on_exit=True)

    def test_rows(self, mink):
        c = geo.flow_bicharacteristic(mink, geo.PhasePoint(np.zeros(2), np.array([1.0, -1.0])), (0, 1), num=3)
        assert c.rows().shape == (3, 6)


class TestClassify:
    def test_minkowski_timelike(self, mink):
        assert geo.classify_covector(mink, geo.PhasePoint(np.zeros(2), np.array([-1.0, 0.0]))) == geo.TIMELIKE_FUTURE
        assert geo.classify_covector(mink, geo.PhasePoint(np.zeros(2), np.array([1.0, 0.0]))) == geo.TIMELIKE_PAST

    def test_minkowski_null(self, mink):
        assert geo.classify_covector(mink, geo.PhasePoint(np.zeros(2), np.array([1.0, 1.0]))) in (
            geo.NULL_FUTURE, geo.NULL_PAST)

    def test_frw_timelike(self, frw):
        # p = -1 + 0.25 < 0 at x0 = 0
        kind = geo.classify_covector(frw, geo.PhasePoint(np.zeros(2), np.array([1.0, 0.5])))
        assert kind in (geo.TIMELIKE_FUTURE, geo.TIMELIKE_PAST)

    def test_spacelike(self, mink):
        assert geo.classify_covector(mink, geo.PhasePoint(np.zeros(2), np.array([0.1, 1.0]))) == geo.SPACELIKE

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 100))
    @settings(max_examples=200)
    def test_conic_invariance(self, a, b, lam):
        chart = geo.minkowski(2)
        xi = np.array([a, b])
        if np.linalg.norm(xi) < 1e-3:
            return
        if abs(-a * a + b * b) < 1e-6 * (a * a + b * b):
            return  # the null band is relative; skip numerically ambiguous seeds
        k1 = geo.classify_covector(chart, geo.PhasePoint(np.zeros(2), xi))
        k2 = geo.classify_covector(chart, geo.PhasePoint(np.zeros(2), lam * xi))
        assert k1 == k2


class TestRelation:
    def test_forward(self, mink):
        B = geo.PhasePoint(np.zeros(2), np.array([1.0, 1.0]))
        c = geo.flow_bicharacteristic(mink, B, (0, 1), samples=[0.0, 1.0])
        A = geo.PhasePoint(c.x[-1], c.xi[-1])
        r = geo.relation_test(mink, A, B)
        assert r.kind == geo.C_PLUS and r.s == pytest.approx(1.0, abs=1e-6)
        assert geo.relation_test(mink, B, A).kind == geo.C_MINUS

    def test_diagonal(self, mink):
        B = geo.PhasePoint(np.zeros(2), np.array([1.0, 1.0]))
        assert geo.relation_test(mink, B, B).kind == geo.DIAGONAL

    def test_offset_unrelated(self, mink):
        B = geo.PhasePoint(np.zeros(2), np.array([1.0, 1.0]))
        A = geo.PhasePoint(np.array([-1.0, 1.3]), np.array([1.0, 1.0]))
        assert geo.relation_test(mink, A, B).kind == geo.UNRELATED

    def test_conic(self, mink):
        B = geo.PhasePoint(np.zeros(2), np.array([1.0, 1.0]))
        c = geo.flow_bicharacteristic(mink, B, (0, 1), samples=[0.0, 1.0])
        A = geo.PhasePoint(c.x[-1], 3.0 * c.xi[-1])
        assert geo.relation_test(mink, A, B).kind == geo.C_PLUS

    def test_antisymmetry_frw(self, frw, rng):
        x0 = np.array([0.0, 0.0])
        for _ in range(3):
            xi0 = geo.random_null_covectors(frw, x0[None], rng, orientation="future")[0]
            B = geo.PhasePoint(x0, xi0)
            c = geo.flow_bicharacteristic(frw, B, (0, 0.2), samples=[0.0, 0.2])
            A = geo.PhasePoint(c.x[-1], c.xi[-1])
            assert geo.relation_test(frw, A, B, s_max=1.0).kind == geo.C_PLUS
            assert geo.relation_test(frw, B, A, s_max=1.0).kind == geo.C_MINUS
