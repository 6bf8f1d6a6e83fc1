import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proplab import model_space as ms
from proplab.errors import UnsupportedDim


def _gaussian_section(n, width=0.5, L=8.0):
    h = L / n
    y = np.arange(n) * h - L / 2
    Y1, Y2 = np.meshgrid(y, y, indexing="ij")
    return ms.GridSection(np.exp(-(Y1 ** 2 + Y2 ** 2) / (2 * width ** 2)), (h, h), origin=(-L / 2, -L / 2))


def _plane_wave(m, n1=40, n2=32, h=0.1):
    y1 = np.arange(n1) * h
    j = np.arange(n2)
    vals = np.exp(-((y1 - 2.0) ** 2) / 0.2)[:, None] * np.exp(2j * np.pi * m * j / n2)[None, :]
    return ms.GridSection(vals, (h, h))


class TestInverse:
    @pytest.mark.parametrize("kind", ["ret", "adv", "causal"])
    def test_second_order_convergence(self, kind):
        errs = []
        for n in (64, 128, 256):
            u = _gaussian_section(n)
            target = 0 if kind == "causal" else u.values
            r = ms.apply_d1(ms.apply_model_green(kind, u)).values - target
            errs.append(np.abs(r[3:-3, 3:-3]).max())
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        if kind == "causal":
            # F is a bisolution: D1 F u vanishes up to round-off
            assert max(errs) < 1e-12
        else:
            assert np.all((orders >= 1.8) & (orders <= 2.2)), orders

    def test_support(self):
        u = _gaussian_section(128, width=0.3)
        u.values[: 64] = 0  # supported in y1 >= 0
        ret = ms.apply_model_green("ret", u).values
        assert np.abs(ret[:64]).max() == 0.0
        v = _gaussian_section(128, width=0.3)
        v.values[64:] = 0
        adv = ms.apply_model_green("adv", v).values
        assert np.abs(adv[64:]).max() < 1e-15

    def test_causal_column_constant(self):
        # F u = i sqrt(2 pi) w exp(-y2^2 / 2w^2) independent of y1
        w = 0.5
        u = _gaussian_section(256, width=w)
        Fu = ms.apply_model_green("causal", u).values
        y2 = u.axes()[1]
        expect = 1j * np.sqrt(2 * np.pi) * w * np.exp(-y2 ** 2 / (2 * w * w))
        np.testing.assert_allclose(Fu, np.broadcast_to(expect, Fu.shape), atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ms.apply_model_green("symmetric", _gaussian_section(16))


class TestPositivity:
    def test_odd_profile_vanishes(self):
        u = _gaussian_section(128)
        y1 = u.axes()[0] + u.h[0] / 2  # grid symmetric about -h/2; shift to make y1 odd exactly
        odd = u.with_values(u.values * y1[:, None])
        odd.values = odd.values - odd.values[::-1]
        assert ms.positivity_form(odd) == pytest.approx(0.0, abs=1e-24)

    def test_separable_gaussian(self):
        # v = sqrt(2 pi) s phi, int |phi|^2 = sqrt(pi) sigma
        s, sig = 0.5, 0.7
        n, L = 256, 10.0
        h = L / n
        y = np.arange(n) * h - L / 2
        vals = np.exp(-y[:, None] ** 2 / (2 * s * s)) * np.exp(-y[None, :] ** 2 / (2 * sig * sig))
        u = ms.GridSection(vals, (h, h))
        assert ms.positivity_form(u) == pytest.approx(2 * np.pi * s * s * np.sqrt(np.pi) * sig, rel=1e-10)

    def test_random_sections(self, rng):
        for _ in range(300):
            u = ms.random_section(rng)
            assert u.margin_ok()
            p = ms.positivity_form(u)
            assert p >= 0
            assert abs(ms.causal_bilinear(u) - p) <= 1e-12 * max(p, 1e-300)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50)
    def test_random_sections_property(self, seed):
        u = ms.random_section(np.random.default_rng(seed), shape=(30, 24), margin=2, bumps=2)
        assert ms.positivity_form(u) >= 0


class TestFeynman:
    @pytest.mark.parametrize("m", [1, 3, 7])
    def test_positive_frequency_is_retarded(self, m):
        u = _plane_wave(m)
        np.testing.assert_allclose(ms.apply_model_green("feynman", u).values,
                                   ms.apply_model_green("ret", u).values, atol=1e-12)
        np.testing.assert_allclose(ms.apply_model_green("antifeynman", u).values,
                                   ms.apply_model_green("adv", u).values, atol=1e-12)

    @pytest.mark.parametrize("m", [0, -2, -5])
    def test_nonpositive_frequency_is_advanced(self, m):
        u = _plane_wave(m)
        np.testing.assert_allclose(ms.apply_model_green("feynman", u).values,
                                   ms.apply_model_green("adv", u).values, atol=1e-12)

    def test_sum_rule(self, rng):
        for _ in range(5):
            u = ms.random_section(rng)
            s = sum(ms.apply_model_green(k, u).values for k in ("feynman", "antifeynman"))
            t = sum(ms.apply_model_green(k, u).values for k in ("ret", "adv"))
            assert np.abs(s - t).max() < 1e-12

    def test_feynman_form_bounded_by_causal(self, rng):
        for _ in range(200):
            u = ms.random_section(rng)
            f = ms.model_feynman_positivity(u)
            assert -1e-14 <= f <= ms.positivity_form(u) + 1e-10

    def test_feynman_form_matches_kernel(self, rng):
        u = ms.random_section(rng)
        K = ms.apply_model_green("feynman", u).values - ms.apply_model_green("adv", u).values
        direct = -1j * ms.bilinear_form(u, K)
        assert direct.real == pytest.approx(ms.model_feynman_positivity(u), rel=1e-10)

    def test_requires_two_dimensions(self):
        u = ms.GridSection(np.ones(10), (0.1,))
        with pytest.raises(UnsupportedDim):
            ms.apply_model_green("feynman", u)
        with pytest.raises(UnsupportedDim):
            ms.model_feynman_positivity(u)


def test_margin_check():
    u = ms.GridSection(np.ones((10, 10)), (1, 1), margin=2)
    assert not u.margin_ok()
    u.values[:2] = 0
    u.values[-2:] = 0
    u.values[:, :2] = 0
    u.values[:, -2:] = 0
    assert u.margin_ok()
