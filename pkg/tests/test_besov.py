import json

import numpy as np
import pytest

from tslab.besov import (
    BesovIndex,
    DyadicCutoff,
    apply_multiplier,
    besov_norm,
    besov_norm_series,
    block_norms,
    certify_diffeo_invariance,
    certify_embedding,
    certify_max_regularity,
    certify_nikolskij,
    certify_product_law,
    chi,
    decompose,
    heat_block_decay,
    heat_duhamel,
    heat_multiplier,
    lp_block,
    max_block,
    phi,
)
from tslab.maps import NotADiffeomorphismError
from tslab.spectral import SpectralField, TorusGrid, laplacian, lp_norm, random_field, transform

G3 = TorusGrid(3, 16)
TWO_PI = 2 * np.pi


def wave4():
    """e^{4 i x_1} as its (cos, sin) pair, built coefficient by coefficient."""
    c = np.zeros((2,) + G3.shape, complex)
    c[0, 4, 0, 0] = c[0, -4, 0, 0] = 0.5
    c[1, 4, 0, 0], c[1, -4, 0, 0] = -0.5j, 0.5j
    return SpectralField(G3, c)


class TestCutoff:
    def test_endpoints(self):
        assert chi(1.0) == 1.0 and chi(0.3) == 1.0
        assert chi(2.0) == 0.0 and chi(7.0) == 0.0
        assert 0 < chi(1.5) < 1

    def test_monotone(self):
        z = np.linspace(0, 3, 2001)
        assert np.all(np.diff(chi(z)) <= 0)

    def test_partition_of_unity(self):
        r = np.concatenate([[0.0], np.geomspace(1e-3, 1e6, 5000)])
        assert DyadicCutoff().partition_defect(r) < 1e-12

    def test_support(self):
        r = np.linspace(0, 100, 20001)
        for j in range(1, 6):
            live = r[phi(j, r) > 0]
            assert live.min() >= 2 ** (j - 1) and live.max() <= 2 ** (j + 1)

    def test_negative_index(self):
        with pytest.raises(ValueError):
            phi(-1, 1.0)


class TestBlocks:
    def test_max_block_covers_grid(self):
        assert max_block(G3) == 4  # sqrt(3) * 8 = 13.9 <= 16
        w = sum(phi(m, np.sqrt(G3.k2)) for m in range(max_block(G3) + 1))
        assert np.max(np.abs(w - 1)) < 1e-15

    def test_single_wave_sits_in_block_two(self):
        u = wave4()
        for m in range(6):
            b = lp_block(u, m)
            if m == 2:
                assert np.array_equal(b.coeffs, u.coeffs)
            else:
                assert np.all(b.coeffs == 0)

    def test_constant(self):
        u = SpectralField.constant(G3, 2.0)
        assert np.array_equal(lp_block(u, 0).coeffs, u.coeffs)
        assert all(np.all(lp_block(u, m).coeffs == 0) for m in range(1, 6))

    def test_resummation(self):
        u = random_field(G3, np.random.default_rng(0), kmax=7, components=2, mean_zero=False)
        back = decompose(u).resum()
        assert np.max(np.abs(back.coeffs - u.coeffs)) < 1e-12

    def test_far_blocks_are_orthogonal(self):
        u = random_field(G3, np.random.default_rng(1), kmax=7)
        for m in range(1, 5):
            for m2 in range(m + 2, 6):
                assert np.all(lp_block(lp_block(u, m), m2).coeffs == 0)

    def test_block_support(self):
        u = random_field(G3, np.random.default_rng(2), kmax=7)
        r = np.sqrt(G3.k2)
        for m in range(1, 5):
            live = np.abs(lp_block(u, m).coeffs[0]) > 0
            assert r[live].min() >= 2 ** (m - 1) and r[live].max() <= 2 ** (m + 1)


class TestBesovNorm:
    def test_single_wave(self):
        assert besov_norm(wave4(), BesovIndex(1, 2, 1)) == pytest.approx(4 * TWO_PI**1.5, rel=1e-13)

    def test_zero_and_homogeneity(self):
        idx = BesovIndex(0.7, 3, 1)
        assert besov_norm(SpectralField.zeros(G3), idx) == 0
        u = random_field(G3, np.random.default_rng(3), kmax=4)
        assert besov_norm(-2.5 * u, idx) == pytest.approx(2.5 * besov_norm(u, idx), rel=1e-12)

    def test_b022_brackets_l2(self):
        # the squared cutoffs sum to between 1/2 and 1 at every k
        for seed in range(5):
            u = random_field(G3, np.random.default_rng(seed), kmax=7, mean_zero=False)
            ratio = besov_norm(u, BesovIndex(0, 2, 2)) / lp_norm(u, 2)
            assert 1 / np.sqrt(2) - 1e-12 <= ratio <= 1 + 1e-12

    def test_q_infinity_is_max(self):
        u = random_field(G3, np.random.default_rng(4), kmax=7)
        norms = block_norms(u, 2) * 2.0 ** (0.5 * np.arange(5))
        assert besov_norm(u, BesovIndex(0.5, 2, np.inf)) == pytest.approx(norms.max())

    def test_monotone_in_s(self):
        u = random_field(G3, np.random.default_rng(5), kmax=7)
        vals = [besov_norm(u, BesovIndex(s, 2.5, 1)) for s in (-1, 0, 0.5, 1, 2)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_laplacian_shifts_regularity_by_two(self):
        ratios = []
        for seed in range(10):
            u = random_field(G3, np.random.default_rng(seed), kmax=7)
            ratios.append(besov_norm(laplacian(u), BesovIndex(0.5, 2, 1)) / besov_norm(u, BesovIndex(2.5, 2, 1)))
        # |k|^2 / 4^m stays within [1/4, 4] on block m
        assert 0.25 <= min(ratios) and max(ratios) <= 4

    def test_series_matches_pointwise(self):
        rng = np.random.default_rng(6)
        fields = [random_field(G3, rng, kmax=5) for _ in range(3)]
        series = np.stack([f.coeffs for f in fields])
        for p in (2, 3):
            idx = BesovIndex(1.0, p, 1)
            expect = [besov_norm(f, idx) for f in fields]
            assert np.allclose(besov_norm_series(series, G3, idx), expect, rtol=1e-12)

    def test_index_validation(self):
        with pytest.raises(ValueError):
            BesovIndex(0, 0.5, 1)


class TestMultiplier:
    def test_identity(self):
        u = random_field(G3, np.random.default_rng(7), kmax=5)
        assert np.array_equal(apply_multiplier(u, lambda k: 1.0).coeffs, u.coeffs)

    def test_heat_on_single_wave(self):
        u = wave4()
        out = apply_multiplier(u, heat_multiplier(0.1))
        assert np.allclose(out.coeffs, np.exp(-1.6) * u.coeffs, atol=1e-15)

    def test_non_finite(self):
        u = wave4()
        with pytest.raises(ValueError):
            apply_multiplier(u, lambda k: np.where(k[0] == 4, np.inf, 1.0))

    def test_singular_only_off_support_is_fine(self):
        u = wave4()
        with np.errstate(divide="ignore"):
            out = apply_multiplier(u, lambda k: 1.0 / np.sum(k**2, axis=0))
        assert np.allclose(out.coeffs, u.coeffs / 16)

    @pytest.mark.parametrize("p", [2, 3])
    def test_heat_block_decay(self, p):
        fit = heat_block_decay(6, p=p, m_values=(1, 2, 3))
        assert fit["c"] >= 0.2


class TestNikolskij:
    def test_p_equals_q(self):
        rep = certify_nikolskij(4, 2, 2, m_values=(1, 2), refine=False)
        assert rep.empirical_max == pytest.approx(1.0, rel=1e-12)

    def test_rejects_q_below_p(self):
        with pytest.raises(ValueError):
            certify_nikolskij(2, 3, 2)

    def test_small_run_is_flat(self):
        rep = certify_nikolskij(10, 2, np.inf, m_values=(1, 2, 3))
        assert rep.passed and abs(rep.trend_slope) <= 0.1
        assert 0 < rep.empirical_max < np.inf

    def test_single_wave_ratio(self):
        u = wave4()
        d_lam = 2 * 4.0
        ratio = lp_norm(u, np.inf) / (d_lam**3 * lp_norm(u, 1))
        assert ratio == pytest.approx(1 / (8**3 * TWO_PI**3), rel=1e-12)

    def test_deterministic(self):
        a = certify_nikolskij(4, 1, 3, m_values=(1, 2), seed=5).to_json()
        b = certify_nikolskij(4, 1, 3, m_values=(1, 2), seed=5).to_json()
        assert a == b


class TestEmbedding:
    def test_constant(self):
        u = SpectralField.constant(G3, 1.0)
        ratio = lp_norm(u, np.inf) / besov_norm(u, BesovIndex(1.0, 3, 1))
        assert ratio == pytest.approx(TWO_PI**-1.0)

    def test_single_wave(self):
        u = wave4()
        ratio = lp_norm(u, np.inf) / besov_norm(u, BesovIndex(1.0, 3, 1))
        assert ratio == pytest.approx(1 / (4 * TWO_PI), rel=1e-10)

    def test_small_run(self):
        rep = certify_embedding(20, 3)
        assert rep.passed
        payload = json.loads(rep.to_json())
        assert set(payload) >= {"inequality", "params", "samples", "seed", "empirical_max", "trend_slope", "pass"}


class TestProductLaw:
    def test_constant_factor(self):
        g = random_field(G3, np.random.default_rng(8), kmax=2)
        one = SpectralField.constant(G3, 1.0)
        from tslab.besov import _product_ratio

        assert _product_ratio(one, g, 2.5, 1.2) == pytest.approx(TWO_PI ** (-3 / 2.5), rel=1e-12)
        assert _product_ratio(g, SpectralField.zeros(G3), 2.5, 1.2) == 0

    def test_window(self):
        with pytest.raises(ValueError):
            certify_product_law(2, 2.5, s=1.3)
        with pytest.raises(ValueError):
            certify_product_law(2, 3.5)

    def test_small_run(self):
        rep = certify_product_law(6, 2.5)
        assert rep.passed and rep.params["s"] == pytest.approx(1.2)


class TestDiffeo:
    def f(self):
        return transform(np.cos(G3.points[0]), G3)

    def shear(self, amp):
        return transform(np.stack([amp * np.sin(G3.points[0]), 0 * G3.points[0], 0 * G3.points[0]]), G3)

    def test_identity(self):
        r = certify_diffeo_invariance(self.f(), SpectralField.zeros(G3, 3), 0.5, 2)
        assert r == pytest.approx((1.0, 1.0), rel=1e-12)

    def test_shear_bounded(self):
        r1, r2 = certify_diffeo_invariance(self.f(), self.shear(0.1), 0.5, 2)
        assert 0.5 <= r1 <= 2 and 0.5 <= r2 <= 2

    def test_shrinking_moves_toward_one(self):
        big = certify_diffeo_invariance(self.f(), self.shear(0.1), 0.5, 2)
        small = certify_diffeo_invariance(self.f(), self.shear(0.01), 0.5, 2)
        assert abs(small[0] - 1) < abs(big[0] - 1)
        assert abs(small[1] - 1) < abs(big[1] - 1)

    def test_fold_rejected(self):
        with pytest.raises(NotADiffeomorphismError):
            certify_diffeo_invariance(self.f(), self.shear(1.5), 0.5, 2)

    def test_s_range(self):
        with pytest.raises(ValueError):
            certify_diffeo_invariance(self.f(), self.shear(0.1), 1.5, 2)


class TestMaxRegularity:
    def test_single_mode_closed_form(self):
        g1 = TorusGrid(3, 8)
        prof = transform(np.cos(g1.points[0]), g1).coeffs
        t = np.linspace(0, 5, 11)
        f, ft, g = heat_duhamel(prof, np.array([1.0]), g1, t)
        k1 = (0, 1, 0, 0)
        assert np.allclose(f[(slice(None),) + k1], 0.5 * t * np.exp(-t), atol=1e-15)
        assert np.allclose(ft[(slice(None),) + k1], 0.5 * (1 - t) * np.exp(-t), atol=1e-15)

    def test_single_mode_ratio(self):
        g1 = TorusGrid(3, 8)
        prof = transform(np.cos(g1.points[0]), g1).coeffs
        rep = certify_max_regularity(1, forcing=(prof, [1.0]))
        assert np.isfinite(rep.empirical_max) and rep.passed

    def test_zero_forcing_skipped(self):
        g1 = TorusGrid(3, 8)
        rep = certify_max_regularity(1, forcing=(np.zeros(g1.shape), [1.0]))
        assert rep.empirical_max is None and "skipped" in rep.details

    def test_mean_rejected(self):
        g1 = TorusGrid(3, 8)
        with pytest.raises(ValueError):
            certify_max_regularity(1, forcing=(np.ones(g1.shape), [1.0]))

    def test_small_run(self):
        rep = certify_max_regularity(8)
        assert rep.passed
