import numpy as np
import pytest

from tslab.picard import (
    PicardConfig,
    PicardDivergence,
    SmallnessError,
    data_budget,
    lagrangian_forcing,
    lagrangian_residual,
    limit_residual,
    picard_iterate,
)
from tslab.lagrangian import matrix_field
from tslab.spectral import SpectralField, TorusGrid, random_field
from tslab.verify import single_mode_data

G = TorusGrid(3, 8)
SHORT = PicardConfig(t_end=2.0, dt=0.1, max_iter=8)


def identity_A(grid=G):
    return matrix_field(np.broadcast_to(np.eye(3).reshape(3, 3, 1, 1, 1), (3, 3) + grid.shape).copy(), grid)


def test_config_validation():
    with pytest.raises(ValueError):
        PicardConfig(t_end=1.05, dt=0.1)
    with pytest.raises(ValueError):
        PicardConfig(dt=0.0)
    assert len(PicardConfig(t_end=2.0, dt=0.1).times) == 21


def test_zero_data_is_fixed_point():
    z = SpectralField.zeros(G)
    res = picard_iterate(z, SpectralField.zeros(G, 3), SHORT)
    assert res.converged and len(res.deltas) == 1
    assert np.all(res.final.a == 0) and np.all(res.final.u == 0)


def test_forcing_vanishes_at_rest():
    z = SpectralField.zeros(G)
    zv = SpectralField.zeros(G, 3)
    h, g = lagrangian_forcing(z, zv, zv, identity_A())
    assert np.all(h.coeffs == 0) and np.all(g.coeffs == 0)


def test_forcing_is_quadratic_at_identity():
    # with A = I only the products survive, so the forcing scales like eps^2
    rng = np.random.default_rng(0)
    a = random_field(G, rng, 2)
    u = random_field(G, rng, 2, components=3)
    ut = random_field(G, rng, 2, components=3)
    sizes = []
    for eps in (1e-2, 5e-3):
        h, g = lagrangian_forcing(a * eps, u * eps, ut * eps, identity_A())
        sizes.append(np.abs(h.coeffs).max() + np.abs(g.coeffs).max())
    assert sizes[0] / sizes[1] == pytest.approx(4.0, rel=1e-6)


def test_residual_of_linear_data_is_linear_defect():
    a = random_field(G, np.random.default_rng(1), 2) * 1e-3
    zv = SpectralField.zeros(G, 3)
    r1, r2 = lagrangian_residual(a, zv, SpectralField.zeros(G), zv, identity_A())
    assert r1 == 0
    assert r2 > 0


@pytest.fixture(scope="module")
def small_run():
    a0, u0 = single_mode_data(G, 1e-3)
    return picard_iterate(a0, u0, SHORT)


def test_small_data_contracts(small_run):
    assert small_run.converged
    assert small_run.contraction_within(4)
    f = [x for x in small_run.factors if np.isfinite(x)]
    assert f[0] < 0.1
    assert limit_residual(small_run)["max"] < 1e-10


def test_factor_scales_with_data():
    # the map is quadratic near zero, so the first factor is linear in eps
    out = []
    for eps in (2e-3, 1e-3):
        a0, u0 = single_mode_data(G, eps)
        out.append(picard_iterate(a0, u0, PicardConfig(t_end=2.0, dt=0.1, max_iter=2)).factors[1])
    assert out[0] / out[1] == pytest.approx(2.0, rel=0.05)


def test_budget_of_single_mode_data():
    a0, u0 = single_mode_data(G, 3e-3)
    assert data_budget(a0, u0) == pytest.approx(3e-3, rel=1e-12)


def test_eps_max_guard():
    a0, u0 = single_mode_data(G, 1e-2)
    with pytest.raises(ValueError):
        picard_iterate(a0, u0, SHORT, eps_max=1e-3)


def test_large_data_fails_loudly():
    # the budget carries a volume factor: 30 is an O(1) pointwise amplitude
    a0, u0 = single_mode_data(G, 30.0)
    with pytest.raises((PicardDivergence, SmallnessError)):
        picard_iterate(a0, u0, SHORT)


def test_summary_is_plain(small_run):
    s = small_run.summary()
    assert s["converged"] is True
    assert len(s["deltas"]) == len(s["factors"]) == s["iterations"]
