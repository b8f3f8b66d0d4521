import numpy as np
import pytest

from tslab.besov import BesovIndex, besov_norm
from tslab.nonlinear import (
    CFLCollapseError,
    PositivityError,
    SimConfig,
    aggregation_rhs,
    aggregation_simulate,
    perturbed_state,
    rhs_eulerian,
    simulate,
    step,
)
from tslab.spectral import (
    FluidState,
    SpectralField,
    TorusGrid,
    fine_values,
    pointwise_product,
    poisson_inverse,
    random_field,
    transform,
)


G8 = TorusGrid(3, 8)

D1 = np.array([-1 / 60, 3 / 20, -3 / 4, 0.0, 3 / 4, -3 / 20, 1 / 60])
D2 = np.array([1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90])


def fd(f, axis, h, stencil):
    return sum(c * np.roll(f, -j, axis=axis) for j, c in zip(range(-3, 4), stencil) if c) / h ** (
        2 if stencil is D2 else 1)


def band_limit(f, coarse):
    # keep the coarse dealiased modes of a fine-grid field, return coarse values
    n, nf = coarse.n, f.grid.n
    k = np.fft.fftfreq(n, 1.0 / n).astype(int)
    idx = np.ix_(*(k % nf,) * 3)
    c = f.coeffs[(slice(None),) + idx] * coarse.dealias_mask
    return SpectralField(coarse, c).values()


def cosine_state(grid, amp, sign_v=0.0):
    x = grid.points
    rho = transform((1 + amp * np.cos(x[0]))[None], grid)
    v = transform(np.stack([sign_v * np.sin(x[1])] + [0 * x[0]] * (grid.dim - 1)), grid)
    return FluidState(rho, v)


class TestRhs:
    def test_ground_state(self):
        rt, vt = rhs_eulerian(FluidState.ground(G8))
        assert np.all(rt.coeffs == 0) and np.all(vt.coeffs == 0)

    def test_uniform_transport(self):
        st = FluidState(SpectralField.constant(G8, 1.0), SpectralField.constant(G8, [0.2, -0.1, 0.4]))
        rt, vt = rhs_eulerian(st)
        assert np.abs(rt.coeffs).max() < 1e-16 and np.abs(vt.coeffs).max() < 1e-16

    @pytest.mark.parametrize("sign", ["repulsive", "attractive"])
    def test_finite_difference_oracle(self, sign):
        g = TorusGrid(3, 16)
        rng = np.random.default_rng(0)
        rho = random_field(g, rng, 2) * 0.01 + 1.0
        v = random_field(g, rng, 2, components=3) * 0.01
        rt, vt = rhs_eulerian(FluidState(rho, v), sign)
        nf = 64
        h = 2 * np.pi / nf
        r = fine_values(rho, nf)[0]
        vv = fine_values(v, nf)
        kr = fine_values(poisson_inverse(rho), nf)[0]
        s = 1.0 if sign == "repulsive" else -1.0
        rho_t = -sum(fd(r * vv[j], j, h, D1) for j in range(3))
        v_t = np.stack([
            -sum(vv[j] * fd(vv[i], j, h, D1) for j in range(3))
            + sum(fd(vv[i], j, h, D2) for j in range(3)) / r
            - s * fd(kr, i, h, D1)
            for i in range(3)])
        # project the oracle onto the resolved band before comparing
        fine = TorusGrid(3, nf)
        proj_r = band_limit(transform(rho_t[None], fine), g)
        proj_v = band_limit(transform(v_t, fine), g)
        assert np.abs(rt.values() - proj_r).max() < 1e-6
        assert np.abs(vt.values() - proj_v).max() < 1e-6

    def test_positivity_violation(self):
        st = cosine_state(G8, 0.97)
        with pytest.raises(PositivityError) as info:
            rhs_eulerian(st, rho_min=0.05)
        assert info.value.state is st


class TestStep:
    def test_ground_state_fixed_point(self):
        cfg = SimConfig(n=8, dt=0.05, t_end=1.0)
        st = FluidState.ground(G8)
        new = step(st, cfg)
        assert np.array_equal(new.rho.coeffs, st.rho.coeffs)
        assert np.array_equal(new.v.coeffs, st.v.coeffs)

    @pytest.mark.parametrize("scheme", ["etdrk2", "ifrk2"])
    def test_second_order_in_time(self, scheme):
        init = perturbed_state(G8, 0.2, seed=1)

        def run(dt):
            cfg = SimConfig(n=8, dt=dt, t_end=1.0, scheme=scheme, sample_every=1000)
            return simulate(init, cfg, store_every=int(round(1 / dt))).final

        a, b, c = run(0.05), run(0.025), run(0.0125)
        e1 = np.abs(a.v.coeffs - b.v.coeffs).max() + np.abs(a.rho.coeffs - b.rho.coeffs).max()
        e2 = np.abs(b.v.coeffs - c.v.coeffs).max() + np.abs(b.rho.coeffs - c.rho.coeffs).max()
        assert 3.3 < e1 / e2 < 4.7

    def test_schemes_agree(self):
        init = perturbed_state(G8, 0.1, seed=2)
        out = []
        for scheme in ("etdrk2", "ifrk2"):
            cfg = SimConfig(n=8, dt=0.01, t_end=0.5, scheme=scheme)
            out.append(simulate(init, cfg, store_every=50).final.v.coeffs)
        assert np.abs(out[0] - out[1]).max() < 1e-5

    def test_cfl_substeps_and_collapse(self):
        fast = FluidState(SpectralField.constant(G8, 1.0), SpectralField.constant(G8, [100.0, 0, 0]))
        cfg = SimConfig(n=8, dt=0.1, t_end=1.0)
        new = step(fast, cfg)
        assert new.t == pytest.approx(0.1)
        huge = FluidState(SpectralField.constant(G8, 1.0), SpectralField.constant(G8, [1e12, 0, 0]))
        with pytest.raises(CFLCollapseError) as info:
            step(huge, cfg)
        assert info.value.state is huge


class TestSimulate:
    def test_zero_perturbation_constant(self):
        res = simulate(FluidState.ground(G8), SimConfig(n=8, dt=0.05, t_end=1.0, sample_every=5))
        assert np.abs(res.rho - res.rho[0]).max() < 1e-12
        assert np.abs(res.v).max() < 1e-12
        assert not res.aborted

    def test_invariants_short_run(self):
        init = perturbed_state(G8, 0.05, seed=3)
        cfg = SimConfig(n=8, dt=0.01, t_end=2.0)
        res = simulate(init, cfg)
        assert np.abs(res.step_mass - res.step_mass[0]).max() < 1e-10
        mom = np.asarray(res.step_momentum)
        assert np.abs(mom - mom[0]).max() < 1e-8
        assert res.energy_increments().max() <= 10 * cfg.dt**3
        # density bound from the divergence integral
        rho0 = res.records[0].max_rho
        for r in res.records:
            assert r.max_rho <= rho0 * np.exp(r.div_v_int) * (1 + 1e-6)

    def test_linear_regime_matches_closed_form(self):
        from tslab.linear import solve_linear_system

        init = perturbed_state(G8, 1e-6, seed=4)
        res = simulate(init, SimConfig(n=8, dt=0.01, t_end=2.0, sample_every=20))
        sol = solve_linear_system(init.rho - 1.0, init.v, None, None, 1.0, res.times)
        scale = np.abs(sol.u).max()
        assert np.abs(res.v - sol.u).max() / scale < 1e-3

    def test_attractive_concentrates(self):
        init = cosine_state(G8, 0.01)
        res = simulate(init, SimConfig(n=8, dt=0.01, t_end=6.0, sign="attractive", sample_every=10))
        amp = np.array([r.max_rho for r in res.records]) - 1.0
        assert amp[-1] > 2 * amp[0] or res.aborted
        assert np.all(np.diff(amp[5:]) > 0)

    def test_attractive_aborts_with_state(self):
        init = cosine_state(G8, 0.05)
        cfg = SimConfig(n=8, dt=0.01, t_end=40.0, sign="attractive", sample_every=50)
        res = simulate(init, cfg, store_every=cfg.steps)
        assert res.aborted and "density" in res.abort_reason
        # the last good state is kept even when only end states are stored
        assert res.final.t == pytest.approx(res.step_times[-1])
        assert res.final.rho.values().min() > cfg.rho_min
        assert res.final.rho.values().max() > 2.0

    def test_repulsive_cosine_bounded(self):
        init = cosine_state(G8, 0.01)
        res = simulate(init, SimConfig(n=8, dt=0.02, t_end=5.0, sample_every=10))
        init_norm = besov_norm(init.rho - 1.0, BesovIndex(1.5, 2, 1))
        sup = max(r.budget["budget_rho_sup"] for r in res.records)
        assert sup <= 1.5 * init_norm

    def test_map_tracking(self):
        init = perturbed_state(G8, 1e-3, seed=5)
        res = simulate(init, SimConfig(n=8, dt=0.01, t_end=0.5), track_map=True, store_every=10)
        assert len(res.maps) == len(res.times) == len(res.lagrangian_u)
        assert res.maps[-1].min_jacobian() > 0.99


class TestPerturbedState:
    def test_budget_and_momentum(self):
        st = perturbed_state(TorusGrid(3, 16), 1e-2, seed=0)
        a = besov_norm(st.rho - 1.0, BesovIndex(1.5, 2, 1))
        assert st.rho.mean()[0] == pytest.approx(1.0, abs=1e-15)
        assert abs(pointwise_product(st.rho, st.v).mean()).max() < 1e-18
        assert 0 < a < 1e-2

    def test_zero_eps_is_ground(self):
        st = perturbed_state(G8, 0.0)
        assert np.all(st.v.coeffs == 0)


class TestAggregation:
    def test_uniform_fixed_point(self):
        assert np.all(aggregation_rhs(SpectralField.constant(G8, 1.0)).coeffs == 0)

    def test_cosine_decays_and_keeps_mean(self):
        rho = cosine_state(G8, 0.01).rho
        t, series = aggregation_simulate(rho, 0.05, 5.0)
        amp = np.abs(series[:, 0, 1, 0, 0])
        assert np.all(np.diff(amp) < 0)
        assert np.abs(series[:, 0, 0, 0, 0] - 1.0).max() < 1e-12

    def test_single_mode_rate(self):
        # linearization: d/dt rho_k = -rho_k / |k|^2
        rho = cosine_state(G8, 1e-6).rho
        r = aggregation_rhs(rho)
        assert r.coeffs[0, 1, 0, 0] == pytest.approx(-rho.coeffs[0, 1, 0, 0], rel=1e-5)

    def test_requires_unit_mean(self):
        with pytest.raises(ValueError):
            aggregation_simulate(SpectralField.constant(G8, 2.0), 0.1, 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0)
    with pytest.raises(ValueError):
        SimConfig(sign="neutral")
    with pytest.raises(ValueError):
        SimConfig(cfl=1.5)
    assert SimConfig(dt=0.01, t_end=1.0).steps == 100
