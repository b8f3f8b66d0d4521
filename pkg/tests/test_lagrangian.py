import json

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from tslab.lagrangian import (
    DeformationState,
    NonContractiveError,
    advance_map,
    advance_map_eulerian,
    chain_rule_defect,
    commutator_laplacian,
    deformation_matrix,
    direct_inverse,
    div_u,
    equivalence_report,
    grad_u,
    invert_near_identity,
    lagrangian_inverse_laplacian,
    lagrangian_laplacian,
    matrix_field,
    pullback,
    pushforward,
    report_json,
)
from tslab.maps import NotADiffeomorphismError
from tslab.spectral import (
    SpectralField,
    TorusGrid,
    divergence,
    gradient,
    poisson_inverse,
    random_field,
    transform,
)

G = TorusGrid(3, 16)
EYE = np.eye(3).reshape(3, 3, 1, 1, 1)


def const_matrix(mat, grid=G):
    vals = np.broadcast_to(np.asarray(mat, float).reshape(3, 3, 1, 1, 1), (3, 3) + grid.shape)
    return matrix_field(np.array(vals), grid)


def identity_A(grid=G):
    return const_matrix(np.eye(3), grid)


def small_disp(grid, amp, seed=0, kmax=2):
    d = random_field(grid, np.random.default_rng(seed), kmax, components=grid.dim)
    return d * (amp / float(np.abs(d.values()).max()))


def cos1(grid=G):
    return transform(np.cos(grid.points[0])[None], grid)


class TestMap:
    def test_constant_velocity_translates(self):
        c = np.array([0.3, -0.1, 0.2])
        u = SpectralField.constant(G, c)
        st = DeformationState.identity(G)
        for _ in range(10):
            st = advance_map(st, u, 0.1)
        assert st.t == pytest.approx(1.0)
        assert np.allclose(st.disp.values(), c.reshape(3, 1, 1, 1), atol=1e-14)
        A, info = deformation_matrix(st)
        assert np.abs(A - EYE).max() < 1e-14
        assert st.gamma == 0.0

    def test_zero_velocity_is_identity(self):
        st = DeformationState.identity(G)
        st = advance_map(st, SpectralField.zeros(G, 3), 0.5)
        assert np.all(st.disp.coeffs == 0)
        assert st.min_jacobian() == 1.0

    def test_frozen_eulerian_field_matches_ode(self):
        grid = TorusGrid(3, 8)
        v = transform(np.stack([0.01 * np.sin(grid.points[0]), 0 * grid.points[0], 0 * grid.points[0]]), grid)
        st = DeformationState.identity(grid)
        for _ in range(100):
            st, _ = advance_map_eulerian(st, v, 0.01)
        x0 = grid.points[0].ravel()[:64]
        ref = solve_ivp(lambda t, y: 0.01 * np.sin(y), (0, 1), x0, rtol=1e-13, atol=1e-14).y[:, -1]
        got = x0 + st.disp.values()[0].ravel()[:64]
        assert np.abs(got - ref).max() < 1e-8

    def test_displacement_gradient_has_zero_mean(self):
        st = DeformationState(small_disp(G, 0.05))
        m = st.grad_x() - EYE
        assert np.abs(m.mean(axis=(2, 3, 4))).max() < 1e-15


class TestDeformationMatrix:
    def test_zero_gradient_gives_identity(self):
        A, info = invert_near_identity(np.zeros((3, 3, 4, 4, 4)))
        assert np.array_equal(A, np.broadcast_to(EYE, A.shape))
        assert info.method == "neumann"

    def test_scalar_geometric_series(self):
        m = np.diag([0.1, 0.0, 0.0]).reshape(3, 3, 1)
        A, info = invert_near_identity(m)
        assert np.allclose(A[..., 0], np.diag([1 / 1.1, 1, 1]), atol=1e-12)
        assert info.method == "neumann" and info.residual < 1e-14

    def test_random_small_displacement_residual(self):
        st = DeformationState(small_disp(G, 0.02, seed=1))
        A, info = deformation_matrix(st)
        assert info.method == "neumann"
        res = np.einsum("ij...,jk...->ik...", A, st.grad_x()) - EYE
        assert np.abs(res).max() < 1e-10

    def test_series_matches_direct_inverse(self):
        st = DeformationState(small_disp(G, 0.02, seed=2))
        A, info = deformation_matrix(st)
        assert info.series_norm < 0.25
        direct, cond = direct_inverse(st.grad_x())
        assert np.abs(A - direct).max() < 1e-10
        assert cond >= 1.0

    def test_large_gradient_falls_back_to_direct(self):
        m = np.diag([0.8, 0.0, 0.0]).reshape(3, 3, 1)
        A, info = invert_near_identity(m)
        assert info.method == "direct"
        assert np.isfinite(info.max_condition)
        assert np.allclose(A[..., 0], np.diag([1 / 1.8, 1, 1]))


class TestOperators:
    def test_commutator_vanishes_for_identity(self):
        w = random_field(G, np.random.default_rng(0), 3, components=2)
        assert np.all(commutator_laplacian(w, identity_A()).coeffs == 0)

    @pytest.mark.parametrize("c", [0.9, 1.05, 1.2])
    def test_commutator_for_scalar_matrix(self, c):
        out = commutator_laplacian(cos1(), const_matrix(c * np.eye(3)))
        expected = (c**2 - 1) * -np.cos(G.points[0])
        assert np.abs(out.values()[0] - expected).max() < 1e-12

    def test_grad_u_is_chain_rule(self):
        grid = TorusGrid(3, 32)
        w = random_field(grid, np.random.default_rng(4), 3)
        st = DeformationState(small_disp(grid, 0.01, seed=5))
        assert chain_rule_defect(w, st) < 1e-6

    def test_div_u_and_grad_u_reduce_for_identity(self):
        u = random_field(G, np.random.default_rng(1), 3, components=3)
        f = random_field(G, np.random.default_rng(2), 3)
        A = identity_A()
        assert np.allclose(div_u(u, A).coeffs, divergence(u).coeffs, atol=1e-16)
        assert np.allclose(grad_u(f, A).coeffs, gradient(f).coeffs, atol=1e-16)

    def test_commutator_bounded_by_deformation(self):
        # ratio of the commutator to the second derivatives stays of order |A - I|
        w = random_field(G, np.random.default_rng(3), 3)
        ratios = []
        for amp in (1e-2, 5e-3):
            st = DeformationState(small_disp(G, amp, seed=6))
            A, _ = deformation_matrix(st)
            Af = matrix_field(A, G)
            size = float(np.abs(A - EYE).max())
            comm = float(np.abs(commutator_laplacian(w, Af).values()).max())
            lap = float(np.abs(lagrangian_laplacian(w, identity_A()).values()).max())
            ratios.append(comm / (lap * size))
        assert max(ratios) < 10 and ratios[0] / ratios[1] == pytest.approx(1.0, rel=0.1)


class TestInverseLaplacian:
    def test_identity_reduces_to_poisson(self):
        a = random_field(G, np.random.default_rng(0), 3)
        res = lagrangian_inverse_laplacian(a, identity_A())
        assert res.iterations == 1
        assert np.array_equal(res.f.coeffs, poisson_inverse(a).coeffs)

    def test_scalar_matrix(self):
        c = 1.1
        res = lagrangian_inverse_laplacian(cos1(), const_matrix(c * np.eye(3)))
        assert np.abs(res.f.values()[0] - np.cos(G.points[0]) / c**2).max() < 1e-10

    def test_random_small_residual(self):
        a = random_field(G, np.random.default_rng(7), 3, mean_zero=False)
        st = DeformationState(small_disp(G, 0.02, seed=8))
        A, _ = deformation_matrix(st)
        res = lagrangian_inverse_laplacian(a, matrix_field(A, G))
        assert res.residual < 1e-8
        assert res.contraction < 0.5

    def test_non_contractive_raises(self):
        with pytest.raises(NonContractiveError) as info:
            lagrangian_inverse_laplacian(cos1(), const_matrix(1.6 * np.eye(3)))
        assert info.value.factor > 1

    def test_rejects_vectors(self):
        with pytest.raises(ValueError):
            lagrangian_inverse_laplacian(SpectralField.zeros(G, 3), identity_A())


class TestFrames:
    def test_identity_map(self):
        f = random_field(G, np.random.default_rng(0), 3)
        st = DeformationState.identity(G)
        assert np.allclose(pullback(f, st).coeffs, f.coeffs, atol=1e-15)
        assert np.allclose(pushforward(f, st).coeffs, f.coeffs, atol=1e-15)

    def test_constant_shift(self):
        shift = SpectralField.constant(G, [0.3, 0.0, 0.0])
        out = pullback(cos1(), DeformationState(shift))
        assert np.abs(out.values()[0] - np.cos(G.points[0] + 0.3)).max() < 1e-13

    def test_round_trip(self):
        f = random_field(G, np.random.default_rng(1), 2)
        st = DeformationState(small_disp(G, 1e-3, seed=2, kmax=1))
        back = pushforward(pullback(f, st), st)
        assert np.abs(back.values() - f.values()).max() < 1e-8

    def test_folded_map_rejected(self):
        grid = TorusGrid(3, 8)
        x = grid.points[0]
        disp = transform(np.stack([1.5 * np.sin(x), 0 * x, 0 * x]), grid)
        with pytest.raises(NotADiffeomorphismError):
            pullback(cos1(grid), DeformationState(disp))

    def test_ground_state_equivalence_report(self):
        st = DeformationState.identity(G)
        one = SpectralField.constant(G, 1.0)
        zero_v = SpectralField.zeros(G, 3)
        rep = equivalence_report([0.0, 1.0], [one, one], [zero_v, zero_v], [st, st],
                                 [SpectralField.zeros(G)] * 2, [zero_v] * 2)
        assert rep["max_density_mismatch"] == 0 and rep["max_velocity_mismatch"] == 0
        data = json.loads(report_json(rep))
        assert set(data["worst"]) == {"t", "max_density_mismatch", "max_velocity_mismatch", "gamma",
                                      "min_jacobian"}
