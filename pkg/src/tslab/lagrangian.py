"""Particle map ``X = id + disp``, its deformation matrix, and Lagrangian operators.

Convention: ``A = (grad X)^{-1}`` with ``(grad X)_ij = d X_i / d y_j``. The
Eulerian gradient seen from the Lagrangian frame is ``grad_u = A^T grad``,
i.e. ``(grad_u f)_i = A_ki d_k f``. Matrix fields are stored as SpectralFields
with ``d*d`` components in row-major order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .maps import check_diffeomorphism, compose, inverse_displacement, jacobian, jacobian_determinant
from .spectral import (
    SpectralField,
    TorusGrid,
    derivative,
    evaluate,
    gradient,
    laplacian,
    pointwise_product,
    poisson_inverse,
    transform,
)

log = logging.getLogger(__name__)

__all__ = [
    "DeformationState",
    "DeformationInfo",
    "NonContractiveError",
    "advance_map",
    "advance_map_eulerian",
    "deformation_matrix",
    "invert_near_identity",
    "direct_inverse",
    "matrix_field",
    "grad_u",
    "div_u",
    "commutator_laplacian",
    "lagrangian_laplacian",
    "lagrangian_inverse_laplacian",
    "InverseLaplacianResult",
    "pullback",
    "pushforward",
    "chain_rule_defect",
    "equivalence_report",
    "report_json",
]


class NonContractiveError(RuntimeError):
    """The Lagrangian Poisson iteration stopped contracting."""

    def __init__(self, factor: float):
        super().__init__(f"fixed-point iteration is not contractive (factor {factor:.3g})")
        self.factor = factor


@dataclass(frozen=True)
class DeformationState:
    """Displacement ``X - id`` on the Lagrangian grid and the running ``int |grad u|_inf dt``."""

    disp: SpectralField
    gamma: float = 0.0
    t: float = 0.0

    @classmethod
    def identity(cls, grid: TorusGrid) -> "DeformationState":
        return cls(SpectralField.zeros(grid, grid.dim))

    @property
    def grid(self) -> TorusGrid:
        return self.disp.grid

    def grad_x(self) -> np.ndarray:
        """``grad X`` pointwise, shape ``(d, d, N, ..)``."""
        return jacobian(self.disp)

    def min_jacobian(self) -> float:
        return float(jacobian_determinant(self.disp).min())

    def positions(self) -> np.ndarray:
        """``X(y)`` at the grid points, shape ``(d, N**d)``, not wrapped."""
        g = self.grid
        return g.points.reshape(g.dim, -1) + self.disp.values().reshape(g.dim, -1)


def _sup_grad(u: SpectralField) -> float:
    return float(np.abs(gradient(u).values()).max())


def advance_map(state: DeformationState, u: SpectralField, dt: float, u_next: SpectralField | None = None):
    """Trapezoidal update of ``X = id + int u`` for the Lagrangian velocity.

    ``u_next`` is the velocity at the end of the step; without it ``u`` is
    taken as frozen over the step, which makes the update exact.
    """
    u_next = u if u_next is None else u_next
    disp = state.disp + (u + u_next) * (0.5 * dt)
    gamma = state.gamma + 0.5 * dt * (_sup_grad(u) + _sup_grad(u_next))
    return DeformationState(disp, gamma, state.t + dt)


def advance_map_eulerian(
    state: DeformationState,
    v: SpectralField | Callable,
    dt: float,
    v_next: SpectralField | Callable | None = None,
) -> tuple[DeformationState, SpectralField]:
    """Heun step of ``dX/dt = v(t, X)`` for an Eulerian velocity.

    ``v`` and ``v_next`` are fields (or callables on points ``(d, P)``) at the
    start and end of the step. Returns the new state and the Lagrangian
    velocity ``v_next(X_new)`` on the grid.
    """
    g = state.grid
    v_next = v if v_next is None else v_next
    f0, f1 = (f if callable(f) else (lambda pts, f=f: evaluate(f, pts)) for f in (v, v_next))
    x0 = state.positions()
    k1 = f0(x0)
    k2 = f1(x0 + dt * k1)
    x1 = x0 + 0.5 * dt * (k1 + k2)
    disp = transform((x1 - g.points.reshape(g.dim, -1)).reshape((g.dim,) + g.shape), g)
    u_new = transform(f1(x1).reshape((g.dim,) + g.shape), g)
    u_old = transform(k1.reshape((g.dim,) + g.shape), g)
    gamma = state.gamma + 0.5 * dt * (_sup_grad(u_old) + _sup_grad(u_new))
    return DeformationState(disp, gamma, state.t + dt), u_new


@dataclass(frozen=True)
class DeformationInfo:
    method: str
    terms: int
    series_norm: float
    max_condition: float
    residual: float


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij...,jk...->ik...", a, b)


def direct_inverse(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Pointwise inverse of a ``(d, d, ..)`` matrix field and the worst 2-norm condition number."""
    moved = np.moveaxis(mat, (0, 1), (-2, -1))
    inv = np.moveaxis(np.linalg.inv(moved), (-2, -1), (0, 1))
    cond = float(np.linalg.cond(moved.reshape((-1,) + moved.shape[-2:])).max())
    return inv, cond


def invert_near_identity(
    m: np.ndarray, tol: float = 1e-12, max_terms: int = 200
) -> tuple[np.ndarray, DeformationInfo]:
    """``(I + m)^{-1}`` pointwise for a ``(d, d, ..)`` matrix field ``m``.

    Uses the Neumann series ``sum_k (-m)^k`` when the pointwise operator norm
    of ``m`` stays below 1/2, stopping once an increment falls under ``tol``.
    Otherwise, or if the cap is hit, inverts each matrix directly and reports
    the worst condition number.
    """
    d = m.shape[0]
    extra = m.ndim - 2
    eye = np.broadcast_to(np.eye(d).reshape((d, d) + (1,) * extra), m.shape)
    norm = float(np.linalg.norm(np.moveaxis(m, (0, 1), (-2, -1)), ord=2, axis=(-2, -1)).max())
    if norm < 0.5:
        total = eye.copy()
        term = eye.copy()
        for n in range(1, max_terms + 1):
            term = -_matmul(term, m)
            total = total + term
            if float(np.abs(term).max()) < tol:
                res = float(np.abs(_matmul(total, eye + m) - eye).max())
                return total, DeformationInfo("neumann", n, norm, float("nan"), res)
        log.warning("Neumann series hit the %d-term cap; inverting directly", max_terms)
    inv, cond = direct_inverse(eye + m)
    res = float(np.abs(_matmul(inv, eye + m) - eye).max())
    if norm >= 0.5:
        log.info("deformation outside the series regime (|m| = %.3g, cond %.3g)", norm, cond)
    return inv, DeformationInfo("direct", 0, norm, cond, res)


def deformation_matrix(
    state: DeformationState, tol: float = 1e-12, max_terms: int = 200
) -> tuple[np.ndarray, DeformationInfo]:
    """``A = (I + grad disp)^{-1}`` pointwise, shape ``(d, d, N, ..)``."""
    d = state.grid.dim
    m = state.grad_x() - np.eye(d).reshape((d, d) + (1,) * d)
    return invert_near_identity(m, tol, max_terms)


def matrix_field(mat: np.ndarray, grid: TorusGrid) -> SpectralField:
    """Pointwise ``(d, d, N, ..)`` values as a ``d*d``-component field."""
    return transform(mat.reshape((-1,) + grid.shape), grid)


def _bt_grad(f: SpectralField, B: SpectralField) -> SpectralField:
    """``(B^T grad f)_i = B_ki d_k f`` for scalar ``f``, with dealiased products."""
    g = f.grid
    d = g.dim
    grad = gradient(f)
    comps = []
    for i in range(d):
        acc = None
        for k in range(d):
            term = pointwise_product(B.component(k * d + i), grad.component(k))
            acc = term if acc is None else acc + term
        comps.append(acc)
    return SpectralField.stack(comps)


def _minus_identity(A: SpectralField) -> SpectralField:
    d = A.grid.dim
    return A - np.eye(d).reshape(-1)


def grad_u(f: SpectralField, A: SpectralField) -> SpectralField:
    """``A^T grad f`` for a scalar ``f``."""
    return gradient(f) + _bt_grad(f, _minus_identity(A))


def div_u(u: SpectralField, A: SpectralField) -> SpectralField:
    """``A_ki d_k u_i``."""
    B = _minus_identity(A)
    d = u.grid.dim
    out = sum((derivative(u.component(i), i) for i in range(d)), SpectralField.zeros(u.grid))
    for i in range(d):
        for k in range(d):
            out = out + pointwise_product(B.component(k * d + i), derivative(u.component(i), k))
    return out


def commutator_laplacian(w: SpectralField, A: SpectralField) -> SpectralField:
    """``(Lap_u - Lap) w`` componentwise, with ``Lap_u = div_u grad_u``.

    Expanded as ``div(B^T grad w) + B_ji d_j (grad_u w)_i`` with ``B = A - I``.
    For ``A = I`` the result is exactly zero.
    """
    B = _minus_identity(A)
    d = w.grid.dim
    out = []
    for c in range(w.components):
        wc = w.component(c)
        bt = _bt_grad(wc, B)
        first = sum((derivative(bt.component(i), i) for i in range(d)), SpectralField.zeros(w.grid))
        gu = gradient(wc) + bt
        second = SpectralField.zeros(w.grid)
        for i in range(d):
            second = second + _bt_grad(gu.component(i), B).component(i)
        out.append(first + second)
    return SpectralField.stack(out)


def lagrangian_laplacian(w: SpectralField, A: SpectralField) -> SpectralField:
    return laplacian(w) + commutator_laplacian(w, A)


@dataclass(frozen=True)
class InverseLaplacianResult:
    f: SpectralField
    iterations: int
    contraction: float
    solvability_constant: float
    residual: float


def lagrangian_inverse_laplacian(
    a: SpectralField, A: SpectralField, tol: float = 1e-10, max_iter: int = 200
) -> InverseLaplacianResult:
    """Solve ``-Lap_u f = a - c`` by ``f <- (-Lap)^{-1}(a + (Lap_u - Lap) f)``.

    ``(-Lap)^{-1}`` removes means, so the limit fixes ``c`` to the unique
    constant making the equation solvable, ``c = {a} + {Lap_u f}``; ``f`` has
    zero mean in ``y``. The contraction factor is the largest ratio of
    consecutive increments.
    """
    if a.components != 1:
        raise ValueError("the Lagrangian inverse Laplacian acts on scalars")
    f = poisson_inverse(a)
    prev_step = None
    factor = 0.0
    growths = 0
    for it in range(1, max_iter + 1):
        f_new = poisson_inverse(a + commutator_laplacian(f, A))
        step = float(np.abs(f_new.coeffs - f.coeffs).max())
        f = f_new
        if prev_step is not None and prev_step > 0:
            ratio = step / prev_step
            factor = max(factor, ratio)
            growths = growths + 1 if ratio > 1 else 0
            if growths >= 2:
                raise NonContractiveError(ratio)
        if step < tol:
            break
        prev_step = step
    else:
        raise NonContractiveError(factor)
    lap_u = lagrangian_laplacian(f, A)
    c = float(a.mean()[0] + lap_u.mean()[0])
    r = -lap_u - a + c
    residual = float(np.sqrt(a.grid.volume * np.sum(np.abs(r.coeffs) ** 2)))
    log.debug("Lagrangian Poisson: %d iterations, contraction %.3g", it, factor)
    return InverseLaplacianResult(f, it, factor, c, residual)


# --- changes of frame -------------------------------------------------------

def pullback(f: SpectralField, state: DeformationState) -> SpectralField:
    """``f o X`` on the Lagrangian grid."""
    check_diffeomorphism(state.disp)
    return compose(f, state.disp)


def pushforward(f: SpectralField, state: DeformationState, tol: float = 1e-12) -> SpectralField:
    """``f o X^{-1}`` on the Eulerian grid."""
    check_diffeomorphism(state.disp)
    g = state.grid
    x = g.points.reshape(g.dim, -1)
    z = inverse_displacement(state.disp, x, tol=tol)
    vals = evaluate(f, x + z)
    return transform(vals.reshape((f.components,) + g.shape), g)


def chain_rule_defect(w: SpectralField, state: DeformationState) -> float:
    """``sup |A^T grad(w o X) - (grad w) o X|`` for a scalar ``w``."""
    A, _ = deformation_matrix(state)
    lhs = np.einsum("ki...,k...->i...", A, gradient(pullback(w, state)).values())
    rhs = pullback(gradient(w), state).values()
    return float(np.abs(lhs - rhs).max())


def equivalence_report(
    times,
    rho_series,
    v_series,
    maps,
    a_series,
    u_series,
) -> dict:
    """Compare an Eulerian run, pulled back along its map, with a Lagrangian pair.

    Every argument is a sequence over ``times``; densities and velocities are
    SpectralFields. Returns per-time records and the worst mismatch.
    """
    records = []
    for t, rho, v, st, a, u in zip(times, rho_series, v_series, maps, a_series, u_series):
        dens = np.abs(pullback(rho, st).values() - 1.0 - a.values()).max()
        vel = np.abs(pullback(v, st).values() - u.values()).max()
        records.append({"t": float(t), "max_density_mismatch": float(dens), "max_velocity_mismatch": float(vel),
                        "gamma": float(st.gamma), "min_jacobian": st.min_jacobian()})
    worst = max(records, key=lambda r: max(r["max_density_mismatch"], r["max_velocity_mismatch"]))
    return {"records": records, "worst": worst,
            "max_density_mismatch": max(r["max_density_mismatch"] for r in records),
            "max_velocity_mismatch": max(r["max_velocity_mismatch"] for r in records)}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
