"""Picard iteration for the perturbation system written along particle paths.

Each iterate freezes the nonlinear right-hand sides ``(h, g)`` at the
previous pair ``(a, u)`` and solves the linear Stokes system with them. The
particle map of an iterate is ``X = id + int_0^t u``, with ``A = (grad X)^{-1}``
summed as a Neumann series.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .besov import BesovIndex, besov_norm, besov_norm_series
from .lagrangian import (
    DeformationState,
    commutator_laplacian,
    deformation_matrix,
    div_u,
    equivalence_report,
    grad_u,
    lagrangian_inverse_laplacian,
    matrix_field,
)
from .linear import solve_linear_system
from .spectral import (
    SpectralField,
    TorusGrid,
    divergence,
    gradient,
    laplacian,
    pointwise_product,
    poisson_inverse,
)

log = logging.getLogger(__name__)

__all__ = [
    "PicardConfig",
    "PicardState",
    "PicardResult",
    "PicardDivergence",
    "SmallnessError",
    "data_budget",
    "lagrangian_forcing",
    "lagrangian_residual",
    "picard_iterate",
    "compare_with_eulerian",
]


class PicardDivergence(RuntimeError):
    """Consecutive iterate distances grew twice in a row."""


class SmallnessError(RuntimeError):
    """``int grad u`` left the Neumann-series regime."""


@dataclass(frozen=True)
class PicardConfig:
    t_end: float = 20.0
    dt: float = 0.1
    p: float = 2.0
    max_iter: int = 12
    tol: float = 1e-14
    poisson_tol: float = 1e-13

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0:
            raise ValueError("dt and t_end must be positive")
        n = self.t_end / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("t_end must be a multiple of dt")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, int(round(self.t_end / self.dt)) + 1)


@dataclass
class PicardState:
    """One iterate: coefficient series ``(T, c, N, ..)`` and its distance to the previous one."""

    n: int
    times: np.ndarray
    a: np.ndarray
    u: np.ndarray
    a_t: np.ndarray
    u_t: np.ndarray
    h: np.ndarray
    g: np.ndarray
    delta: float
    factor: float = float("nan")
    gamma: float = 0.0


@dataclass
class PicardResult:
    config: PicardConfig
    grid: TorusGrid
    final: PicardState
    deltas: list = field(default_factory=list)
    factors: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    converged: bool = False

    def contraction_within(self, n: int, bound: float = 0.5) -> bool:
        """Whether some factor among the first ``n`` iterates is below ``bound``."""
        fs = [f for f in self.factors[:n] if np.isfinite(f)]
        return bool(fs) and min(fs) < bound

    def summary(self) -> dict:
        return {
            "iterations": len(self.deltas),
            "deltas": [float(x) for x in self.deltas],
            "factors": [float(x) for x in self.factors],
            "gamma": [float(x) for x in self.gammas],
            "converged": bool(self.converged),
            "t_end": self.config.t_end,
            "dt": self.config.dt,
        }


def data_budget(a0: SpectralField, u0: SpectralField, p: float = 2.0) -> float:
    s = a0.grid.dim / p
    return besov_norm(a0, BesovIndex(s, p, 1)) + besov_norm(u0, BesovIndex(s - 1, p, 1))


def _displacements(u: np.ndarray, dt: float) -> np.ndarray:
    """``int_0^t u`` at every sample by the trapezoid rule."""
    out = np.zeros_like(u)
    out[1:] = np.cumsum(0.5 * dt * (u[1:] + u[:-1]), axis=0)
    return out


def _deformation(disp: np.ndarray, grid: TorusGrid) -> tuple[SpectralField, float]:
    state = DeformationState(SpectralField(grid, disp))
    mat, info = deformation_matrix(state)
    if info.method != "neumann":
        raise SmallnessError(f"|int grad u| = {info.series_norm:.3g} is not below 1/2")
    return matrix_field(mat, grid), info.series_norm


def lagrangian_forcing(a: SpectralField, u: SpectralField, u_t: SpectralField, A: SpectralField,
                       poisson_tol: float = 1e-13) -> tuple[SpectralField, SpectralField]:
    """Right-hand sides ``(h, g)`` of the perturbation system at one time."""
    one_a = a + 1.0
    h = -pointwise_product(a, divergence(u)) + pointwise_product(one_a, divergence(u) - div_u(u, A))
    grad_k = gradient(poisson_inverse(a))
    inv = lagrangian_inverse_laplacian(a, A, tol=poisson_tol).f
    g = (-pointwise_product(a, grad_k) - pointwise_product(a, u_t) + commutator_laplacian(u, A)
         + pointwise_product(one_a, grad_k - grad_u(inv, A)))
    return h, g


def lagrangian_residual(a: SpectralField, u: SpectralField, a_t: SpectralField, u_t: SpectralField,
                        A: SpectralField, poisson_tol: float = 1e-13) -> tuple[float, float]:
    """L2 residuals of the continuity and momentum equations along particle paths."""
    eta = a + 1.0
    r1 = a_t + pointwise_product(eta, div_u(u, A))
    inv = lagrangian_inverse_laplacian(a, A, tol=poisson_tol).f
    lap_u = laplacian(u) + commutator_laplacian(u, A)
    r2 = pointwise_product(eta, u_t) - lap_u + pointwise_product(eta, grad_u(inv, A))
    vol = a.grid.volume
    return (float(np.sqrt(vol * np.sum(np.abs(r1.coeffs) ** 2))),
            float(np.sqrt(vol * np.sum(np.abs(r2.coeffs) ** 2))))


def _six_norm(da, du, da_t, du_t, grid: TorusGrid, dt: float, p: float) -> float:
    """Linear-estimate norm with sup/sum over the time grid standing in for L^inf/L^1."""
    s = grid.dim / p

    def ser(c, shift):
        return besov_norm_series(c, grid, BesovIndex(s + shift, p, 1))

    def demean(c):
        c = c.copy()
        c[(slice(None), slice(None)) + (0,) * grid.dim] = 0.0
        return c

    return float(ser(da, 0).max() + dt * ser(da_t, 0).sum() + dt * ser(demean(da), -2).sum()
                 + ser(du, -1).max() + dt * ser(du_t, -1).sum() + dt * ser(demean(du), 1).sum())


def _series_forcing(prev: PicardState, grid: TorusGrid, dt: float, poisson_tol: float):
    T = len(prev.times)
    hs = np.zeros_like(prev.a)
    gs = np.zeros_like(prev.u)
    disp = _displacements(prev.u, dt)
    gamma = 0.0
    for i in range(T):
        A, norm = _deformation(disp[i], grid)
        gamma = max(gamma, norm)
        h, g = lagrangian_forcing(SpectralField(grid, prev.a[i]), SpectralField(grid, prev.u[i]),
                                  SpectralField(grid, prev.u_t[i]), A, poisson_tol)
        hs[i], gs[i] = h.coeffs, g.coeffs
    return hs, gs, gamma


def picard_iterate(a0: SpectralField, u0: SpectralField, config: PicardConfig = PicardConfig(),
                   eps_max: float | None = None) -> PicardResult:
    """Iterate ``(a, u) <- S(a, u)`` from the zero pair until the distance falls below ``tol``.

    Raises :class:`PicardDivergence` after two consecutive growths of the
    distance and :class:`SmallnessError` if the map leaves the series regime.
    """
    grid = a0.grid
    if eps_max is not None and data_budget(a0, u0, config.p) > eps_max:
        raise ValueError("initial data exceed the smallness threshold")
    t = config.times
    dt = config.dt
    zero = np.zeros((len(t), 1) + grid.shape, dtype=complex)
    prev = PicardState(0, t, zero, np.zeros((len(t), grid.dim) + grid.shape, dtype=complex),
                       zero, np.zeros((len(t), grid.dim) + grid.shape, dtype=complex),
                       zero, np.zeros((len(t), grid.dim) + grid.shape, dtype=complex), float("nan"))
    result = PicardResult(config, grid, prev)
    growths = 0
    hs, gs, gamma = None, None, 0.0
    for n in range(1, config.max_iter + 1):
        if n > 1:
            hs, gs, gamma = _series_forcing(prev, grid, dt, config.poisson_tol)
        sol = solve_linear_system(a0, u0, hs, gs, 1.0, t)
        delta = _six_norm(sol.a - prev.a, sol.u - prev.u, sol.a_t - prev.a_t, sol.u_t - prev.u_t,
                          grid, dt, config.p)
        factor = delta / result.deltas[-1] if result.deltas and result.deltas[-1] > 0 else float("nan")
        cur = PicardState(n, t, sol.a, sol.u, sol.a_t, sol.u_t, sol.h, sol.g, delta, factor, gamma)
        result.deltas.append(delta)
        result.factors.append(factor)
        result.gammas.append(gamma)
        result.final = cur
        log.info("Picard iterate %d: delta %.3e factor %.3g gamma %.3g", n, delta, factor, gamma)
        growths = growths + 1 if np.isfinite(factor) and factor > 1 else 0
        if growths >= 2:
            raise PicardDivergence(f"distance grew twice in a row at iterate {n} (factor {factor:.3g})")
        scale = max(result.deltas[0], np.finfo(float).tiny)
        if delta <= config.tol * scale or delta == 0.0:
            result.converged = True
            break
        prev = cur
    return result


def limit_residual(result: PicardResult, poisson_tol: float = 1e-13) -> dict:
    """Worst residuals of the limit at the grid times."""
    st, grid = result.final, result.grid
    disp = _displacements(st.u, result.config.dt)
    r1 = r2 = 0.0
    for i in range(len(st.times)):
        A, _ = _deformation(disp[i], grid)
        f = lambda arr: SpectralField(grid, arr[i])  # noqa: E731
        c, m = lagrangian_residual(f(st.a), f(st.u), f(st.a_t), f(st.u_t), A, poisson_tol)
        r1, r2 = max(r1, c), max(r2, m)
    return {"continuity": r1, "momentum": r2, "max": max(r1, r2)}


def compare_with_eulerian(result: PicardResult, sim) -> dict:
    """Match the limit against an Eulerian run pulled back along its own particle map.

    ``sim`` must come from ``simulate(..., track_map=True)``; only stored
    times that coincide with the Picard grid are compared.
    """
    st, grid = result.final, result.grid
    idx = {round(float(t) / result.config.dt): i for i, t in enumerate(st.times)}
    sel = [(i, idx[round(float(t) / result.config.dt)]) for i, t in enumerate(sim.times)
           if abs(t / result.config.dt - round(t / result.config.dt)) < 1e-9
           and round(float(t) / result.config.dt) in idx]
    if not sel:
        raise ValueError("no common sample times")
    rep = equivalence_report(
        [sim.times[i] for i, _ in sel],
        [SpectralField(grid, sim.rho[i]) for i, _ in sel],
        [SpectralField(grid, sim.v[i]) for i, _ in sel],
        [sim.maps[i] for i, _ in sel],
        [SpectralField(grid, st.a[j]) for _, j in sel],
        [SpectralField(grid, st.u[j]) for _, j in sel],
    )
    rep["max_mismatch"] = max(rep["max_density_mismatch"], rep["max_velocity_mismatch"])
    return rep
