"""Pseudo-spectral time stepping of the pressureless model and the aggregation equation.

Eulerian form, with ``K`` the mean-zero inverse of ``-Lap``:

    rho_t = -div(rho v)
    v_t   = Lap v + [-v.grad v + (1/rho - 1) Lap v - s grad K rho]

where ``s = +1`` (repulsive) or ``-1`` (attractive). ``Lap v`` is integrated
exactly per mode; the bracket is explicit with a two-stage scheme.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .besov import BesovIndex, besov_norm
from .diagnostics import DiagnosticsTracker
from .lagrangian import DeformationState, advance_map_eulerian
from .linear import phi_functions
from .spectral import FluidState, SpectralField, TorusGrid, evaluate, pointwise_product, random_field, transform

log = logging.getLogger(__name__)

__all__ = [
    "SimConfig",
    "SimulationAbort",
    "PositivityError",
    "CFLCollapseError",
    "SimResult",
    "rhs_eulerian",
    "explicit_terms",
    "Stepper",
    "step",
    "simulate",
    "aggregation_rhs",
    "aggregation_step",
    "aggregation_simulate",
    "perturbed_state",
    "SIGNS",
    "SCHEMES",
]

SIGNS = {"repulsive": 1.0, "attractive": -1.0}
SCHEMES = ("etdrk2", "ifrk2")


@dataclass(frozen=True)
class SimConfig:
    dim: int = 3
    n: int = 16
    dt: float = 0.01
    t_end: float = 10.0
    cfl: float = 0.5
    rho_min: float = 0.05
    sign: str = "repulsive"
    scheme: str = "etdrk2"
    sample_every: int = 10
    p: float = 2.0
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0 or self.rho_min <= 0:
            raise ValueError("dt, t_end and rho_min must be positive")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must lie in (0, 1]")
        if self.sign not in SIGNS:
            raise ValueError(f"sign must be one of {sorted(SIGNS)}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.sample_every < 1:
            raise ValueError("sample_every must be at least 1")

    @property
    def grid(self) -> TorusGrid:
        return TorusGrid(self.dim, self.n)

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))


class SimulationAbort(RuntimeError):
    """Integration stopped; ``state`` holds the last accepted state."""

    def __init__(self, message: str, state: FluidState | None = None):
        super().__init__(message)
        self.state = state


class PositivityError(SimulationAbort):
    pass


class CFLCollapseError(SimulationAbort):
    pass


# --- right-hand sides ----------------------------------------------------------

def _axes(grid: TorusGrid):
    return tuple(range(-grid.dim, 0))


def _vals(c: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Values of dealiased coefficients."""
    return sfft.ifftn(c * grid.dealias_mask, axes=_axes(grid), norm="forward").real


def _coeffs(v: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return sfft.fftn(v, axes=_axes(grid), norm="forward") * grid.dealias_mask


def _check_positive(rho_vals: np.ndarray, rho_min: float, state: FluidState | None):
    m = float(rho_vals.min())
    if m <= rho_min:
        raise PositivityError(f"density fell to {m:.4g} (floor {rho_min})", state)


def explicit_terms(rho: np.ndarray, v: np.ndarray, grid: TorusGrid, sign: float, rho_min: float = 0.0,
                   state: FluidState | None = None):
    """Explicit parts ``(rho_t, N_v)`` as coefficient arrays (dealiased)."""
    ik = np.where(grid.nyquist, 0.0, 1j * grid.k)
    rv = _vals(rho, grid)
    if rho_min > 0:
        _check_positive(rv[0], rho_min, state)
    vv = _vals(v, grid)
    # continuity in divergence form
    flux = _coeffs(rv * vv, grid)
    rho_t = -np.sum(ik * flux, axis=0, keepdims=True)
    # v . grad v
    grad = _vals(v[:, None] * ik[None], grid)  # [i, j] = d_j v_i
    adv = _coeffs(np.einsum("j...,ij...->i...", vv, grad), grid)
    lap = -grid.k2 * v
    visc = _coeffs((1.0 / rv - 1.0) * _vals(lap, grid), grid)
    force = ik * (rho * grid.inv_k2)
    return rho_t, -adv + visc - sign * force


def rhs_eulerian(state: FluidState, sign: str | float = "repulsive", rho_min: float = 0.0):
    """Full time derivatives ``(rho_t, v_t)`` as SpectralFields."""
    s = SIGNS[sign] if isinstance(sign, str) else float(sign)
    g = state.grid
    rho_t, nv = explicit_terms(state.rho.coeffs, state.v.coeffs, g, s, rho_min, state)
    return SpectralField(g, rho_t), SpectralField(g, nv - g.k2 * state.v.coeffs)


# --- stepping ---------------------------------------------------------------------

class Stepper:
    """Two-stage exponential stepper for a fixed grid, sign and step size.

    ``etdrk2``: exponential time differencing (phi_1, phi_2 weights), exact
    for the linear heat part and for constant forcing. ``ifrk2``: Heun's
    method in the integrating-factor variable ``e^{-t Lap} v``.
    """

    def __init__(self, grid: TorusGrid, dt: float, sign: str = "repulsive", scheme: str = "etdrk2",
                 rho_min: float = 0.05):
        self.grid, self.dt, self.scheme, self.rho_min = grid, dt, scheme, rho_min
        self.sign = SIGNS[sign]
        z = -grid.k2 * dt
        self.e = np.exp(z)
        p1, p2 = phi_functions(z, order=2)
        self.p1, self.p2 = p1.real, p2.real

    def _terms(self, rho, v, state):
        return explicit_terms(rho, v, self.grid, self.sign, self.rho_min, state)

    def __call__(self, rho: np.ndarray, v: np.ndarray, state: FluidState | None = None):
        dt, e = self.dt, self.e
        r0, n0 = self._terms(rho, v, state)
        if self.scheme == "etdrk2":
            rho1 = rho + dt * r0
            v1 = e * v + dt * self.p1 * n0
            r1, n1 = self._terms(rho1, v1, state)
            return rho + 0.5 * dt * (r0 + r1), v1 + dt * self.p2 * (n1 - n0)
        rho1 = rho + dt * r0
        v1 = e * (v + dt * n0)
        r1, n1 = self._terms(rho1, v1, state)
        return rho + 0.5 * dt * (r0 + r1), e * v + 0.5 * dt * (e * n0 + n1)


def _sup_speed(v: np.ndarray, grid: TorusGrid) -> float:
    return float(np.sqrt(np.sum(_vals(v, grid) ** 2, axis=0)).max())


def _substeps(v: np.ndarray, grid: TorusGrid, dt: float, cfl: float, state=None) -> int:
    dt_eff = min(dt, cfl * grid.dx / (_sup_speed(v, grid) + 1e-12))
    if dt_eff < 1e-10:
        raise CFLCollapseError(f"CFL step collapsed to {dt_eff:.3g}", state)
    return max(1, math.ceil(dt / dt_eff - 1e-12))


def _mean_check(rho: np.ndarray, grid: TorusGrid, state):
    drift = abs(rho[(0,) + (0,) * grid.dim].real - 1.0)
    if drift >= 1e-12:
        raise SimulationAbort(f"mean density drifted by {drift:.3g}", state)


def step(state: FluidState, config: SimConfig, _cache: dict | None = None) -> FluidState:
    """Advance by ``config.dt``, splitting into CFL-limited substeps when needed."""
    g = state.grid
    n_sub = _substeps(state.v.coeffs, g, config.dt, config.cfl, state)
    h = config.dt / n_sub
    cache = {} if _cache is None else _cache
    key = (h, config.sign, config.scheme)
    if key not in cache:
        cache[key] = Stepper(g, h, config.sign, config.scheme, config.rho_min)
    stepper = cache[key]
    rho, v = state.rho.coeffs, state.v.coeffs
    for _ in range(n_sub):
        rho, v = stepper(rho, v, state)
    _mean_check(rho, g, state)
    return FluidState(SpectralField(g, rho), SpectralField(g, v), state.t + config.dt)


@dataclass
class SimResult:
    config: SimConfig
    times: np.ndarray
    rho: np.ndarray
    v: np.ndarray
    records: list
    step_times: np.ndarray
    step_energy: np.ndarray
    step_dissipation: np.ndarray
    step_mass: np.ndarray
    step_momentum: np.ndarray
    aborted: bool = False
    abort_reason: str = ""
    maps: list = field(default_factory=list)
    lagrangian_u: list = field(default_factory=list)

    def state_at(self, i: int) -> FluidState:
        g = self.config.grid
        return FluidState(SpectralField(g, self.rho[i]), SpectralField(g, self.v[i]), float(self.times[i]))

    @property
    def final(self) -> FluidState:
        return self.state_at(len(self.times) - 1)

    def energy_increments(self) -> np.ndarray:
        return np.diff(self.step_energy)

    def energy_identity_defect(self) -> float:
        """``max_t |E(t) - E(0) + int_0^t |grad v|^2|`` with a trapezoid in time."""
        t, d = self.step_times, self.step_dissipation
        cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (d[1:] + d[:-1]))])
        return float(np.max(np.abs(self.step_energy - self.step_energy[0] + cum)))


def simulate(initial: FluidState, config: SimConfig, track_map: bool = False,
             store_every: int | None = None) -> SimResult:
    """Run to ``t_end`` or until an abort; diagnostics every ``sample_every`` steps.

    Coefficients are stored at the sample times (or every ``store_every``
    steps), plus the last good state of an aborted run. With ``track_map`` the particle map is advanced alongside and
    kept at the stored times.
    """
    g = initial.grid
    if (g.dim, g.n) != (config.dim, config.n):
        raise ValueError("initial state does not match the configured grid")
    store_every = store_every or config.sample_every
    tracker = DiagnosticsTracker(g, config.p)
    state = initial
    mp = DeformationState.identity(g) if track_map else None
    cache: dict = {}
    times, rhos, vs, records, maps, lag_u = [], [], [], [], [], []
    step_t, step_e, step_d, step_m, step_p = [], [], [], [], []

    def per_step(st: FluidState):
        q = tracker.step_quantities(st)
        step_t.append(st.t)
        step_e.append(q["energy"])
        step_d.append(q["dissipation"])
        step_m.append(q["mass"])
        step_p.append(q["momentum"])

    def store(st: FluidState, n: int, force: bool = False):
        if force or n % store_every == 0:
            times.append(st.t)
            rhos.append(st.rho.coeffs)
            vs.append(st.v.coeffs)
            if mp is not None:
                maps.append(mp)
                lag_u.append(transform(evaluate(st.v, mp.positions()).reshape((g.dim,) + g.shape), g))
        if n % config.sample_every == 0 and not force:
            _, v_t = rhs_eulerian(st, config.sign)
            records.append(tracker.sample(st, v_t))

    aborted, reason = False, ""
    per_step(state)
    tracker.advance(state, 0.0)
    store(state, 0)
    for n in range(1, config.steps + 1):
        try:
            new = step(state, config, cache)
        except SimulationAbort as exc:
            aborted, reason = True, str(exc)
            log.info("run aborted at t=%.4g: %s", state.t, exc)
            if times[-1] != state.t:
                store(state, n - 1, force=True)  # keep the last good state
            break
        if mp is not None:
            mp, _ = advance_map_eulerian(mp, state.v, config.dt, new.v)
        state = new
        per_step(state)
        tracker.advance(state, config.dt)
        store(state, n)
    return SimResult(config, np.array(times), np.array(rhos), np.array(vs), records, np.array(step_t),
                     np.array(step_e), np.array(step_d), np.array(step_m), np.array(step_p), aborted, reason,
                     maps, lag_u)


def perturbed_state(grid: TorusGrid, eps: float, p: float = 2.0, seed: int = 0, kmax: int = 2) -> FluidState:
    """Seeded smooth perturbation of the ground state with initial budget ``eps``.

    The budget is ``|rho - 1|_{B^{d/p}_{p,1}} + |v|_{B^{d/p-1}_{p,1}}``; the
    velocity is shifted so the total momentum vanishes.
    """
    rng = np.random.default_rng(seed)
    a = random_field(grid, rng, kmax, decay=1.0)
    v = random_field(grid, rng, kmax, components=grid.dim, decay=1.0)
    s = grid.dim / p
    base = besov_norm(a, BesovIndex(s, p, 1)) + besov_norm(v, BesovIndex(s - 1, p, 1))
    if base == 0 or eps == 0:
        return FluidState.ground(grid)
    a, v = a * (eps / base), v * (eps / base)
    rho = a + 1.0
    # remove total momentum: int rho (v - c) = 0
    mom = pointwise_product(rho, v).mean()
    v = v - mom
    return FluidState(rho, v)


# --- aggregation equation -----------------------------------------------------------

def aggregation_rhs(rho: SpectralField, sign: float = 1.0) -> SpectralField:
    """``(-Lap)^{-1} div(rho grad K rho)`` with dealiased products."""
    g = rho.grid
    ik = np.where(g.nyquist, 0.0, 1j * g.k)
    flux = _coeffs(_vals(rho.coeffs, g) * _vals(ik * (rho.coeffs * g.inv_k2), g), g)
    div = np.sum(ik * flux, axis=0, keepdims=True)
    return SpectralField(g, sign * div * g.inv_k2)


def aggregation_step(rho: SpectralField, dt: float, rho_min: float = 0.05) -> SpectralField:
    """Heun step; aborts if the density falls to ``rho_min``."""
    _check_positive(rho.values(), rho_min, None)
    k1 = aggregation_rhs(rho)
    mid = rho + k1 * dt
    k2 = aggregation_rhs(mid)
    return rho + (k1 + k2) * (0.5 * dt)


def aggregation_simulate(rho: SpectralField, dt: float, t_end: float, rho_min: float = 0.05,
                         every: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Trajectory ``(times, coefficient series)`` of the aggregation equation."""
    if abs(rho.mean()[0] - 1.0) > 1e-12:
        raise ValueError("density must have unit mean")
    steps = int(round(t_end / dt))
    times, series = [0.0], [rho.coeffs]
    for n in range(1, steps + 1):
        rho = aggregation_step(rho, dt, rho_min)
        if n % every == 0:
            times.append(n * dt)
            series.append(rho.coeffs)
    return np.array(times), np.array(series)

