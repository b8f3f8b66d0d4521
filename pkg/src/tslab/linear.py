"""Closed-form solution of the linear compressible Stokes system on the torus.

The system is

    a_t + div u = h,        u_t - nu Lap u + grad K a = g,

with ``K`` the mean-zero inverse of ``-Lap``. After removing the heat part of
``u`` the divergence ``d`` of the remainder obeys, mode by mode,
``d'' + nu|k|^2 d' + d = forcing``. The same root pair drives the
first-order system for ``(a_k, i k.u_k)``, which is what the full solver
propagates. All Duhamel integrals are exact for piecewise-linear forcing.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import simpson, solve_ivp, trapezoid
from scipy.linalg import expm
from scipy.signal import lfilter

from .besov import BesovIndex, besov_norm_series
from .spectral import SpectralField, TorusGrid

RESONANCE_TOL = 1e-8

__all__ = [
    "ModeSolution",
    "SpectrumTable",
    "LinearSolution",
    "characteristic_roots",
    "roots",
    "mode_solution",
    "spectrum_report",
    "phi_functions",
    "homogeneous_basis",
    "solve_homogeneous_mode",
    "solve_forced_mode",
    "heat_lift",
    "solve_linear_system",
    "residuals",
    "lemma_ratio",
    "mode_oracle",
    "reference_forced_modes",
    "random_smooth_forcing",
]


# --- roots -------------------------------------------------------------------

def roots(k2, nu: float = 1.0):
    """Vectorized roots of ``lam^2 + nu k2 lam + 1`` and the resonance mask."""
    k2 = np.asarray(k2, dtype=float)
    kap = nu * k2
    disc = kap**2 - 4.0
    resonant = np.abs(disc) < RESONANCE_TOL
    sq = np.sqrt(np.abs(disc))
    with np.errstate(divide="ignore", invalid="ignore"):
        # real pair: the large root directly, the small one as its reciprocal
        lm_real = -(kap + sq) / 2.0
        lp_real = 1.0 / lm_real
    lp = np.where(disc > 0, lp_real, -kap / 2.0 + 0.5j * sq).astype(complex)
    lm = np.where(disc > 0, lm_real, -kap / 2.0 - 0.5j * sq).astype(complex)
    lp = np.where(resonant, -kap / 2.0, lp)
    lm = np.where(resonant, -kap / 2.0, lm)
    return lp, lm, resonant


def characteristic_roots(k, nu: float = 1.0) -> tuple[complex, complex, str]:
    """Roots for the wavevector ``k`` and the branch tag."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    k2 = float(np.sum(k**2))
    if k2 == 0:
        raise ValueError("the zero mode has no characteristic roots")
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    lp, lm, res = roots(k2, nu)
    return complex(lp), complex(lm), "resonant" if res else "generic"


@dataclass(frozen=True)
class ModeSolution:
    k: tuple
    nu: float
    lambda_plus: complex
    lambda_minus: complex
    A_k: complex
    B_k: complex
    branch: str

    @property
    def k2(self) -> float:
        return float(sum(x * x for x in self.k))


def mode_solution(k, nu: float = 1.0, a0k: complex = 0.0) -> ModeSolution:
    """Coefficients of ``d_k`` for data ``d(0) = 0``, ``d'(0) = a0k``.

    Generic: ``d = A e^{lp t} + B e^{lm t}``. Resonant: ``d = A e^{lt} + B t e^{lt}``.
    """
    lp, lm, branch = characteristic_roots(k, nu)
    if branch == "resonant":
        A, B = 0.0, complex(a0k)
    else:
        A = complex(a0k) / (lp - lm)
        B = -A
    return ModeSolution(tuple(int(x) for x in np.atleast_1d(k)), nu, lp, lm, A, B, branch)


# --- spectrum table ----------------------------------------------------------

@dataclass
class SpectrumTable:
    nu: float
    kmax: int
    dim: int
    k: np.ndarray
    k2: np.ndarray
    lambda_plus: np.ndarray
    lambda_minus: np.ndarray
    resonant: np.ndarray
    summary: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"k{i + 1}" for i in range(self.dim)]
                   + ["ksq", "re_lambda_plus", "im_lambda_plus", "re_lambda_minus", "im_lambda_minus", "branch"])
        for kv, k2, lp, lm, res in zip(self.k, self.k2, self.lambda_plus, self.lambda_minus, self.resonant):
            w.writerow([*map(int, kv), int(k2), *(repr(float(x)) for x in (lp.real, lp.imag, lm.real, lm.imag)),
                        "resonant" if res else "generic"])
        return buf.getvalue()


def _lattice(dim: int, kmax: int) -> np.ndarray:
    r = np.arange(-kmax, kmax + 1)
    pts = np.stack(np.meshgrid(*([r] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return pts[np.any(pts != 0, axis=1)]


def spectrum_report(nu: float = 1.0, kmax: int = 8, dim: int = 3, large_k2: float = 25.0) -> SpectrumTable:
    """Tabulate the roots over ``0 < |k|_inf <= kmax`` with summary statistics."""
    if kmax < 1:
        raise ValueError("kmax must be at least 1")
    k = _lattice(dim, kmax)
    k2 = np.sum(k**2, axis=1).astype(float)
    lp, lm, res = roots(k2, nu)
    gen = ~res
    sep = np.abs(lp - lm) / k2
    big = k2 >= large_k2
    scaled = np.abs(lp.real) * nu * k2
    i_min = int(np.argmin(np.abs(lp.real)))
    summary = {
        "modes": int(len(k2)),
        "resonant_modes": int(res.sum()),
        "separation_min": float(sep[gen].min()) if gen.any() else None,
        "separation_argmin_k2": float(k2[gen][np.argmin(sep[gen])]) if gen.any() else None,
        "vieta_product_max_error": float(np.max(np.abs(lp * lm - 1.0))),
        "vieta_sum_max_error": float(np.max(np.abs(lp + lm + nu * k2))),
        # |Re lp| ~ c / |k|^2 for large |k|; least-squares c against 1/nu
        "asymptote_fit": float(np.sum(np.abs(lp.real[big]) / k2[big]) / np.sum(1.0 / k2[big] ** 2))
        if big.any() else None,
        "asymptote_max_rel_dev": float(np.max(np.abs(scaled[big] - 1.0))) if big.any() else None,
        "min_abs_re_lambda_plus": float(np.abs(lp.real[i_min])),
        "min_attained_k2": float(k2[i_min]),
        "max_k2": float(k2.max()),
        "max_re_lambda": float(max(lp.real.max(), lm.real.max())),
    }
    return SpectrumTable(nu, kmax, dim, k, k2, lp, lm, res, summary)


# --- exponential-integrator helpers ------------------------------------------

def phi_functions(z, order: int = 3):
    """``phi_1 .. phi_order`` of ``z`` (complex), stable at the origin."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1.0
    out = []
    zs = np.where(small, z, 0.0)
    zl = np.where(small, 1.0, z)
    prev = np.expm1(zl) / zl
    for j in range(1, order + 1):
        series = sum(zs**n / math.factorial(n + j) for n in range(20))
        if j > 1:
            prev = (prev - 1.0 / math.factorial(j - 1)) / zl
        out.append(np.where(small, series, prev))
    return out


def _sinhc(x):
    x = np.asarray(x, dtype=complex)
    small = np.abs(x) < 1e-3
    safe = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(small, 1.0 + x2 / 6.0 + x2 * x2 / 120.0, np.sinh(safe) / safe)


def homogeneous_basis(lp, lm, kap, t):
    """``G, G', H, H'`` for ``d'' + kap d' + d = 0``.

    ``G(0) = 0, G'(0) = 1`` and ``H(0) = 1, H'(0) = 0``. Broadcasts over
    modes (trailing axis) and times (leading axis).
    """
    lp, lm = np.asarray(lp, dtype=complex), np.asarray(lm, dtype=complex)
    kap = np.asarray(kap, dtype=float)
    t = np.asarray(t, dtype=float)
    lbar = -kap / 2.0
    delta = lp - lm
    half = delta * t / 2.0
    # widely separated real roots: cosh/sinh would overflow, use exponentials
    far = (np.abs(half.real) > 1.0) & (delta.imag == 0)
    tame = np.where(far, 0.0, half)
    e = np.exp(lbar * t)
    S = _sinhc(tame)
    G = e * t * S
    Gp = e * (np.cosh(tame) + lbar * t * S)
    if np.any(far):
        dsafe = np.where(delta == 0, 1.0, delta)
        ep, em = np.exp(lp * t), np.exp(lm * t)
        G = np.where(far, (ep - em) / dsafe, G)
        Gp = np.where(far, (lp * ep - lm * em) / dsafe, Gp)
    H = Gp + kap * G
    return G, Gp, H, -G


def solve_homogeneous_mode(ms: ModeSolution, a0_k: complex, u0div_k: complex = 0.0, times=None):
    """``d_k(t)`` with ``d(0) = u0div_k`` and ``d'(0) = a0_k``."""
    t = np.asarray(times, dtype=float)
    kap = ms.nu * ms.k2
    G, Gp, H, Hp = homogeneous_basis(ms.lambda_plus, ms.lambda_minus, kap, t)
    return u0div_k * H + a0_k * G


def _check_times(times) -> tuple[np.ndarray, float]:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or len(t) < 2:
        raise ValueError("need at least two sample times")
    dt = np.diff(t)
    if np.any(dt <= 0) or np.max(np.abs(dt - dt[0])) > 1e-9 * max(1.0, abs(t[-1])):
        raise ValueError("times must be uniform and increasing")
    if t[0] != 0:
        raise ValueError("times must start at 0")
    return t, float(dt[0])


def _recur(decay: complex, b: np.ndarray) -> np.ndarray:
    """``y_0 = 0``, ``y_{n+1} = decay * y_n + b_n`` along axis 0."""
    x = np.zeros((b.shape[0] + 1,) + b.shape[1:], dtype=complex)
    x[1:] = b
    return lfilter([1.0], [1.0, -decay], x, axis=0)


def _duhamel_group(lp: complex, lm: complex, resonant: bool, f: np.ndarray, dt: float):
    """``F, F', F''`` with ``F = int_0^t G(t-s) f(s) ds`` for one root pair.

    ``f`` has shape ``(T, M)``: M modes sharing these roots.
    """
    fn, fn1 = f[:-1], f[1:]
    if resonant:
        z = lp * dt
        p1, p2, p3 = phi_functions(z)
        e = np.exp(z)
        K0 = _recur(e, dt * ((p1 - p2) * fn + p2 * fn1))
        q = p1 - 2 * p2 + 2 * p3
        local = dt**2 * (q * fn + ((p1 - p2) - q) * fn1)
        K1 = _recur(e, e * dt * K0[:-1] + local)
        F = K1
        Fp = K0 + lp * K1
        Fpp = f + 2 * lp * K0 + lp**2 * K1
        return F, Fp, Fpp
    Js = []
    for lam in (lp, lm):
        z = lam * dt
        p1, p2 = phi_functions(z, order=2)
        Js.append(_recur(np.exp(z), dt * ((p1 - p2) * fn + p2 * fn1)))
    Jp, Jm = Js
    delta = lp - lm
    F = (Jp - Jm) / delta
    Fp = (lp * Jp - lm * Jm) / delta
    Fpp = f + (lp**2 * Jp - lm**2 * Jm) / delta
    return F, Fp, Fpp


def _forced(lp, lm, resonant: bool, kap: float, f: np.ndarray, t: np.ndarray, dt: float, a0):
    """``d, d', d''`` for ``d'' + kap d' + d = f``, ``d(0) = 0``, ``d'(0) = a0``."""
    F, Fp, Fpp = _duhamel_group(lp, lm, resonant, f, dt)
    G, Gp, _, _ = homogeneous_basis(lp, lm, kap, t[:, None])
    a0 = np.broadcast_to(np.asarray(a0, dtype=complex).reshape(-1), (f.shape[1],))
    d = a0 * G + F
    dp = a0 * Gp + Fp
    # G'' = -kap G' - G; the forced part keeps its exact Duhamel derivative
    dpp = a0 * (-kap * Gp - G) + Fpp
    return d, dp, dpp


def solve_forced_mode(ms: ModeSolution, h_k, times, a0_k: complex = 0.0, derivatives: bool = False):
    """``d_k`` solving ``d'' + nu|k|^2 d' + d = -h_k``, ``d(0) = 0``, ``d'(0) = a0_k``.

    ``h_k`` holds samples on ``times`` (a trailing axis may carry several
    modes with the same ``|k|``). Forcing is interpolated linearly between
    samples and integrated exactly. With ``derivatives=True`` also returns
    ``d'`` and ``d''``.
    """
    t, dt = _check_times(times)
    h = np.asarray(h_k, dtype=complex)
    if h.shape[0] != len(t):
        raise ValueError("forcing samples do not match the time grid")
    f = -h.reshape(len(t), -1)
    out = _forced(ms.lambda_plus, ms.lambda_minus, ms.branch == "resonant", ms.nu * ms.k2, f, t, dt, a0_k)
    out = tuple(x.reshape(h.shape) for x in out)
    return out if derivatives else out[0]


# --- heat part -----------------------------------------------------------------

def _sample(forcing, times, grid: TorusGrid, components: int) -> np.ndarray:
    """Coefficient samples ``(T, c, N, ..)`` from an array, a callable, or None."""
    T = len(times)
    shape = (T, components) + grid.shape
    if forcing is None:
        return np.zeros(shape, dtype=complex)
    if callable(forcing):
        out = np.empty(shape, dtype=complex)
        for i, t in enumerate(times):
            out[i] = forcing(float(t)).coeffs
        return out
    arr = np.asarray(forcing, dtype=complex)
    if arr.shape != shape:
        raise ValueError(f"forcing has shape {arr.shape}, expected {shape}")
    return arr


def heat_lift(u0: SpectralField, g, nu: float, times) -> tuple[np.ndarray, np.ndarray]:
    """Heat flow ``u_t - nu Lap u = g`` from ``u0``; returns coefficient series ``(u, u_t)``."""
    t, dt = _check_times(times)
    grid = u0.grid
    c = u0.components
    gs = _sample(g, t, grid, c)
    kap = (nu * grid.k2).ravel()
    M = kap.size
    flat_g = gs.reshape(len(t), c, M)
    z = -kap * dt
    p1, p2 = phi_functions(z, order=2)
    e = np.exp(z)
    out = np.empty((len(t), c, M), dtype=complex)
    u = u0.coeffs.reshape(c, M).astype(complex)
    out[0] = u
    w0 = dt * (p1 - p2)
    w1 = dt * p2
    for n in range(len(t) - 1):
        u = e * u + w0 * flat_g[n] + w1 * flat_g[n + 1]
        out[n + 1] = u
    ut = -kap * out + flat_g
    shp = (len(t), c) + grid.shape
    return out.reshape(shp), ut.reshape(shp)


# --- the full system -----------------------------------------------------------

@dataclass
class LinearSolution:
    grid: TorusGrid
    nu: float
    times: np.ndarray
    a: np.ndarray
    u: np.ndarray
    d: np.ndarray
    a_t: np.ndarray
    u_t: np.ndarray
    h: np.ndarray
    g: np.ndarray
    a0: SpectralField
    u0: SpectralField

    def field_at(self, name: str, i: int) -> SpectralField:
        return SpectralField(self.grid, getattr(self, name)[i])

    def mode_norms(self) -> dict:
        vol = self.grid.volume
        return {
            "a_l2": np.sqrt(vol * np.sum(np.abs(self.a) ** 2, axis=tuple(range(1, self.a.ndim)))),
            "u_l2": np.sqrt(vol * np.sum(np.abs(self.u) ** 2, axis=tuple(range(1, self.u.ndim)))),
            "d_l2": np.sqrt(vol * np.sum(np.abs(self.d) ** 2, axis=tuple(range(1, self.d.ndim)))),
        }

    def linear_energy(self) -> np.ndarray:
        """``(||u||^2 + ||a - {a}||_{H^-1}^2) / 2`` at every sample time."""
        vol = self.grid.volume
        ax = tuple(range(1, self.u.ndim))
        ke = np.sum(np.abs(self.u) ** 2, axis=ax)
        pe = np.sum(np.abs(self.a[:, 0]) ** 2 * self.grid.inv_k2, axis=tuple(range(1, self.a.ndim - 1)))
        return 0.5 * vol * (ke + pe)

    def to_csv(self) -> str:
        norms = self.mode_norms()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "a_l2", "u_l2", "d_l2", "a_mean"])
        for i, t in enumerate(self.times):
            w.writerow([repr(float(t)), repr(float(norms["a_l2"][i])), repr(float(norms["u_l2"][i])),
                        repr(float(norms["d_l2"][i])), repr(float(self.a[i, 0].flat[0].real))])
        return buf.getvalue()


def _ik(grid: TorusGrid) -> np.ndarray:
    return np.where(grid.nyquist, 0.0, 1j * grid.k)


def _strip_nyquist(c: np.ndarray, grid: TorusGrid) -> np.ndarray:
    return np.where(np.any(grid.nyquist, axis=0), 0.0, c)


def _mean_integral(f0: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoid from 0, exact for piecewise-linear samples."""
    return np.concatenate([np.zeros((1,) + f0.shape[1:]), np.cumsum(0.5 * dt * (f0[1:] + f0[:-1]), axis=0)])


def solve_linear_system(
    a0: SpectralField,
    u0: SpectralField,
    h=None,
    g=None,
    nu: float = 1.0,
    times=None,
    method: str = "exact",
) -> LinearSolution:
    """Solve the linear Stokes system on ``times``.

    ``h`` and ``g`` are coefficient samples ``(T, c, N, ..)``, callables
    returning a SpectralField, or None; they are interpolated linearly in
    time. Coefficients on the Nyquist planes are discarded.

    ``method="exact"`` evolves each mode's pair ``(a_k, i k.u_k)`` with the
    closed-form propagator and the transverse part of ``u`` by the heat
    quadrature, which is exact for piecewise-linear forcing.
    ``method="lift"`` follows the textbook route: heat-lift ``u``, solve for
    ``d`` with ``h - div u~``, then recover ``u`` from the heat equation
    forced by ``g - grad K a``. Its lifted forcings are not piecewise linear,
    so it is second order in the sampling step.
    """
    if method not in ("exact", "lift"):
        raise ValueError(f"unknown method {method!r}")
    t, dt = _check_times(times)
    grid = a0.grid
    dim = grid.dim
    if a0.components != 1 or u0.components != dim or u0.grid != grid:
        raise ValueError("a0 must be scalar and u0 a d-vector on the same grid")
    hs = _strip_nyquist(_sample(h, t, grid, 1), grid)
    gs = _strip_nyquist(_sample(g, t, grid, dim), grid)
    a0 = SpectralField(grid, _strip_nyquist(a0.coeffs, grid))
    u0 = SpectralField(grid, _strip_nyquist(u0.coeffs, grid))
    solver = _solve_exact if method == "exact" else _solve_lift
    a, u, d, a_t, u_t = solver(a0, u0, hs, gs, nu, t, dt)
    return LinearSolution(grid, nu, t, a, u, d, a_t, u_t, hs, gs, a0, u0)


def _groups(grid: TorusGrid):
    """Mode indices sharing one nonzero ``|k|^2``."""
    k2 = grid.k2.ravel()
    uniq, inverse = np.unique(k2, return_inverse=True)
    for gi, val in enumerate(uniq):
        if val > 0:
            yield float(val), np.nonzero(inverse == gi)[0]


def _solve_exact(a0, u0, hs, gs, nu, t, dt):
    grid = a0.grid
    dim = grid.dim
    T, M = len(t), grid.n**dim
    ik = _ik(grid)
    kap = nu * grid.k2.ravel()
    ikf = ik.reshape(dim, M)
    inv_k2 = grid.inv_k2.ravel()

    # transverse projection of u0 and g, then a plain heat flow
    def transverse(c):
        flat = c.reshape(c.shape[:-dim] + (M,))
        lon = np.sum(flat * ikf, axis=-2, keepdims=True)
        return (flat + ikf * inv_k2 * lon).reshape(c.shape)

    uT, uT_t = heat_lift(SpectralField(grid, transverse(u0.coeffs)), transverse(gs), nu, t)

    h = hs.reshape(T, M)
    q = np.sum(gs.reshape(T, dim, M) * ikf, axis=1)
    a0f = a0.coeffs.reshape(M)
    psi0 = np.sum(u0.coeffs.reshape(dim, M) * ikf, axis=0)
    a = np.zeros((T, M), dtype=complex)
    psi = np.zeros_like(a)
    for val, cols in _groups(grid):
        lp, lm, res = roots(val, nu)
        lp, lm, res = complex(lp), complex(lm), bool(res)
        kv = nu * val
        m = len(cols)
        F, Fp, _ = _duhamel_group(lp, lm, res, np.concatenate([h[:, cols], q[:, cols]], axis=1), dt)
        Gh, Gph, Gq, Gpq = F[:, :m], Fp[:, :m], F[:, m:], Fp[:, m:]
        G, Gp, H, _ = homogeneous_basis(lp, lm, kv, t[:, None])
        # propagator of (a, psi)' = [[0, -1], [1, -kap]] (a, psi) + (h, q)
        a[:, cols] = a0f[cols] * H - psi0[cols] * G + (Gph + kv * Gh) - Gq
        psi[:, cols] = a0f[cols] * G + psi0[cols] * Gp + Gh + Gpq
    a_t = -psi + h
    psi_t = -kap * psi + a + q
    a[:, 0] = a0f[0] + _mean_integral(h[:, 0], dt)
    a_t[:, 0] = h[:, 0]

    lon = (-ikf * inv_k2)[None]
    u = uT.reshape(T, dim, M) + lon * psi[:, None]
    u_t = uT_t.reshape(T, dim, M) + lon * psi_t[:, None]
    shp = (T, 1) + grid.shape
    return (a.reshape(shp), u.reshape((T, dim) + grid.shape), psi.reshape(shp), a_t.reshape(shp),
            u_t.reshape((T, dim) + grid.shape))


def _solve_lift(a0, u0, hs, gs, nu, t, dt):
    grid = a0.grid
    dim = grid.dim
    T, M = len(t), grid.n**dim
    ik = _ik(grid)
    kap = nu * grid.k2.ravel()
    lifted, _ = heat_lift(u0, gs, nu, t)
    h_tilde = (hs - np.sum(lifted * ik[None], axis=1, keepdims=True)).reshape(T, M)
    a0f = a0.coeffs.reshape(M)
    d = np.zeros((T, M), dtype=complex)
    dp = np.zeros_like(d)
    dpp = np.zeros_like(d)
    for val, cols in _groups(grid):
        lp, lm, res = roots(val, nu)
        # taking div of the momentum equation gives d'' + kap d' + d = +h_tilde
        d[:, cols], dp[:, cols], dpp[:, cols] = _forced(
            complex(lp), complex(lm), bool(res), nu * val, h_tilde[:, cols], t, dt, a0f[cols])
    a = dp + kap * d
    a_t = dpp + kap * dp
    mean_h = hs.reshape(T, M)[:, 0]
    a[:, 0] = a0f[0] + _mean_integral(mean_h, dt)
    a_t[:, 0] = mean_h
    shp = (T, 1) + grid.shape
    a = a.reshape(shp)
    force = gs - (ik * grid.inv_k2)[None] * a
    u, u_t = heat_lift(u0, force, nu, t)
    return a, u, d.reshape(shp), a_t.reshape(shp), u_t


def residuals(sol: LinearSolution) -> tuple[np.ndarray, np.ndarray]:
    """``L^2`` norms of both equations' residuals at each sample time."""
    grid = sol.grid
    ik = _ik(grid)
    div_u = np.sum(sol.u * ik[None], axis=1, keepdims=True)
    r1 = sol.a_t + div_u - sol.h
    grad_ka = ik[None] * grid.inv_k2 * sol.a
    r2 = sol.u_t + sol.nu * grid.k2 * sol.u + grad_ka - sol.g
    vol = grid.volume
    n1 = np.sqrt(vol * np.sum(np.abs(r1) ** 2, axis=tuple(range(1, r1.ndim))))
    n2 = np.sqrt(vol * np.sum(np.abs(r2) ** 2, axis=tuple(range(1, r2.ndim))))
    return n1, n2


def _time_integral(y: np.ndarray, t: np.ndarray) -> float:
    return float(simpson(y, x=t)) if len(t) % 2 == 1 else float(trapezoid(y, t))


def lemma_ratio(sol: LinearSolution, s: float = 0.5, p: float = 2.0) -> dict:
    """Left side of the linear estimate over its right side, on the finite horizon."""
    grid, t = sol.grid, sol.times

    def series(arr, reg):
        return besov_norm_series(arr, grid, BesovIndex(reg, p, 1))

    zero = (slice(None), slice(None)) + (0,) * grid.dim
    a_osc = sol.a.copy()
    a_osc[zero] = 0
    u_osc = sol.u.copy()
    u_osc[zero] = 0
    lhs_terms = {
        "a_Linf_s+1": float(series(sol.a, s + 1).max()),
        "a_t_L1_s+1": _time_integral(series(sol.a_t, s + 1), t),
        "a_osc_L1_s-1": _time_integral(series(a_osc, s - 1), t),
        "u_Linf_s": float(series(sol.u, s).max()),
        "u_t_L1_s": _time_integral(series(sol.u_t, s), t),
        "u_osc_L1_s+2": _time_integral(series(u_osc, s + 2), t),
    }
    rhs_terms = {
        "a0_s+1": float(series(sol.a0.coeffs[None], s + 1)[0]),
        "u0_s": float(series(sol.u0.coeffs[None], s)[0]),
        "h_L1_s+1": _time_integral(series(sol.h, s + 1), t),
        "g_L1_s": _time_integral(series(sol.g, s), t),
    }
    lhs, rhs = sum(lhs_terms.values()), sum(rhs_terms.values())
    return {"lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else float("nan"),
            "lhs_terms": lhs_terms, "rhs_terms": rhs_terms, "s": s, "p": p}


# --- independent oracle ----------------------------------------------------------

def mode_oracle(
    k,
    nu: float,
    a0k: complex,
    u0k,
    hk: np.ndarray,
    gk: np.ndarray,
    times,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode solution by matrix exponentials of the first-order system.

    The state ``(a_k, u_k)`` obeys ``y' = L y + f`` with piecewise-linear
    ``f``; each step exponentiates the augmented ``(d + 3)``-square matrix.
    Shares no code with the closed-form path.
    """
    t, dt = _check_times(times)
    k = np.asarray(k, dtype=float)
    dim = k.size
    k2 = float(k @ k)
    L = np.zeros((dim + 1, dim + 1), dtype=complex)
    if k2 > 0:
        L[0, 1:] = -1j * k
        L[1:, 0] = -1j * k / k2
        L[1:, 1:] = -nu * k2 * np.eye(dim)
    n = dim + 1
    y = np.concatenate([[a0k], np.asarray(u0k, dtype=complex)])
    f = np.concatenate([np.asarray(hk, complex).reshape(len(t), 1), np.asarray(gk, complex).reshape(len(t), dim)], 1)
    out = np.empty((len(t), n), dtype=complex)
    out[0] = y
    for i in range(len(t) - 1):
        aug = np.zeros((n + 2, n + 2), dtype=complex)
        aug[:n, :n] = L * dt
        aug[:n, n] = f[i] * dt
        aug[:n, n + 1] = (f[i + 1] - f[i]) * dt
        aug[n + 1, n] = 1.0  # in step-scaled time: sigma0 = 1, sigma1 = s
        E = expm(aug)
        y = E[:n, :n] @ y + E[:n, n]
        out[i + 1] = y
    return out[:, 0], out[:, 1:]


def reference_forced_modes(k2, nu: float, forcings, times, a0=0.0, rtol: float = 1e-12, atol: float = 1e-14):
    """Adaptive Runge-Kutta (DOP853) reference for ``d'' + nu k2 d' + d = -h``.

    All modes are stacked into one system so the integrator runs once.
    ``forcings`` is either one callable returning all ``M`` values at time
    ``t`` or a sequence of scalar callables. Returns ``d`` with shape ``(T, M)``.
    """
    kap = nu * np.asarray(k2, dtype=float).reshape(-1)
    m = kap.size
    if not callable(forcings):
        if len(forcings) != m:
            raise ValueError("one forcing per mode is required")
        scalar = list(forcings)
        forcings = lambda s: np.array([f(s) for f in scalar], dtype=complex)  # noqa: E731
    t = np.asarray(times, dtype=float)
    y0 = np.concatenate([np.zeros(m, complex), np.broadcast_to(np.asarray(a0, complex), (m,))])

    def rhs(s, y):
        h = np.asarray(forcings(s), dtype=complex)
        d, dp = y[:m], y[m:]
        return np.concatenate([dp, -kap * dp - d - h])

    sol = solve_ivp(rhs, (t[0], t[-1]), y0, method="DOP853", rtol=rtol, atol=atol, t_eval=t)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y[:m].T


def random_smooth_forcing(
    rng: np.random.Generator, n_terms: int = 3, omega_max: float = 1.0, modes: int | None = None
) -> Callable:
    """Complex forcing ``t -> sum_j c_j exp(i w_j t - b_j t)``, smooth and bounded.

    With ``modes=M`` the callable returns ``M`` independent forcings, with
    shape ``t.shape + (M,)``.
    """
    shape = (n_terms,) if modes is None else (modes, n_terms)
    c = (rng.normal(size=shape) + 1j * rng.normal(size=shape)) / np.sqrt(2 * n_terms)
    w = rng.uniform(-omega_max, omega_max, shape)
    b = rng.uniform(0.0, 0.5, shape)

    def forcing(t):
        tt = np.asarray(t, float)[(...,) + (None,) * len(shape)]
        return np.sum(c * np.exp((1j * w - b) * tt), axis=-1)

    return forcing
