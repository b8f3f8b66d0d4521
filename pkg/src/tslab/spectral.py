"""Truncated Fourier fields on the periodic box [0, 2pi)^d.

Coefficients follow the normalized convention

    u_k = (2 pi)^-d  \\int u(x) e^{-i k.x} dx,      u(x) = sum_k u_k e^{i k.x},

and are stored in FFT index order with a leading component axis, so a field
with ``c`` components on an ``N^d`` grid has a coefficient array of shape
``(c, N, ..., N)``. The Nyquist index ``N/2`` is read as the wavenumber
``+N/2`` and, when evaluated off-grid, as ``cos(N x / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi

__all__ = [
    "TorusGrid",
    "SpectralField",
    "FluidState",
    "transform",
    "inverse_transform",
    "derivative",
    "gradient",
    "divergence",
    "laplacian",
    "poisson_inverse",
    "dealias",
    "pointwise_product",
    "dot",
    "lp_norm",
    "pad",
    "evaluate",
    "random_field",
]


@dataclass(frozen=True)
class TorusGrid:
    """An ``N^d`` collocation grid on the torus with spacing ``2 pi / N``."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dimension must be at least 2, got {self.dim}")
        if self.n < 8 or self.n % 2:
            raise ValueError(f"modes per axis must be even and >= 8, got {self.n}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def dx(self) -> float:
        return TWO_PI / self.n

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @property
    def volume(self) -> float:
        return TWO_PI**self.dim

    @cached_property
    def axis_wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers along one axis in FFT order, Nyquist as +N/2."""
        k = np.fft.fftfreq(self.n, d=1.0 / self.n)
        k[self.n // 2] = self.n // 2
        return k

    @cached_property
    def k(self) -> np.ndarray:
        """Wavevector components, shape ``(d, N, ..., N)``."""
        return np.stack(np.meshgrid(*([self.axis_wavenumbers] * self.dim), indexing="ij"))

    @cached_property
    def k2(self) -> np.ndarray:
        return np.sum(self.k**2, axis=0)

    @cached_property
    def inv_k2(self) -> np.ndarray:
        """``1/|k|^2`` with the zero mode mapped to zero."""
        out = np.zeros(self.shape)
        nz = self.k2 > 0
        out[nz] = 1.0 / self.k2[nz]
        return out

    @cached_property
    def nyquist(self) -> np.ndarray:
        """Boolean mask per axis, shape ``(d, N, ..., N)``, true on the Nyquist plane."""
        return np.abs(self.k) == self.n // 2

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Modes kept by the 2/3 rule: ``3 |k_i| < N`` on every axis."""
        return np.all(3 * np.abs(self.k) < self.n, axis=0)

    @cached_property
    def points(self) -> np.ndarray:
        """Collocation points, shape ``(d, N, ..., N)``."""
        x = np.arange(self.n) * self.dx
        return np.stack(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def refined(self, factor: int = 2) -> "TorusGrid":
        return TorusGrid(self.dim, self.n * factor)


def _as_components(arr: np.ndarray, grid: TorusGrid) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.shape == grid.shape:
        return arr[None]
    if arr.ndim == grid.dim + 1 and arr.shape[1:] == grid.shape:
        return arr
    raise ValueError(f"array of shape {arr.shape} does not fit grid {grid.shape}")


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Fourier coefficients of a real field with one or more components."""

    grid: TorusGrid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(_as_components(self.coeffs, self.grid), dtype=np.complex128)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    # construction helpers
    @classmethod
    def zeros(cls, grid: TorusGrid, components: int = 1) -> "SpectralField":
        return cls(grid, np.zeros((components,) + grid.shape, dtype=np.complex128))

    @classmethod
    def constant(cls, grid: TorusGrid, value) -> "SpectralField":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        c = np.zeros((value.size,) + grid.shape, dtype=np.complex128)
        c[(slice(None),) + (0,) * grid.dim] = value
        return cls(grid, c)

    @classmethod
    def stack(cls, fields) -> "SpectralField":
        fields = list(fields)
        return cls(fields[0].grid, np.concatenate([f.coeffs for f in fields], axis=0))

    # shape
    @property
    def components(self) -> int:
        return self.coeffs.shape[0]

    def component(self, i: int) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs[i : i + 1])

    def __iter__(self):
        return (self.component(i) for i in range(self.components))

    # values
    def values(self) -> np.ndarray:
        """Real collocation values, shape ``(c, N, ..., N)``."""
        return inverse_transform(self)

    def mean(self) -> np.ndarray:
        return self.coeffs[(slice(None),) + (0,) * self.grid.dim].real.copy()

    def with_coeffs(self, coeffs) -> "SpectralField":
        return SpectralField(self.grid, coeffs)

    def map_coeffs(self, fn) -> "SpectralField":
        return SpectralField(self.grid, fn(self.coeffs))

    # arithmetic on coefficients (linear operations only)
    def _check(self, other: "SpectralField"):
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, SpectralField):
            self._check(other)
            return SpectralField(self.grid, self.coeffs + other.coeffs)
        return self + SpectralField.constant(self.grid, np.broadcast_to(other, (self.components,)))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return SpectralField(self.grid, -self.coeffs)

    def __mul__(self, scalar):
        if isinstance(scalar, SpectralField):
            raise TypeError("use pointwise_product for field products")
        return SpectralField(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return SpectralField(self.grid, self.coeffs / scalar)

    def hermitian_defect(self) -> float:
        """Max of ``|c(-k) - conj c(k)|`` over modes away from the Nyquist planes."""
        c = self.coeffs
        flipped = np.roll(np.flip(c, axis=tuple(range(1, c.ndim))), 1, axis=tuple(range(1, c.ndim)))
        interior = ~np.any(self.grid.nyquist, axis=0)
        return float(np.max(np.abs(flipped - np.conj(c))[:, interior], initial=0.0))


@dataclass(frozen=True, eq=False)
class FluidState:
    """Density and velocity at time ``t``; the density has unit mean."""

    rho: SpectralField
    v: SpectralField
    t: float = 0.0

    def __post_init__(self):
        if self.rho.components != 1 or self.v.components != self.rho.grid.dim:
            raise ValueError("rho must be scalar and v a d-vector")
        if abs(self.rho.mean()[0] - 1.0) > 1e-12:
            raise ValueError(f"density mean must be 1, got {self.rho.mean()[0]!r}")

    @property
    def grid(self) -> TorusGrid:
        return self.rho.grid

    @classmethod
    def ground(cls, grid: TorusGrid, t: float = 0.0) -> "FluidState":
        return cls(SpectralField.constant(grid, 1.0), SpectralField.zeros(grid, grid.dim), t)


# --- transforms --------------------------------------------------------------

def _spatial_axes(grid: TorusGrid) -> tuple[int, ...]:
    return tuple(range(1, grid.dim + 1))


def transform(values, grid: TorusGrid) -> SpectralField:
    """Collocation values (scalar ``(N,..)`` or ``(c, N, ..)``) to coefficients."""
    arr = _as_components(np.asarray(values, dtype=float), grid)
    c = sfft.fftn(arr, axes=_spatial_axes(grid), norm="forward")
    return SpectralField(grid, c)


def inverse_transform(f: SpectralField) -> np.ndarray:
    return sfft.ifftn(f.coeffs, axes=_spatial_axes(f.grid), norm="forward").real


# --- calculus ----------------------------------------------------------------

def derivative(f: SpectralField, axis: int, order: int = 1) -> SpectralField:
    """``d^order / dx_axis^order``; the Nyquist plane is dropped for odd orders."""
    g = f.grid
    if not 0 <= axis < g.dim:
        raise ValueError(f"axis {axis} out of range for dimension {g.dim}")
    mult = (1j * g.k[axis]) ** order
    if order % 2:
        mult = np.where(g.nyquist[axis], 0.0, mult)
    return SpectralField(g, f.coeffs * mult)


def _ik(grid: TorusGrid) -> np.ndarray:
    return np.where(grid.nyquist, 0.0, 1j * grid.k)


def gradient(f: SpectralField) -> SpectralField:
    """Gradient of a scalar (d components) or Jacobian of a vector (rows = components)."""
    ik = _ik(f.grid)
    out = f.coeffs[:, None] * ik[None]
    return SpectralField(f.grid, out.reshape((-1,) + f.grid.shape))


def divergence(f: SpectralField) -> SpectralField:
    if f.components != f.grid.dim:
        raise ValueError("divergence needs a d-component field")
    return SpectralField(f.grid, np.sum(f.coeffs * _ik(f.grid), axis=0))


def laplacian(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, -f.grid.k2 * f.coeffs)


def poisson_inverse(f: SpectralField) -> SpectralField:
    """Mean-zero solution of ``-Lap psi = f - mean(f)``."""
    return SpectralField(f.grid, f.coeffs * f.grid.inv_k2)


# --- products ----------------------------------------------------------------

def dealias(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, f.coeffs * f.grid.dealias_mask)


def pointwise_product(f: SpectralField, g: SpectralField) -> SpectralField:
    """Dealiased product. A scalar times a vector broadcasts over components."""
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")
    if f.components != g.components and 1 not in (f.components, g.components):
        raise ValueError("component counts are incompatible")
    fv = dealias(f).values()
    gv = dealias(g).values()
    return dealias(transform(fv * gv, f.grid))


def dot(f: SpectralField, g: SpectralField) -> SpectralField:
    """Dealiased pointwise inner product of two vector fields."""
    prod = pointwise_product(f, g)
    return SpectralField(f.grid, prod.coeffs.sum(axis=0, keepdims=True))


# --- norms and interpolation -------------------------------------------------

def pad(f: SpectralField, n_new: int) -> SpectralField:
    """Embed the coefficients on a finer grid; the Nyquist entry is split evenly."""
    g = f.grid
    if n_new < g.n or n_new % 2:
        raise ValueError("padding target must be even and not smaller than N")
    if n_new == g.n:
        return f
    c = _pad_axes(f.coeffs, g.n, n_new, range(1, g.dim + 1))
    return SpectralField(TorusGrid(g.dim, n_new), c)


def _pad_axes(c: np.ndarray, n: int, n_new: int, axes) -> np.ndarray:
    h = n // 2
    for ax in axes:
        shape = list(c.shape)
        shape[ax] = n_new
        out = np.zeros(shape, dtype=np.complex128)
        lo = [slice(None)] * c.ndim
        lo[ax] = slice(0, h)
        out[tuple(lo)] = c[tuple(lo)]
        src = [slice(None)] * c.ndim
        dst = [slice(None)] * c.ndim
        src[ax] = slice(h + 1, None)
        dst[ax] = slice(n_new - h + 1, None)
        out[tuple(dst)] = c[tuple(src)]
        src[ax] = h
        half = 0.5 * c[tuple(src)]
        dst[ax] = h
        out[tuple(dst)] = half
        dst[ax] = n_new - h
        out[tuple(dst)] = half
        c = out
    return c


def lp_norm(f: SpectralField, p: float, oversample: int = 2) -> float:
    """``L^p`` norm of the pointwise Euclidean magnitude over the torus.

    ``p = 2`` is exact (Parseval). Other exponents use the rectangle rule on a
    grid ``oversample`` times finer than the field's own; ``p = inf`` is the
    maximum over that grid.
    """
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    g = f.grid
    if p == 2:
        return float(np.sqrt(g.volume * np.sum(np.abs(f.coeffs) ** 2)))
    n2 = oversample * g.n
    vals = fine_values(f, n2)
    mag = np.abs(vals[0]) if f.components == 1 else np.sqrt(np.sum(vals**2, axis=0))
    if np.isinf(p):
        return float(mag.max())
    return float(((TWO_PI / n2) ** g.dim * np.sum(mag**p)) ** (1.0 / p))


def fine_values(f: SpectralField, n_new: int) -> np.ndarray:
    """Collocation values of ``f`` on an ``n_new^d`` grid, via a real inverse FFT."""
    g = f.grid
    h = g.n // 2
    # pad every axis but the last as in ``pad``; keep only k_d >= 0 on the last
    c = f.coeffs[..., : h + 1].copy()
    c[..., h] *= 0.5
    if n_new > g.n:
        c = _pad_axes(c, g.n, n_new, range(1, g.dim))
        tail = np.zeros(c.shape[:-1] + (n_new // 2 + 1,), dtype=np.complex128)
        tail[..., : h + 1] = c
        c = tail
    elif n_new == g.n:
        c[..., h] *= 2.0
    else:
        raise ValueError("target grid is coarser than the field")
    return sfft.irfftn(c, s=(n_new,) * g.dim, axes=_spatial_axes(g), norm="forward", workers=-1)


def _axis_basis(grid: TorusGrid, x: np.ndarray, active: np.ndarray) -> np.ndarray:
    k = grid.axis_wavenumbers[active]
    e = np.exp(1j * np.outer(k, x))
    nyq = k == grid.n // 2
    if nyq.any():
        e[nyq] = np.cos(np.outer(k[nyq], x))
    return e


def evaluate(f: SpectralField, points, chunk: int = 16384) -> np.ndarray:
    """Trigonometric interpolation at arbitrary points of shape ``(d, P)``.

    Returns an array of shape ``(c, P)``.
    """
    g = f.grid
    pts = np.asarray(points, dtype=float).reshape(g.dim, -1)
    # only the band of axis indices that actually carries energy is contracted
    nz = np.abs(f.coeffs) > 0
    c = f.coeffs
    active = []
    for ax in range(g.dim):
        other = tuple(a for a in range(nz.ndim) if a != ax + 1)
        act = np.any(nz, axis=other) if nz.any() else np.zeros(g.n, bool)
        active.append(act)
        c = np.compress(act, c, axis=ax + 1)
    out = np.zeros((f.components, pts.shape[1]))
    if c.size == 0:
        return out
    for start in range(0, pts.shape[1], chunk):
        sl = slice(start, start + chunk)
        e = _axis_basis(g, pts[0, sl], active[0])
        t = np.einsum("ck...,kp->c...p", c, e, optimize=True)
        for ax in range(1, g.dim):
            e = _axis_basis(g, pts[ax, sl], active[ax])
            t = np.einsum("ck...p,kp->c...p", t, e, optimize=True)
        out[:, sl] = t.real
    return out


def random_field(
    grid: TorusGrid,
    rng: np.random.Generator,
    kmax: int,
    components: int = 1,
    decay: float = 0.0,
    mean_zero: bool = True,
) -> SpectralField:
    """Random real trig polynomial with ``|k_i| <= kmax``.

    Coefficients are drawn on the fixed box ``(2 kmax + 1)^d`` and embedded, so
    the same generator state yields the same field on every grid that
    resolves it. ``decay`` damps modes by ``(1 + |k|^2)^(-decay/2)``.
    """
    if 2 * kmax >= grid.n:
        raise ValueError("kmax is not resolved by the grid")
    m = 2 * kmax + 1
    box = (components,) + (m,) * grid.dim
    vals = rng.standard_normal(box)
    # odd box size, so no Nyquist index is involved
    c = sfft.fftn(vals, axes=tuple(range(1, grid.dim + 1)), norm="forward")
    k1 = np.fft.fftfreq(m, d=1.0 / m)
    kk = np.stack(np.meshgrid(*([k1] * grid.dim), indexing="ij"))
    c = c * (1.0 + np.sum(kk**2, axis=0)) ** (-decay / 2.0)
    if mean_zero:
        c[(slice(None),) + (0,) * grid.dim] = 0.0
    out = np.zeros((components,) + grid.shape, dtype=np.complex128)
    idx = np.ix_(*([np.mod(k1.astype(int), grid.n)] * grid.dim))
    out[(slice(None),) + idx] = c
    return SpectralField(grid, out)
