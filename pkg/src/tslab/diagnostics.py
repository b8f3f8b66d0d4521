"""Energy, conservation and norm-budget diagnostics for fluid states."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .besov import BesovIndex, besov_norm
from .spectral import FluidState, SpectralField, TorusGrid, divergence

__all__ = [
    "DiagnosticsRecord",
    "DiagnosticsTracker",
    "BUDGET_COLUMNS",
    "csv_header",
    "record",
    "hminus1_squared",
    "energy",
    "records_to_csv",
    "write_dat_files",
]

BUDGET_COLUMNS = (
    "budget_rho",
    "budget_v",
    "budget_vt",
    "budget_v_hi",
    "budget_rho_sup",
    "budget_vt_int",
    "budget_v_hi_int",
    "budget_total",
)


def csv_header(dim: int) -> list[str]:
    return (["t", "energy", "hminus1", "dissipation", "mass"]
            + [f"momentum_{i + 1}" for i in range(dim)]
            + ["max_rho", "min_rho", "div_v_inf", "div_v_int"]
            + list(BUDGET_COLUMNS))


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    energy: float
    hminus1: float
    dissipation: float
    mass: float
    momentum: tuple
    max_rho: float
    min_rho: float
    div_v_inf: float
    div_v_int: float
    budget: dict

    def row(self) -> list[float]:
        return ([self.t, self.energy, self.hminus1, self.dissipation, self.mass, *self.momentum,
                 self.max_rho, self.min_rho, self.div_v_inf, self.div_v_int]
                + [self.budget.get(c, float("nan")) for c in BUDGET_COLUMNS])


def hminus1_squared(rho: SpectralField) -> float:
    """``sum_{k != 0} |rho_k|^2 / |k|^2`` times the torus volume."""
    g = rho.grid
    return float(g.volume * np.sum(np.abs(rho.coeffs[0]) ** 2 * g.inv_k2))


def _grid_integral(vals: np.ndarray, grid: TorusGrid) -> float:
    return float(vals.mean() * grid.volume)


def energy(state: FluidState) -> float:
    """``(int rho |v|^2 + int rho K rho) / 2``."""
    g = state.grid
    rv = state.rho.values()[0]
    vv = state.v.values()
    return 0.5 * (_grid_integral(rv * np.sum(vv**2, axis=0), g) + hminus1_squared(state.rho))


def _dissipation(v: SpectralField) -> float:
    g = v.grid
    return float(g.volume * np.sum(np.abs(v.coeffs) ** 2 * g.k2))


def _budget_norms(state: FluidState, v_t: SpectralField | None, p: float) -> dict:
    s = state.grid.dim / p
    out = {
        "budget_rho": besov_norm(state.rho - 1.0, BesovIndex(s, p, 1)),
        "budget_v": besov_norm(state.v, BesovIndex(s - 1, p, 1)),
        "budget_v_hi": besov_norm(state.v, BesovIndex(s + 1, p, 1)),
    }
    out["budget_vt"] = besov_norm(v_t, BesovIndex(s - 1, p, 1)) if v_t is not None else float("nan")
    return out


def record(state: FluidState, v_t: SpectralField | None = None, p: float = 2.0, div_v_int: float = 0.0,
           running: dict | None = None) -> DiagnosticsRecord:
    """Diagnostics of one state; ``running`` supplies time-accumulated budget entries."""
    g = state.grid
    rv = state.rho.values()[0]
    vv = state.v.values()
    momentum = tuple(_grid_integral(rv * vv[i], g) for i in range(g.dim))
    h2 = hminus1_squared(state.rho)
    budget = _budget_norms(state, v_t, p)
    budget.update(running or {})
    return DiagnosticsRecord(
        t=float(state.t),
        energy=0.5 * (_grid_integral(rv * np.sum(vv**2, axis=0), g) + h2),
        hminus1=float(np.sqrt(h2)),
        dissipation=_dissipation(state.v),
        mass=float(state.rho.coeffs[(0,) + (0,) * g.dim].real * g.volume),
        momentum=momentum,
        max_rho=float(rv.max()),
        min_rho=float(rv.min()),
        div_v_inf=float(np.abs(divergence(state.v).values()).max()),
        div_v_int=float(div_v_int),
        budget=budget,
    )


class DiagnosticsTracker:
    """Per-step quantities plus sampled records with running budget sums.

    Time-integrated budget entries are left-rectangle sums over the sample
    times; ``div_v_int`` is a trapezoid over every step.
    """

    def __init__(self, grid: TorusGrid, p: float = 2.0):
        self.grid, self.p = grid, p
        self.div_v_int = 0.0
        self._last_div = None
        self._last_sample = None
        self.rho_sup = 0.0
        self.vt_int = 0.0
        self.v_hi_int = 0.0

    def step_quantities(self, state: FluidState) -> dict:
        g = self.grid
        rv = state.rho.values()[0]
        vv = state.v.values()
        return {
            "energy": 0.5 * (_grid_integral(rv * np.sum(vv**2, axis=0), g) + hminus1_squared(state.rho)),
            "dissipation": _dissipation(state.v),
            "mass": float(state.rho.coeffs[(0,) + (0,) * g.dim].real * g.volume),
            "momentum": [_grid_integral(rv * vv[i], g) for i in range(g.dim)],
        }

    def advance(self, state: FluidState, dt: float):
        cur = float(np.abs(divergence(state.v).values()).max())
        if self._last_div is not None:
            self.div_v_int += 0.5 * dt * (cur + self._last_div)
        self._last_div = cur

    def sample(self, state: FluidState, v_t: SpectralField | None) -> DiagnosticsRecord:
        norms = _budget_norms(state, v_t, self.p)
        if self._last_sample is not None:
            t0, prev = self._last_sample
            dt = state.t - t0
            self.vt_int += dt * prev["budget_vt"]
            self.v_hi_int += dt * prev["budget_v_hi"]
        self._last_sample = (state.t, norms)
        self.rho_sup = max(self.rho_sup, norms["budget_rho"])
        running = {
            "budget_rho_sup": self.rho_sup,
            "budget_vt_int": self.vt_int,
            "budget_v_hi_int": self.v_hi_int,
            "budget_total": self.rho_sup + self.vt_int + self.v_hi_int,
        }
        return record(state, v_t, self.p, self.div_v_int, running)


def records_to_csv(records, dim: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(dim))
    for r in records:
        w.writerow([repr(float(x)) for x in r.row()])
    return buf.getvalue()


def write_dat_files(records, directory: Path, dim: int) -> list[Path]:
    """One ``t value`` file per tracked column."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = csv_header(dim)
    rows = np.array([r.row() for r in records], dtype=float).reshape(-1, len(header))
    paths = []
    for j, name in enumerate(header[1:], start=1):
        path = directory / f"{name}.dat"
        np.savetxt(path, rows[:, [0, j]], fmt="%.17g")
        paths.append(path)
    return paths
