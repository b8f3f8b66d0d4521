"""Stability sweeps over the perturbation size and decay-rate fitting."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .besov import BesovIndex, besov_norm
from .diagnostics import records_to_csv
from .linear import roots
from .nonlinear import SimConfig, SimResult, perturbed_state, simulate
from .spectral import SpectralField, TorusGrid

log = logging.getLogger(__name__)

__all__ = [
    "RunSummary",
    "SweepReport",
    "run_perturbed",
    "stability_sweep",
    "ShellFit",
    "DecayFit",
    "DegenerateFit",
    "decay_fit",
]


@dataclass
class RunSummary:
    eps: float
    sign: str
    aborted: bool
    abort_reason: str
    t_final: float
    budget_sup: float
    amplification: float
    density_amplification: float
    max_rho: list
    csv: str = field(repr=False, default="")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("eps", "sign", "aborted", "abort_reason", "t_final", "budget_sup",
                                             "amplification", "density_amplification")}
        out["max_rho_final"] = self.max_rho[-1] if self.max_rho else float("nan")
        return out


def _density_norm(res: SimResult, i: int) -> float:
    st = res.state_at(i)
    return besov_norm(st.rho - 1.0, BesovIndex(st.grid.dim / res.config.p, res.config.p, 1))


def run_perturbed(eps: float, config: SimConfig) -> RunSummary:
    """Simulate seeded data of initial budget ``eps``; keeps only the end states."""
    grid = config.grid
    init = perturbed_state(grid, eps, p=config.p, seed=config.seed)
    res = simulate(init, config, store_every=max(config.steps, 1))
    budget = max((r.budget["budget_total"] for r in res.records), default=0.0)
    d0 = _density_norm(res, 0)
    d1 = _density_norm(res, len(res.times) - 1)
    amp = budget / eps if eps > 0 else 0.0
    damp = d1 / d0 if d0 > 0 else 0.0
    return RunSummary(eps, config.sign, res.aborted, res.abort_reason,
                      float(res.step_times[-1]), float(budget), float(amp), float(damp),
                      [float(r.max_rho) for r in res.records], records_to_csv(res.records, grid.dim))


def _run(args):
    eps, config = args
    return run_perturbed(eps, config)


@dataclass
class SweepReport:
    epsilons: list
    runs: list
    control: RunSummary | None
    c_emp: list
    log_slope: float
    spread: float
    slope_band: float = 0.15
    flat_band: float = 0.15

    @property
    def any_abort(self) -> bool:
        return any(r.aborted for r in self.runs)

    @property
    def flat(self) -> bool:
        return self.spread <= self.flat_band and abs(self.log_slope) <= self.slope_band

    @property
    def control_ok(self) -> bool:
        if self.control is None:
            return True
        return self.control.aborted or self.control.density_amplification > 2.0

    @property
    def passed(self) -> bool:
        return not self.any_abort and self.flat and self.control_ok

    def to_dict(self) -> dict:
        return {
            "epsilons": list(self.epsilons),
            "c_emp": list(self.c_emp),
            "log_slope": self.log_slope,
            "spread": self.spread,
            "runs": [r.to_dict() for r in self.runs],
            "control": self.control.to_dict() if self.control else None,
            "flat": self.flat,
            "control_ok": self.control_ok,
            "passed": self.passed,
        }


def stability_sweep(epsilons, config: SimConfig, control_eps: float | None = 1e-2,
                    jobs: int = 1) -> SweepReport:
    """Repulsive runs for every ``eps`` plus an optional attractive control.

    ``C_emp(eps) = sup_t budget_total / eps``. ``spread`` is the largest
    relative deviation of ``C_emp`` from its mean and ``log_slope`` the fitted
    slope of ``log C_emp`` against ``log eps``. The control passes if it
    aborts or its density norm more than doubles.
    """
    eps_list = [float(e) for e in epsilons]
    rep_cfg = replace(config, sign="repulsive")
    tasks = [(e, rep_cfg) for e in eps_list]
    if control_eps is not None:
        tasks.append((float(control_eps), replace(config, sign="attractive")))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_run, tasks))
    else:
        results = [_run(t) for t in tasks]
    runs = results[: len(eps_list)]
    control = results[len(eps_list)] if control_eps is not None else None
    live = [(r.eps, r.amplification) for r in runs if r.eps > 0]
    c_emp = [r.amplification for r in runs]
    if len(live) >= 2:
        e, c = np.array(live).T
        slope = float(np.polyfit(np.log(e), np.log(c), 1)[0])
        spread = float(np.max(np.abs(c / c.mean() - 1.0)))
    else:
        slope, spread = 0.0, 0.0
    return SweepReport(eps_list, runs, control, c_emp, slope, spread)


# --- decay rates ---------------------------------------------------------------------

class DegenerateFit(ValueError):
    """Nothing to fit: a vanishing field or too few tail samples."""


@dataclass(frozen=True)
class ShellFit:
    k2: float
    rate: float
    expected: float
    samples: int

    @property
    def rel_error(self) -> float:
        return abs(self.rate - self.expected) / self.expected


@dataclass
class DecayFit:
    nu: float
    shells: list

    @property
    def slowest(self) -> ShellFit:
        return min(self.shells, key=lambda s: s.rate)

    def rates(self) -> dict:
        return {s.k2: s.rate for s in self.shells}

    def to_dict(self) -> dict:
        return {"nu": self.nu, "shells": [{"k2": s.k2, "rate": s.rate, "expected": s.expected,
                                            "rel_error": s.rel_error} for s in self.shells]}


def expected_rate(k2: float, nu: float = 1.0) -> float:
    """Energy decay rate ``2 |Re lambda_+|`` of a mode."""
    lp, _, _ = roots(np.array([k2]), nu)
    return float(2 * abs(np.real(lp[0])))


def decay_fit(times, v: np.ndarray, grid: TorusGrid, a: np.ndarray | None = None, nu: float = 1.0,
              tail: float = 0.5, min_samples: int = 20, floor: float = 1e-280) -> DecayFit:
    """Fit exponential decay of every ``|k|^2`` shell of a velocity series.

    ``v`` (and optionally the density perturbation ``a``) are coefficient
    series ``(T, c, N, ..)``. The shell energy is ``sum |v_k|^2`` plus
    ``|a_k|^2 / |k|^2`` when ``a`` is given, which keeps oscillating modes away
    from zero. The rate is minus the least-squares slope of its logarithm over
    the last ``tail`` fraction of the samples.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(v)
    start = int(np.floor((1 - tail) * len(t)))
    sel = slice(start, None)
    if len(t) - start < min_samples:
        raise DegenerateFit(f"only {len(t) - start} tail samples (need {min_samples})")
    power = np.sum(np.abs(v) ** 2, axis=1)
    if a is not None:
        power = power + np.abs(np.asarray(a)[:, 0]) ** 2 * grid.inv_k2
    k2 = grid.k2
    shells = []
    for s in np.unique(k2[k2 > 0]):
        e = power[:, k2 == s].sum(axis=1)[sel]
        if np.any(e <= floor):
            continue
        slope = np.polyfit(t[sel], np.log(e), 1)[0]
        shells.append(ShellFit(float(s), float(-slope), expected_rate(float(s), nu), len(e)))
    if not shells:
        raise DegenerateFit("no shell carries energy through the tail")
    return DecayFit(nu, shells)


def single_shell_series(grid: TorusGrid, k2_target: float, times, nu: float = 1.0, amp: float = 1.0):
    """Linear evolution of density data on one shell; returns ``(a, u)`` series."""
    from .linear import solve_linear_system

    mask = grid.k2 == k2_target
    c = np.where(mask, amp, 0.0).astype(complex)[None]
    a0 = SpectralField(grid, c)
    sol = solve_linear_system(a0, SpectralField.zeros(grid, grid.dim), nu=nu, times=times)
    return sol.a, sol.u
