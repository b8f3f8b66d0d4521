import csv
import io

import numpy as np
import pytest

from tslab.diagnostics import (
    BUDGET_COLUMNS,
    DiagnosticsTracker,
    csv_header,
    energy,
    hminus1_squared,
    record,
    records_to_csv,
    write_dat_files,
)
from tslab.nonlinear import SimConfig, perturbed_state, simulate
from tslab.spectral import FluidState, SpectralField, TorusGrid, poisson_inverse, random_field, transform

G = TorusGrid(3, 8)
VOL = (2 * np.pi) ** 3


def cosine_rho(grid=G, amp=1.0):
    return transform((1 + amp * np.cos(grid.points[0]))[None], grid)


def test_ground_state_record():
    r = record(FluidState.ground(G))
    assert r.energy == 0 and r.hminus1 == 0 and r.dissipation == 0
    assert r.mass == pytest.approx(VOL, rel=1e-15)
    assert r.momentum == (0.0, 0.0, 0.0)
    assert r.max_rho == r.min_rho == 1.0
    assert r.budget["budget_rho"] == 0


def test_cosine_density_values():
    st = FluidState(cosine_rho(), SpectralField.zeros(G, 3))
    assert hminus1_squared(st.rho) == pytest.approx(VOL / 2, rel=1e-14)
    assert energy(st) == pytest.approx(VOL / 4, rel=1e-14)
    r = record(st)
    assert r.hminus1 == pytest.approx(np.sqrt(VOL / 2), rel=1e-14)
    assert r.max_rho == pytest.approx(2.0) and r.min_rho == pytest.approx(0.0, abs=1e-14)


def test_hminus1_is_rho_K_rho():
    rho = random_field(G, np.random.default_rng(0), 3) * 0.1 + 1.0
    k_rho = poisson_inverse(rho).values()[0]
    direct = float(np.mean(rho.values()[0] * k_rho) * VOL)
    assert hminus1_squared(rho) == pytest.approx(direct, rel=1e-12)


def test_kinetic_energy_and_dissipation():
    x = G.points
    v = transform(np.stack([np.sin(x[1]), 0 * x[0], 0 * x[0]]), G)
    r = record(FluidState(SpectralField.constant(G, 1.0), v))
    assert r.energy == pytest.approx(VOL / 4, rel=1e-14)
    assert r.dissipation == pytest.approx(VOL / 2, rel=1e-14)
    assert r.momentum[0] == pytest.approx(0.0, abs=1e-13)


def test_csv_header_golden():
    assert csv_header(3) == [
        "t", "energy", "hminus1", "dissipation", "mass", "momentum_1", "momentum_2", "momentum_3",
        "max_rho", "min_rho", "div_v_inf", "div_v_int", *BUDGET_COLUMNS]
    assert csv_header(2)[5:7] == ["momentum_1", "momentum_2"]


@pytest.fixture(scope="module")
def short_run():
    init = perturbed_state(G, 0.02, seed=1)
    return simulate(init, SimConfig(n=8, dt=0.02, t_end=1.0, sample_every=10))


def test_csv_rows_parse(short_run):
    text = records_to_csv(short_run.records, 3)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == csv_header(3)
    assert len(rows) == len(short_run.records) + 1
    for row in rows[1:]:
        assert len(row) == len(rows[0])
        vals = [float(c) for c in row]
        assert all(np.isfinite(vals))


def test_dat_files(tmp_path, short_run):
    paths = write_dat_files(short_run.records, tmp_path, 3)
    assert len(paths) == len(csv_header(3)) - 1
    data = np.loadtxt(tmp_path / "energy.dat")
    assert data.shape == (len(short_run.records), 2)
    assert np.array_equal(data[:, 1], [r.energy for r in short_run.records])


def test_running_budget_is_monotone(short_run):
    recs = short_run.records
    for key in ("budget_rho_sup", "budget_vt_int", "budget_v_hi_int", "budget_total"):
        vals = [r.budget[key] for r in recs]
        assert np.all(np.diff(vals) >= 0), key
    last = recs[-1].budget
    assert last["budget_total"] == pytest.approx(
        last["budget_rho_sup"] + last["budget_vt_int"] + last["budget_v_hi_int"])


def test_density_bounded_by_divergence_integral(short_run):
    rho0 = short_run.records[0].max_rho
    for r in short_run.records:
        assert r.max_rho <= rho0 * np.exp(r.div_v_int) * (1 + 1e-8)


def test_tracker_divergence_trapezoid():
    x = G.points
    v = transform(np.stack([0.1 * np.sin(x[0]), 0 * x[0], 0 * x[0]]), G)
    st = FluidState(SpectralField.constant(G, 1.0), v)
    tr = DiagnosticsTracker(G)
    for _ in range(5):
        tr.advance(st, 0.1)
    assert tr.div_v_int == pytest.approx(0.4 * 0.1)
