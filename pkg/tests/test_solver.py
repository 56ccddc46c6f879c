import math
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodtwin.errors import DataError, NumericalError
from floodtwin.hydrograph import Hydrograph
from floodtwin.raster import GridSpec, Raster
from floodtwin.solver import (G, BoundaryForcing, ChannelNetwork, FlowState, Inflow, ModelDomain, Outlet, SimConfig,
                              apply_boundaries, channel_depth_from_width, initial_state, simulate, stable_dt,
                              step_floodplain)
from floodtwin.synthetic import valley_domain, valley_setup

T0 = datetime(2021, 7, 14)


def constant(q, span=1e6):
    return Hydrograph(T0, [0.0, span], [q, q])


def flat_domain(shape=(5, 6), cellsize=10.0, z=None, n=0.05):
    spec = GridSpec(shape[1], shape[0], 0.0, 0.0, cellsize)
    return ModelDomain(Raster(spec, np.zeros(shape) if z is None else z), None, n)


# --- depth law and time step ---------------------------------------------------


def test_depth_law_examples():
    assert channel_depth_from_width(1.0, 0.08, 0.37) == pytest.approx(0.08, abs=1e-15)
    assert channel_depth_from_width(25.0, 0.1, 0.5) == pytest.approx(0.5, rel=1e-15)
    assert channel_depth_from_width(16.0, 0.15, 1.0) == pytest.approx(2.4, rel=1e-15)
    with pytest.raises(DataError):
        channel_depth_from_width(0.0, 0.1, 0.5)
    with pytest.raises(DataError):
        channel_depth_from_width(5.0, 0.0, 0.5)


def test_cfl_example():
    dom = flat_domain()
    st_ = initial_state(dom)
    assert stable_dt(st_, 5.0, 0.7, h_max=2.5) == pytest.approx(0.7 * 5 / math.sqrt(9.81 * 2.5), abs=1e-12)
    assert abs(stable_dt(st_, 5.0, 0.7, h_max=2.5) - 0.7068) < 1e-4


def test_cfl_dry_and_scaling():
    dom = flat_domain()
    st_ = initial_state(dom)
    assert stable_dt(st_, 5.0, domain=dom) == 10.0
    a = stable_dt(st_, 5.0, h_max=1.0)
    b = stable_dt(st_, 5.0, h_max=2.0)
    assert a / b == pytest.approx(math.sqrt(2), rel=1e-12)
    deep = initial_state(dom, depth=np.full((5, 6), 4.0))
    assert stable_dt(deep, 10.0, domain=dom) == pytest.approx(0.7 * 10 / math.sqrt(G * 4.0))


# --- floodplain dynamics -------------------------------------------------------


def test_lake_at_rest_1000_steps():
    rng = np.random.default_rng(0)
    z = rng.uniform(0.0, 2.0, (15, 20))
    dom = flat_domain((15, 20), 5.0, z)
    state = initial_state(dom, water_surface=1.3)
    h0 = state.depth(dom).values.copy()
    for _ in range(1000):
        state = step_floodplain(state, dom, 0.5)
    assert np.abs(state.depth(dom).values - h0).max() <= 1e-12


def test_single_wet_cell_spreads_conservatively():
    dom = flat_domain((1, 3))
    h = np.array([[1.0, 0.0, 0.0]])
    state = initial_state(dom, depth=h)
    v0 = state.storage()
    state = step_floodplain(state, dom, 0.5)
    assert state.qx[0, 0] > 0
    assert state.depth(dom).values[0, 1] > 0
    assert state.storage() == pytest.approx(v0, rel=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 3.0))
def test_random_steps_stay_non_negative_and_conservative(seed, depth_scale):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, (6, 7))
    dom = flat_domain((6, 7), 5.0, z, n=0.03)
    state = initial_state(dom, depth=rng.uniform(0, depth_scale, (6, 7)) * (rng.random((6, 7)) < 0.5))
    v0 = state.storage()
    for _ in range(50):
        dt = stable_dt(state, 5.0, domain=dom)
        state = step_floodplain(state, dom, dt)
        assert state.volume.min() >= 0.0
    assert state.storage() == pytest.approx(v0, rel=1e-12)


def test_nan_state_aborts_with_cell():
    dom = flat_domain((2, 2))
    state = initial_state(dom)
    bad = state.volume.copy()
    bad[1, 0] = np.nan
    with pytest.raises(NumericalError, match=r"\(1, 0\)"):
        step_floodplain(FlowState(bad, state.qx, state.qy, state.qc), dom, 0.1)


def test_normal_depth_on_uniform_slope():
    s, n, q, nc, dx = 0.001, 0.03, 0.5, 80, 10.0
    z = s * dx * (nc - 1 - np.arange(nc))[None, :]
    dom = flat_domain((1, nc), dx, z, n=n)
    forcing = BoundaryForcing([Inflow((0, 0), constant(q * dx))], [Outlet((0, nc - 1), slope=s)])
    out = simulate(dom, forcing, 20000.0)
    hn = (n * q / math.sqrt(s)) ** 0.6
    mid = out.final_state.depth(dom).values[0, 30:50]
    assert np.all(np.abs(mid - hn) <= 0.01 * hn)
    assert abs(out.mass.relative_error) <= 1e-6


# --- boundaries ----------------------------------------------------------------


def test_boundary_inflow_volume():
    dom = flat_domain()
    state = initial_state(dom)
    forcing = BoundaryForcing([Inflow((2, 0), constant(10.0, 7200))], [])
    out = apply_boundaries(state, dom, forcing, 0.0, 3600.0)
    assert out.inflow_volume == 36000.0
    assert out.storage() == 36000.0


def test_boundary_zero_inflow_and_midpoint_rate():
    dom = flat_domain()
    state = initial_state(dom)
    zero = apply_boundaries(state, dom, BoundaryForcing([Inflow((0, 0), constant(0.0))], []), 0.0, 60.0)
    assert zero.storage() == 0.0
    hourly = Hydrograph(T0, [0.0, 3600.0], [10.0, 20.0])
    one = apply_boundaries(state, dom, BoundaryForcing([Inflow((0, 0), hourly)], []), 1799.5, 1.0)
    assert one.inflow_volume == pytest.approx(15.0, rel=1e-12)


def test_boundary_outside_span():
    dom = flat_domain()
    forcing = BoundaryForcing([Inflow((0, 0), constant(1.0, 100))], [])
    with pytest.raises(DataError):
        apply_boundaries(initial_state(dom), dom, forcing, 90.0, 20.0)


# --- channel -------------------------------------------------------------------


def test_channel_validation():
    cells = np.array([[0, 0], [0, 1], [1, 1]])
    ChannelNetwork(cells, [5.0] * 3, [0.0] * 3, [1.0] * 3, 0.03)
    with pytest.raises(DataError):
        ChannelNetwork(np.array([[0, 0], [1, 1]]), [5.0] * 2, [0.0] * 2, [1.0] * 2, 0.03)
    with pytest.raises(DataError):
        ChannelNetwork(cells, [5.0] * 3, [2.0] * 3, [1.0] * 3, 0.03)
    with pytest.raises(DataError):
        ChannelNetwork(cells, [0.0] * 3, [0.0] * 3, [1.0] * 3, 0.03)


def test_depth_law_sets_bed_below_bank():
    ch = ChannelNetwork(np.array([[0, 0], [0, 1]]), [25.0, 16.0], [0.0, 0.0], [5.0, 5.0], 0.03)
    law = ch.with_depth_law(0.1, 0.5)
    assert np.allclose(law.bank - law.bed, [0.5, 0.1 * 4.0])


def test_channel_overflow_reaches_floodplain():
    dom = valley_domain(nrows=5, ncols=8, roughness_amp=0.0)
    ch = dom.channel
    state = initial_state(dom)
    vol = state.volume.copy()
    r, c = ch.cells[3]
    # in-bank volume plus one metre spread over the cell
    vol[r, c] = ch.width[3] * 20.0 * (ch.bank[3] - ch.bed[3]) + 1.0 * 20.0 * 20.0
    state = FlowState(vol, state.qx, state.qy, state.qc)
    assert state.depth(dom).values[r, c] == pytest.approx(1.0)
    after = step_floodplain(state, dom, 0.5)
    assert after.depth(dom).values[r - 1, c] > 0 and after.depth(dom).values[r + 1, c] > 0


# --- whole runs ----------------------------------------------------------------


def test_zero_inflow_on_dry_dem():
    dom = flat_domain()
    out = simulate(dom, BoundaryForcing([Inflow((0, 0), constant(0.0))], [Outlet((4, 5))]), 600.0)
    assert np.all(out.max_depth.values == 0.0)


def test_run_is_deterministic(small_valley):
    s = small_valley
    forcing = BoundaryForcing([Inflow(s.inflow_locations[k], h) for k, h in s.base_event.items()], s.outlets)
    a = simulate(s.domain, forcing, 1200.0, s.gauges)
    b = simulate(s.domain, forcing, 1200.0, s.gauges)
    assert a.max_depth == b.max_depth
    for g in s.gauges:
        assert np.array_equal(a.gauges[g].level, b.gauges[g].level)
        assert np.array_equal(a.gauges[g].discharge, b.gauges[g].discharge)
    assert abs(a.mass.relative_error) <= 1e-6 and a.mass_ok


def test_gauge_series_at_output_interval(small_valley):
    s = small_valley
    forcing = BoundaryForcing([Inflow(s.inflow_locations[k], h) for k, h in s.base_event.items()], s.outlets)
    out = simulate(s.domain, forcing, 1800.0, s.gauges, SimConfig(output_interval=900.0))
    assert out.gauges["upper"].times.tolist() == [0.0, 900.0, 1800.0]


def test_v_valley_depth_falls_away_from_channel():
    s = valley_setup(nrows=11, ncols=30, duration=3600.0, roughness_amp=0.0)
    forcing = BoundaryForcing([Inflow(0, constant(60.0)), Inflow(s.inflow_locations["trib"], constant(10.0))],
                              s.outlets)
    out = simulate(s.domain, forcing, 3600.0)
    d = out.max_depth.values
    mid = d.shape[0] // 2
    # outward from the channel row on each side
    up = d[mid - 1::-1, :]
    down = d[mid + 1:, :]
    assert np.all(np.diff(up, axis=0) <= 1e-12)
    assert np.all(np.diff(down, axis=0) <= 1e-12)
    assert abs(out.mass.relative_error) <= 1e-6


def test_larger_inflow_never_lowers_max_depth(small_valley):
    s = small_valley
    runs = []
    for k in (1.0, 1.5):
        forcing = BoundaryForcing([Inflow(s.inflow_locations[st_], h.scaled(k)) for st_, h in s.base_event.items()],
                                  s.outlets)
        runs.append(simulate(s.domain, forcing, s.duration))
    assert np.all(runs[1].max_depth.values >= runs[0].max_depth.values)


def test_forcing_must_cover_duration():
    dom = flat_domain()
    with pytest.raises(DataError):
        simulate(dom, BoundaryForcing([Inflow((0, 0), constant(1.0, 100.0))], []), 200.0)
