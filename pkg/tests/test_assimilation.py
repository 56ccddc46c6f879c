import json
import math
from datetime import date, datetime

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floodtwin.assimilation import (ObservationMap, PFConfig, assimilation_cycle, effective_sample_size,
                                    global_log_weights, layer_log_likelihoods, load_observation, load_observations,
                                    local_weight, select_alpha, tempered_weights, weighted_depth_map,
                                    weighted_discharge, write_observation)
from floodtwin.errors import DataError, GridMismatchError
from floodtwin.forecast import ForecastEnsemble, ParticleSet
from floodtwin.raster import BinaryMap, GridSpec, Raster, binarize_depth
from floodtwin.scenario import HazardDatacube

SPEC = GridSpec(2, 1, 0.0, 0.0, 1.0)
ISSUE = date(2021, 7, 12)


def obs_map(values, spec=SPEC, when=datetime(2021, 7, 12, 5, 50), exclusion=None):
    return ObservationMap(Raster(spec, np.asarray(values, dtype=float).reshape(spec.shape)), when, exclusion)


def extent(wet, spec=SPEC):
    wet = np.asarray(wet, dtype=bool).reshape(spec.shape)
    return BinaryMap(spec, wet, np.ones(spec.shape, bool))


# --- pixel and global weights ----------------------------------------------------


def test_local_weight_examples():
    assert local_weight(0.8, True) == 0.8
    assert local_weight(0.8, False) == pytest.approx(0.2, abs=1e-15)
    assert local_weight(0.5, True) == local_weight(0.5, False) == 0.5
    assert local_weight(1.0, True) == 1 - 1e-6


def test_two_particle_hand_example():
    lw = global_log_weights(obs_map([0.8, 0.8]), [extent([1, 1]), extent([0, 0])])
    assert lw[0] == pytest.approx(math.log(0.64), rel=1e-14)
    assert lw[1] == pytest.approx(math.log(0.04), rel=1e-14)


def test_uniform_half_map_is_uninformative():
    rng = np.random.default_rng(0)
    spec = GridSpec(6, 5, 0, 0, 1)
    extents = [extent(rng.random(30) < 0.5, spec) for _ in range(8)]
    lw = global_log_weights(obs_map(np.full(30, 0.5), spec), extents)
    assert np.all(lw == lw[0])


def test_sharp_perfect_match_is_maximal():
    rng = np.random.default_rng(5)
    spec = GridSpec(5, 4, 0, 0, 1)
    truth = rng.random(20) < 0.4
    extents = [extent(truth, spec)] + [extent(rng.random(20) < 0.4, spec) for _ in range(30)]
    lw = global_log_weights(obs_map(np.where(truth, 1.0, 0.0), spec), extents)
    assert np.argmax(lw) == 0 and np.all(lw[1:] <= lw[0])


def test_excluded_and_nodata_pixels_are_skipped():
    spec = GridSpec(3, 1, 0, 0, 1)
    excl = BinaryMap(spec, [[False, True, False]], np.ones((1, 3), bool))
    o = ObservationMap(Raster(spec, [[0.9, 0.9, -9999.0]]), datetime(2021, 7, 12), excl)
    lw = global_log_weights(o, [extent([1, 0, 0], spec)])
    assert lw[0] == pytest.approx(math.log(0.9))
    none_left = ObservationMap(Raster(spec, [[-9999.0, 0.9, -9999.0]]), datetime(2021, 7, 12), excl)
    with pytest.raises(DataError):
        global_log_weights(none_left, [extent([1, 0, 0], spec)])


def test_misaligned_extent():
    with pytest.raises(GridMismatchError):
        global_log_weights(obs_map([0.5, 0.5]), [extent([1, 0, 0], GridSpec(3, 1, 0, 0, 1))])


def test_probability_range_checked():
    with pytest.raises(DataError):
        obs_map([0.5, 1.2])


# --- tempering and ESS -----------------------------------------------------------


def test_tempering_hand_examples():
    lw = np.log([0.64, 0.04])
    w1 = tempered_weights(lw, 1.0).weights
    assert np.allclose(w1, [0.64 / 0.68, 0.04 / 0.68], atol=1e-9, rtol=0)
    assert np.allclose(w1, [0.9412, 0.0588], atol=5e-5, rtol=0)
    w5 = tempered_weights(lw, 0.5).weights
    assert np.allclose(w5, [0.8, 0.2], atol=1e-9, rtol=0)
    assert effective_sample_size([0.8, 0.2]) == pytest.approx(1 / 0.68, abs=1e-9)
    assert abs(effective_sample_size([0.8, 0.2]) - 1.4706) < 1e-4


def test_ess_examples():
    assert effective_sample_size(np.full(50, 0.02)) == pytest.approx(50.0, rel=1e-12)
    assert effective_sample_size([1.0] + [0.0] * 9) == 1.0


logw_vectors = arrays(np.float64, st.integers(1, 40), elements=st.floats(-500, 0, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(logw_vectors)
def test_tempering_endpoints(lw):
    w0 = tempered_weights(lw, 0.0).weights
    assert np.all(np.abs(w0 - 1.0 / lw.size) <= 1e-12)
    direct = np.exp(lw - lw.max())
    direct /= direct.sum()
    assert np.all(np.abs(tempered_weights(lw, 1.0).weights - direct) <= 1e-12)


@settings(max_examples=200, deadline=None)
@given(logw_vectors, st.floats(0, 1))
def test_normalisation_and_argmax(lw, alpha):
    w = tempered_weights(lw, alpha).weights
    assert abs(w.sum() - 1.0) <= 1e-12 and np.all(w >= 0)
    if alpha > 0:
        assert w[np.argmax(lw)] == w.max()


@settings(max_examples=150, deadline=None)
@given(logw_vectors, st.floats(0, 1), st.floats(0, 1))
def test_ess_non_increasing_in_alpha(lw, a, b):
    lo, hi = sorted((a, b))
    e_lo = tempered_weights(lw, lo).ess
    e_hi = tempered_weights(lw, hi).ess
    assert e_hi <= e_lo * (1 + 1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 8), st.integers(1, 30), st.data())
def test_log_space_matches_direct_products(n_particles, n_pixels, data):
    thetas = data.draw(arrays(np.float64, (n_particles, n_pixels), elements=st.floats(0.1, 0.9)))
    wet = data.draw(arrays(np.bool_, (n_particles, n_pixels)))
    spec = GridSpec(n_pixels, 1, 0, 0, 1)
    # choose p so that the particle's local weight equals theta
    p = thetas[0]
    extents = [extent(wet[k], spec) for k in range(n_particles)]
    o = obs_map(p, spec)
    products = np.array([np.prod(np.where(wet[k], p, 1 - p)) for k in range(n_particles)])
    direct = products / products.sum()
    logw = global_log_weights(o, extents)
    got = tempered_weights(logw, 1.0).weights
    assert np.allclose(got, direct, rtol=1e-10, atol=0)


def test_select_alpha_cases():
    assert select_alpha(np.zeros(10)) == 1.0
    assert select_alpha(np.array([0.0, -1e-3, -2e-3]), tau=0.5) == 1.0
    lw = np.array([0.0] + [-200.0] * 49)
    a = select_alpha(lw, tau=0.5)
    assert 0 < a < 1
    assert tempered_weights(lw, a).ess >= 0.5 * 50 - 1e-9
    # brute-force grid: nothing noticeably larger than a keeps the target
    grid = np.linspace(a + 1e-5, 1.0, 500)
    assert all(tempered_weights(lw, g).ess < 25 for g in grid)
    assert select_alpha(lw, tau=1e-9) == 1.0
    with pytest.raises(DataError):
        select_alpha(lw, tau=0.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e4, 0)), st.floats(0.05, 1.0))
def test_select_alpha_meets_target(lw, tau):
    a = select_alpha(lw, tau)
    assert tempered_weights(lw, a).ess >= tau * lw.size * (1 - 1e-9)
    if a < 1:
        assert tempered_weights(lw, min(a + 2e-6, 1.0)).ess < tau * lw.size * (1 + 1e-9)


# --- weighted products -----------------------------------------------------------


def tiny_cube(depths):
    spec = GridSpec(1, 1, 0, 0, 1)
    layers = [Raster(spec, [[d]]) for d in depths]
    rows = [{"index": i + 1, "anchor_peak_m3s": 10.0 * (i + 1), "gauges": {"g": {"peak_level_m": d + 100,
                                                                                "peak_discharge_m3s": 0.0}}}
            for i, d in enumerate(depths)]
    return HazardDatacube(layers, {"layers": rows})


def test_weighted_depth_examples():
    cube = tiny_cube([1.0, 2.0])
    ps = ParticleSet(("a", "b"), [0, 1], [10.0, 20.0], [0.8, 0.2])
    assert weighted_depth_map(ps, cube).values[0, 0] == pytest.approx(1.2, abs=1e-15)
    one = ps.reweighted([1.0, 0.0])
    assert weighted_depth_map(one, cube).values[0, 0] == 1.0
    same = ParticleSet(("a", "b", "c"), [1, 1, 1], [0.0] * 3, [1 / 3] * 3)
    assert weighted_depth_map(same, cube).values[0, 0] == pytest.approx(2.0, rel=1e-15)


def test_weighted_discharge_examples():
    ps = ParticleSet(("a", "b"), [0, 0], [100.0, 50.0], [0.8, 0.2])
    assert weighted_discharge(ps) == pytest.approx(90.0, rel=1e-15)
    assert weighted_discharge(ps.reweighted([1.0, 0.0])) == 100.0
    q = np.array([3.0, 9.0, 12.0])
    assert weighted_discharge(ParticleSet(("a", "b", "c"), [0] * 3, q, np.full(3, 1 / 3))) == pytest.approx(8.0)


# --- cycle -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ensemble(small_cube):
    rng = np.random.default_rng(11)
    q = np.exp(np.log(70.0) + 0.4 * rng.standard_normal((20, 1))) * np.ones((1, 12))
    return ForecastEnsemble(ISSUE, tuple(str(i) for i in range(1, 21)), q, station="main")


def sharp_obs(cube, layer, when):
    lyr = cube.layers[layer]
    p = np.where(lyr.values > 0.10, 0.95, 0.05)
    return ObservationMap(Raster(lyr.spec, np.where(lyr.valid, p, lyr.spec.nodata)), when, None, "o")


def test_open_loop_is_ensemble_mean(small_cube, ensemble):
    ol = assimilation_cycle(ensemble, small_cube, ())
    assert ol.analyses == ()
    day = ol.days[0]
    assert np.all(day.particles.weights == 1 / 20)
    assert day.discharge == pytest.approx(ensemble.values[:, 0].mean(), rel=1e-14)
    layers = day.particles.layers
    mean = np.mean([small_cube.layers[k].values for k in layers], axis=0)
    assert np.allclose(day.depth.values, mean, rtol=1e-13, atol=1e-15)


def test_single_member_open_loop_is_its_layer(small_cube):
    fc = ForecastEnsemble(ISSUE, ("1",), [[60.0, 100.0]])
    ol = assimilation_cycle(fc, small_cube)
    assert ol.days[0].depth == small_cube.layers[2]
    assert ol.days[1].depth == small_cube.layers[4]


def test_weights_carry_forward_then_reset(small_cube, ensemble):
    o1 = sharp_obs(small_cube, 3, datetime(2021, 7, 14, 5, 30))
    o2 = sharp_obs(small_cube, 1, datetime(2021, 7, 18, 17, 0))
    pf = assimilation_cycle(ensemble, small_cube, (o1, o2), PFConfig(alpha_mode="fixed", alpha=1.0))
    assert [a.lead_day for a in pf.analyses] == [3, 7]
    for d in pf.days[:2]:
        assert np.all(d.particles.weights == 1 / 20)
    for d in pf.days[2:6]:
        assert np.array_equal(d.particles.weights, pf.analyses[0].weights)
    for d in pf.days[6:]:
        assert np.array_equal(d.particles.weights, pf.analyses[1].weights)
    # the second analysis starts from uniform weights, not from the first posterior
    alone = assimilation_cycle(ensemble, small_cube, (o2,), PFConfig(alpha_mode="fixed", alpha=1.0))
    assert np.array_equal(alone.analyses[0].weights, pf.analyses[1].weights)


def test_sharp_observation_favours_matching_particle(small_cube, ensemble):
    o = sharp_obs(small_cube, 3, datetime(2021, 7, 12, 12))
    pf = assimilation_cycle(ensemble, small_cube, (o,), PFConfig(alpha_mode="fixed", alpha=1.0))
    layers = pf.days[0].particles.layers
    w = pf.days[0].particles.weights
    assert set(layers[w == w.max()].tolist()) == {3}


def test_neutral_observation_equals_open_loop(small_cube, ensemble):
    lyr = small_cube.layers[0]
    half = ObservationMap(Raster(lyr.spec, np.where(lyr.valid, 0.5, lyr.spec.nodata)), datetime(2021, 7, 13, 6))
    ol = assimilation_cycle(ensemble, small_cube, ())
    pf = assimilation_cycle(ensemble, small_cube, (half,))
    for a, b in zip(ol.days, pf.days):
        assert np.array_equal(a.particles.weights, b.particles.weights)
        assert a.depth == b.depth
        assert a.gauge_levels == b.gauge_levels and a.discharge == b.discharge


def test_same_day_observations_form_one_analysis(small_cube, ensemble):
    o1 = sharp_obs(small_cube, 3, datetime(2021, 7, 14, 5))
    o2 = sharp_obs(small_cube, 2, datetime(2021, 7, 14, 17))
    pf = assimilation_cycle(ensemble, small_cube, (o1, o2), PFConfig(alpha_mode="fixed", alpha=1.0))
    assert len(pf.analyses) == 1
    ll = layer_log_likelihoods(o1, small_cube) + layer_log_likelihoods(o2, small_cube)
    assert np.allclose(pf.analyses[0].loglik, ll[pf.days[2].particles.layers])


def test_cycle_errors(small_cube, ensemble, caplog):
    early = sharp_obs(small_cube, 1, datetime(2021, 7, 11, 23))
    with pytest.raises(DataError, match="precedes"):
        assimilation_cycle(ensemble, small_cube, (early,))
    late = sharp_obs(small_cube, 1, datetime(2021, 8, 30))
    res = assimilation_cycle(ensemble, small_cube, (late,))
    assert res.analyses == () and "horizon" in caplog.text
    bad = obs_map([0.5, 0.5])
    with pytest.raises(GridMismatchError):
        assimilation_cycle(ensemble, small_cube, (bad,))
    a = sharp_obs(small_cube, 1, datetime(2021, 7, 14))
    b = sharp_obs(small_cube, 1, datetime(2021, 7, 13))
    with pytest.raises(DataError, match="sorted"):
        assimilation_cycle(ensemble, small_cube, (a, b))


def test_pf_config_validation():
    with pytest.raises(DataError):
        PFConfig(alpha_mode="auto")
    with pytest.raises(DataError):
        PFConfig(tau=0.0)
    with pytest.raises(DataError):
        PFConfig(prob_clip=0.6)


# --- files -------------------------------------------------------------------------


def test_observation_files(tmp_path):
    spec = GridSpec(3, 2, 0, 0, 10)
    o = ObservationMap(Raster(spec, [[0.1, 0.5, 0.9], [0.0, 1.0, 0.3]]), datetime(2021, 7, 15, 5, 50, 52))
    write_observation(o, tmp_path / "gfm_0715.asc")
    back = load_observation(tmp_path / "gfm_0715.asc")
    assert back.probability == o.probability and back.timestamp == o.timestamp
    # exclusion mask named in the sidecar
    from floodtwin.raster import write_ascii_grid
    write_ascii_grid(Raster(spec, [[0, 1, 0], [0, 0, 0]]), tmp_path / "mask.asc")
    (tmp_path / "gfm_0715.json").write_text(json.dumps({"timestamp": "2021-07-15T05:50:52Z",
                                                         "exclusion_mask": "mask.asc"}))
    back = load_observation(tmp_path / "gfm_0715.asc")
    assert back.included.tolist() == [[True, False, True], [True, True, True]]
    assert [x.name for x in load_observations(tmp_path)] == ["gfm_0715"]
    (tmp_path / "gfm_0715.json").unlink()
    with pytest.raises(DataError, match="sidecar"):
        load_observation(tmp_path / "gfm_0715.asc")


def test_observation_resampled_onto_grid(tmp_path):
    coarse = ObservationMap(Raster(GridSpec(2, 1, 0, 0, 10), [[0.2, 0.8]]), datetime(2021, 7, 15))
    write_observation(coarse, tmp_path / "o.asc")
    fine = load_observation(tmp_path / "o.asc", GridSpec(4, 2, 0, 0, 5))
    assert fine.probability.values.tolist() == [[0.2, 0.2, 0.8, 0.8]] * 2
