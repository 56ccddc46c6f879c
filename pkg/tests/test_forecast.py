from datetime import date, datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodtwin.errors import DataError
from floodtwin.forecast import (ForecastEnsemble, ParticleSet, ensemble_to_particles, load_forecast_ensemble,
                                match_layers, match_to_layer, write_forecast_ensemble)

LADDER = [float(q) for q in range(5, 191, 5)]


def brute_nearest(q, peaks):
    d = [abs(p - q) for p in peaks]
    best = min(d)
    return d.index(best)  # first index wins ties, i.e. the lower layer


def write_csv(path, rows, header="issue_date,member,lead_day,discharge_m3s"):
    path.write_text(header + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


def test_load_full_matrix_and_control(tmp_path):
    rng = np.random.default_rng(1)
    q = rng.uniform(10, 100, (51, 30))
    rows = [("2021-07-12", m, d + 1, q[m, d]) for m in range(51) for d in range(30)]
    fc = load_forecast_ensemble(write_csv(tmp_path / "f.csv", rows))
    assert fc.issue_date == date(2021, 7, 12)
    assert fc.values.shape == (50, 30)
    assert np.array_equal(fc.control, q[0])
    assert fc.members[:3] == ("1", "2", "3")
    assert np.array_equal(fc.values, q[1:])


def test_write_round_trip(tmp_path):
    fc = ForecastEnsemble(date(2021, 7, 12), ("1", "2"), [[1.5, 2.0], [3.0, 4.25]], [9.0, 8.0])
    write_forecast_ensemble(fc, tmp_path / "f.csv")
    back = load_forecast_ensemble(tmp_path / "f.csv")
    assert np.array_equal(back.values, fc.values) and np.array_equal(back.control, fc.control)


def test_duplicate_negative_and_gaps(tmp_path):
    with pytest.raises(DataError, match="duplicate"):
        load_forecast_ensemble(write_csv(tmp_path / "a.csv", [("2021-07-12", 1, 1, 5), ("2021-07-12", 1, 1, 6)]))
    with pytest.raises(DataError, match="negative"):
        load_forecast_ensemble(write_csv(tmp_path / "b.csv", [("2021-07-12", 1, 1, -5)]))
    rows = [("2021-07-12", 1, 1, 5), ("2021-07-12", 1, 2, 5), ("2021-07-12", 2, 1, 5)]
    with pytest.raises(DataError, match="2/day 2"):
        load_forecast_ensemble(write_csv(tmp_path / "c.csv", rows))
    with pytest.raises(DataError, match="columns"):
        load_forecast_ensemble(write_csv(tmp_path / "d.csv", [(1, 2)], header="a,b"))


def test_lead_day_of():
    fc = ForecastEnsemble(date(2021, 7, 12), ("1",), [[1.0, 2.0, 3.0]])
    assert fc.lead_day_of(datetime(2021, 7, 12, 0, 0)) == 1
    assert fc.lead_day_of(datetime(2021, 7, 13, 23, 59)) == 2
    assert fc.lead_day_of(datetime(2021, 7, 11, 23, 0)) == 0


def test_match_examples():
    assert LADDER[match_to_layer(70.0, LADDER)] == 70.0
    assert match_to_layer(70.0, LADDER) == 13  # S14
    assert LADDER[match_to_layer(72.4, LADDER)] == 70.0
    assert match_to_layer(300.0, LADDER) == 37
    assert match_to_layer(1.0, LADDER) == 0
    assert match_to_layer(72.5, LADDER) == 13  # tie goes down


def test_match_against_exhaustive_search():
    rng = np.random.default_rng(42)
    q = np.concatenate([rng.uniform(-20, 260, 9_000), rng.choice(LADDER, 500) + 2.5, rng.uniform(0, 400, 500)])
    got = match_layers(q, LADDER)
    want = [brute_nearest(x, LADDER) for x in q]
    assert got.tolist() == want


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 500, allow_nan=False), min_size=2, max_size=30))
def test_layer_monotone_in_discharge(qs):
    qs = sorted(qs)
    layers = match_layers(np.array(qs), LADDER)
    assert np.all(np.diff(layers) >= 0)


def test_particles_uniform():
    rng = np.random.default_rng(3)
    fc = ForecastEnsemble(date(2021, 7, 12), tuple(str(i) for i in range(1, 51)), rng.uniform(1, 250, (50, 30)))
    ps = ensemble_to_particles(fc, 5, LADDER)
    assert len(ps) == 50
    assert np.all(ps.weights == 0.02)
    assert ps.weights.max() - ps.weights.min() == 0
    assert ps.layers.min() >= 0 and ps.layers.max() <= 37
    with pytest.raises(DataError):
        ensemble_to_particles(fc, 31, LADDER)


def test_equal_members_share_layer_and_clamp():
    fc = ForecastEnsemble(date(2021, 7, 12), ("1", "2", "3"), [[42.0, 1.0], [42.0, 500.0], [42.0, 3.0]])
    day1 = ensemble_to_particles(fc, 1, LADDER)
    assert set(day1.layers.tolist()) == {match_to_layer(42.0, LADDER)}
    day2 = ensemble_to_particles(fc, 2, LADDER)
    assert day2.layers.tolist() == [0, 37, 0]


def test_control_toggle():
    fc = ForecastEnsemble(date(2021, 7, 12), ("1", "2"), [[10.0], [20.0]], [15.0])
    assert len(ensemble_to_particles(fc, 1, LADDER)) == 2
    ps = ensemble_to_particles(fc, 1, LADDER, include_control=True)
    assert ps.members[0] == "control" and len(ps) == 3


def test_particle_weight_validation():
    with pytest.raises(DataError):
        ParticleSet(("a", "b"), [0, 1], [1.0, 2.0], [0.5, 0.6])
