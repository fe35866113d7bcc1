import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvtraffic.datasim import (GROUND_TRUTH_COLUMNS, Incident, Signal, default_scenario, discharge, load_scenario,
                               scenario_from_dict, scenario_to_dict, simulate_days, write_outputs)
from cvtraffic.extraction import extract_records
from cvtraffic.matcher import TRAJECTORY_COLUMNS

from helpers import closure_errors

SMALL = {"n_intersections": 3, "days": 2, "seed": 5, "n_incidents": 0, "test_days": 0}


def test_default_scenario_shape():
    sc = default_scenario()
    assert len(sc.graph.links) == 10 and sc.days == 28 and sc.penetration == 0.03 and sc.seed == 42
    assert len(sc.incidents) == 3 and all(i.severity == 0.8 for i in sc.incidents)
    # the last incident lands in the held-out week
    assert sc.incidents[-1].day >= sc.days - 7
    assert all(0 < s.green_ratio < 1 for s in sc.signals.values())


def test_validation_errors():
    with pytest.raises(ValueError):
        scenario_from_dict({"penetration": 0.0})
    with pytest.raises(ValueError):
        scenario_from_dict({"penetration": 1.5})
    with pytest.raises(ValueError):
        scenario_from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        Incident("EB0", 0, 3600.0, 900.0, 0.0)
    with pytest.raises(ValueError):
        Incident("EB0", 0, 3600.0, 900.0, 1.2)
    with pytest.raises(ValueError):
        Signal(100.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        scenario_from_dict({**SMALL, "incidents": [{"link_id": "XX", "day": 0, "start_s": 0.0, "duration_s": 900.0,
                                                    "severity": 0.5}]})
    with pytest.raises(ValueError):
        scenario_from_dict({**SMALL, "incidents": [{"link_id": "EB0", "day": 5, "start_s": 0.0,
                                                    "duration_s": 900.0, "severity": 0.5}]})


def test_load_scenario_errors(tmp_path):
    p = tmp_path / "s.json"
    p.write_text("{not json")
    with pytest.raises(ValueError):
        load_scenario(p)
    p.write_text("[1, 2]")
    with pytest.raises(ValueError):
        load_scenario(p)


@pytest.mark.parametrize("doc", [{}, {"n_intersections": 3, "seed": 5, "days": 9},
                                 {"green_ratio": 1.0, "n_intersections": 2, "spacing_m": [300], "days": 3}])
def test_scenario_json_round_trip(doc):
    sc = scenario_from_dict(doc)
    back = scenario_from_dict(json.loads(json.dumps(scenario_to_dict(sc))))
    assert back.signals == sc.signals and back.incidents == sc.incidents and back.holidays == sc.holidays
    assert back.corridor == sc.corridor
    for lid, link in sc.graph.links.items():
        np.testing.assert_allclose(back.graph.links[lid].geometry, link.geometry, atol=1e-9)
        assert back.graph.links[lid].lanes == link.lanes


def test_outputs_are_byte_identical_for_a_seed(tmp_path):
    sc = scenario_from_dict(SMALL)
    write_outputs(sc, tmp_path / "a")
    write_outputs(scenario_from_dict(SMALL), tmp_path / "b")
    for name in ("trajectories.csv", "ground_truth.csv", "basemap.json", "scenario.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = scenario_from_dict({**SMALL, "seed": 6})
    write_outputs(other, tmp_path / "c")
    assert (tmp_path / "a" / "trajectories.csv").read_bytes() != (tmp_path / "c" / "trajectories.csv").read_bytes()
    traj = pd.read_csv(tmp_path / "a" / "trajectories.csv")
    assert list(traj.columns) == TRAJECTORY_COLUMNS and len(traj) > 0
    truth = pd.read_csv(tmp_path / "a" / "ground_truth.csv")
    assert list(truth.columns) == GROUND_TRUTH_COLUMNS
    # simulator output reloads into the same scenario
    assert load_scenario(tmp_path / "a" / "scenario.json").signals == sc.signals


def test_days_are_independent_substreams():
    sc = scenario_from_dict({**SMALL, "days": 3})
    all_days = list(simulate_days(sc))
    only_last = next(simulate_days(sc, days=[2]))
    pd.testing.assert_frame_equal(all_days[2].points, only_last.points)


def test_truth_is_on_the_window_grid():
    sc = scenario_from_dict(SMALL)
    truth = next(simulate_days(sc)).truth
    tod = truth["window_start"].to_numpy() - sc.day_epoch(0)
    assert np.all(tod % 900 == 0) and tod.min() >= 6 * 3600 and tod.max() < 22 * 3600
    assert not truth.duplicated(["link_id", "window_start"]).any()


def test_green_ratio_one_gives_no_stops_and_no_delay():
    sc = scenario_from_dict({**SMALL, "green_ratio": 1.0})
    for day in simulate_days(sc):
        assert np.isnan(day.traversals.x_stop).all()
        # only saturation-headway bunching remains: a couple of seconds at worst
        assert day.truth["mean_delay_s"].max() < 2.5 and day.truth["mean_delay_s"].mean() < 0.5
        assert day.truth["mean_queue_m"].max() == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 3000), min_size=1, max_size=40), st.integers(1, 3),
       st.floats(60, 150), st.floats(0.2, 1.0), st.floats(0, 150))
def test_discharge_never_precedes_free_arrival_and_keeps_order(arrivals, lanes, cycle, green, offset):
    sig = Signal(cycle, green, offset % cycle)
    t = np.sort(np.asarray(arrivals))
    out = discharge(t, lanes, sig, [])
    assert np.all(out >= t - 1e-9)
    assert np.all(np.diff(out) >= -1e-9)


def test_severity_08_incident_more_than_doubles_slot_delay():
    sc = default_scenario()
    weekdays = [d for d in range(sc.days) if not sc.is_weekend(d)]
    truth = pd.concat([o.truth.assign(day=o.day) for o in simulate_days(sc, days=weekdays)])
    truth["tod"] = truth["window_start"] - truth["day"].map(sc.day_epoch)
    for inc in sc.incidents:
        link = truth[truth["link_id"] == inc.link_id]
        ref = link[link["incident"] == 0].groupby("tod")["mean_delay_s"].median()
        hit = link[(link["incident"] == 1) & (link["day"] == inc.day)]
        assert len(hit) >= 4
        assert np.all(hit["mean_delay_s"].to_numpy() > 2.0 * ref.loc[hit["tod"]].to_numpy())


def test_penetration_consistency_within_binomial_bounds():
    for p in (0.03, 0.2):
        sc = default_scenario(penetration=p)
        days = list(simulate_days(sc, days=range(3)))
        _, rec = extract_records([d.points for d in days], sc.graph)
        truth = pd.concat([d.truth for d in days])
        j = truth.merge(rec[["link_id", "window_start", "n_vehicles"]], on=["link_id", "window_start"], how="left")
        n = j["n_vehicles"].fillna(0).to_numpy(float)
        vol = j["volume"].to_numpy(float)
        z = (n - p * vol) / np.sqrt(vol * p * (1 - p))
        assert abs(n.sum() - p * vol.sum()) <= 3 * np.sqrt(vol.sum() * p * (1 - p))
        # a normal z-score leaves 0.27% outside 3 sigma; allow for small-count skew
        assert np.mean(np.abs(z) <= 3) >= 0.99


def test_noise_free_full_penetration_travel_time_closure():
    sc = default_scenario(penetration=1.0)
    days = list(simulate_days(sc, noise=False, days=range(2)))
    _, rec = extract_records([d.points for d in days], sc.graph)
    err = closure_errors(rec, pd.concat([d.truth for d in days]))
    assert len(err) > 1000
    assert np.mean(err["tt_err"] <= 1.0) >= 0.99
    assert np.mean((err["delay_err"] <= 2.0) & (err["queue_err"] <= 5.0)) >= 0.95
