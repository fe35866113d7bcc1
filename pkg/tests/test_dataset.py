import numpy as np
import pytest

from cvtraffic.anomaly import label_dataset
from cvtraffic.dataset import (FEATURES, ForecastDataset, SplitConfig, anchors_per_day, build_dataset,
                               historical_profile, split_days)

from helpers import corridor_dataset, single_link_graph, window_series


def test_anchor_arithmetic_on_the_day_grid():
    a = anchors_per_day(64)
    assert len(a) == 57 and a[0] == 3 and a[-1] == 59


def test_one_link_sample_count():
    rng = np.random.default_rng(0)
    n_days = 4
    s = window_series(rng.gamma(2, 10, (1, n_days, 64)), rng.gamma(2, 10, (1, n_days, 64)), link_ids=["L"])
    ds = build_dataset(s, np.zeros((1, n_days, 64, 2), dtype=bool), single_link_graph(),
                       SplitConfig(test_days=1, val_fraction=0.3))
    assert ds.days == {"train": [0, 1], "val": [2], "test": [3]}
    assert ds.n_samples("test") == 57
    assert sum(ds.n_samples(k) for k in ("train", "val", "test")) == 57 * n_days
    b = ds.split_batch("test")
    assert b["x_rt"].shape == (57, 4, 1, len(FEATURES)) and b["y"].shape == (57, 1, 4, 2)


def test_single_training_day_has_no_reference():
    s = window_series(np.ones((1, 3, 64)), np.ones((1, 3, 64)), link_ids=["L"])
    with pytest.raises(ValueError):
        build_dataset(s, np.zeros((1, 3, 64, 2), dtype=bool), single_link_graph(),
                      SplitConfig(test_days=1, val_fraction=0.5))


def test_split_is_chronological_and_validated():
    assert split_days(28) == {"train": list(range(19)), "val": [19, 20], "test": list(range(21, 28))}
    with pytest.raises(ValueError):
        split_days(8)
    with pytest.raises(ValueError):
        SplitConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        SplitConfig.from_dict({"bogus": 1})


def test_samples_stay_inside_the_day_and_align_targets():
    rng = np.random.default_rng(1)
    delay = rng.gamma(2, 10, (2, 21, 12))
    ds = corridor_dataset(delay, delay * 2)
    b = ds.split_batch("test")
    day, anchor = b["day"], b["anchor"]
    for i in (0, 5, len(day) - 1):
        d, a = day[i], anchor[i]
        np.testing.assert_array_equal(b["y"][i, :, :, 0], delay[:, d, a + 1:a + 5])
        raw = ds.features[d, a - 3:a + 1, :, FEATURES.index("control_delay_s")]
        np.testing.assert_allclose(b["x_rt"][i, :, :, 0] * ds.feat_std[0] + ds.feat_mean[0], raw)
    assert anchor.min() == 3 and anchor.max() == 12 - 5


def test_no_test_day_leaks_into_training_inputs():
    rng = np.random.default_rng(2)
    n_l, n_d, n_w = 2, 28, 10
    delay = rng.gamma(2, 10, (n_l, n_d, n_w))
    queue = rng.gamma(2, 20, (n_l, n_d, n_w))
    days = split_days(n_d)
    base = corridor_dataset(delay, queue)
    d2, q2 = delay.copy(), queue.copy()
    d2[:, days["test"]] += 1000.0
    q2[:, days["test"]] *= 7.0
    moved = corridor_dataset(d2, q2)
    for split in ("train", "val"):
        a, b = base.split_batch(split), moved.split_batch(split)
        for key in ("x_rt", "x_hist", "y", "flags"):
            np.testing.assert_array_equal(a[key], b[key])
    # the test days' historical inputs come from training days alone
    np.testing.assert_array_equal(base.split_batch("test")["x_hist"], moved.split_batch("test")["x_hist"])
    s1, s2 = window_series(delay, queue), window_series(d2, q2)
    r1, r2 = label_dataset(s1, days["train"]), label_dataset(s2, days["train"])
    np.testing.assert_array_equal(r1.median, r2.median)
    np.testing.assert_array_equal(r1.sigma, r2.sigma)


def test_historical_window_with_one_training_monday():
    # 14 days from a Monday, 7 held out: Monday 0 is the only training Monday
    rng = np.random.default_rng(3)
    delay = rng.gamma(2, 10, (2, 14, 16))
    ds = corridor_dataset(delay, delay + 1)
    assert [d for d in ds.days["train"] if d % 7 == 0] == [0]
    test_monday = 7
    w_0800 = 8  # 06:00 + 8 windows
    b = ds.batch(np.array([test_monday]), np.array([w_0800 - 1]), standardize=False)
    np.testing.assert_array_equal(b["x_hist"][0, 0, :, FEATURES.index("control_delay_s")], delay[:, 0, w_0800])
    np.testing.assert_array_equal(ds.historical_average(np.array([test_monday]), np.array([w_0800 - 1]))[0, :, 0, 0],
                                  delay[:, 0, w_0800])


def test_historical_profile_leaves_each_day_out():
    s = window_series(np.zeros((1, 21, 2)), np.zeros((1, 21, 2)))
    vals = np.arange(21, dtype=float)[:, None].repeat(2, axis=1)
    prof = historical_profile(vals, s, list(range(14)), holidays=[])
    assert prof[0, 0] == 7.0 and prof[7, 0] == 0.0 and prof[14, 0] == 3.5
    # holidays never enter a pool
    prof = historical_profile(vals, s, list(range(14)), holidays=[7])
    assert prof[14, 0] == 0.0


def test_historical_profile_falls_back_to_day_type():
    s = window_series(np.zeros((1, 9, 1)), np.zeros((1, 9, 1)))
    vals = np.arange(9, dtype=float)[:, None]
    # no training Saturday exists other than day 5 itself: fall back to Sunday 6
    prof = historical_profile(vals, s, list(range(7)), holidays=[])
    assert prof[5, 0] == 6.0


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    delay = rng.gamma(2, 10, (2, 21, 8))
    flags = rng.random((2, 21, 8, 2)) < 0.1
    ds = corridor_dataset(delay, delay * 3, flags=flags, holidays=[9])
    ds.save(tmp_path)
    back = ForecastDataset.load(tmp_path)
    for key in ("x_rt", "c_rt", "x_hist", "c_hist", "y", "y_mask", "flags"):
        np.testing.assert_array_equal(ds.split_batch("test")[key], back.split_batch("test")[key])
    assert back.holidays == [9] and back.days == ds.days
    assert (tmp_path / "test_truth.csv").exists() and (tmp_path / "test_flags.csv").exists()
