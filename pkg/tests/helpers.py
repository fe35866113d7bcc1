"""Shared builders and independent oracles for the test suite."""
from __future__ import annotations

import math
from datetime import date

import numpy as np
import pandas as pd

from cvtraffic.basemap import Intersection, Link, LinkGraph, metres_per_degree
from cvtraffic.dataset import ForecastDataset, SplitConfig, build_dataset
from cvtraffic.datasim import build_corridor
from cvtraffic.matcher import MatchedPoint
from cvtraffic.measures import WINDOW_MEASURES, WindowConfig, WindowSeries

WGS84_A = 6378137.0
WGS84_E2 = 6.69437999014e-3


def offset_lonlat(lon0: float, lat0: float, east_m: float, north_m: float) -> tuple[float, float]:
    kx, ky = metres_per_degree(lat0)
    return lon0 + east_m / kx, lat0 + north_m / ky


def straight_link(link_id="L", length_m=400.0, bearing_deg=90.0, lon0=-81.38, lat0=28.54, up="A", down="B",
                  lanes=2, limit=45.0, road="R") -> Link:
    b = math.radians(bearing_deg)
    lon1, lat1 = offset_lonlat(lon0, lat0, length_m * math.sin(b), length_m * math.cos(b))
    return Link(link_id, up, down, ((lon0, lat0), (lon1, lat1)), lanes, limit, road)


def single_link_graph(length_m=400.0, bearing_deg=90.0, limit=45.0) -> LinkGraph:
    link = straight_link(length_m=length_m, bearing_deg=bearing_deg, limit=limit)
    (lon0, lat0), (lon1, lat1) = link.geometry[0], link.geometry[-1]
    nodes = {"A": Intersection("A", lon0, lat0), "B": Intersection("B", lon1, lat1)}
    return LinkGraph(nodes, {link.id: link})


def matched(journey_id, t, chainage, speed_mph, link_id="L") -> list[MatchedPoint]:
    return [MatchedPoint(str(journey_id), np.nan, np.nan, float(a), float(v), np.nan, link_id, float(c), 0.0)
            for a, c, v in zip(t, chainage, speed_mph)]


def ecef(lon, lat):
    """WGS84 ellipsoid surface points in earth-centred coordinates (metres)."""
    lam, phi = np.radians(lon), np.radians(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * np.sin(phi) ** 2)
    return np.stack([n * np.cos(phi) * np.cos(lam), n * np.cos(phi) * np.sin(lam),
                     n * (1.0 - WGS84_E2) * np.sin(phi)], axis=-1)


def dense_projection_oracle(geometry, lon, lat, step_m=0.01):
    """Nearest point on a densely sampled polyline, distances as WGS84 chords.

    Returns (chainage_m, distance_m, chainage_of_each_sample, distance_to_each_sample).
    """
    g = np.asarray(geometry, dtype=float)
    p = ecef(lon, lat)
    chain, dist = [], []
    offset = 0.0
    for (a, b) in zip(g[:-1], g[1:]):
        seg_len = float(np.linalg.norm(ecef(*b) - ecef(*a)))
        n = max(int(math.ceil(seg_len / step_m)), 1)
        u = np.linspace(0.0, 1.0, n + 1)
        pts = ecef(a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]))
        steps = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))]
        chain.append(offset + steps)
        dist.append(np.linalg.norm(pts - p, axis=1))
        offset += steps[-1]
    chain, dist = np.concatenate(chain), np.concatenate(dist)
    k = int(np.argmin(dist))
    return float(chain[k]), float(dist[k]), chain, dist


def flat_points(rows) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=["journey_id", "t", "lon", "lat", "speed_mph", "heading_deg"])


START_MONDAY = date(2024, 3, 4)


def window_series(delay, queue, observed=None, link_ids=None, start=START_MONDAY, extra=None) -> WindowSeries:
    """A WindowSeries from [links, days, windows] delay and queue arrays; other measures are zero."""
    delay = np.asarray(delay, dtype=float)
    n_l, n_d, n_w = delay.shape
    observed = np.ones(delay.shape, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    cfg = WindowConfig(day_start_s=6 * 3600, day_end_s=6 * 3600 + n_w * 900)
    vals = {m: np.zeros(delay.shape) for m in WINDOW_MEASURES}
    vals["control_delay_s"] = delay
    vals["queue_m"] = np.asarray(queue, dtype=float)
    vals.update(extra or {})
    link_ids = link_ids or [f"L{i}" for i in range(n_l)]
    return WindowSeries(list(link_ids), start, n_d, vals, observed, observed.astype(np.int64) * 4, cfg)


def corridor_dataset(delay, queue, flags=None, observed=None, split=None, holidays=()) -> ForecastDataset:
    """Forecast dataset over a small two-way corridor; arrays are [links, days, windows] with 2k links."""
    n_l = np.shape(delay)[0]
    graph, _ = build_corridor(n_l // 2 + 1, [400.0] * (n_l // 2))
    s = window_series(delay, queue, observed, link_ids=sorted(graph.links))
    flags = np.zeros(np.shape(delay) + (2,), dtype=bool) if flags is None else flags
    return build_dataset(s, flags, graph, split or SplitConfig(), holidays)


def closure_errors(records: pd.DataFrame, truth: pd.DataFrame) -> pd.DataFrame:
    """Join extracted link-window records to simulator truth; absolute delay and queue errors per window."""
    t = truth.copy()
    t["window_start"] = t["window_start"].astype(np.int64)
    r = records.copy()
    r["window_start"] = r["window_start"].astype(np.int64)
    j = r.merge(t, on=["link_id", "window_start"], how="inner")
    return pd.DataFrame({"link_id": j["link_id"], "window_start": j["window_start"],
                         "delay_err": (j["control_delay_s"] - j["mean_delay_s"]).abs(),
                         "queue_err": (j["queue_m"] - j["mean_queue_m"]).abs(),
                         "tt_err": (j["travel_time_s"] - j["mean_travel_time_s"]).abs()})
