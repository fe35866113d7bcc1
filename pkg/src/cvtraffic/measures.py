"""Per-vehicle signal performance measures and their 15-minute link aggregates.

Each journey is reduced to the reference points of a stop-line-to-stop-line
traversal: entry A (upstream stop line), free-flow arrival B, exit C
(downstream stop line) and the first stop position D. When the first or last
probe point lies inside the link and the vehicle is moving, the entry/exit
times are extrapolated to the stop lines at the observed point speed, which
removes the sampling-phase bias of 3 s probe data.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from typing import Sequence

import numpy as np
import pandas as pd

from .basemap import MPH_TO_MS, Link
from .segmenter import SegmentTable, State, StateSegment, point_states

log = logging.getLogger(__name__)

LOS_LETTERS = "ABCDEF"
DEFAULT_LOS_THRESHOLDS = (10.0, 20.0, 35.0, 55.0, 80.0)

# aggregated columns, in output order
WINDOW_MEASURES = [
    "travel_time_s",
    "speed_mph",
    "control_delay_s",
    "stop_delay_s",
    "n_stops",
    "queue_m",
    "aog_ratio",
    "sf_ratio",
]
SERIES_COLUMNS = ["link_id", "window_start", "n_vehicles"] + WINDOW_MEASURES + ["imputed"]

# per-vehicle column feeding each aggregate
_VEHICLE_SOURCE = {
    "travel_time_s": "travel_time_s",
    "speed_mph": "travel_speed_mph",
    "control_delay_s": "control_delay_s",
    "stop_delay_s": "stop_delay_s",
    "n_stops": "n_stops",
    "queue_m": "queue_length_m",
    "aog_ratio": "aog",
    "sf_ratio": "split_failure",
}


@dataclass(frozen=True)
class MeasureConfig:
    v_s: float = 1.0
    los_thresholds: tuple[float, ...] = DEFAULT_LOS_THRESHOLDS
    extrapolate_to_stop_lines: bool = True

    def __post_init__(self):
        _check_thresholds(self.los_thresholds)


@dataclass(frozen=True)
class WindowConfig:
    window_s: int = 900
    min_samples_flag: int = 10
    day_start_s: int = 6 * 3600
    day_end_s: int = 22 * 3600

    def __post_init__(self):
        if self.window_s <= 0:
            raise ValueError("window_s must be positive")
        if self.day_start_s % self.window_s or self.day_end_s % self.window_s:
            raise ValueError("analysis day bounds must align with the window grid")
        if not 0 <= self.day_start_s < self.day_end_s <= 86400:
            raise ValueError("analysis day bounds out of order")

    @property
    def windows_per_day(self) -> int:
        return (self.day_end_s - self.day_start_s) // self.window_s


@dataclass(frozen=True)
class VehicleMeasures:
    journey_id: str
    link_id: str
    entry_time_s: float
    exit_time_s: float
    travel_time_s: float
    travel_speed_mph: float
    free_flow_speed_mph: float
    free_flow_arrival_s: float
    control_delay_s: float
    stop_delay_s: float
    n_stops: int
    queue_length_m: float
    aog: int
    split_failure: int
    los: str


@dataclass(frozen=True)
class LinkWindowRecord:
    link_id: str
    window_start: float
    n_vehicles: int
    travel_time_s: float
    speed_mph: float
    control_delay_s: float
    stop_delay_s: float
    n_stops: float
    queue_m: float
    aog_ratio: float
    sf_ratio: float
    low_sample: bool = False

    @property
    def cv_volume(self) -> int:
        return self.n_vehicles


def _check_thresholds(th: Sequence[float]) -> None:
    if len(th) != 5 or any(not b > a for a, b in zip(th, th[1:])):
        raise ValueError(f"LOS thresholds must be 5 strictly ascending values, got {list(th)}")


def los_rating(control_delay_s: float, thresholds: Sequence[float] = DEFAULT_LOS_THRESHOLDS) -> str:
    _check_thresholds(thresholds)
    for letter, bound in zip(LOS_LETTERS, thresholds):
        if control_delay_s <= bound:
            return letter
    return "F"


def nearest_rank_80(values: np.ndarray) -> float:
    s = np.sort(np.asarray(values, dtype=float))
    return float(s[(4 * len(s) + 4) // 5 - 1])


def vehicle_measures(journey, segments: Sequence[StateSegment], link: Link,
                     cfg: MeasureConfig = MeasureConfig()) -> VehicleMeasures:
    t = journey.t
    c = journey.chainage
    v_ms = journey.speed_mph * MPH_TO_MS
    L = link.length_m
    t_a, t_c = float(t[0]), float(t[-1])
    s_a, s_c = float(c[0]), float(c[-1])
    if cfg.extrapolate_to_stop_lines:
        if v_ms[0] > cfg.v_s and s_a > 0:
            t_a -= s_a / v_ms[0]
            s_a = 0.0
        if v_ms[-1] > cfg.v_s and s_c < L:
            t_c += (L - s_c) / v_ms[-1]
            s_c = L
    travel = t_c - t_a
    speed_mph = abs(s_c - s_a) / travel / MPH_TO_MS
    states = point_states(segments)
    ff = journey.speed_mph[states == State.FREE_FLOW]
    v_f_mph = nearest_rank_80(ff) if ff.size else link.speed_limit_mph
    t_b = t_a + (L - s_a) / (v_f_mph * MPH_TO_MS)
    d_c = max(0.0, t_c - t_b)
    stops = [s for s in segments if s.state == State.STOP]
    d_s = math.fsum(s.duration for s in stops)
    q = 0.0
    if stops:
        dists = [abs(L - s.mean_chainage) for s in stops]
        q = dists[0]
        if max(dists) > q:
            log.warning("journey %s: first stop is not the farthest from the stop line", journey.journey_id)
    n_s = len(stops)
    return VehicleMeasures(
        journey_id=str(journey.journey_id),
        link_id=str(journey.link_id),
        entry_time_s=t_a,
        exit_time_s=t_c,
        travel_time_s=travel,
        travel_speed_mph=speed_mph,
        free_flow_speed_mph=v_f_mph,
        free_flow_arrival_s=t_b,
        control_delay_s=d_c,
        stop_delay_s=d_s,
        n_stops=n_s,
        queue_length_m=q,
        aog=0 if n_s >= 1 else 1,
        split_failure=1 if n_s >= 2 else 0,
        los=los_rating(d_c, cfg.los_thresholds),
    )


def vehicle_measures_batch(journey: np.ndarray, t: np.ndarray, chainage: np.ndarray, speed_mph: np.ndarray,
                           seg: SegmentTable, length_m: np.ndarray, limit_mph: np.ndarray,
                           cfg: MeasureConfig = MeasureConfig()) -> dict[str, np.ndarray]:
    """Vectorized ``vehicle_measures`` over flat point arrays sorted by (journey, t).

    ``journey`` holds dense journey indices 0..J-1; ``length_m`` and
    ``limit_mph`` are per journey. Returns a dict of per-journey arrays.
    """
    t = np.asarray(t, dtype=float)
    c = np.asarray(chainage, dtype=float)
    v_ms = np.asarray(speed_mph, dtype=float) * MPH_TO_MS
    n_j = len(length_m)
    first = np.flatnonzero(np.r_[True, journey[1:] != journey[:-1]])
    last = np.r_[first[1:], len(t)] - 1
    L = np.asarray(length_m, dtype=float)
    t_a, t_c = t[first].copy(), t[last].copy()
    s_a, s_c = c[first].copy(), c[last].copy()
    if cfg.extrapolate_to_stop_lines:
        m = (v_ms[first] > cfg.v_s) & (s_a > 0)
        t_a[m] -= s_a[m] / v_ms[first][m]
        s_a[m] = 0.0
        m = (v_ms[last] > cfg.v_s) & (s_c < L)
        t_c[m] += (L[m] - s_c[m]) / v_ms[last][m]
        s_c[m] = L[m]
    travel = t_c - t_a
    speed = np.abs(s_c - s_a) / travel / MPH_TO_MS

    # nearest-rank 80th percentile of free-flow point speeds per journey
    ff = seg.state[seg.point_segment] == State.FREE_FLOW
    fj = journey[ff]
    fs = np.asarray(speed_mph, dtype=float)[ff]
    order = np.lexsort((fs, fj))
    fj, fs = fj[order], fs[order]
    n_ff = np.bincount(fj, minlength=n_j)
    start = np.r_[0, np.cumsum(n_ff)[:-1]]
    v_f = np.asarray(limit_mph, dtype=float).copy()
    has = n_ff > 0
    v_f[has] = fs[start[has] + (4 * n_ff[has] + 4) // 5 - 1]

    t_b = t_a + (L - s_a) / (v_f * MPH_TO_MS)
    d_c = np.maximum(0.0, t_c - t_b)
    stop = seg.state == State.STOP
    sj = seg.journey[stop]
    d_s = np.bincount(sj, weights=seg.duration[stop], minlength=n_j)
    n_s = np.bincount(sj, minlength=n_j)
    q = np.zeros(n_j)
    if sj.size:
        uj, idx = np.unique(sj, return_index=True)
        mean_c = seg.csum[stop] / seg.n[stop]
        q[uj] = np.abs(L[uj] - mean_c[idx])
        dist = np.abs(L[sj] - mean_c)
        farthest = np.zeros(n_j)
        np.maximum.at(farthest, sj, dist)
        bad = int((farthest > q).sum())
        if bad:
            log.warning("%d journeys: first stop is not the farthest from the stop line", bad)
    los_idx = np.searchsorted(np.asarray(cfg.los_thresholds), d_c, side="left")
    return {
        "entry_time_s": t_a,
        "exit_time_s": t_c,
        "travel_time_s": travel,
        "travel_speed_mph": speed,
        "free_flow_speed_mph": v_f,
        "free_flow_arrival_s": t_b,
        "control_delay_s": d_c,
        "stop_delay_s": d_s,
        "n_stops": n_s,
        "queue_length_m": q,
        "aog": (n_s == 0).astype(int),
        "split_failure": (n_s >= 2).astype(int),
        "los": np.array(list(LOS_LETTERS))[los_idx],
    }


def aggregate_window(measures: Sequence[VehicleMeasures], link_id: str, window_start: float,
                     cfg: WindowConfig = WindowConfig()) -> LinkWindowRecord | None:
    """Arithmetic means over the vehicles that exited the link in this window."""
    if not measures:
        return None
    n = len(measures)

    def mean(attr):
        return math.fsum(float(getattr(m, attr)) for m in measures) / n

    return LinkWindowRecord(
        link_id=link_id,
        window_start=window_start,
        n_vehicles=n,
        travel_time_s=mean("travel_time_s"),
        speed_mph=mean("travel_speed_mph"),
        control_delay_s=mean("control_delay_s"),
        stop_delay_s=mean("stop_delay_s"),
        n_stops=mean("n_stops"),
        queue_m=mean("queue_length_m"),
        aog_ratio=mean("aog"),
        sf_ratio=mean("split_failure"),
        low_sample=n < cfg.min_samples_flag,
    )


def aggregate_table(vehicles: pd.DataFrame, cfg: WindowConfig = WindowConfig()) -> pd.DataFrame:
    """Bulk aggregation of a per-vehicle table into (link, window) records.

    ``vehicles`` needs ``link_id``, ``exit_time_s`` (epoch seconds) and the
    per-vehicle measure columns. ``window_start`` is returned in epoch seconds.
    """
    if vehicles.empty:
        return pd.DataFrame(columns=["link_id", "window_start", "n_vehicles"] + WINDOW_MEASURES + ["low_sample"])
    w = np.floor(vehicles["exit_time_s"].to_numpy(float) / cfg.window_s).astype(np.int64) * cfg.window_s
    frame = pd.DataFrame({"link_id": vehicles["link_id"].to_numpy(), "window_start": w})
    for col, src in _VEHICLE_SOURCE.items():
        frame[col] = vehicles[src].to_numpy(float)
    g = frame.groupby(["link_id", "window_start"], sort=True)
    out = g[WINDOW_MEASURES].mean()
    out.insert(0, "n_vehicles", g.size())
    out = out.reset_index()
    out["low_sample"] = out["n_vehicles"] < cfg.min_samples_flag
    return out


# ---------------------------------------------------------------------------
# dense window grid


def epoch_of(day: date) -> float:
    return datetime(day.year, day.month, day.day, tzinfo=timezone.utc).timestamp()


def iso_time(epoch_s) -> list[str]:
    ts = pd.to_datetime(np.asarray(epoch_s, dtype=np.int64), unit="s", utc=True)
    return [x.strftime("%Y-%m-%dT%H:%M:%SZ") for x in ts]


def parse_time(values) -> np.ndarray:
    ts = pd.to_datetime(pd.Series(values), utc=True)
    return ((ts - pd.Timestamp(0, tz="UTC")) // pd.Timedelta(seconds=1)).to_numpy(np.int64)


@dataclass
class WindowSeries:
    """Dense link x day x window grid of aggregated measures.

    ``values[m]`` has shape [links, days, windows]; ``observed`` marks cells
    backed by at least one vehicle, everything else was imputed.
    """

    link_ids: list[str]
    start_date: date
    n_days: int
    values: dict[str, np.ndarray]
    observed: np.ndarray
    n_vehicles: np.ndarray
    cfg: WindowConfig = field(default_factory=WindowConfig)

    @property
    def n_windows(self) -> int:
        return self.cfg.windows_per_day

    @property
    def imputed(self) -> np.ndarray:
        return ~self.observed

    def weekday(self, d: int) -> int:
        return (self.start_date + timedelta(days=int(d))).weekday()

    def day_date(self, d: int) -> date:
        return self.start_date + timedelta(days=int(d))

    def window_epoch(self) -> np.ndarray:
        """Epoch seconds of every cell start, shape [days, windows]."""
        base = epoch_of(self.start_date)
        d = np.arange(self.n_days)[:, None] * 86400
        w = self.cfg.day_start_s + np.arange(self.n_windows)[None, :] * self.cfg.window_s
        return base + d + w

    def to_frame(self) -> pd.DataFrame:
        n_l, n_d, n_w = self.observed.shape
        ep = np.broadcast_to(self.window_epoch(), (n_l, n_d, n_w)).reshape(-1)
        df = pd.DataFrame({
            "link_id": np.repeat(np.array(self.link_ids, dtype=object), n_d * n_w),
            "window_start": iso_time(ep),
            "n_vehicles": self.n_vehicles.reshape(-1),
        })
        for m in WINDOW_MEASURES:
            df[m] = self.values[m].reshape(-1)
        df["imputed"] = (~self.observed).reshape(-1).astype(int)
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, cfg: WindowConfig | None = None) -> "WindowSeries":
        missing = [c for c in SERIES_COLUMNS if c not in df.columns]
        if missing:
            raise ValueError(f"series table missing columns {missing}")
        ep = parse_time(df["window_start"]).astype(np.int64)
        tod = ep % 86400
        w_s = int(np.diff(np.unique(tod)).min()) if len(np.unique(tod)) > 1 else 900
        cfg = cfg or WindowConfig(window_s=w_s, day_start_s=int(tod.min()), day_end_s=int(tod.max()) + w_s)
        day0 = ep.min() - ep.min() % 86400
        start = datetime.fromtimestamp(day0, tz=timezone.utc).date()
        d = (ep - day0) // 86400
        w = (tod - cfg.day_start_s) // cfg.window_s
        links = list(dict.fromkeys(df["link_id"].astype(str)))
        li = pd.Index(links).get_indexer(df["link_id"].astype(str))
        n_d = int(d.max()) + 1
        shape = (len(links), n_d, cfg.windows_per_day)
        if len(df) != np.prod(shape):
            raise ValueError("series table is not a dense link x window grid")
        values = {}
        for m in WINDOW_MEASURES:
            a = np.full(shape, np.nan)
            a[li, d, w] = df[m].to_numpy(float)
            values[m] = a
        observed = np.zeros(shape, dtype=bool)
        observed[li, d, w] = df["imputed"].to_numpy(int) == 0
        nv = np.zeros(shape, dtype=np.int64)
        nv[li, d, w] = df["n_vehicles"].to_numpy(np.int64)
        return cls(links, start, n_d, values, observed, nv, cfg)


def window_series(records: pd.DataFrame, link_ids: Sequence[str], start_date: date, n_days: int,
                  cfg: WindowConfig = WindowConfig(), pool_days: Sequence[int] | None = None) -> WindowSeries:
    """Place aggregated records on the dense grid and impute the gaps.

    A missing cell takes the mean of observed cells of the same link and time
    of day on same-weekday days from ``pool_days`` (all days by default);
    whatever is still missing is linearly interpolated along time.
    """
    link_ids = list(link_ids)
    n_w = cfg.windows_per_day
    shape = (len(link_ids), n_days, n_w)
    values = {m: np.full(shape, np.nan) for m in WINDOW_MEASURES}
    nv = np.zeros(shape, dtype=np.int64)
    if len(records):
        ep = records["window_start"].to_numpy(np.int64) - int(epoch_of(start_date))
        d = ep // 86400
        w = (ep % 86400 - cfg.day_start_s) // cfg.window_s
        li = pd.Index(link_ids).get_indexer(records["link_id"].astype(str))
        keep = (li >= 0) & (d >= 0) & (d < n_days) & (w >= 0) & (w < n_w)
        d, w, li = d[keep], w[keep], li[keep]
        for m in WINDOW_MEASURES:
            values[m][li, d, w] = records[m].to_numpy(float)[keep]
        nv[li, d, w] = records["n_vehicles"].to_numpy(np.int64)[keep]
    observed = nv > 0
    for i, lid in enumerate(link_ids):
        if not observed[i].any():
            raise ValueError(f"link {lid!r} has no observations over the whole horizon")
    pool = np.zeros(n_days, dtype=bool)
    pool[list(range(n_days)) if pool_days is None else list(pool_days)] = True
    weekday = np.array([(start_date + timedelta(days=k)).weekday() for k in range(n_days)])
    for m in WINDOW_MEASURES:
        _impute(values[m], observed, pool, weekday)
    return WindowSeries(link_ids, start_date, n_days, values, observed, nv, cfg)


def _impute(a: np.ndarray, observed: np.ndarray, pool: np.ndarray, weekday: np.ndarray) -> None:
    obs = observed & pool[None, :, None]
    for wd in range(7):
        days = weekday == wd
        if not days.any():
            continue
        src = np.where(obs[:, days], a[:, days], 0.0)
        cnt = obs[:, days].sum(axis=1)
        mean = np.divide(src.sum(axis=1), cnt, out=np.full(cnt.shape, np.nan), where=cnt > 0)
        block = a[:, days]
        fill = ~observed[:, days]
        block[fill] = np.broadcast_to(mean[:, None, :], block.shape)[fill]
        a[:, days] = block
    n_l = a.shape[0]
    flat = a.reshape(n_l, -1)
    x = np.arange(flat.shape[1])
    for i in range(n_l):
        ok = np.isfinite(flat[i])
        if not ok.all():
            flat[i, ~ok] = np.interp(x[~ok], x[ok], flat[i, ok])
