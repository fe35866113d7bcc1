"""Synthetic signalized-corridor traffic with probe-vehicle GPS output.

The network is a straight-ish two-way arterial of signalized intersections.
Vehicles enter each directional link at its upstream stop line, either as
through traffic from the upstream link or from a side street, and leave the
link at the downstream stop line after a point-queue wait:

    t_free = t_arr + L / v_f
    t_dep  = next_green(max(t_free, t_dep_prev + headway))

with headway = 2 s / lanes, stretched by 1 / (1 - severity) during an
incident. A vehicle delayed by at least ``stop_min_delay_s`` drives to the
back of the queue, stands still, then drives on; smaller delays become a
slowdown over the last stretch before the stop line. Demand follows a
day-type diurnal profile scaled per direction by a lognormal day factor and a
mean-reverting (Ornstein-Uhlenbeck) log-multiplier.

Probe vehicles (Bernoulli per vehicle) emit a point every ``ping_s`` seconds
with Gaussian position and heading noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from datetime import date, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .basemap import MPH_TO_MS, Intersection, Link, LinkGraph
from .matcher import TRAJECTORY_COLUMNS
from .measures import WindowConfig, epoch_of, iso_time

GROUND_TRUTH_COLUMNS = ["link_id", "window_start", "volume", "mean_delay_s", "mean_queue_m", "mean_travel_time_s",
                        "incident"]
VEHICLE_SPACING_M = 7.5
STOP_LINE_GAP_M = 2.0
SLOWDOWN_ZONE_M = 150.0
LANE_OFFSET_M = 1.8
QUEUE_FLOOR_M = 15.0
# demand is set against the capacity of a split no longer than this, so longer greens do not attract traffic
DEMAND_REF_GREEN = 0.55


@dataclass(frozen=True)
class Incident:
    link_id: str
    day: int
    start_s: float  # seconds after midnight
    duration_s: float
    severity: float

    def __post_init__(self):
        if not 0 < self.severity <= 1:
            raise ValueError("incident severity must lie in (0, 1]")
        if self.duration_s <= 0:
            raise ValueError("incident duration must be positive")


@dataclass(frozen=True)
class Signal:
    cycle_s: float
    green_ratio: float
    offset_s: float

    def __post_init__(self):
        if not 0 < self.green_ratio <= 1:
            raise ValueError("green ratio must lie in (0, 1]")
        if self.cycle_s <= 0:
            raise ValueError("cycle must be positive")


@dataclass
class SimScenario:
    graph: LinkGraph
    signals: dict[str, Signal]  # per link, at its downstream stop line
    corridor: dict[str, list[str]]  # direction -> ordered link ids
    days: int = 28
    start_date: date = date(2024, 3, 4)
    penetration: float = 0.03
    holidays: tuple[int, ...] = ()
    incidents: tuple[Incident, ...] = ()
    seed: int = 42
    ping_s: float = 3.0
    gps_noise_m: float = 2.0
    heading_noise_deg: float = 5.0
    through_prob: float = 0.7
    sim_start_s: float = 5.5 * 3600.0
    sim_end_s: float = 22.0 * 3600.0
    stop_min_delay_s: float = 15.0
    demand_scale: float = 1.0
    peak_vc: float = 0.85
    offpeak_vc: float = 0.3
    day_sigma: float = 0.08
    ou_sigma: float = 0.12
    ou_tau_s: float = 75 * 60.0

    def __post_init__(self):
        if not 0 < self.penetration <= 1:
            raise ValueError("penetration must lie in (0, 1]")
        if self.days < 1:
            raise ValueError("days must be >= 1")
        for lid in self.graph.links:
            if lid not in self.signals:
                raise ValueError(f"link {lid!r} has no signal")
        for inc in self.incidents:
            if inc.link_id not in self.graph.links:
                raise ValueError(f"incident on unknown link {inc.link_id!r}")
            if not 0 <= inc.day < self.days:
                raise ValueError(f"incident day {inc.day} outside the horizon")

    def is_weekend(self, day: int) -> bool:
        return (self.start_date + timedelta(days=day)).weekday() >= 5 or day in self.holidays

    def day_epoch(self, day: int) -> float:
        return epoch_of(self.start_date + timedelta(days=day))


# ---------------------------------------------------------------------------
# scenario construction

SCENARIO_KEYS = {
    "seed", "days", "start_date", "penetration", "n_intersections", "spacing_m", "origin", "holidays", "incidents",
    "n_incidents", "green_ratio", "ping_s", "gps_noise_m", "heading_noise_deg", "through_prob", "demand_scale",
    "peak_vc", "offpeak_vc", "day_sigma", "ou_sigma", "ou_tau_min", "stop_min_delay_s", "test_days",
}


def _offset_lonlat(lon0: float, lat0: float, east_m: float, north_m: float) -> tuple[float, float]:
    from .basemap import metres_per_degree

    kx, ky = metres_per_degree(lat0)
    return lon0 + east_m / kx, lat0 + north_m / ky


def build_corridor(n_intersections: int = 6, spacing_m: Sequence[float] = (420, 350, 520, 380, 460),
                   origin: tuple[float, float] = (-81.379, 28.538), rng: np.random.Generator | None = None):
    """Two-way arterial with through movements; returns (graph, corridor, lanes, limits)."""
    rng = rng or np.random.default_rng(0)
    if len(spacing_m) != n_intersections - 1:
        raise ValueError("need one spacing per consecutive intersection pair")
    east = np.concatenate([[0.0], np.cumsum(spacing_m)])
    north = rng.uniform(-25, 25, size=n_intersections)
    north[0] = 0.0
    nodes = {}
    for k in range(n_intersections):
        lon, lat = _offset_lonlat(origin[0], origin[1], east[k], north[k])
        nodes[f"N{k}"] = Intersection(f"N{k}", lon, lat)
    links = {}
    eb, wb = [], []
    for k in range(n_intersections - 1):
        # a gentle bend midway along every block
        mx = 0.5 * (east[k] + east[k + 1])
        my = 0.5 * (north[k] + north[k + 1]) + rng.uniform(-8, 8)
        mid = _offset_lonlat(origin[0], origin[1], mx, my)
        a = (nodes[f"N{k}"].lon, nodes[f"N{k}"].lat)
        b = (nodes[f"N{k + 1}"].lon, nodes[f"N{k + 1}"].lat)
        lanes = int(rng.choice([1, 2]))
        limit = float(rng.choice([35.0, 40.0, 45.0]))
        links[f"EB{k}"] = Link(f"EB{k}", f"N{k}", f"N{k + 1}", (a, mid, b), lanes, limit, "arterial_eb")
        lanes_w = int(rng.choice([1, 2]))
        links[f"WB{k}"] = Link(f"WB{k}", f"N{k + 1}", f"N{k}", (b, mid, a), lanes_w, limit, "arterial_wb")
        eb.append(f"EB{k}")
        wb.append(f"WB{k}")
    wb.reverse()
    movements = frozenset([(eb[i], eb[i + 1]) for i in range(len(eb) - 1)] + [(wb[i], wb[i + 1]) for i in range(len(wb) - 1)])
    graph = LinkGraph(nodes, links, movements)
    return graph, {"EB": eb, "WB": wb}


def default_scenario(seed: int = 42, days: int = 28, penetration: float = 0.03, n_incidents: int = 3,
                     test_days: int = 7, **overrides) -> SimScenario:
    return scenario_from_dict({"seed": seed, "days": days, "penetration": penetration, "n_incidents": n_incidents,
                               "test_days": test_days, **overrides})


def scenario_from_dict(doc: dict) -> SimScenario:
    """Build a scenario from a (possibly partial) JSON document; missing parts are drawn from the seed."""
    unknown = set(doc) - SCENARIO_KEYS
    if unknown:
        raise ValueError(f"unknown scenario keys {sorted(unknown)}")
    seed = int(doc.get("seed", 42))
    rng = np.random.default_rng([seed, 0])
    days = int(doc.get("days", 28))
    n_int = int(doc.get("n_intersections", 6))
    # random draws happen whether or not a value is given, so overrides never shift later draws
    spacing = [420, 350, 520, 380, 460] if n_int == 6 else list(rng.uniform(320, 540, size=n_int - 1).round())
    spacing = doc.get("spacing_m", spacing)
    graph, corridor = build_corridor(n_int, spacing, tuple(doc.get("origin", (-81.379, 28.538))), rng)
    green = doc.get("green_ratio")
    signals = {}
    cycles = {f"N{k}": float(rng.choice([90.0, 100.0, 110.0, 120.0])) for k in range(n_int)}
    for lid, link in graph.links.items():
        g = float(rng.uniform(0.4, 0.55))
        g = float(green) if green is not None else g
        c = cycles[link.downstream]
        signals[lid] = Signal(c, g, float(rng.uniform(0, c)))
    start = date.fromisoformat(doc.get("start_date", "2024-03-04"))
    test_days = int(doc.get("test_days", 7))
    holidays = doc.get("holidays")
    if holidays is None:
        weekdays = [d for d in range(days - test_days) if (start + timedelta(days=d)).weekday() < 5]
        holidays = [int(rng.choice(weekdays[len(weekdays) // 2:]))] if len(weekdays) > 4 else []
    incidents = doc.get("incidents")
    if incidents is None:
        incidents = _draw_incidents(rng, graph, days, int(doc.get("n_incidents", 3)), test_days, start, holidays)
    else:
        incidents = [Incident(**i) for i in incidents]
    kw = {}
    for key in ("ping_s", "gps_noise_m", "heading_noise_deg", "through_prob", "demand_scale", "peak_vc",
                "offpeak_vc", "day_sigma", "ou_sigma", "stop_min_delay_s"):
        if key in doc:
            kw[key] = float(doc[key])
    if "ou_tau_min" in doc:
        kw["ou_tau_s"] = 60.0 * float(doc["ou_tau_min"])
    return SimScenario(
        graph=graph, signals=signals, corridor=corridor, days=days, start_date=start,
        penetration=float(doc.get("penetration", 0.03)), holidays=tuple(int(h) for h in holidays),
        incidents=tuple(incidents), seed=seed, **kw,
    )


def _draw_incidents(rng, graph, days, n, test_days, start, holidays) -> list[Incident]:
    """Weekday mid-day incidents; the last one falls in the test period when there is room."""
    if n <= 0:
        return []
    fit_days = [d for d in range(days - test_days) if (start + timedelta(days=d)).weekday() < 5 and d not in holidays]
    test = [d for d in range(max(days - test_days, 0), days) if (start + timedelta(days=d)).weekday() < 5]
    chosen: list[int] = []
    n_test = 1 if (test and n >= 2) else 0
    pool = [d for d in fit_days if d >= 3] or fit_days
    chosen += sorted(rng.choice(pool, size=min(n - n_test, len(pool)), replace=False).tolist())
    if n_test:
        chosen.append(int(rng.choice(test)))
    link_ids = sorted(graph.links)
    out = []
    for d in chosen:
        out.append(Incident(
            link_id=str(rng.choice(link_ids)),
            day=int(d),
            start_s=float(rng.integers(38, 56) * 900),  # 09:30 to 13:45
            duration_s=float(rng.integers(4, 6) * 900),
            severity=0.8,
        ))
    return out


def scenario_to_dict(sc: SimScenario) -> dict:
    """JSON document that rebuilds ``sc`` exactly through ``scenario_from_dict``."""
    nodes = [sc.graph.intersections[f"N{k}"] for k in range(len(sc.graph.intersections))]
    from .basemap import metres_per_degree

    kx, _ = metres_per_degree(nodes[0].lat)
    spacing = [(b.lon - a.lon) * kx for a, b in zip(nodes, nodes[1:])]
    greens = {s.green_ratio for s in sc.signals.values()}
    extra = {"green_ratio": greens.pop()} if len(greens) == 1 and len(sc.signals) > 1 else {}
    return {
        **extra,
        "n_intersections": len(nodes), "spacing_m": spacing, "origin": [nodes[0].lon, nodes[0].lat],
        "seed": sc.seed, "days": sc.days, "start_date": sc.start_date.isoformat(), "penetration": sc.penetration,
        "holidays": list(sc.holidays), "incidents": [asdict(i) for i in sc.incidents],
        "ping_s": sc.ping_s, "gps_noise_m": sc.gps_noise_m, "heading_noise_deg": sc.heading_noise_deg,
        "through_prob": sc.through_prob, "demand_scale": sc.demand_scale, "peak_vc": sc.peak_vc,
        "offpeak_vc": sc.offpeak_vc, "day_sigma": sc.day_sigma, "ou_sigma": sc.ou_sigma,
        "ou_tau_min": sc.ou_tau_s / 60.0, "stop_min_delay_s": sc.stop_min_delay_s,
    }


def load_scenario(path: str | Path) -> SimScenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"cannot parse scenario {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError("scenario must be a JSON object")
    return scenario_from_dict(doc)


# ---------------------------------------------------------------------------
# demand


def _bump(t_h: np.ndarray, centre: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((t_h - centre) / width) ** 2)


def vc_profile(t_s: np.ndarray, direction: str, weekend: bool, sc: SimScenario) -> np.ndarray:
    """Target volume/capacity ratio over the day."""
    t_h = np.asarray(t_s, dtype=float) / 3600.0
    ramp = np.clip((t_h - 5.0) / 1.5, 0, 1) * np.clip((23.0 - t_h) / 2.0, 0, 1)
    if weekend:
        base = 0.6 * sc.offpeak_vc + (0.55 - 0.6 * sc.offpeak_vc) * _bump(t_h, 13.5, 3.0)
        return ramp * base
    am, pm = (1.0, 0.7) if direction == "EB" else (0.7, 1.0)
    peak = sc.peak_vc - sc.offpeak_vc
    v = sc.offpeak_vc + peak * (am * _bump(t_h, 7.75, 0.9) + pm * _bump(t_h, 17.25, 1.0))
    return ramp * v


def _ou_path(rng, n: int, dt: float, tau: float, sigma: float) -> np.ndarray:
    """Stationary OU samples with marginal std ``sigma``."""
    a = math.exp(-dt / tau)
    noise = rng.standard_normal(n) * sigma * math.sqrt(1 - a * a)
    x = np.empty(n)
    x[0] = rng.standard_normal() * sigma
    for i in range(1, n):
        x[i] = a * x[i - 1] + noise[i]
    return x


def _poisson_times(rng, rate_per_s: np.ndarray, t0: float, dt: float) -> np.ndarray:
    """Arrival times of a piecewise-constant-rate Poisson process on bins of width dt."""
    counts = rng.poisson(np.maximum(rate_per_s, 0) * dt)
    starts = t0 + dt * np.arange(len(counts))
    t = np.repeat(starts, counts) + rng.uniform(0, dt, size=int(counts.sum()))
    return np.sort(t)


# ---------------------------------------------------------------------------
# queue dynamics


def capacity_vph(link: Link, sig: Signal) -> float:
    return 3600.0 / 2.0 * link.lanes * sig.green_ratio


def discharge(t_free: np.ndarray, lanes: int, sig: Signal, incidents: Sequence[tuple[float, float, float]]) -> np.ndarray:
    """Departure times for vehicles sorted by free-flow arrival (sequential point queue)."""
    base_h = 2.0 / lanes
    c, g_len, off = sig.cycle_s, sig.green_ratio * sig.cycle_s, sig.offset_s
    always_green = sig.green_ratio >= 1.0
    out = np.empty(len(t_free))
    prev = -math.inf
    inc = sorted(incidents)
    for i, tf in enumerate(t_free.tolist()):
        h = base_h
        for s, e, sev in inc:
            if s <= prev < e or s <= tf < e:
                h = base_h / max(1.0 - sev, 1e-3)
                break
        t = tf if tf > prev + h else prev + h
        if not always_green:
            ph = (t - off) % c
            if ph >= g_len:
                t += c - ph
        out[i] = t
        prev = t
    return out


@dataclass
class Traversals:
    """Column store of link traversals for one day (all vehicles, not just probes)."""

    vehicle: np.ndarray
    link: np.ndarray  # link index into graph order
    t_arr: np.ndarray
    t_dep: np.ndarray
    t_free: np.ndarray
    v_f: np.ndarray  # m/s
    x_stop: np.ndarray  # chainage of the stop, NaN when the vehicle does not stop
    first: np.ndarray  # first traversal of the vehicle's trip
    last: np.ndarray  # last traversal of the vehicle's trip

    @property
    def delay(self) -> np.ndarray:
        return self.t_dep - self.t_free


def simulate_day_traversals(sc: SimScenario, day: int) -> Traversals:
    rng = np.random.default_rng([sc.seed, 1000 + day])
    g = sc.graph
    link_ids = list(g.links)
    weekend = sc.is_weekend(day)
    bin_s = 60.0
    n_bins = int(math.ceil((sc.sim_end_s - sc.sim_start_s) / bin_s))
    t_bins = sc.sim_start_s + bin_s * (np.arange(n_bins) + 0.5)
    day_inc = [i for i in sc.incidents if i.day == day]
    cols = {k: [] for k in ("vehicle", "link", "t_arr", "t_dep", "t_free", "v_f", "x_stop", "first", "last")}
    next_vid = 0
    for direction in sorted(sc.corridor):
        chain = sc.corridor[direction]
        day_factor = math.exp(rng.normal(0, sc.day_sigma) - 0.5 * sc.day_sigma**2)
        mult = day_factor * np.exp(_ou_path(rng, n_bins, bin_s, sc.ou_tau_s, sc.ou_sigma))
        vc = vc_profile(t_bins, direction, weekend, sc) * sc.demand_scale
        prev_flow, p_through = None, sc.through_prob
        carried_vid = carried_t = carried_speed = None
        for pos, lid in enumerate(chain):
            link = g.links[lid]
            sig = sc.signals[lid]
            ref_cap = 3600.0 / 2.0 * link.lanes * min(sig.green_ratio, DEMAND_REF_GREEN)
            flow = vc * ref_cap / 3600.0  # veh/s targeted on this link
            cap = capacity_vph(link, sig)
            if prev_flow is None:
                entry = flow
            else:
                entry = np.maximum(flow - p_through * prev_flow, 0.1 * flow)
            t_new = _poisson_times(rng, entry * mult, sc.sim_start_s, bin_s)
            vid_new = next_vid + np.arange(len(t_new))
            next_vid += len(t_new)
            spd_new = rng.uniform(0.95, 1.15, size=len(t_new))
            if carried_vid is None:
                vid, t_arr, spd, first = vid_new, t_new, spd_new, np.ones(len(t_new), dtype=bool)
            else:
                vid = np.concatenate([carried_vid, vid_new])
                t_arr = np.concatenate([carried_t, t_new])
                spd = np.concatenate([carried_speed, spd_new])
                first = np.r_[np.zeros(len(carried_vid), dtype=bool), np.ones(len(t_new), dtype=bool)]
            v_f = spd * link.speed_limit_ms
            t_free = t_arr + link.length_m / v_f
            order = np.argsort(t_free, kind="stable")
            vid, t_arr, spd, first, v_f, t_free = (a[order] for a in (vid, t_arr, spd, first, v_f, t_free))
            incs = [(i.start_s, i.start_s + i.duration_s, i.severity) for i in day_inc if i.link_id == lid]
            t_dep = discharge(t_free, link.lanes, sig, incs)
            n_ahead = np.arange(len(t_free)) - np.searchsorted(t_dep, t_free, side="right")
            n_ahead = np.maximum(n_ahead, 0)
            x_stop = link.length_m - STOP_LINE_GAP_M - VEHICLE_SPACING_M * (n_ahead // link.lanes)
            # queues longer than the link stack up just inside its entry (no spillback)
            x_stop = np.clip(x_stop, min(QUEUE_FLOOR_M, link.length_m / 4), link.length_m)
            stops = (t_dep - t_free) >= sc.stop_min_delay_s
            x_stop = np.where(stops, x_stop, np.nan)
            if pos + 1 < len(chain):
                # through traffic never exceeds what the next link can carry
                nxt = sc.graph.links[chain[pos + 1]]
                p_through = min(sc.through_prob, 0.9 * capacity_vph(nxt, sc.signals[nxt.id]) / cap)
                through = rng.random(len(vid)) < p_through
            else:
                through = np.zeros(len(vid), dtype=bool)
            li = link_ids.index(lid)
            for k, v in (("vehicle", vid), ("link", np.full(len(vid), li)), ("t_arr", t_arr), ("t_dep", t_dep),
                         ("t_free", t_free), ("v_f", v_f), ("x_stop", x_stop), ("first", first), ("last", ~through)):
                cols[k].append(v)
            prev_flow = flow
            carried_vid, carried_t, carried_speed = vid[through], t_dep[through], spd[through]
    arr = {k: np.concatenate(v) if v else np.zeros(0) for k, v in cols.items()}
    arr["vehicle"] = arr["vehicle"].astype(np.int64) + day * 10_000_000
    arr["link"] = arr["link"].astype(np.int64)
    arr["first"] = arr["first"].astype(bool)
    arr["last"] = arr["last"].astype(bool)
    return Traversals(**arr)


# ---------------------------------------------------------------------------
# trajectories


def _profile(tr: Traversals, lengths: np.ndarray):
    """Piecewise-linear chainage profile per traversal.

    The vehicle cruises at v_f to ``xs`` (reached at t1), stands still until
    t2 (t2 == t1 when it does not stop) and then covers the rest of the link
    at ``v2`` so that it crosses the stop line at t_dep.
    """
    L = lengths[tr.link]
    stopped = np.isfinite(tr.x_stop)
    xs = np.where(stopped, tr.x_stop, np.maximum(L - SLOWDOWN_ZONE_M, 0.0))
    t1 = tr.t_arr + xs / tr.v_f
    t2 = np.where(stopped, tr.t_dep - (L - xs) / tr.v_f, t1)
    span = tr.t_dep - t2
    v2 = np.divide(L - xs, span, out=tr.v_f.copy(), where=span > 1e-9)
    return L, xs, t1, t2, v2


def probe_points(sc: SimScenario, day: int, tr: Traversals, noise: bool = True) -> pd.DataFrame:
    """GPS pings for the probe vehicles of one day."""
    rng = np.random.default_rng([sc.seed, 2000 + day])
    uniq = np.unique(tr.vehicle)
    is_probe = rng.random(len(uniq)) < sc.penetration
    phase = rng.uniform(0, sc.ping_s, size=len(uniq))
    vi = np.searchsorted(uniq, tr.vehicle)
    idx = np.flatnonzero(is_probe[vi])
    if idx.size == 0:
        return pd.DataFrame(columns=TRAJECTORY_COLUMNS)
    # trip order, so pings come out sorted by (journey, t) without a final sort
    idx = idx[np.lexsort((tr.t_arr[idx], tr.vehicle[idx]))]
    links = list(sc.graph.links.values())
    lengths = np.array([l.length_m for l in links])
    sub = Traversals(*(getattr(tr, f.name)[idx] for f in fields(Traversals)))
    L, xs, t1, t2, v2 = _profile(sub, lengths)
    ph = phase[vi[idx]]
    pad = 2.0 * sc.ping_s
    lo = np.where(sub.first, sub.t_arr - pad, sub.t_arr)
    hi = np.where(sub.last, sub.t_dep + pad, sub.t_dep)
    k0 = np.ceil((lo - ph) / sc.ping_s).astype(np.int64)
    k1 = np.ceil((hi - ph) / sc.ping_s).astype(np.int64)  # exclusive
    n = np.maximum(k1 - k0, 0)
    row = np.repeat(np.arange(len(n)), n)
    k = np.arange(n.sum()) + np.repeat(k0 - (np.cumsum(n) - n), n)
    t = ph[row] + k * sc.ping_s
    v_f = sub.v_f[row]
    r_t1, r_t2, r_t3 = t1[row], t2[row], sub.t_dep[row]
    r_xs, r_v2 = xs[row], v2[row]
    # before the link and after it the vehicle cruises at its free speed
    chain = np.where(t < r_t1, (t - sub.t_arr[row]) * v_f,
                     np.where(t < r_t2, r_xs,
                              np.where(t < r_t3, r_xs + (t - r_t2) * r_v2, L[row] + (t - r_t3) * v_f)))
    speed = np.where(t < r_t1, v_f, np.where(t < r_t2, 0.0, np.where(t < r_t3, r_v2, v_f)))
    lon = np.empty(len(t))
    lat = np.empty(len(t))
    heading = np.empty(len(t))
    lk = sub.link[row]
    perm = np.argsort(lk, kind="stable")
    bounds = np.searchsorted(lk[perm], np.arange(len(links) + 1))
    for li, link in enumerate(links):
        sel = perm[bounds[li]:bounds[li + 1]]
        if sel.size == 0:
            continue
        c = chain[sel]
        px, py = link.point_at(c)
        brg = link.segment_bearings()[link.segment_index(c)]
        # right-hand lane offset from the centreline
        rad = np.radians(brg)
        px = px + LANE_OFFSET_M * np.cos(rad)
        py = py - LANE_OFFSET_M * np.sin(rad)
        lon[sel], lat[sel] = link.frame.to_lonlat(px, py)
        heading[sel] = brg
    if noise and sc.gps_noise_m > 0:
        from .basemap import metres_per_degree

        kx, ky = metres_per_degree(float(np.mean(lat)))
        lon += rng.normal(0, sc.gps_noise_m, len(t)) / kx
        lat += rng.normal(0, sc.gps_noise_m, len(t)) / ky
    if noise and sc.heading_noise_deg > 0:
        heading = heading + rng.normal(0, sc.heading_noise_deg, len(t))
    heading = np.mod(heading, 360.0)
    # traversal windows are half-open, so consecutive traversals never repeat a ping
    return pd.DataFrame({
        "journey_id": sub.vehicle[row],
        "t": sc.day_epoch(day) + t,
        "lon": lon,
        "lat": lat,
        "speed_mph": speed / MPH_TO_MS,
        "heading_deg": heading,
    })


def ground_truth_day(sc: SimScenario, day: int, tr: Traversals, wcfg: WindowConfig = WindowConfig()) -> pd.DataFrame:
    """Per (link, window) truth by exit time, over all vehicles."""
    links = list(sc.graph.links.values())
    lengths = np.array([l.length_m for l in links])
    q = np.where(np.isfinite(tr.x_stop), lengths[tr.link] - tr.x_stop, 0.0)
    base = sc.day_epoch(day)
    w = np.floor(tr.t_dep / wcfg.window_s).astype(np.int64)
    df = pd.DataFrame({"link": tr.link, "w": w, "delay": tr.delay, "queue": q, "tt": tr.t_dep - tr.t_arr})
    g = df.groupby(["link", "w"], sort=True)
    out = g.agg(volume=("delay", "size"), mean_delay_s=("delay", "mean"), mean_queue_m=("queue", "mean"),
                mean_travel_time_s=("tt", "mean")).reset_index()
    tod = out["w"].to_numpy() * wcfg.window_s
    keep = (tod >= wcfg.day_start_s) & (tod < wcfg.day_end_s)
    out = out.loc[keep].reset_index(drop=True)
    tod = tod[keep]
    inc = np.zeros(len(out), dtype=int)
    link_ids = [l.id for l in links]
    for i in sc.incidents:
        if i.day != day:
            continue
        li = link_ids.index(i.link_id)
        hit = (out["link"].to_numpy() == li) & (tod + wcfg.window_s > i.start_s) & (tod < i.start_s + i.duration_s)
        inc[hit] = 1
    return pd.DataFrame({
        "link_id": np.array(link_ids, dtype=object)[out["link"].to_numpy()],
        "window_start": base + tod,
        "volume": out["volume"].to_numpy(),
        "mean_delay_s": out["mean_delay_s"].to_numpy(),
        "mean_queue_m": out["mean_queue_m"].to_numpy(),
        "mean_travel_time_s": out["mean_travel_time_s"].to_numpy(),
        "incident": inc,
    })


@dataclass
class DayOutput:
    day: int
    points: pd.DataFrame
    truth: pd.DataFrame
    traversals: Traversals


def simulate_days(sc: SimScenario, noise: bool = True, days: Sequence[int] | None = None) -> Iterator[DayOutput]:
    """Simulate day by day; each day draws from its own seeded substream."""
    for d in (range(sc.days) if days is None else days):
        tr = simulate_day_traversals(sc, d)
        yield DayOutput(d, probe_points(sc, d, tr, noise), ground_truth_day(sc, d, tr), tr)


def simulate(sc: SimScenario, noise: bool = True) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Whole-horizon trajectories and ground truth (window_start in epoch seconds)."""
    pts, truth = [], []
    for out in simulate_days(sc, noise):
        pts.append(out.points)
        truth.append(out.truth)
    return pd.concat(pts, ignore_index=True), pd.concat(truth, ignore_index=True)


def write_outputs(sc: SimScenario, out_dir: str | Path, noise: bool = True) -> dict:
    """Stream trajectories.csv / ground_truth.csv / basemap.json / scenario.json into ``out_dir``."""
    from .basemap import save_basemap

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_path = out / "trajectories.csv"
    truth_path = out / "ground_truth.csv"
    n_pts = 0
    with open(traj_path, "w", newline="") as ft, open(truth_path, "w", newline="") as fg:
        for i, day in enumerate(simulate_days(sc, noise)):
            day.points[TRAJECTORY_COLUMNS].to_csv(ft, index=False, header=(i == 0), float_format="%.9f")
            t = day.truth.copy()
            t["window_start"] = iso_time(t["window_start"].to_numpy())
            t[GROUND_TRUTH_COLUMNS].to_csv(fg, index=False, header=(i == 0), float_format="%.6f")
            n_pts += len(day.points)
    save_basemap(sc.graph, out / "basemap.json")
    (out / "scenario.json").write_text(json.dumps(scenario_to_dict(sc), indent=1))
    return {"points": n_pts, "trajectories": str(traj_path), "ground_truth": str(truth_path)}
