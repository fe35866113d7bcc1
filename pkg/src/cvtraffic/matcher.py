"""Assign raw GPS points to links and express them as stop-line chainage.

Three filters run per link: a flat-ended geofence around the centreline, a
heading check against the local link bearing, and journey validation (at least
two points covering at least half the link). The bulk path (``match_points``)
works on whole trajectory tables at once; the small per-point functions are
the same geometry applied to single records.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
import pandas as pd

from .basemap import Link, LinkGraph

TRAJECTORY_COLUMNS = ["journey_id", "t", "lon", "lat", "speed_mph", "heading_deg"]
MATCHED_COLUMNS = ["journey_id", "link_id", "t", "chainage_m", "speed_mph", "cross_track_m"]

# back-jumps larger than this are GPS jitter and get clamped
REPAIR_BACKJUMP_M = 20.0


@dataclass(frozen=True)
class MatchConfig:
    geofence_width_m: float = 15.0
    heading_threshold_deg: float = 30.0

    def __post_init__(self):
        if not (self.geofence_width_m > 0 and self.heading_threshold_deg > 0):
            raise ValueError("geofence width and heading threshold must be positive")

    @property
    def half_width(self) -> float:
        return self.geofence_width_m / 2.0


@dataclass(frozen=True)
class RawPoint:
    journey_id: str
    lon: float
    lat: float
    t: float
    speed_mph: float = 0.0
    heading_deg: float = 0.0


@dataclass(frozen=True)
class MatchedPoint:
    journey_id: str
    lon: float
    lat: float
    t: float
    speed_mph: float
    heading_deg: float
    link_id: str
    chainage_m: float
    cross_track_m: float


@dataclass(frozen=True)
class Journey:
    journey_id: str
    link_id: str
    points: tuple[MatchedPoint, ...]

    @property
    def t(self) -> np.ndarray:
        return np.array([p.t for p in self.points])

    @property
    def chainage(self) -> np.ndarray:
        return np.array([p.chainage_m for p in self.points])

    @property
    def speed_mph(self) -> np.ndarray:
        return np.array([p.speed_mph for p in self.points])


def angular_deviation(a, b):
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % 360.0
    return np.minimum(d, 360.0 - d)


def project_xy(link: Link, x, y):
    """Project local-frame points onto the link polyline.

    Returns (chainage, signed cross-track, beyond_ends). Cross-track is positive
    to the left of the travel direction; ``beyond_ends`` marks points whose
    foot falls before the upstream or after the downstream stop line.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    p0 = link.xy[:-1]
    d = np.diff(link.xy, axis=0)
    seglen = link.segment_lengths
    rx = x[:, None] - p0[None, :, 0]
    ry = y[:, None] - p0[None, :, 1]
    t = (rx * d[:, 0] + ry * d[:, 1]) / seglen**2
    tc = np.clip(t, 0.0, 1.0)
    ex = rx - tc * d[:, 0]
    ey = ry - tc * d[:, 1]
    dist2 = ex * ex + ey * ey
    k = np.argmin(dist2, axis=1)
    rows = np.arange(len(x))
    chainage = link.cumulative[k] + tc[rows, k] * seglen[k]
    side = d[k, 0] * ry[rows, k] - d[k, 1] * rx[rows, k]
    dist = np.sqrt(dist2[rows, k])
    cross = np.where(side >= 0, dist, -dist)
    last = len(seglen) - 1
    beyond = ((k == 0) & (t[:, 0] < 0)) | ((k == last) & (t[:, last] > 1))
    return chainage, cross, beyond


def project_point(point: RawPoint, link: Link) -> tuple[float, float]:
    x, y = link.frame.to_xy(point.lon, point.lat)
    chainage, cross, _ = project_xy(link, x, y)
    return float(chainage[0]), float(cross[0])


def _in_geofence(link: Link, lon, lat, cfg: MatchConfig):
    x, y = link.frame.to_xy(lon, lat)
    chainage, cross, beyond = project_xy(link, x, y)
    inside = (~beyond) & (np.abs(cross) <= cfg.half_width)
    return inside, chainage, cross


def geofence_filter(points: list[RawPoint], link: Link, cfg: MatchConfig) -> list[RawPoint]:
    if not points:
        return []
    inside, _, _ = _in_geofence(link, [p.lon for p in points], [p.lat for p in points], cfg)
    return [p for p, keep in zip(points, inside) if keep]


def heading_check(point: RawPoint, link: Link, cfg: MatchConfig) -> bool:
    chainage, _ = project_point(point, link)
    bearing = link.segment_bearings()[int(link.segment_index(chainage))]
    return bool(angular_deviation(point.heading_deg, bearing) < cfg.heading_threshold_deg)


def _repair_chainage(chainage: np.ndarray) -> tuple[np.ndarray, int]:
    out = chainage.copy()
    running = -np.inf
    repaired = 0
    for i, c in enumerate(out):
        if running - c > REPAIR_BACKJUMP_M:
            out[i] = running
            repaired += 1
        running = max(running, out[i])
    return out, repaired


def validate_journeys(matched: Iterable[MatchedPoint], link: Link, diagnostics: Counter | None = None) -> list[Journey]:
    """Keep journeys with >= 2 points spanning >= half the link; sort and repair each."""
    diagnostics = diagnostics if diagnostics is not None else Counter()
    groups: dict[str, list[MatchedPoint]] = {}
    for p in matched:
        if p.link_id == link.id:
            groups.setdefault(p.journey_id, []).append(p)
    out = []
    for jid in sorted(groups):
        pts = sorted(groups[jid], key=lambda p: (p.t, p.chainage_m))
        dedup = _drop_repeated_times(pts)
        if len(dedup) < 2:
            diagnostics["dropped_few_points"] += 1
            continue
        c = np.array([p.chainage_m for p in dedup])
        if c.max() - c.min() < link.length_m / 2.0:
            diagnostics["dropped_short_coverage"] += 1
            continue
        fixed, n_rep = _repair_chainage(c)
        diagnostics["repaired_points"] += n_rep
        diagnostics["journeys_kept"] += 1
        out.append(Journey(jid, link.id, tuple(replace(p, chainage_m=float(v)) for p, v in zip(dedup, fixed))))
    return out


def _drop_repeated_times(pts: list[MatchedPoint]) -> list[MatchedPoint]:
    out = [pts[0]]
    for p in pts[1:]:
        if p.t > out[-1].t:
            out.append(p)
    return out


def match_points(points: pd.DataFrame, graph: LinkGraph, cfg: MatchConfig) -> tuple[pd.DataFrame, Counter]:
    """Bulk map matching of a trajectory table.

    Each point is tested against every link (bounding-box prefilter first);
    points accepted by several links go to the smallest |cross-track|, then the
    smallest heading deviation. Returns the validated matched table sorted by
    (link, journey, t) and a diagnostics tally.
    """
    diag: Counter = Counter()
    diag["points_in"] += len(points)
    lon = points["lon"].to_numpy(float)
    lat = points["lat"].to_numpy(float)
    heading = points["heading_deg"].to_numpy(float)
    cand_pt, cand_link, cand_ch, cand_cr, cand_dth = [], [], [], [], []
    hr = np.radians(heading)
    hs, hc = np.sin(hr), np.cos(hr)
    cos_thr = math.cos(math.radians(cfg.heading_threshold_deg))
    for li, link in enumerate(graph.links.values()):
        g = np.asarray(link.geometry)
        kx, ky = link.frame.scale
        pad_lon = (cfg.half_width + 1.0) / kx
        pad_lat = (cfg.half_width + 1.0) / ky
        idx = np.flatnonzero((lon >= g[:, 0].min() - pad_lon) & (lon <= g[:, 0].max() + pad_lon))
        idx = idx[(lat[idx] >= g[:, 1].min() - pad_lat) & (lat[idx] <= g[:, 1].max() + pad_lat)]
        # cheap heading prefilter (cosine of the deviation) against every segment bearing
        near = np.zeros(idx.size, dtype=bool)
        for b in np.radians(link.segment_bearings()):
            near |= hs[idx] * math.sin(b) + hc[idx] * math.cos(b) > cos_thr - 1e-9
        idx = idx[near]
        if idx.size == 0:
            continue
        inside, chainage, cross = _in_geofence(link, lon[idx], lat[idx], cfg)
        bearing = link.segment_bearings()[link.segment_index(chainage)]
        dth = angular_deviation(heading[idx], bearing)
        ok = inside & (dth < cfg.heading_threshold_deg)
        cand_pt.append(idx[ok])
        cand_link.append(np.full(ok.sum(), li))
        cand_ch.append(chainage[ok])
        cand_cr.append(cross[ok])
        cand_dth.append(dth[ok])
    if not cand_pt:
        return pd.DataFrame(columns=MATCHED_COLUMNS), diag
    pt = np.concatenate(cand_pt)
    lk = np.concatenate(cand_link)
    ch = np.concatenate(cand_ch)
    cr = np.concatenate(cand_cr)
    dth = np.concatenate(cand_dth)
    multi = np.bincount(pt, minlength=len(points))[pt] > 1
    if multi.any():
        m = np.flatnonzero(multi)
        order = m[np.lexsort((dth[m], np.abs(cr[m]), pt[m]))]
        first = np.r_[True, pt[order][1:] != pt[order][:-1]]
        diag["overlap_resolved"] += int((~first).sum())
        sel = np.sort(np.r_[np.flatnonzero(~multi), order[first]])
        pt, lk, ch, cr = pt[sel], lk[sel], ch[sel], cr[sel]
    diag["matched_points"] += len(pt)

    link_ids = np.array(graph.link_ids, dtype=object)
    lengths = np.array([l.length_m for l in graph.links.values()])
    jid = points["journey_id"].to_numpy()[pt]
    cols = {"t": points["t"].to_numpy(float)[pt], "chainage_m": ch,
            "speed_mph": points["speed_mph"].to_numpy(float)[pt], "cross_track_m": cr}
    keep, lk, jid, cols = _validate_arrays(lk, jid, cols, lengths, diag)
    df = pd.DataFrame({"journey_id": jid, "link_id": link_ids[lk], **cols, "_link": lk})
    return df[MATCHED_COLUMNS + ["_link"]], diag


def _validate_arrays(lk: np.ndarray, jid: np.ndarray, cols: dict, lengths: np.ndarray, diag: Counter):
    """Sort by (link, journey, t), drop repeated times and short journeys, repair back-jumps."""
    jcode = pd.factorize(jid, sort=True)[0].astype(np.int64)
    key = lk.astype(np.int64) * (int(jcode.max(initial=0)) + 1) + jcode
    t = cols["t"]
    order = np.argsort(lk, kind="stable")
    ks, ts = key[order], t[order]
    # input already ordered by (journey, t) with distinct times: the stable link sort is enough
    if not np.all((ks[1:] > ks[:-1]) | ((ks[1:] == ks[:-1]) & (ts[1:] > ts[:-1]))):
        order = np.lexsort((cols["chainage_m"], t, key))
    key, lk, jid = key[order], lk[order], jid[order]
    cols = {k: v[order] for k, v in cols.items()}
    t = cols["t"]
    same = np.r_[False, key[1:] == key[:-1]]
    dup = same & np.r_[False, t[1:] <= t[:-1]]
    ok = ~dup
    key, lk, jid = key[ok], lk[ok], jid[ok]
    cols = {k: v[ok] for k, v in cols.items()}
    n = len(key)
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]]) if n else np.zeros(0, dtype=np.int64)
    c = cols["chainage_m"]
    if n:
        count = np.diff(np.r_[starts, n])
        span = np.maximum.reduceat(c, starts) - np.minimum.reduceat(c, starts)
    else:
        count = span = np.zeros(0)
    need = lengths[lk[starts]] / 2.0 if n else np.zeros(0)
    few = count < 2
    short = ~few & (span < need)
    diag["dropped_few_points"] += int(few.sum())
    diag["dropped_short_coverage"] += int(short.sum())
    keep_grp = ~(few | short)
    diag["journeys_kept"] += int(keep_grp.sum())
    grp = np.repeat(np.arange(len(starts)), count) if n else np.zeros(0, dtype=np.int64)
    keep = keep_grp[grp] if n else np.zeros(0, dtype=bool)
    lk, jid, grp = lk[keep], jid[keep], grp[keep]
    cols = {k: v[keep] for k, v in cols.items()}
    c = cols["chainage_m"].copy()
    if len(c):
        # running maximum of earlier points in the same journey: offsetting each
        # group past the previous one lets one global accumulate do the work
        rank = np.cumsum(np.r_[True, grp[1:] != grp[:-1]]) - 1
        off = rank * (float(lengths.max()) * 4.0 + 1e3)
        cm = np.maximum.accumulate(c + off) - off
        newgrp = np.r_[True, grp[1:] != grp[:-1]]
        prev = np.r_[-np.inf, cm[:-1]]
        prev[newgrp] = -np.inf
        # clamping can only raise a point to an earlier running max, so one pass suffices
        jump = prev - c > REPAIR_BACKJUMP_M
        diag["repaired_points"] += int(jump.sum())
        c[jump] = prev[jump]
    else:
        diag["repaired_points"] += 0
    cols["chainage_m"] = c
    return keep, lk, jid, cols


def journeys_from_table(df: pd.DataFrame) -> list[Journey]:
    """Materialize matched rows as Journey objects (small tables; tests and debugging)."""
    out = []
    for (lid, jid), g in df.groupby(["link_id", "journey_id"], sort=True):
        pts = tuple(
            MatchedPoint(str(jid), np.nan, np.nan, r.t, r.speed_mph, np.nan, str(lid), r.chainage_m, r.cross_track_m)
            for r in g.itertuples()
        )
        out.append(Journey(str(jid), str(lid), pts))
    return out
