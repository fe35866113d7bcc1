"""Directed link graph of an arterial network and its fixed adjacency.

Links run from the upstream stop line to the downstream stop line. All metric
geometry is done in a per-link local tangent frame (east/north metres relative
to the link's first vertex) using WGS84 radii of curvature at that latitude.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

MPH_TO_MS = 0.44704


class BasemapError(ValueError):
    pass


def metres_per_degree(lat_deg: float) -> tuple[float, float]:
    """Return (metres per degree of longitude, metres per degree of latitude)."""
    phi = math.radians(lat_deg)
    w = math.sqrt(1.0 - WGS84_E2 * math.sin(phi) ** 2)
    prime_vertical = WGS84_A / w
    meridional = WGS84_A * (1.0 - WGS84_E2) / w**3
    return prime_vertical * math.cos(phi) * math.pi / 180.0, meridional * math.pi / 180.0


@dataclass(frozen=True)
class LocalFrame:
    lon0: float
    lat0: float

    @cached_property
    def scale(self) -> tuple[float, float]:
        return metres_per_degree(self.lat0)

    def to_xy(self, lon, lat):
        kx, ky = self.scale
        return (np.asarray(lon, dtype=float) - self.lon0) * kx, (np.asarray(lat, dtype=float) - self.lat0) * ky

    def to_lonlat(self, x, y):
        kx, ky = self.scale
        return self.lon0 + np.asarray(x, dtype=float) / kx, self.lat0 + np.asarray(y, dtype=float) / ky


@dataclass(frozen=True)
class Intersection:
    id: str
    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise BasemapError(f"intersection {self.id!r}: non-finite position")
        if abs(self.lat) > 90 or abs(self.lon) > 180:
            raise BasemapError(f"intersection {self.id!r}: position out of range ({self.lon}, {self.lat})")


@dataclass(frozen=True)
class Link:
    id: str
    upstream: str
    downstream: str
    geometry: tuple[tuple[float, float], ...]
    lanes: int = 2
    speed_limit_mph: float = 40.0
    road_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "geometry", tuple((float(lon), float(lat)) for lon, lat in self.geometry))
        if self.upstream == self.downstream:
            raise BasemapError(f"link {self.id!r}: upstream equals downstream")
        if len(self.geometry) < 2:
            raise BasemapError(f"link {self.id!r}: geometry needs at least 2 vertices")
        if self.lanes < 1:
            raise BasemapError(f"link {self.id!r}: lanes must be >= 1")
        if not self.speed_limit_mph > 0:
            raise BasemapError(f"link {self.id!r}: speed limit must be positive")
        if not self.length_m > 0:
            raise BasemapError(f"link {self.id!r}: zero-length link")

    @cached_property
    def frame(self) -> LocalFrame:
        lon0, lat0 = self.geometry[0]
        return LocalFrame(lon0, lat0)

    @cached_property
    def xy(self) -> np.ndarray:
        g = np.asarray(self.geometry)
        x, y = self.frame.to_xy(g[:, 0], g[:, 1])
        return np.column_stack([x, y])

    @cached_property
    def segment_lengths(self) -> np.ndarray:
        return np.hypot(*np.diff(self.xy, axis=0).T)

    @cached_property
    def cumulative(self) -> np.ndarray:
        """Chainage at each vertex."""
        return np.concatenate([[0.0], np.cumsum(self.segment_lengths)])

    @property
    def length_m(self) -> float:
        return float(self.cumulative[-1])

    @property
    def speed_limit_ms(self) -> float:
        return self.speed_limit_mph * MPH_TO_MS

    def segment_bearings(self) -> np.ndarray:
        d = np.diff(self.xy, axis=0)
        return np.degrees(np.arctan2(d[:, 0], d[:, 1])) % 360.0

    def segment_index(self, chainage) -> np.ndarray:
        """Index of the polyline segment holding ``chainage``; a vertex belongs to the following segment."""
        idx = np.searchsorted(self.cumulative, np.asarray(chainage, dtype=float), side="right") - 1
        return np.clip(idx, 0, len(self.segment_lengths) - 1)

    def point_at(self, chainage):
        """Local xy of the point at ``chainage``; values outside [0, L] extend the end segments."""
        c = np.asarray(chainage, dtype=float)
        k = self.segment_index(c)
        p0 = self.xy[k]
        d = self.xy[k + 1] - p0
        u = (c - self.cumulative[k]) / self.segment_lengths[k]
        return p0[..., 0] + u * d[..., 0], p0[..., 1] + u * d[..., 1]


def link_bearing(link: Link, chainage_m: float) -> float:
    """Compass bearing (clockwise from north) of the segment containing ``chainage_m``."""
    if not (0.0 <= chainage_m <= link.length_m):
        raise BasemapError(f"chainage {chainage_m} outside [0, {link.length_m}] on link {link.id!r}")
    return float(link.segment_bearings()[int(link.segment_index(chainage_m))])


@dataclass(frozen=True)
class LinkGraph:
    intersections: dict[str, Intersection]
    links: dict[str, Link]
    movements: frozenset[tuple[str, str]] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.links:
            raise BasemapError("empty graph")
        for link in self.links.values():
            for end in (link.upstream, link.downstream):
                if end not in self.intersections:
                    raise BasemapError(f"link {link.id!r} references unknown intersection {end!r}")
        for a, b in self.movements:
            for lid in (a, b):
                if lid not in self.links:
                    raise BasemapError(f"movement ({a!r}, {b!r}) references unknown link {lid!r}")
            if self.links[a].downstream != self.links[b].upstream:
                raise BasemapError(f"movement ({a!r}, {b!r}) does not pass through a shared intersection")

    @property
    def link_ids(self) -> list[str]:
        return list(self.links)

    def __len__(self) -> int:
        return len(self.links)

    def to_json(self) -> dict:
        return {
            "intersections": [{"id": n.id, "lon": n.lon, "lat": n.lat} for n in self.intersections.values()],
            "links": [
                {
                    "id": l.id,
                    "upstream": l.upstream,
                    "downstream": l.downstream,
                    "geometry": [list(v) for v in l.geometry],
                    "lanes": l.lanes,
                    "speed_limit_mph": l.speed_limit_mph,
                    "road_id": l.road_id,
                }
                for l in self.links.values()
            ],
            "movements": [list(m) for m in sorted(self.movements)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LinkGraph":
        try:
            nodes = [Intersection(str(n["id"]), float(n["lon"]), float(n["lat"])) for n in doc["intersections"]]
            links = [
                Link(
                    id=str(l["id"]),
                    upstream=str(l["upstream"]),
                    downstream=str(l["downstream"]),
                    geometry=tuple(tuple(v) for v in l["geometry"]),
                    lanes=int(l.get("lanes", 2)),
                    speed_limit_mph=float(l.get("speed_limit_mph", 40.0)),
                    road_id=str(l.get("road_id", "")),
                )
                for l in doc["links"]
            ]
            movements = frozenset((str(a), str(b)) for a, b in doc.get("movements", []))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, BasemapError):
                raise
            raise BasemapError(f"malformed basemap: {exc}") from exc
        if not links:
            raise BasemapError("empty graph")
        return cls(_unique(nodes, "intersection"), _unique(links, "link"), movements)


def _unique(items: Iterable, what: str) -> dict:
    out = {}
    for item in items:
        if item.id in out:
            raise BasemapError(f"duplicate {what} id {item.id!r}")
        out[item.id] = item
    return out


def load_basemap(path: str | Path) -> LinkGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise BasemapError(f"cannot parse basemap {path}: {exc}") from exc
    return LinkGraph.from_json(doc)


def save_basemap(graph: LinkGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph.to_json(), indent=1))


@dataclass(frozen=True)
class FixedAdjacency:
    order: tuple[str, ...]
    raw: np.ndarray
    normalized: np.ndarray


def raw_adjacency_value(a: Link, b: Link, movements: frozenset) -> int:
    shared = {a.upstream, a.downstream} & {b.upstream, b.downstream}
    if not shared:
        return 0
    if (a.id, b.id) in movements or (b.id, a.id) in movements:
        return 2
    return 1


def build_fixed_adjacency(graph: LinkGraph, order: Sequence[str] | None = None, self_loop: int = 2) -> FixedAdjacency:
    order = tuple(order) if order is not None else tuple(graph.links)
    links = [graph.links[i] for i in order]
    n = len(links)
    raw = np.zeros((n, n), dtype=np.int64)
    for i, a in enumerate(links):
        for j, b in enumerate(links):
            raw[i, j] = self_loop if i == j else raw_adjacency_value(a, b, graph.movements)
    rowsum = raw.sum(axis=1, keepdims=True).astype(float)
    normalized = np.divide(raw, rowsum, out=np.zeros((n, n)), where=rowsum > 0)
    raw.setflags(write=False)
    normalized.setflags(write=False)
    return FixedAdjacency(order, raw, normalized)
