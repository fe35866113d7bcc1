"""Trajectory table -> per-vehicle measures -> link-window records."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import pandas as pd

from .basemap import MPH_TO_MS, LinkGraph
from .matcher import MatchConfig, match_points
from .measures import MeasureConfig, WindowConfig, aggregate_table, vehicle_measures_batch
from .segmenter import SegmenterConfig, segment_batch

VEHICLE_COLUMNS = ["link_id", "journey_id", "entry_time_s", "exit_time_s", "travel_time_s", "travel_speed_mph",
                   "free_flow_speed_mph", "control_delay_s", "stop_delay_s", "n_stops", "queue_length_m", "aog",
                   "split_failure", "los"]


@dataclass(frozen=True)
class ExtractionConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    segment: SegmenterConfig = field(default_factory=SegmenterConfig)
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    window: WindowConfig = field(default_factory=WindowConfig)


def vehicle_table(points: pd.DataFrame, graph: LinkGraph, cfg: ExtractionConfig = ExtractionConfig(),
                  diagnostics: Counter | None = None) -> pd.DataFrame:
    """Match, segment and measure every (link, journey) traversal in ``points``."""
    matched, diag = match_points(points, graph, cfg.match)
    if diagnostics is not None:
        diagnostics.update(diag)
    if matched.empty:
        return pd.DataFrame(columns=VEHICLE_COLUMNS)
    lk = matched["_link"].to_numpy(np.int64)
    jid = matched["journey_id"].to_numpy()
    new = np.r_[True, (lk[1:] != lk[:-1]) | (jid[1:] != jid[:-1])]
    journey = np.cumsum(new) - 1
    first = np.flatnonzero(new)
    links = list(graph.links.values())
    lengths = np.array([l.length_m for l in links])
    limits = np.array([l.speed_limit_mph for l in links])
    t = matched["t"].to_numpy(float)
    c = matched["chainage_m"].to_numpy(float)
    v = matched["speed_mph"].to_numpy(float)
    v_t = cfg.segment.v_t_factor * limits[lk] * MPH_TO_MS
    seg = segment_batch(journey, t, c, v * MPH_TO_MS, v_t, cfg.segment)
    out = vehicle_measures_batch(journey, t, c, v, seg, lengths[lk[first]], limits[lk[first]], cfg.measure)
    frame = pd.DataFrame({"link_id": matched["link_id"].to_numpy()[first], "journey_id": jid[first], **out})
    return frame[VEHICLE_COLUMNS]


def extract_records(points: pd.DataFrame | Iterable[pd.DataFrame], graph: LinkGraph,
                    cfg: ExtractionConfig = ExtractionConfig(),
                    diagnostics: Counter | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-vehicle table and link-window records.

    ``points`` may be an iterable of chunks (e.g. one per day); journeys must
    not straddle chunks.
    """
    chunks = [points] if isinstance(points, pd.DataFrame) else points
    vehicles = [vehicle_table(ch, graph, cfg, diagnostics) for ch in chunks]
    vehicles = [v for v in vehicles if not v.empty]
    veh = pd.concat(vehicles, ignore_index=True) if vehicles else pd.DataFrame(columns=VEHICLE_COLUMNS)
    return veh, aggregate_table(veh, cfg.window)
