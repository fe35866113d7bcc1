"""Free-flow / transition / stop segmentation of matched journeys.

Points are labelled by speed, consecutive equal labels become segments, and
two filters clean the result: consolidation (same-state segments separated
by a short interlude are merged) and short-state removal (too-short segments
become transitions). Passes run stop-first then free-flow, repeated to a
fixpoint.

A segment starts at the time/chainage of its first point and ends where the
next segment starts, so segments tile the journey without gaps. The last
segment ends at the final point. Gap tests for consolidation use these
boundaries: ``t_start(later) - t_end(earlier)`` and the chainage analogue.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Sequence

import numpy as np

from .basemap import MPH_TO_MS


class State(IntEnum):
    STOP = 0
    TRANSITION = 1
    FREE_FLOW = 2


FILTER_ORDER = (State.STOP, State.FREE_FLOW)


@dataclass(frozen=True)
class SegmenterConfig:
    v_s: float = 1.0
    v_t_factor: float = 0.8
    merge_gap_s: float = 9.0
    merge_gap_m: float = 10.0
    min_state_s: float = 9.0

    def __post_init__(self):
        if not self.v_s > 0:
            raise ValueError("v_s must be positive")
        if not 0 < self.v_t_factor <= 1:
            raise ValueError("v_t_factor must lie in (0, 1]")
        if min(self.merge_gap_s, self.merge_gap_m, self.min_state_s) <= 0:
            raise ValueError("gap and duration thresholds must be positive")


@dataclass(frozen=True)
class StateSegment:
    state: State
    t_start: float
    t_end: float
    chainage_start: float
    chainage_end: float
    point_count: int
    chainage_sum: float = 0.0

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def mean_chainage(self) -> float:
        return self.chainage_sum / self.point_count


def label_points(speed_ms, v_t: float, cfg: SegmenterConfig) -> np.ndarray:
    v = np.asarray(speed_ms, dtype=float)
    out = np.full(v.shape, int(State.TRANSITION), dtype=np.int8)
    out[v <= cfg.v_s] = State.STOP
    out[v > v_t] = State.FREE_FLOW
    return out


def segments_from_labels(t, chainage, labels) -> list[StateSegment]:
    t = np.asarray(t, dtype=float)
    c = np.asarray(chainage, dtype=float)
    starts = np.flatnonzero(np.r_[True, labels[1:] != labels[:-1]])
    ends = np.r_[starts[1:], len(t)]
    segs = []
    for k, (a, b) in enumerate(zip(starts, ends)):
        last = b if b < len(t) else b - 1
        segs.append(
            StateSegment(State(int(labels[a])), float(t[a]), float(t[last]), float(c[a]), float(c[last]),
                         int(b - a), float(c[a:b].sum()))
        )
    return segs


def label_states(journey, cfg: SegmenterConfig, speed_limit_mph: float) -> list[StateSegment]:
    """Preliminary segments: one per run of equal speed labels."""
    v_t = cfg.v_t_factor * speed_limit_mph * MPH_TO_MS
    labels = label_points(journey.speed_mph * MPH_TO_MS, v_t, cfg)
    return segments_from_labels(journey.t, journey.chainage, labels)


def _absorb(a: StateSegment, b: StateSegment, state: State) -> StateSegment:
    return StateSegment(state, a.t_start, b.t_end, a.chainage_start, b.chainage_end,
                        a.point_count + b.point_count, a.chainage_sum + b.chainage_sum)


def merge_adjacent(segments: Sequence[StateSegment]) -> list[StateSegment]:
    out: list[StateSegment] = []
    for s in segments:
        if out and out[-1].state == s.state:
            out[-1] = _absorb(out[-1], s, s.state)
        else:
            out.append(s)
    return out


def _consolidate_one(segments: Sequence[StateSegment], state: State, cfg: SegmenterConfig) -> list[StateSegment]:
    pos = [k for k, s in enumerate(segments) if s.state == state]
    absorbed = [False] * len(segments)
    for a, b in zip(pos, pos[1:]):
        gap_t = segments[b].t_start - segments[a].t_end
        gap_m = abs(segments[b].chainage_start - segments[a].chainage_end)
        if gap_t < cfg.merge_gap_s and gap_m < cfg.merge_gap_m:
            for k in range(a + 1, b + 1):
                absorbed[k] = True
    out: list[StateSegment] = []
    for s, ab in zip(segments, absorbed):
        if ab:
            out[-1] = _absorb(out[-1], s, state)
        else:
            out.append(s)
    return merge_adjacent(out)


def consolidate_states(segments: Sequence[StateSegment], cfg: SegmenterConfig,
                       states: Sequence[State] = FILTER_ORDER) -> list[StateSegment]:
    segs = list(segments)
    for state in states:
        segs = _consolidate_one(segs, State(state), cfg)
    return segs


def _remove_one(segments: Sequence[StateSegment], state: State, cfg: SegmenterConfig) -> list[StateSegment]:
    relabelled = [
        replace(s, state=State.TRANSITION) if s.state == state and s.duration < cfg.min_state_s else s
        for s in segments
    ]
    return merge_adjacent(relabelled)


def remove_short_states(segments: Sequence[StateSegment], cfg: SegmenterConfig,
                        states: Sequence[State] = FILTER_ORDER) -> list[StateSegment]:
    segs = list(segments)
    for state in states:
        segs = _remove_one(segs, State(state), cfg)
    return segs


def filter_states(segments: Sequence[StateSegment], cfg: SegmenterConfig) -> list[StateSegment]:
    """Stop-consolidate, stop-remove, free-flow-consolidate, free-flow-remove; repeat until stable."""
    segs = merge_adjacent(segments)
    while True:
        before = segs
        for state in FILTER_ORDER:
            segs = _consolidate_one(segs, state, cfg)
            segs = _remove_one(segs, state, cfg)
        if segs == before:
            return segs


def segment_journey(journey, cfg: SegmenterConfig, speed_limit_mph: float) -> list[StateSegment]:
    return filter_states(label_states(journey, cfg, speed_limit_mph), cfg)


def point_states(segments: Sequence[StateSegment]) -> np.ndarray:
    """Final state of every point, expanded from the segment point counts."""
    return np.repeat([int(s.state) for s in segments], [s.point_count for s in segments]).astype(np.int8)


# ---------------------------------------------------------------------------
# vectorized path over many journeys at once


@dataclass
class SegmentTable:
    """Struct-of-arrays segments for many journeys, ordered by (journey, time)."""

    journey: np.ndarray
    state: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    n: np.ndarray
    csum: np.ndarray
    point_segment: np.ndarray

    def __len__(self):
        return len(self.state)

    @property
    def duration(self):
        return self.t1 - self.t0

    def for_journey(self, j: int) -> list[StateSegment]:
        idx = np.flatnonzero(self.journey == j)
        return [
            StateSegment(State(int(self.state[k])), float(self.t0[k]), float(self.t1[k]), float(self.c0[k]),
                         float(self.c1[k]), int(self.n[k]), float(self.csum[k]))
            for k in idx
        ]


def _regroup(seg: SegmentTable, group: np.ndarray) -> SegmentTable:
    """Collapse consecutive rows sharing a group id; the group takes its first row's state."""
    starts = np.flatnonzero(np.r_[True, group[1:] != group[:-1]])
    lasts = np.r_[starts[1:], len(group)] - 1
    remap = np.cumsum(np.r_[True, group[1:] != group[:-1]]) - 1
    return SegmentTable(
        journey=seg.journey[starts],
        state=seg.state[starts],
        t0=seg.t0[starts],
        t1=seg.t1[lasts],
        c0=seg.c0[starts],
        c1=seg.c1[lasts],
        n=np.add.reduceat(seg.n, starts),
        csum=np.add.reduceat(seg.csum, starts),
        point_segment=remap[seg.point_segment],
    )


def _merge_adjacent_table(seg: SegmentTable) -> SegmentTable:
    if len(seg) == 0:
        return seg
    brk = np.r_[True, (seg.journey[1:] != seg.journey[:-1]) | (seg.state[1:] != seg.state[:-1])]
    return _regroup(seg, np.cumsum(brk))


def _consolidate_table(seg: SegmentTable, state: int, cfg: SegmenterConfig) -> SegmentTable:
    pos = np.flatnonzero(seg.state == state)
    if pos.size < 2:
        return seg
    a, b = pos[:-1], pos[1:]
    merge = (
        (seg.journey[a] == seg.journey[b])
        & (seg.t0[b] - seg.t1[a] < cfg.merge_gap_s)
        & (np.abs(seg.c0[b] - seg.c1[a]) < cfg.merge_gap_m)
    )
    delta = np.zeros(len(seg) + 1, dtype=np.int64)
    np.add.at(delta, a[merge] + 1, 1)
    np.add.at(delta, b[merge] + 1, -1)
    absorbed = np.cumsum(delta)[:-1] > 0
    seg = _regroup(seg, np.cumsum(~absorbed))
    return _merge_adjacent_table(seg)


def _remove_table(seg: SegmentTable, state: int, cfg: SegmenterConfig) -> SegmentTable:
    short = (seg.state == state) & (seg.duration < cfg.min_state_s)
    if not short.any():
        return seg
    st = seg.state.copy()
    st[short] = State.TRANSITION
    seg = SegmentTable(seg.journey, st, seg.t0, seg.t1, seg.c0, seg.c1, seg.n, seg.csum, seg.point_segment)
    return _merge_adjacent_table(seg)


def segment_batch(journey: np.ndarray, t: np.ndarray, chainage: np.ndarray, speed_ms: np.ndarray,
                  v_t: np.ndarray, cfg: SegmenterConfig) -> SegmentTable:
    """Segment many journeys given flat point arrays sorted by (journey, t).

    ``v_t`` is the per-point free-flow threshold (m/s). Produces exactly the
    segments that ``segment_journey`` yields journey by journey.
    """
    journey = np.asarray(journey)
    t = np.asarray(t, dtype=float)
    c = np.asarray(chainage, dtype=float)
    labels = np.full(len(t), int(State.TRANSITION), dtype=np.int8)
    labels[speed_ms <= cfg.v_s] = State.STOP
    labels[speed_ms > v_t] = State.FREE_FLOW
    if len(t) == 0:
        e = np.zeros(0)
        return SegmentTable(e.astype(int), e.astype(np.int8), e, e, e, e, e.astype(int), e, e.astype(int))
    new_j = np.r_[True, journey[1:] != journey[:-1]]
    start = new_j | np.r_[True, labels[1:] != labels[:-1]]
    run = np.cumsum(start) - 1
    first = np.flatnonzero(start)
    nxt = np.r_[first[1:], len(t)]
    last_pt = nxt - 1
    # end at the next run's first point unless that run belongs to another journey
    cont = np.r_[~new_j[first[1:]], False]
    end_idx = np.where(cont, np.minimum(nxt, len(t) - 1), last_pt)
    seg = SegmentTable(
        journey=journey[first],
        state=labels[first],
        t0=t[first],
        t1=t[end_idx],
        c0=c[first],
        c1=c[end_idx],
        n=np.diff(np.r_[first, len(t)]),
        csum=np.bincount(run, weights=c, minlength=len(first)),
        point_segment=run,
    )
    while True:
        n_before, st_before = len(seg), seg.state.copy()
        for s in FILTER_ORDER:
            seg = _consolidate_table(seg, int(s), cfg)
            seg = _remove_table(seg, int(s), cfg)
        if len(seg) == n_before and np.array_equal(seg.state, st_before):
            return seg
