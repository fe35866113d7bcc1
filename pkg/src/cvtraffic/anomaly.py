"""Upper-tail anomaly flags from same-weekday median/MAD references.

For a link, time-of-day bin and weekday the reference pool is the set of
observed historical values. A window is abnormal when its value reaches
``median + k * 1.4826 * max(MAD, eps)``. Medians use the lower order
statistic for even counts (not the midpoint), so every quantity is one of the
input values or a difference of two of them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .measures import WindowSeries, iso_time

MAD_SCALE = 1.4826
FLAG_MEASURES = ("control_delay_s", "queue_m")
FLAG_COLUMNS = ["link_id", "window_start", "measure", "value", "threshold", "flag"]


class EmptyReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class AnomalyConfig:
    k: float = 2.0
    epsilon: float = 0.5
    min_history: int = 3

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.min_history < 1:
            raise ValueError("min_history must be >= 1")


@dataclass(frozen=True)
class HistoricalReference:
    link_id: str
    slot: tuple[int, int]
    values: tuple[float, ...]
    m_t: float
    mad: float
    sigma: float

    def threshold(self, k: float) -> float:
        return self.m_t + k * self.sigma


def lower_median(values) -> float:
    s = np.sort(np.asarray(values, dtype=float))
    if s.size == 0:
        raise ValueError("median of empty list")
    return float(s[(s.size - 1) // 2])


def median_mad(values) -> tuple[float, float]:
    m = lower_median(values)
    return m, lower_median(np.abs(np.asarray(values, dtype=float) - m))


def build_reference(values: Sequence[float], link_id: str, slot: tuple[int, int], cfg: AnomalyConfig,
                    fallback: Sequence[float] | None = None) -> HistoricalReference:
    """Reference from a slot's history; ``fallback`` is used when the slot is too thin."""
    vals = [float(v) for v in values]
    if len(vals) < cfg.min_history and fallback is not None:
        vals = [float(v) for v in fallback]
    if not vals:
        raise EmptyReferenceError(f"no history for link {link_id!r} slot {slot}")
    m, mad = median_mad(vals)
    return HistoricalReference(link_id, slot, tuple(vals), m, mad, MAD_SCALE * max(mad, cfg.epsilon))


def detect(x_t: float, ref: HistoricalReference, cfg: AnomalyConfig) -> tuple[int, float]:
    thr = ref.threshold(cfg.k)
    return int(x_t >= thr), thr


def _masked_lower_median(a: np.ndarray, mask: np.ndarray, axis: int):
    """Lower median along ``axis`` over entries where ``mask``; NaN where the mask is empty."""
    n = mask.sum(axis=axis)
    if a.shape[axis] == 0:
        return np.full(n.shape, np.nan), n
    x = np.where(mask, a, np.inf)
    x.sort(axis=axis)
    idx = np.expand_dims(np.maximum(n - 1, 0) // 2, axis)
    med = np.take_along_axis(x, idx, axis=axis).squeeze(axis)
    return np.where(n > 0, med, np.nan), n


@dataclass
class DetectionResult:
    """Per-cell reference statistics; flags for any k derive from them."""

    series: WindowSeries
    measures: tuple[str, ...]
    median: np.ndarray  # [links, days, windows, measures]
    sigma: np.ndarray
    history: np.ndarray  # pool size behind each reference
    cfg: AnomalyConfig

    def values(self) -> np.ndarray:
        return np.stack([self.series.values[m] for m in self.measures], axis=-1)

    def threshold(self, k: float | None = None) -> np.ndarray:
        k = self.cfg.k if k is None else k
        return self.median + k * self.sigma

    def flags(self, k: float | None = None) -> np.ndarray:
        """Boolean [links, days, windows, measures]; imputed or reference-less cells never flag."""
        thr = self.threshold(k)
        ok = self.series.observed[..., None] & np.isfinite(thr)
        return ok & (self.values() >= np.where(np.isfinite(thr), thr, np.inf))

    def prevalence(self, k: float | None = None, days: Sequence[int] | None = None) -> dict[str, float]:
        f = self.flags(k)
        obs = np.broadcast_to(self.series.observed[..., None], f.shape)
        if days is not None:
            f, obs = f[:, list(days)], obs[:, list(days)]
        return {m: float(f[..., i].sum() / max(obs[..., i].sum(), 1)) for i, m in enumerate(self.measures)}

    def to_frame(self, k: float | None = None) -> pd.DataFrame:
        s = self.series
        n_l, n_d, n_w = s.observed.shape
        thr = self.threshold(k)
        flags = self.flags(k)
        vals = self.values()
        ep = np.broadcast_to(s.window_epoch(), (n_l, n_d, n_w)).reshape(-1)
        frames = []
        for i, m in enumerate(self.measures):
            frames.append(pd.DataFrame({
                "link_id": np.repeat(np.array(s.link_ids, dtype=object), n_d * n_w),
                "window_start": iso_time(ep),
                "measure": m,
                "value": vals[..., i].reshape(-1),
                "threshold": thr[..., i].reshape(-1),
                "flag": flags[..., i].reshape(-1).astype(int),
            }))
        return pd.concat(frames, ignore_index=True)


def reference_pools(series: WindowSeries, train_days: Sequence[int], holidays: Sequence[int] = ()):
    """For each day, the primary (same weekday) and fallback (same day type) reference day masks.

    Only non-holiday training days enter a pool, and a training day never
    references itself.
    """
    n_d = series.n_days
    usable = np.zeros(n_d, dtype=bool)
    usable[list(train_days)] = True
    usable[list(holidays)] = False
    wd = np.array([series.weekday(d) for d in range(n_d)])
    weekend = wd >= 5
    primary = np.zeros((n_d, n_d), dtype=bool)
    fallback = np.zeros((n_d, n_d), dtype=bool)
    for d in range(n_d):
        others = usable.copy()
        others[d] = False
        primary[d] = others & (wd == wd[d])
        fallback[d] = others & (weekend == weekend[d])
    return primary, fallback


def label_dataset(series: WindowSeries, train_days: Sequence[int], cfg: AnomalyConfig = AnomalyConfig(),
                  measures: Sequence[str] = FLAG_MEASURES, holidays: Sequence[int] = ()) -> DetectionResult:
    """Reference statistics for every cell, built from observed training-day values only."""
    measures = tuple(measures)
    vals = np.stack([series.values[m] for m in measures], axis=-1)  # [L, D, W, M]
    obs = np.broadcast_to(series.observed[..., None], vals.shape)
    primary, fallback = reference_pools(series, train_days, holidays)
    shape = vals.shape
    med = np.full(shape, np.nan)
    sig = np.full(shape, np.nan)
    hist = np.zeros(shape, dtype=np.int64)
    cache: dict[tuple, tuple] = {}
    for d in range(series.n_days):
        key = (primary[d].tobytes(), fallback[d].tobytes())
        if key not in cache:
            cache[key] = _pool_stats(vals, obs, primary[d], fallback[d], cfg)
        med[:, d], sig[:, d], hist[:, d] = cache[key]
    return DetectionResult(series, measures, med, sig, hist, cfg)


def _pool_stats(vals, obs, prim, fall, cfg):
    def stats(days):
        a = vals[:, days]
        o = obs[:, days]
        m, n = _masked_lower_median(a, o, axis=1)
        mad, _ = _masked_lower_median(np.abs(a - m[:, None]), o, axis=1)
        return m, mad, n

    m, mad, n = stats(prim)
    if fall.any():
        fm, fmad, fn = stats(fall)
        thin = n < cfg.min_history
        m, mad, n = np.where(thin, fm, m), np.where(thin, fmad, mad), np.where(thin, fn, n)
    sigma = np.where(n > 0, MAD_SCALE * np.maximum(mad, cfg.epsilon), np.nan)
    return m, sigma, n


def slot_references(series: WindowSeries, train_days: Sequence[int], cfg: AnomalyConfig = AnomalyConfig(),
                    measures: Sequence[str] = FLAG_MEASURES, holidays: Sequence[int] = ()) -> dict:
    """Per (link, weekday, window) references over all training days, for reuse on new data."""
    usable = np.zeros(series.n_days, dtype=bool)
    usable[list(train_days)] = True
    usable[list(holidays)] = False
    wd = np.array([series.weekday(d) for d in range(series.n_days)])
    weekend = wd >= 5
    vals = np.stack([series.values[m] for m in measures], axis=-1)
    obs = np.broadcast_to(series.observed[..., None], vals.shape)
    out = {"k": cfg.k, "epsilon": cfg.epsilon, "min_history": cfg.min_history,
           "window_s": series.cfg.window_s, "day_start_s": series.cfg.day_start_s, "references": []}
    for w in range(7):
        m, sigma, n = _pool_stats(vals, obs, usable & (wd == w), usable & (weekend == (w >= 5)), cfg)
        for li, lid in enumerate(series.link_ids):
            for j, meas in enumerate(measures):
                out["references"].append({
                    "link_id": lid, "weekday": w, "measure": meas,
                    "median": [None if not np.isfinite(v) else float(v) for v in m[li, :, j]],
                    "sigma": [None if not np.isfinite(v) else float(v) for v in sigma[li, :, j]],
                    "count": [int(v) for v in n[li, :, j]],
                })
    return out


def save_references(refs: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(refs))


def flags_from_frame(df: pd.DataFrame, series: WindowSeries, measures: Sequence[str] = FLAG_MEASURES) -> np.ndarray:
    """Rebuild the [links, days, windows, measures] flag array from a flags CSV table."""
    from .measures import parse_time

    out = np.zeros(series.observed.shape + (len(measures),), dtype=bool)
    base = series.window_epoch()
    ep = parse_time(df["window_start"])
    off = ep - int(base[0, 0])
    d = off // 86400
    w = (off % 86400) // series.cfg.window_s
    li = pd.Index(series.link_ids).get_indexer(df["link_id"].astype(str))
    mi = pd.Index(list(measures)).get_indexer(df["measure"].astype(str))
    ok = (li >= 0) & (mi >= 0) & (d >= 0) & (d < series.n_days) & (w >= 0) & (w < series.n_windows)
    out[li[ok], d[ok], w[ok], mi[ok]] = df["flag"].to_numpy(int)[ok] == 1
    return out
