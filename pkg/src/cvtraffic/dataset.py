"""Sliding forecast samples over the dense window grid.

A sample is anchored at window ``a`` of some day: the real-time input covers
windows a-3..a, the historical input and the targets cover a+1..a+4. Samples
never straddle days, so with a 06:00-22:00 grid of 64 windows there are 57
anchors per day. Days are split chronologically: the last ``test_days`` form
the test set and the last ``val_fraction`` of the remaining days validate.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .measures import WindowConfig, WindowSeries, iso_time
from .model import GraphMeta

FEATURES = ("control_delay_s", "queue_m", "speed_mph", "n_vehicles", "travel_time_s", "aog_ratio")
TARGETS = ("control_delay_s", "queue_m")
AM_PEAK = (7 * 3600, 9 * 3600)
PM_PEAK = (16 * 3600, 19 * 3600)
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitConfig:
    test_days: int = 7
    val_fraction: float = 0.1
    past: int = 4
    horizon: int = 4

    def __post_init__(self):
        if self.test_days < 1 or self.past < 1 or self.horizon < 1:
            raise ValueError("test_days, past and horizon must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SplitConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown split config keys {sorted(unknown)}")
        return cls(**d)


def split_days(n_days: int, cfg: SplitConfig = SplitConfig()) -> dict[str, list[int]]:
    n_fit = n_days - cfg.test_days
    n_val = max(1, int(round(cfg.val_fraction * n_fit)))
    if n_fit - n_val < 1:
        raise ValueError(f"{n_days} days cannot hold {cfg.test_days} test days plus train and validation days")
    return {
        "train": list(range(n_fit - n_val)),
        "val": list(range(n_fit - n_val, n_fit)),
        "test": list(range(n_fit, n_days)),
    }


def anchors_per_day(n_windows: int, cfg: SplitConfig = SplitConfig()) -> np.ndarray:
    return np.arange(cfg.past - 1, n_windows - cfg.horizon)


def temporal_codes(series: WindowSeries, holidays: Sequence[int]) -> np.ndarray:
    """[days, windows, 6] codes: time-of-day bin, weekday, holiday, am peak, pm peak, off-peak."""
    c = series.cfg
    tod_s = c.day_start_s + np.arange(series.n_windows) * c.window_s
    tod_bin = tod_s // 900
    am = (tod_s >= AM_PEAK[0]) & (tod_s < AM_PEAK[1])
    pm = (tod_s >= PM_PEAK[0]) & (tod_s < PM_PEAK[1])
    out = np.zeros((series.n_days, series.n_windows, 6), dtype=np.int64)
    hol = set(int(h) for h in holidays)
    for d in range(series.n_days):
        wd = series.weekday(d)
        weekend = wd >= 5
        out[d, :, 0] = tod_bin
        out[d, :, 1] = wd
        out[d, :, 2] = int(d in hol)
        out[d, :, 3] = am & ~weekend
        out[d, :, 4] = pm & ~weekend
        out[d, :, 5] = ~(am | pm) | weekend
    return out


def historical_profile(values: np.ndarray, series: WindowSeries, train_days: Sequence[int],
                       holidays: Sequence[int]) -> np.ndarray:
    """Same-weekday mean over non-holiday training days, leaving each training day out of its own mean.

    ``values`` is [days, windows, ...]. Falls back to same day type (weekday
    or weekend), then to all training days, when the weekday pool is empty.
    """
    n_d = series.n_days
    usable = np.zeros(n_d, dtype=bool)
    usable[list(train_days)] = True
    usable[list(holidays)] = False
    wd = np.array([series.weekday(d) for d in range(n_d)])
    out = np.empty_like(values, dtype=float)
    for d in range(n_d):
        pool = usable.copy()
        pool[d] = False
        for cand in (pool & (wd == wd[d]), pool & ((wd >= 5) == (wd[d] >= 5)), pool):
            if cand.any():
                out[d] = values[cand].mean(axis=0)
                break
        else:
            raise ValueError("no training days available for the historical profile")
    return out


def lane_class(lanes: int) -> int:
    return int(min(max(lanes, 1), 4) - 1)


def speed_class(limit_mph: float) -> int:
    return int(min(max(round((limit_mph - 25) / 5), 0), 7))


@dataclass
class ForecastDataset:
    link_ids: list[str]
    start_date: date
    window_cfg: WindowConfig
    split_cfg: SplitConfig
    days: dict[str, list[int]]
    holidays: list[int]
    adjacency: np.ndarray  # [N, N] row-normalized
    road: np.ndarray  # [N, 3] codes
    road_vocab: tuple[int, int, int]
    features: np.ndarray  # [D, W, N, 6] raw, imputed cells filled
    hist_features: np.ndarray  # [D, W, N, 6] raw historical profile
    codes: np.ndarray  # [D, W, 6]
    targets: np.ndarray  # [D, W, N, 2] raw
    observed: np.ndarray  # [D, W, N]
    cell_flags: np.ndarray  # [D, W, N, 2] detector output per cell
    feat_mean: np.ndarray = field(default=None)
    feat_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.feat_mean is None:
            tr = self.features[self.days["train"]].reshape(-1, len(FEATURES))
            self.feat_mean = tr.mean(axis=0)
            std = tr.std(axis=0)
            self.feat_std = np.where(std > 1e-9, std, 1.0)
        self._anchor_flags = self._sample_flags()

    # -- indexing ------------------------------------------------------
    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    @property
    def n_windows(self) -> int:
        return self.features.shape[1]

    def anchors(self) -> np.ndarray:
        return anchors_per_day(self.n_windows, self.split_cfg)

    def samples(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """(day, anchor) index arrays of a split, day-major."""
        a = self.anchors()
        d = np.asarray(self.days[split], dtype=np.int64)
        return np.repeat(d, len(a)), np.tile(a, len(d))

    def n_samples(self, split: str) -> int:
        return len(self.days[split]) * len(self.anchors())

    def _sample_flags(self) -> np.ndarray:
        """Flag per (day, window, link, measure) taken from the most recent observed window of the input."""
        D, W, N, M = self.cell_flags.shape
        out = np.zeros_like(self.cell_flags)
        latest = np.full((D, N), -1)
        for w in range(W):
            latest = np.where(self.observed[:, w], w, latest)
            fresh = (latest >= 0) & (w - latest < self.split_cfg.past)
            src = np.take_along_axis(self.cell_flags, np.maximum(latest, 0)[:, None, :, None], axis=1)[:, 0]
            out[:, w] = np.where(fresh[..., None], src, False)
        return out

    def batch(self, day: np.ndarray, anchor: np.ndarray, standardize: bool = True) -> dict:
        sc = self.split_cfg
        past = anchor[:, None] + np.arange(-sc.past + 1, 1)
        fut = anchor[:, None] + np.arange(1, sc.horizon + 1)
        dd = day[:, None]
        n = self.n_links
        x_rt = self.features[dd, past]
        x_hist = self.hist_features[dd, fut]
        if standardize:
            x_rt = (x_rt - self.feat_mean) / self.feat_std
            x_hist = (x_hist - self.feat_mean) / self.feat_std
        c_rt = np.broadcast_to(self.codes[dd, past][:, :, None, :], x_rt.shape[:3] + (6,))
        c_hist = np.broadcast_to(self.codes[dd, fut][:, :, None, :], x_hist.shape[:3] + (6,))
        return {
            "x_rt": x_rt,
            "c_rt": c_rt,
            "x_hist": x_hist,
            "c_hist": c_hist,
            "road": self.road,
            "y": np.transpose(self.targets[dd, fut], (0, 2, 1, 3)),
            "y_mask": np.transpose(self.observed[dd, fut], (0, 2, 1)),
            "flags": self._anchor_flags[day, anchor],
            "day": day,
            "anchor": anchor,
            "n_links": n,
        }

    def split_batch(self, split: str) -> dict:
        return self.batch(*self.samples(split))

    def target_means(self) -> np.ndarray:
        """Mean observed training target per (horizon step, measure)."""
        b = self.split_batch("train")
        m = b["y_mask"][..., None]
        tot = np.where(m, b["y"], 0.0).sum(axis=(0, 1))
        cnt = np.broadcast_to(m, b["y"].shape).sum(axis=(0, 1))
        return tot / np.maximum(cnt, 1)

    def graph_meta(self) -> GraphMeta:
        return GraphMeta(self.n_links, self.adjacency, self.road_vocab, self.split_cfg.horizon, self.target_means())

    def anchor_epoch(self, day: np.ndarray, anchor: np.ndarray) -> np.ndarray:
        from .measures import epoch_of

        base = epoch_of(self.start_date) + self.window_cfg.day_start_s
        return base + day * 86400 + anchor * self.window_cfg.window_s

    # -- baselines -----------------------------------------------------
    def persistence(self, day: np.ndarray, anchor: np.ndarray) -> np.ndarray:
        """Repeat the most recent observed value of the input window (the anchor value if none)."""
        t_idx = [FEATURES.index(t) for t in TARGETS]
        sc = self.split_cfg
        vals = self.features[day, anchor][:, :, t_idx]
        seen = np.zeros(vals.shape[:2], dtype=bool)
        for lag in range(sc.past):
            w = anchor - lag
            obs = self.observed[day, w] & ~seen
            vals = np.where(obs[..., None], self.features[day, w][:, :, t_idx], vals)
            seen |= obs
        return np.repeat(vals[:, :, None, :], sc.horizon, axis=2)

    def historical_average(self, day: np.ndarray, anchor: np.ndarray) -> np.ndarray:
        t_idx = [FEATURES.index(t) for t in TARGETS]
        fut = anchor[:, None] + np.arange(1, self.split_cfg.horizon + 1)
        return np.transpose(self.hist_features[day[:, None], fut][..., t_idx], (0, 2, 1, 3))

    # -- persistence ---------------------------------------------------
    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            out / "arrays.npz", adjacency=self.adjacency, road=self.road, features=self.features,
            hist_features=self.hist_features, codes=self.codes, targets=self.targets, observed=self.observed,
            cell_flags=self.cell_flags, feat_mean=self.feat_mean, feat_std=self.feat_std,
        )
        meta = {
            "link_ids": self.link_ids,
            "start_date": self.start_date.isoformat(),
            "window": asdict(self.window_cfg),
            "split": asdict(self.split_cfg),
            "days": self.days,
            "holidays": self.holidays,
            "road_vocab": list(self.road_vocab),
            "features": list(FEATURES),
            "targets": list(TARGETS),
        }
        (out / "dataset.json").write_text(json.dumps(meta, indent=1))
        self.truth_frame("test").to_csv(out / "test_truth.csv", index=False)
        self.flag_frame("test").to_csv(out / "test_flags.csv", index=False)

    @classmethod
    def load(cls, path: str | Path) -> "ForecastDataset":
        p = Path(path)
        meta = json.loads((p / "dataset.json").read_text())
        a = np.load(p / "arrays.npz")
        return cls(
            link_ids=meta["link_ids"],
            start_date=date.fromisoformat(meta["start_date"]),
            window_cfg=WindowConfig(**meta["window"]),
            split_cfg=SplitConfig(**meta["split"]),
            days={k: list(v) for k, v in meta["days"].items()},
            holidays=list(meta["holidays"]),
            adjacency=a["adjacency"],
            road=a["road"],
            road_vocab=tuple(meta["road_vocab"]),
            features=a["features"],
            hist_features=a["hist_features"],
            codes=a["codes"],
            targets=a["targets"],
            observed=a["observed"],
            cell_flags=a["cell_flags"],
            feat_mean=a["feat_mean"],
            feat_std=a["feat_std"],
        )

    # -- flat tables for evaluation ------------------------------------
    def _keys(self, split: str):
        day, anchor = self.samples(split)
        S, N, P = len(day), self.n_links, self.split_cfg.horizon
        ep = self.anchor_epoch(day, anchor)
        return day, anchor, S, N, P, ep

    def prediction_frame(self, pred: np.ndarray, split: str, column: str = "pred") -> pd.DataFrame:
        """Flatten a [S, N, P, 2] array to rows keyed by link, anchor, horizon and measure."""
        day, anchor, S, N, P, ep = self._keys(split)
        ws = self.window_cfg.window_s
        s_idx, n_idx, p_idx, m_idx = np.meshgrid(np.arange(S), np.arange(N), np.arange(P), np.arange(2), indexing="ij")
        s_idx, n_idx, p_idx, m_idx = (v.reshape(-1) for v in (s_idx, n_idx, p_idx, m_idx))
        return pd.DataFrame({
            "link_id": np.array(self.link_ids, dtype=object)[n_idx],
            "anchor_start": iso_time(ep[s_idx]),
            "target_start": iso_time(ep[s_idx] + (p_idx + 1) * ws),
            "horizon_min": (p_idx + 1) * ws // 60,
            "measure": np.array(TARGETS, dtype=object)[m_idx],
            column: np.asarray(pred, dtype=float).reshape(-1),
        })

    def truth_frame(self, split: str) -> pd.DataFrame:
        b = self.split_batch(split)
        df = self.prediction_frame(b["y"], split, "truth")
        obs = np.broadcast_to(b["y_mask"][..., None], b["y"].shape)
        df["observed"] = obs.reshape(-1).astype(int)
        return df

    def flag_frame(self, split: str) -> pd.DataFrame:
        day, anchor, S, N, P, ep = self._keys(split)
        f = self._anchor_flags[day, anchor]  # [S, N, 2]
        s_idx, n_idx, m_idx = np.meshgrid(np.arange(S), np.arange(N), np.arange(2), indexing="ij")
        return pd.DataFrame({
            "link_id": np.array(self.link_ids, dtype=object)[n_idx.reshape(-1)],
            "anchor_start": iso_time(ep[s_idx.reshape(-1)]),
            "measure": np.array(TARGETS, dtype=object)[m_idx.reshape(-1)],
            "flag": f.reshape(-1).astype(int),
        })


def build_dataset(series: WindowSeries, cell_flags: np.ndarray, graph, split_cfg: SplitConfig = SplitConfig(),
                  holidays: Sequence[int] = ()) -> ForecastDataset:
    """Assemble the forecasting arrays from an imputed series and per-cell flags.

    ``cell_flags`` is [links, days, windows, 2] (delay, queue), computed with
    references from the training days of the same split.
    """
    from .basemap import build_fixed_adjacency

    days = split_days(series.n_days, split_cfg)
    if series.n_windows < split_cfg.past + split_cfg.horizon:
        raise ValueError("day too short for the past + horizon window")
    train_wd = {series.weekday(d) for d in days["train"]}
    if not train_wd:
        raise ValueError("no training days")
    feats = np.stack(
        [series.n_vehicles.astype(float) if f == "n_vehicles" else series.values[f] for f in FEATURES], axis=-1
    )  # [N, D, W, 6]
    feats = np.transpose(feats, (1, 2, 0, 3))
    targets = np.transpose(np.stack([series.values[t] for t in TARGETS], axis=-1), (1, 2, 0, 3))
    observed = np.transpose(series.observed, (1, 2, 0))
    hist = historical_profile(feats, series, days["train"], holidays)
    links = [graph.links[lid] for lid in series.link_ids]
    road_ids = sorted({l.road_id for l in links})
    road = np.array([[road_ids.index(l.road_id), lane_class(l.lanes), speed_class(l.speed_limit_mph)] for l in links])
    adj = build_fixed_adjacency(graph, series.link_ids).normalized
    return ForecastDataset(
        link_ids=list(series.link_ids),
        start_date=series.start_date,
        window_cfg=series.cfg,
        split_cfg=split_cfg,
        days=days,
        holidays=sorted(int(h) for h in holidays),
        adjacency=np.array(adj),
        road=road,
        road_vocab=(len(road_ids), 4, 8),
        features=feats,
        hist_features=hist,
        codes=temporal_codes(series, holidays),
        targets=targets,
        observed=observed,
        cell_flags=np.transpose(np.asarray(cell_flags, dtype=bool), (1, 2, 0, 3)),
    )
