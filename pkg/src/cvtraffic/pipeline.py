"""End-to-end orchestration, evaluation metrics, ablation and sensitivity harnesses."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .anomaly import DetectionResult, label_dataset
from .basemap import LinkGraph
from .config import RunConfig
from .dataset import TARGETS, ForecastDataset, build_dataset, split_days
from .extraction import extract_records
from .measures import WindowSeries, epoch_of, parse_time, window_series
from .model import ModelConfig, variant_config
from .training import TrainResult, evaluate_split, train

log = logging.getLogger(__name__)

SUBSETS = ("overall", "normal", "abnormal")
MEASURE_NAMES = {"control_delay_s": "delay", "queue_m": "queue"}
REPORT_COLUMNS = ["measure", "subset", "horizon", "mae", "rmse", "count"]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    """MAE/RMSE/count per measure x subset x horizon ("15".."60" and "all")."""

    table: pd.DataFrame

    def row(self, measure: str, subset: str = "overall", horizon: str = "all") -> pd.Series:
        t = self.table
        hit = t[(t["measure"] == measure) & (t["subset"] == subset) & (t["horizon"] == str(horizon))]
        if len(hit) != 1:
            raise KeyError((measure, subset, horizon))
        return hit.iloc[0]

    def mae(self, measure: str, subset: str = "overall", horizon: str = "all") -> float | None:
        v = self.row(measure, subset, horizon)["mae"]
        return None if pd.isna(v) else float(v)

    def rmse(self, measure: str, subset: str = "overall", horizon: str = "all") -> float | None:
        v = self.row(measure, subset, horizon)["rmse"]
        return None if pd.isna(v) else float(v)

    def count(self, measure: str, subset: str = "overall", horizon: str = "all") -> int:
        return int(self.row(measure, subset, horizon)["count"])

    def to_records(self) -> list[dict]:
        """Rows with absent metrics as None."""
        out = []
        for r in self.table.itertuples(index=False):
            out.append({
                "measure": r.measure, "subset": r.subset, "horizon": r.horizon,
                "mae": None if pd.isna(r.mae) else float(r.mae),
                "rmse": None if pd.isna(r.rmse) else float(r.rmse),
                "count": int(r.count),
            })
        return out

    def save(self, path: str | Path) -> None:
        self.table.to_csv(path, index=False, float_format="%.10g")


def evaluate(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, flags: np.ndarray,
             step_min: int = 15) -> EvalReport:
    """Metrics over observed target cells.

    pred/target: [S, N, P, 2]; mask: [S, N, P] observed targets; flags:
    [S, N, 2] abnormal flag per sample, link and measure. Empty slices report
    NaN metrics with a zero count.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    S, N, P, M = pred.shape
    obs = np.broadcast_to(np.asarray(mask, dtype=bool)[..., None], pred.shape)
    fl = np.broadcast_to(np.asarray(flags, dtype=bool)[:, :, None, :], pred.shape)
    err = pred - target
    rows = []
    for m, name in enumerate(TARGETS):
        e_m = err[..., m]
        for subset in SUBSETS:
            sel = obs[..., m].copy()
            if subset == "normal":
                sel &= ~fl[..., m]
            elif subset == "abnormal":
                sel &= fl[..., m]
            horizons = [(str((p + 1) * step_min), slice(p, p + 1)) for p in range(P)] + [("all", slice(None))]
            for label, hs in horizons:
                s = sel[:, :, hs]
                e = e_m[:, :, hs][s]
                n = int(e.size)
                mae = float(np.mean(np.abs(e))) if n else float("nan")
                rmse = float(math.sqrt(np.mean(e * e))) if n else float("nan")
                rows.append((MEASURE_NAMES[name], subset, label, mae, rmse, n))
    return EvalReport(pd.DataFrame(rows, columns=REPORT_COLUMNS))


def evaluate_frames(pred: pd.DataFrame, truth: pd.DataFrame, flags: pd.DataFrame) -> EvalReport:
    """Evaluate flat CSV tables (predictions, truth with ``observed``, flags) joined on their keys."""
    keys = ["link_id", "anchor_start", "target_start", "horizon_min", "measure"]
    for name, df, need in (("predictions", pred, keys + ["pred"]), ("truth", truth, keys + ["truth", "observed"]),
                           ("flags", flags, ["link_id", "anchor_start", "measure", "flag"])):
        missing = set(need) - set(df.columns)
        if missing:
            raise ValueError(f"{name} table lacks columns {sorted(missing)}")
    j = truth.merge(pred[keys + ["pred"]], on=keys, how="left", validate="one_to_one")
    j = j.merge(flags[["link_id", "anchor_start", "measure", "flag"]], on=["link_id", "anchor_start", "measure"],
                how="left", validate="many_to_one")
    obs = j["observed"].astype(bool)
    if j.loc[obs, "pred"].isna().any():
        raise ValueError("predictions missing for observed truth cells")
    j["flag"] = j["flag"].fillna(0).astype(bool)
    steps = sorted(j["horizon_min"].unique())
    rows = []
    for m, name in enumerate(TARGETS):
        jm = j[(j["measure"] == name) & obs]
        for subset in SUBSETS:
            s = jm if subset == "overall" else jm[jm["flag"] == (subset == "abnormal")]
            for label in [str(h) for h in steps] + ["all"]:
                part = s if label == "all" else s[s["horizon_min"] == int(label)]
                e = (part["pred"] - part["truth"]).to_numpy(float)
                n = int(e.size)
                mae = float(np.mean(np.abs(e))) if n else float("nan")
                rmse = float(math.sqrt(np.mean(e * e))) if n else float("nan")
                rows.append((MEASURE_NAMES[name], subset, label, mae, rmse, n))
    return EvalReport(pd.DataFrame(rows, columns=REPORT_COLUMNS))


def split_truth(ds: ForecastDataset, split: str = "test"):
    b = ds.split_batch(split)
    return b["y"], b["y_mask"], b["flags"]


def baselines(ds: ForecastDataset, split: str = "test") -> dict[str, EvalReport]:
    day, anchor = ds.samples(split)
    y, mask, flags = split_truth(ds, split)
    step = ds.window_cfg.window_s // 60
    return {
        "persistence": evaluate(ds.persistence(day, anchor), y, mask, flags, step),
        "historical_average": evaluate(ds.historical_average(day, anchor), y, mask, flags, step),
    }


def model_report(result: TrainResult, ds: ForecastDataset, split: str = "test") -> tuple[EvalReport, dict]:
    """Report plus the raw evaluation dict (predictions and gate means)."""
    out = evaluate_split(result.model, ds, split)
    y, mask, flags = split_truth(ds, split)
    return evaluate(out["pred"], y, mask, flags, ds.window_cfg.window_s // 60), out


# ---------------------------------------------------------------------------
# extraction -> series -> flags -> dataset


@dataclass
class Prepared:
    series: WindowSeries
    detection: DetectionResult
    dataset: ForecastDataset
    vehicles: pd.DataFrame
    records: pd.DataFrame
    diagnostics: Counter = field(default_factory=Counter)


def build_series(records: pd.DataFrame, graph: LinkGraph, start_date: date, n_days: int,
                 cfg: RunConfig) -> WindowSeries:
    """Dense series imputed from the training days of the configured split."""
    pool = split_days(n_days, cfg.split)["train"]
    return window_series(records, graph.link_ids, start_date, n_days, cfg.window, pool)


def detect(series: WindowSeries, cfg: RunConfig, holidays: Sequence[int] = ()) -> DetectionResult:
    train_days = split_days(series.n_days, cfg.split)["train"]
    return label_dataset(series, train_days, cfg.anomaly, holidays=holidays)


def prepare(points: pd.DataFrame | Iterable[pd.DataFrame], graph: LinkGraph, start_date: date, n_days: int,
            cfg: RunConfig = RunConfig(), holidays: Sequence[int] = ()) -> Prepared:
    diag: Counter = Counter()
    vehicles, records = extract_records(points, graph, cfg.extraction, diag)
    series = build_series(records, graph, start_date, n_days, cfg)
    det = detect(series, cfg, holidays)
    ds = build_dataset(series, det.flags(cfg.anomaly.k), graph, cfg.split, holidays)
    return Prepared(series, det, ds, vehicles, records, diag)


def prepare_scenario(sc, cfg: RunConfig = RunConfig(), noise: bool = True) -> tuple[Prepared, pd.DataFrame]:
    """Simulate a scenario day by day and run extraction, detection and dataset building."""
    from .datasim import simulate_days

    truth = []

    def chunks():
        for day in simulate_days(sc, noise):
            truth.append(day.truth)
            yield day.points

    prep = prepare(chunks(), sc.graph, sc.start_date, sc.days, cfg, sc.holidays)
    return prep, pd.concat(truth, ignore_index=True)


def incident_recall(det: DetectionResult, truth: pd.DataFrame, k: float | None = None) -> dict:
    """Share of observed incident windows flagged on any measure."""
    s = det.series
    inc = truth[truth["incident"].astype(int) == 1]
    if inc.empty:
        return {"recall": float("nan"), "incident_windows": 0, "observed": 0, "flagged": 0}
    ws = parse_time(inc["window_start"]) if inc["window_start"].dtype == object else \
        inc["window_start"].to_numpy(np.int64)
    ep = np.asarray(ws, dtype=np.int64) - int(epoch_of(s.start_date))
    d = ep // 86400
    w = (ep % 86400 - s.cfg.day_start_s) // s.cfg.window_s
    li = pd.Index(s.link_ids).get_indexer(inc["link_id"].astype(str))
    ok = (li >= 0) & (d >= 0) & (d < s.n_days) & (w >= 0) & (w < s.n_windows)
    li, d, w = li[ok], d[ok], w[ok]
    obs = s.observed[li, d, w]
    flagged = det.flags(k).any(axis=-1)[li, d, w] & obs
    n_obs = int(obs.sum())
    return {
        "recall": float(flagged.sum() / n_obs) if n_obs else float("nan"),
        "incident_windows": int(ok.sum()),
        "observed": n_obs,
        "flagged": int(flagged.sum()),
    }


# ---------------------------------------------------------------------------
# ablation and sensitivity


@dataclass(frozen=True)
class AblationSpec:
    variant: str
    overrides: dict = field(default_factory=dict)

    def config(self, base: ModelConfig) -> ModelConfig:
        cfg = variant_config(base, self.variant)
        if self.overrides:
            unknown = set(self.overrides) - set(cfg.to_dict())
            if unknown:
                raise ValueError(f"unknown override keys {sorted(unknown)}")
            cfg = ModelConfig.from_dict({**cfg.to_dict(), **self.overrides})
        return cfg


@dataclass
class AblationResult:
    table: pd.DataFrame
    reports: dict[str, EvalReport]
    runs: dict[str, TrainResult]
    gates: dict[str, tuple[float, float]]


def _summary_row(name: str, rep: EvalReport) -> dict:
    row = {"variant": name}
    for meas in MEASURE_NAMES.values():
        for subset in SUBSETS:
            row[f"{meas}_{subset}_mae"] = rep.mae(meas, subset)
            row[f"{meas}_{subset}_rmse"] = rep.rmse(meas, subset)
    return row


def run_ablation(ds: ForecastDataset, specs: Sequence[AblationSpec], base: ModelConfig,
                 on_variant: Callable[[str, TrainResult], None] | None = None) -> AblationResult:
    """Train every variant with the shared seed; relative changes are against ``full`` when present."""
    reports, runs, gates, rows = {}, {}, {}, []
    for spec in specs:
        cfg = spec.config(base)
        log.info("ablation: training %s", spec.variant)
        res = train(ds, cfg)
        rep, raw = model_report(res, ds)
        reports[spec.variant], runs[spec.variant] = rep, res
        gates[spec.variant] = (raw["gate_mean_normal"], raw["gate_mean_abnormal"])
        rows.append(_summary_row(spec.variant, rep))
        if on_variant:
            on_variant(spec.variant, res)
    table = pd.DataFrame(rows)
    if "full" in reports:
        ref = table.set_index("variant").loc["full"]
        for col in [c for c in table.columns if c.endswith("_mae")]:
            table[col.replace("_mae", "_rel_change")] = (table[col] - ref[col]) / ref[col]
    return AblationResult(table, reports, runs, gates)


def sensitivity_k(series: WindowSeries, graph: LinkGraph, cfg: RunConfig, k_values: Sequence[float] | None = None,
                  holidays: Sequence[int] = (), train_models: bool = True,
                  truth: pd.DataFrame | None = None) -> pd.DataFrame:
    """Prevalence (and, when training, test metrics) per threshold multiplier, reusing the extraction."""
    k_values = list(cfg.k_grid if k_values is None else k_values)
    if not k_values:
        raise ValueError("k list must be nonempty")
    det = detect(series, cfg, holidays)
    rows = []
    for k in k_values:
        prev = det.prevalence(k)
        row = {"k": float(k), **{f"prevalence_{MEASURE_NAMES[m]}": v for m, v in prev.items()}}
        flags = det.flags(k)
        obs = series.observed
        row["prevalence_any"] = float(flags.any(axis=-1)[obs].mean()) if obs.any() else float("nan")
        if truth is not None:
            row["incident_recall"] = incident_recall(det, truth, k)["recall"]
        if train_models:
            ds = build_dataset(series, flags, graph, cfg.split, holidays)
            rep, _ = model_report(train(ds, cfg.model), ds)
            for meas in MEASURE_NAMES.values():
                for subset in SUBSETS:
                    row[f"{meas}_{subset}_mae"] = rep.mae(meas, subset)
        rows.append(row)
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# manifests


def manifest_name(command: str) -> str:
    return f"manifest_{command}.json"


def _is_manifest(name: str) -> bool:
    return name.startswith("manifest_") and name.endswith(".json")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    if p.is_dir():
        for f in sorted(q for q in p.rglob("*") if q.is_file() and not _is_manifest(q.name)):
            h.update(str(f.relative_to(p)).encode())
            h.update(bytes.fromhex(file_digest(f)))
        return h.hexdigest()
    with open(p, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: str | Path, command: str, args: dict, cfg: RunConfig | None, inputs: dict,
                   seed: int | None = None, outputs: Sequence[str] = ()) -> dict:
    """Record what is needed to rerun a command: arguments, config, seed and input/output digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "package_version": __version__,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(args.items())},
        "config": cfg.to_dict() if cfg is not None else None,
        "config_sha256": cfg.digest() if cfg is not None else None,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in sorted(inputs.items()) if v},
        "outputs": {name: file_digest(out / name) for name in sorted(outputs) if (out / name).exists()},
    }
    # one file per command, so several steps can share an output directory
    (out / manifest_name(command)).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc
