"""Command line entry point.

Exit codes: 0 success, 2 validation error (bad input, config or arguments),
3 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from collections import Counter
from dataclasses import replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from .basemap import BasemapError, load_basemap
from .config import ConfigError, RunConfig, load_config
from .dataset import ForecastDataset, SplitConfig, build_dataset
from .matcher import TRAJECTORY_COLUMNS
from .measures import SERIES_COLUMNS, WindowConfig, WindowSeries, iso_time
from .training import TrainingDiverged

log = logging.getLogger("cvtraffic")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
SERIES_META = "series.json"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _read_csv(path: str | Path, need: list[str] | None = None, what: str = "table") -> pd.DataFrame:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    try:
        df = pd.read_csv(p)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {what} {p}: {exc}") from exc
    if need:
        missing = [c for c in need if c not in df.columns]
        if missing:
            raise UsageError(f"{what} {p} lacks columns {missing}")
    return df


def _read_json(path: str | Path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"cannot parse {what} {p}: {exc}") from exc


def _series_meta_path(series_path: Path) -> Path:
    return series_path.with_name(SERIES_META)


def _load_series(path: str | Path) -> tuple[WindowSeries, dict]:
    """Series table plus its sidecar metadata (window grid, holidays, basemap)."""
    p = Path(path)
    df = _read_csv(p, SERIES_COLUMNS, "series")
    meta_path = _series_meta_path(p)
    meta = _read_json(meta_path, "series metadata") if meta_path.is_file() else {}
    cfg = WindowConfig(**meta["window"]) if "window" in meta else None
    series = WindowSeries.from_frame(df, cfg)
    if "start_date" in meta and date.fromisoformat(meta["start_date"]) != series.start_date:
        raise UsageError("series metadata start date disagrees with the table")
    return series, meta


def _resolve_basemap(explicit: str | None, meta: dict, anchor: Path):
    if explicit:
        return load_basemap(explicit)
    if "basemap" in meta:
        return load_basemap(anchor.parent / meta["basemap"])
    raise UsageError("no basemap given and none recorded next to the series")


def _parse_holidays(text: str | None, start: date, n_days: int) -> list[int]:
    if not text:
        return []
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        d = (date.fromisoformat(item) - start).days
        if not 0 <= d < n_days:
            raise UsageError(f"holiday {item} outside the data horizon")
        out.append(d)
    return sorted(set(out))


def _model_cfg(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, seed=int(args.seed)))
    if getattr(args, "max_epochs", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, max_epochs=int(args.max_epochs)))
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    from .datasim import default_scenario, load_scenario, write_outputs

    sc = load_scenario(args.scenario) if args.scenario else default_scenario()
    if args.penetration is not None:
        sc = replace(sc, penetration=float(args.penetration))
    if args.seed is not None:
        sc = replace(sc, seed=int(args.seed))
    info = write_outputs(sc, args.out, noise=not args.no_noise)
    from .pipeline import write_manifest

    write_manifest(args.out, "simulate", vars_of(args), None, {"scenario": args.scenario}, sc.seed,
                   ["trajectories.csv", "ground_truth.csv", "basemap.json", "scenario.json"])
    print(f"wrote {info['points']} points to {info['trajectories']}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .extraction import extract_records
    from .pipeline import build_series, write_manifest

    cfg = load_config(args.config)
    graph = load_basemap(args.basemap)
    pts = _read_csv(args.trajectories, TRAJECTORY_COLUMNS, "trajectories")
    if pts.empty:
        raise UsageError("trajectory table is empty")
    for col in ("t", "lon", "lat", "speed_mph", "heading_deg"):
        if not np.isfinite(pd.to_numeric(pts[col], errors="coerce")).all():
            raise UsageError(f"trajectory column {col!r} has non-numeric or non-finite values")
    t = pts["t"].to_numpy(float)
    start = date.fromisoformat(args.start_date) if args.start_date else \
        date(1970, 1, 1) + timedelta(days=int(t.min() // 86400))
    n_days = args.days or int((t.max() - (start - date(1970, 1, 1)).days * 86400) // 86400) + 1
    holidays = _parse_holidays(args.holidays, start, n_days)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diag: Counter = Counter()
    # one chunk per day keeps memory flat; trips crossing midnight are not expected
    day = (t // 86400).astype(np.int64)
    chunks = (pts[day == d] for d in np.unique(day))
    vehicles, records = extract_records(chunks, graph, cfg.extraction, diag)
    series = build_series(records, graph, start, n_days, cfg)
    vehicles.to_csv(out / "vehicles.csv", index=False, float_format="%.6f")
    rec = records.copy()
    rec["window_start"] = iso_time(rec["window_start"].to_numpy())
    rec.to_csv(out / "records.csv", index=False, float_format="%.6f")
    series.to_frame().to_csv(out / "series.csv", index=False, float_format="%.10g")
    shutil.copyfile(args.basemap, out / "basemap.json")
    meta = {"start_date": start.isoformat(), "n_days": n_days, "holidays": holidays,
            "window": {"window_s": series.cfg.window_s, "min_samples_flag": series.cfg.min_samples_flag,
                       "day_start_s": series.cfg.day_start_s, "day_end_s": series.cfg.day_end_s},
            "basemap": "basemap.json", "imputation_pool": "train", "split": cfg.to_dict()["split"]}
    (out / SERIES_META).write_text(json.dumps(meta, indent=1))
    (out / "diagnostics.json").write_text(json.dumps(dict(sorted(diag.items())), indent=1))
    write_manifest(out, "extract", vars_of(args), cfg, {"basemap": args.basemap, "trajectories": args.trajectories,
                                                       "config": args.config},
                   None, ["vehicles.csv", "records.csv", "series.csv", SERIES_META])
    print(f"{len(vehicles)} vehicle traversals, {len(records)} link-windows; diagnostics {dict(diag)}")
    return EXIT_OK


def cmd_detect(args) -> int:
    from .anomaly import save_references, slot_references
    from .dataset import split_days
    from .pipeline import detect, write_manifest

    cfg = load_config(args.config)
    if args.k is not None:
        if not args.k > 0:
            raise UsageError("k must be positive")
        cfg = replace(cfg, anomaly=replace(cfg.anomaly, k=float(args.k)))
    series, meta = _load_series(args.series)
    holidays = meta.get("holidays", [])
    det = detect(series, cfg, holidays)
    out = Path(args.out) if args.out else Path(args.series).parent
    out.mkdir(parents=True, exist_ok=True)
    det.to_frame(cfg.anomaly.k).to_csv(out / "flags.csv", index=False, float_format="%.10g")
    train_days = split_days(series.n_days, cfg.split)["train"]
    save_references(slot_references(series, train_days, cfg.anomaly, holidays=holidays), out / "references.json")
    prev = det.prevalence(cfg.anomaly.k)
    (out / "prevalence.json").write_text(json.dumps({"k": cfg.anomaly.k, "prevalence": prev}, indent=1))
    write_manifest(out, "detect", vars_of(args), cfg, {"series": args.series, "config": args.config}, None,
                   ["flags.csv", "references.json", "prevalence.json"])
    print(json.dumps({"k": cfg.anomaly.k, "prevalence": prev}))
    return EXIT_OK


def cmd_dataset(args) -> int:
    from .anomaly import flags_from_frame
    from .pipeline import write_manifest

    series, meta = _load_series(args.series)
    split = SplitConfig.from_dict(_read_json(args.split, "split config")) if args.split else SplitConfig()
    flags_df = _read_csv(args.flags, ["link_id", "window_start", "measure", "flag"], "flags")
    flags = flags_from_frame(flags_df, series)
    graph = _resolve_basemap(args.basemap, meta, Path(args.series))
    if "split" in meta and SplitConfig.from_dict(meta["split"]) != split:
        log.warning("split differs from the one used to impute the series")
    ds = build_dataset(series, flags, graph, split, meta.get("holidays", []))
    ds.save(args.out)
    write_manifest(args.out, "dataset", vars_of(args), None,
                   {"series": args.series, "flags": args.flags, "split": args.split}, None,
                   ["arrays.npz", "dataset.json", "test_truth.csv", "test_flags.csv"])
    print(f"dataset: {ds.n_links} links, " + ", ".join(f"{k} {ds.n_samples(k)} samples" for k in ds.days))
    return EXIT_OK


def _load_dataset(path: str) -> ForecastDataset:
    p = Path(path)
    if not (p / "dataset.json").is_file() or not (p / "arrays.npz").is_file():
        raise UsageError(f"not a dataset directory: {p}")
    return ForecastDataset.load(p)


def cmd_train(args) -> int:
    from .model import variant_config
    from .pipeline import write_manifest
    from .training import save_model, train, write_log

    cfg = _model_cfg(load_config(args.config), args)
    ds = _load_dataset(args.dataset)
    mcfg = variant_config(cfg.model, args.variant) if args.variant else cfg.model
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(ds, mcfg, early_stop=not args.no_early_stop)
    write_log(res.log, out / "train_log.csv")
    save_model(res, out / "checkpoint.json")
    (out / "model_config.json").write_text(json.dumps(mcfg.to_dict(), indent=1, sort_keys=True))
    write_manifest(out, "train", vars_of(args), cfg, {"dataset": args.dataset, "config": args.config}, mcfg.seed,
                   ["train_log.csv", "checkpoint.json", "model_config.json"])
    print(f"best epoch {res.best_epoch}, val loss {res.best_val_loss:.6g}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .training import load_model, predict

    ds = _load_dataset(args.dataset)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model = load_model(args.checkpoint, ds)
    pred = predict(model, ds, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("predictions.csv")
    ds.prediction_frame(pred, args.split).to_csv(out, index=False, float_format="%.10g")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate_frames

    pred = _read_csv(args.pred, None, "predictions")
    truth = _read_csv(args.truth, None, "truth")
    flags = _read_csv(args.flags, None, "flags")
    try:
        rep = evaluate_frames(pred, truth, flags)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.out:
        rep.save(args.out)
    overall = rep.table[rep.table["horizon"] == "all"]
    print(overall.to_string(index=False))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import AblationSpec, baselines, run_ablation, write_manifest

    cfg = _model_cfg(load_config(args.config), args)
    ds = _load_dataset(args.dataset)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else \
        list(cfg.ablation_variants)
    from .model import VARIANTS

    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise UsageError(f"unknown or empty variant list {bad}; choose from {list(VARIANTS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_ablation(ds, [AblationSpec(v) for v in variants], cfg.model)
    res.table.to_csv(out / "ablation.csv", index=False, float_format="%.10g")
    for name, rep in {**baselines(ds), **res.reports}.items():
        rep.save(out / f"report_{name}.csv")
    gates = pd.DataFrame([{"variant": k, "gate_mean_normal": a, "gate_mean_abnormal": b}
                          for k, (a, b) in res.gates.items()])
    gates.to_csv(out / "gates.csv", index=False, float_format="%.10g")
    write_manifest(out, "ablate", vars_of(args), cfg, {"dataset": args.dataset, "config": args.config},
                   cfg.model.seed, ["ablation.csv", "gates.csv"])
    print(res.table.to_string(index=False))
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    from .pipeline import sensitivity_k, write_manifest
    from .plotting import plot_lines

    cfg = _model_cfg(load_config(args.config), args)
    series, meta = _load_series(args.series)
    graph = _resolve_basemap(args.basemap, meta, Path(args.series))
    ks = [float(k) for k in args.k_grid.split(",")] if args.k_grid else None
    truth = None
    if args.truth:
        truth = _read_csv(args.truth, ["link_id", "window_start", "incident"], "ground truth")
    table = sensitivity_k(series, graph, cfg, ks, meta.get("holidays", []), not args.no_train, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "sensitivity.csv", index=False, float_format="%.10g")
    plot_lines(table, "k", [c for c in table.columns if c.startswith("prevalence_")], out / "prevalence.svg",
               "flagged prevalence", "share of observed cells")
    write_manifest(out, "sensitivity", vars_of(args), cfg, {"series": args.series, "truth": args.truth},
                   cfg.model.seed, ["sensitivity.csv", "prevalence.svg"])
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import plot_series

    df = _read_csv(args.series, SERIES_COLUMNS, "series")
    flags = _read_csv(args.flags, None, "flags") if args.flags else None
    days = [int(d) for d in args.days.split(",")] if args.days else None
    plot_series(df, args.out, args.link, args.measure, flags, days)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_config(args) -> int:
    text = json.dumps(RunConfig().to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvtraffic", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic trajectories and ground truth")
    s.add_argument("--scenario", help="scenario JSON (default scenario when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--penetration", type=float)
    s.add_argument("--seed", type=int, help="override the traffic seed (scenario layout is kept)")
    s.add_argument("--no-noise", action="store_true", help="disable GPS position/heading noise")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("extract", help="trajectories -> per-vehicle measures -> dense window series")
    s.add_argument("--basemap", required=True)
    s.add_argument("--trajectories", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--start-date", help="first analysis day (YYYY-MM-DD); inferred when omitted")
    s.add_argument("--days", type=int, help="number of analysis days; inferred when omitted")
    s.add_argument("--holidays", help="comma-separated YYYY-MM-DD dates")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("detect", help="median/MAD abnormal-window flags")
    s.add_argument("--series", required=True)
    s.add_argument("--k", type=float)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("dataset", help="build forecasting samples")
    s.add_argument("--series", required=True)
    s.add_argument("--flags", required=True)
    s.add_argument("--split", help="split config JSON")
    s.add_argument("--basemap")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", help="train a forecaster")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--variant")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--no-early-stop", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="write predictions.csv for a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="MAE/RMSE by measure, subset and horizon")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--flags", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and compare model variants")
    s.add_argument("--variants", help="comma-separated variant names")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sensitivity", help="detector threshold sweep")
    s.add_argument("--series", required=True)
    s.add_argument("--k-grid", help="comma-separated k values")
    s.add_argument("--config")
    s.add_argument("--basemap")
    s.add_argument("--truth", help="ground_truth.csv for incident recall")
    s.add_argument("--no-train", action="store_true", help="prevalence only")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.set_defaults(func=cmd_sensitivity)

    s = sub.add_parser("plot", help="SVG line chart of one link's series")
    s.add_argument("--series", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--link")
    s.add_argument("--measure", default="control_delay_s")
    s.add_argument("--flags")
    s.add_argument("--days", help="comma-separated day indices")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("config", help="print the default configuration")
    s.add_argument("--out")
    s.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, BasemapError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
