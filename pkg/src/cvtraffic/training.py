"""Mini-batch training with early stopping, plus inference helpers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import numkernel as nk
from .dataset import ForecastDataset
from .model import Forecaster, ModelConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "val_loss_normal", "val_loss_abnormal", "val_mae_delay",
               "val_mae_queue", "gate_mean_normal", "gate_mean_abnormal"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: Forecaster
    log: pd.DataFrame
    best_epoch: int
    best_val_loss: float
    expert_epochs: dict[str, int] | None = None


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss ({value}) during {where}")


def _smooth_l1_mean(pred: np.ndarray, y: np.ndarray, mask: np.ndarray, beta: float) -> float:
    if not mask.any():
        return 0.0
    e = np.abs(pred - y)[mask]
    return float(np.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta).mean())


def evaluate_split(model: Forecaster, ds: ForecastDataset, split: str, chunk: int = 256) -> dict:
    """Per-expert losses, served-prediction MAE per target and gate means over a split (no dropout)."""
    day, anchor = ds.samples(split)
    y_n, y_a, gates_n, gates_a = [], [], [], []
    for lo in range(0, len(day), chunk):
        b = ds.batch(day[lo:lo + chunk], anchor[lo:lo + chunk])
        out = model.forward(b, None)
        y_n.append(out.y_normal.data)
        y_a.append(out.y_abnormal.data)
        if out.gate_normal is not None:
            gates_n.append(out.gate_normal.mean(axis=-1))
            gates_a.append(out.gate_abnormal.mean(axis=-1))
    b = ds.batch(day, anchor)
    y_n, y_a = np.concatenate(y_n), np.concatenate(y_a)
    flags = np.asarray(b["flags"], dtype=bool)
    pred = np.where(flags[:, :, None, :], y_a, y_n)
    cfg = model.cfg
    m_n, m_a = model.loss_masks(b)
    loss_n = _smooth_l1_mean(y_n, b["y"], m_n, cfg.smooth_l1_beta)
    loss_a = float("nan") if m_a is None else _smooth_l1_mean(y_a, b["y"], m_a, cfg.smooth_l1_beta)
    loss = loss_n if m_a is None else cfg.w_normal * loss_n + cfg.w_abnormal * loss_a
    mask = np.broadcast_to(b["y_mask"][..., None], b["y"].shape)
    err = np.abs(pred - b["y"])
    mae = [float(err[..., m][mask[..., m]].mean()) if mask[..., m].any() else float("nan") for m in range(2)]
    gn = ga = float("nan")
    if gates_n:
        any_flag = flags.any(axis=-1)
        g_n, g_a = np.concatenate(gates_n), np.concatenate(gates_a)
        gn = float(g_n[~any_flag].mean()) if (~any_flag).any() else float("nan")
        ga = float(g_a[any_flag].mean()) if any_flag.any() else float("nan")
    return {
        "loss": loss,
        "loss_normal": loss_n,
        "loss_abnormal": loss_a,
        "mae_delay": mae[0],
        "mae_queue": mae[1],
        "gate_mean_normal": gn,
        "gate_mean_abnormal": ga,
        "pred": pred,
    }


def train(ds: ForecastDataset, cfg: ModelConfig, early_stop: bool = True,
          on_epoch: Callable[[dict], None] | None = None, train_subset: np.ndarray | None = None) -> TrainResult:
    """Adam on shuffled mini-batches, keeping the best validation parameters.

    The two experts never share parameters and each one's loss term touches
    only its own, so each expert keeps its own best epoch and early stopping
    waits for both.
    """
    model = Forecaster(cfg, ds.graph_meta())
    opt = nk.Adam(list(model.params), lr=cfg.lr, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 1])
    day, anchor = ds.samples("train")
    if train_subset is not None:
        day, anchor = day[train_subset], anchor[train_subset]
    experts = {"normal": "loss_normal", "abnormal": "loss_abnormal"} if cfg.dual else {"single": "loss_normal"}
    names = {ex: [n for n in model.params.names() if n.startswith(ex + ".")] for ex in experts}
    best = {ex: (math.inf, 0, {n: model.params[n].data.copy() for n in names[ex]}) for ex in experts}
    wait = dict.fromkeys(experts, 0)
    rows = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(day))
        tot, n = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            b = ds.batch(day[idx], anchor[idx])
            out = model.forward(b, rng)
            loss = model.loss(out, b)
            value = float(loss.data)
            _check_finite(value, f"epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            norm = opt.step()
            _check_finite(norm, f"epoch {epoch} gradient")
            tot += value * len(idx)
            n += len(idx)
        val = evaluate_split(model, ds, "val")
        _check_finite(val["loss"], f"epoch {epoch} validation")
        row = {
            "epoch": epoch,
            "train_loss": tot / n,
            "val_loss": val["loss"],
            "val_loss_normal": val["loss_normal"],
            "val_loss_abnormal": val["loss_abnormal"],
            "val_mae_delay": val["mae_delay"],
            "val_mae_queue": val["mae_queue"],
            "gate_mean_normal": val["gate_mean_normal"],
            "gate_mean_abnormal": val["gate_mean_abnormal"],
        }
        rows.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, row["train_loss"], row["val_loss"])
        if on_epoch:
            on_epoch(row)
        for ex, key in experts.items():
            if val[key] < best[ex][0]:
                best[ex] = (val[key], epoch, {n: model.params[n].data.copy() for n in names[ex]})
                wait[ex] = 0
            else:
                wait[ex] += 1
        if early_stop and all(w >= cfg.patience for w in wait.values()):
            break
    state = {}
    for ex in experts:
        state.update(best[ex][2])
    model.params.load_state(state)
    if cfg.dual:
        best_val = cfg.w_normal * best["normal"][0] + cfg.w_abnormal * best["abnormal"][0]
    else:
        best_val = best["single"][0]
    epochs = {ex: best[ex][1] for ex in experts}
    return TrainResult(model, pd.DataFrame(rows, columns=LOG_COLUMNS), max(epochs.values()), best_val, epochs)


def predict(model: Forecaster, ds: ForecastDataset, split: str = "test") -> np.ndarray:
    return evaluate_split(model, ds, split)["pred"]


def save_model(result_or_model, path: str | Path) -> None:
    model = result_or_model.model if isinstance(result_or_model, TrainResult) else result_or_model
    nk.save_checkpoint(model.params, path, extra={"model_config": model.cfg.to_dict()})


def load_model(path: str | Path, ds: ForecastDataset) -> Forecaster:
    state, extra = nk.load_checkpoint(path)
    cfg = ModelConfig.from_dict(extra["model_config"])
    model = Forecaster(cfg, ds.graph_meta())
    model.params.load_state(state)
    return model


def write_log(frame: pd.DataFrame, path: str | Path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")
