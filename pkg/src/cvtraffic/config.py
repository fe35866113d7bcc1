"""Single JSON run configuration; every tunable default is a key."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .anomaly import AnomalyConfig
from .dataset import SplitConfig
from .extraction import ExtractionConfig
from .matcher import MatchConfig
from .measures import MeasureConfig, WindowConfig
from .model import VARIANTS, ModelConfig
from .segmenter import SegmenterConfig

DEFAULT_K_GRID = (1.0, 1.5, 2.0, 2.5, 3.0)


class ConfigError(ValueError):
    pass


def _section(cls, doc, name):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    segment: SegmenterConfig = field(default_factory=SegmenterConfig)
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    k_grid: tuple[float, ...] = DEFAULT_K_GRID
    ablation_variants: tuple[str, ...] = VARIANTS

    SECTIONS = {
        "match": MatchConfig, "segment": SegmenterConfig, "measure": MeasureConfig, "window": WindowConfig,
        "anomaly": AnomalyConfig, "split": SplitConfig, "model": ModelConfig,
    }

    @property
    def extraction(self) -> ExtractionConfig:
        return ExtractionConfig(self.match, self.segment, self.measure, self.window)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        allowed = set(cls.SECTIONS) | {"k_grid", "ablation_variants"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = {name: _section(c, doc.get(name), name) for name, c in cls.SECTIONS.items()}
        k_grid = tuple(float(k) for k in doc.get("k_grid", DEFAULT_K_GRID))
        if not k_grid or any(k <= 0 for k in k_grid):
            raise ConfigError("k_grid must be a nonempty list of positive values")
        variants = tuple(doc.get("ablation_variants", VARIANTS))
        bad = [v for v in variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown ablation variants {bad}")
        return cls(**kw, k_grid=k_grid, ablation_variants=variants)

    def to_dict(self) -> dict:
        out = {}
        for name in self.SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        out["k_grid"] = list(self.k_grid)
        out["ablation_variants"] = list(self.ablation_variants)
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return RunConfig.from_dict(doc)
