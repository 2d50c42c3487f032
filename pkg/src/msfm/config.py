"""Pipeline configuration: defaults, key=value files, flag overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class PipelineConfig:
    eta: float = 20.0
    d: float = 8.0
    ratio_unguided: float = 0.6
    ratio_guided: float = 0.8
    covis_threshold: int = 8
    candidate_fraction: float = 0.10
    ranked_k: int = 10
    set_cover_k: int = 400
    set_cover_engage: int = 100_000
    force_set_cover: bool = False
    min_inliers: int = 16
    iterations: int = 2
    preemptive: bool = False
    final_ba: bool = False
    grid_inflation: float = 1.25
    focal: float = 0.0  # 0 means per-image heuristic (1.2 * max dimension)
    threads: int = 1
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if not 0 < self.eta <= 100:
            raise ConfigError(f"eta must be in (0, 100], got {self.eta}")
        if self.d <= 0:
            raise ConfigError(f"band d must be positive, got {self.d}")
        for name in ("ratio_unguided", "ratio_guided"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        return self


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """key=value lines (# comments allowed) applied over the defaults."""
    cfg = base or PipelineConfig()
    types = {f.name: f.type for f in fields(PipelineConfig)}
    kinds = {"float": float, "int": int, "bool": bool, "str": str}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = kinds.get(str(types[key]), None)
        if kind is None:
            kind = type(getattr(cfg, key))
        setattr(cfg, key, _coerce(key, kind, raw))
    return cfg.validate()


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    return parse_config_text(Path(path).read_text(), base)
