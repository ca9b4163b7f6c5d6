"""Run configuration: plain-text key=value files plus CLI overrides.

Unknown keys are rejected and every invariant violation is reported with the
offending key's name, so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    # pyramid geometry
    levels: int = 3            # pyramid depth L
    radius: int = 4            # correlation search radius r per level
    d_initial: int = 4         # encoder downsampling factor (per axis)
    d_level: int = 2           # downsampling factor between pyramid levels
    # network widths
    channels: int = 32         # feature channels throughout the estimator
    context_channels: int = 32 # fused context feature width
    # matching
    temperature: float = 10.0  # soft-argmax sharpness on correlations
    corr_scale: float = 3000.0  # correlation value of perfectly aligned features
    eps_splat: float = 1e-8    # splat normalization denominator guard
    eps_coverage: float = 1e-4 # coverage below this marks a hole
    # a unanimous splat deposits exactly unit mass, so trust the fetched
    # update only inside a tight band around one: above it disagreeing
    # motions collided, below it stray splat tails dominate the cell
    min_coverage: float = 0.99
    max_coverage: float = 1.01
    # training
    seed: int = 0
    lr: float = 1e-4
    lr_decay: float = 4.0      # divide lr by this at each milestone
    # milestones sit at these fractions of total steps, mirroring a decay
    # schedule of [100,150,180] on a 200-epoch run
    milestones: tuple = (0.5, 0.75, 0.9)
    batch_size: int = 4
    steps: int = 500
    image_size: int = 64
    max_disp: float = 8.0
    kind: str = "translate"    # synthetic motion family
    # synthesis
    t: float = 0.5             # target time within (0,1)

    def validate(self) -> "RunConfig":
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.radius < 1:
            raise ConfigError(f"radius must be >= 1, got {self.radius}")
        if self.d_level < 2:
            raise ConfigError(f"d_level must be >= 2, got {self.d_level}")
        if self.d_initial < 1 or (self.d_initial & (self.d_initial - 1)) != 0:
            raise ConfigError(
                f"d_initial must be a positive power of two, got {self.d_initial}")
        if not 0.0 < self.t < 1.0:
            raise ConfigError(f"t must lie in (0,1), got {self.t}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.context_channels < 1:
            raise ConfigError(
                f"context_channels must be >= 1, got {self.context_channels}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.corr_scale <= 0:
            raise ConfigError(f"corr_scale must be > 0, got {self.corr_scale}")
        if self.eps_splat <= 0:
            raise ConfigError(f"eps_splat must be > 0, got {self.eps_splat}")
        if self.eps_coverage <= 0:
            raise ConfigError(f"eps_coverage must be > 0, got {self.eps_coverage}")
        if not 0.0 < self.min_coverage < 1.0:
            raise ConfigError(
                f"min_coverage must lie in (0,1), got {self.min_coverage}")
        if self.max_coverage <= 1.0:
            raise ConfigError(
                f"max_coverage must be > 1, got {self.max_coverage}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lr_decay < 1:
            raise ConfigError(f"lr_decay must be >= 1, got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.max_disp < 0:
            raise ConfigError(f"max_disp must be >= 0, got {self.max_disp}")
        if self.kind not in ("translate", "rotate", "occlusion", "mixed"):
            raise ConfigError(
                f"kind must be translate/rotate/occlusion/mixed, got {self.kind!r}")
        if any(not 0 < m <= 1 for m in self.milestones):
            raise ConfigError(
                f"milestones must be fractions in (0,1], got {self.milestones}")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(float(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for {key}: {raw!r}") from exc


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a validated RunConfig from an optional file plus overrides.

    The file holds one ``key=value`` per line; blank lines and ``#`` comments
    are ignored. Override values (e.g. CLI flags) win over file values.
    """
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {line.strip()!r}")
            key, raw = stripped.split("=", 1)
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(val, str):
                val = _parse_value(key, val)
            values[key] = val
    return RunConfig(**values).validate()


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
