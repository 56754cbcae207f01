"""Analysis configuration: input-channel bounds and synthesis knobs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Union

from .errors import ConfigError


@dataclass
class AnalysisConfig:
    """Bounds and search parameters for one analysis run.

    `inputs` maps a read() channel to its rectangular bound |u| <= bound.
    Channels not listed fall back to `default_bound`.
    """

    inputs: dict[int, float] = field(default_factory=dict)
    default_bound: float = 1.0
    grid: int = 32
    refine: int = 2
    margin: Union[str, float] = "auto"

    def channel_bound(self, channel: int) -> float:
        bound = self.inputs.get(channel, self.default_bound)
        if bound <= 0:
            raise ConfigError(f"input channel {channel} bound must be positive")
        return float(bound)

    @classmethod
    def from_json(cls, text: str) -> "AnalysisConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls()
        for key, spec in data.get("inputs", {}).items():
            try:
                channel = int(key)
            except ValueError as exc:
                raise ConfigError(f"input channel {key!r} is not an integer") from exc
            if not isinstance(spec, dict) or spec.get("type", "rect") != "rect":
                raise ConfigError(f"input channel {key}: only rectangular bounds "
                                  "({'type': 'rect', 'bound': B}) are supported")
            cfg.inputs[channel] = float(spec["bound"])
        if "grid" in data:
            cfg.grid = int(data["grid"])
            if cfg.grid < 2:
                raise ConfigError("grid must have at least 2 points per scalar")
        if "refine" in data:
            cfg.refine = int(data["refine"])
            if cfg.refine < 0:
                raise ConfigError("refine must be nonnegative")
        if "margin" in data:
            margin = data["margin"]
            if margin != "auto":
                margin = float(margin)
                if margin <= 0:
                    raise ConfigError("margin must be positive or 'auto'")
            cfg.margin = margin
        return cfg

    @classmethod
    def load(cls, path: str) -> "AnalysisConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def to_jsonable(self) -> dict:
        return {
            "inputs": {str(k): {"type": "rect", "bound": v}
                       for k, v in sorted(self.inputs.items())},
            "grid": self.grid,
            "refine": self.refine,
            "margin": self.margin,
        }
