"""Pipeline configuration: one flat YAML document, keys named after the model symbols.

Missing keys fall back to the defaults below; unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import yaml

from .cloud_filter import FilterConfig
from .errors import ConfigError
from .frame_ingest import DEFAULT_MIN_REGION_AREA
from .occupancy_map import DEFAULT_RESOLUTION
from .pose_estimation import CAMERA_TO_WORK, WorkFrame
from .pose_verification import VerifyConfig
from .sphere_hough import HoughConfig

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "pipeline_config.yaml"

_FILTER_KEYS = {f.name for f in fields(FilterConfig)}
_VERIFY_KEYS = {f.name for f in fields(VerifyConfig)}
_HOUGH_KEYS = {"center_step", "radius_step", "center_margin", "r_accept"}
_TOP_KEYS = {"map_resolution", "min_region_area", "clamp_deg", "work_rotation",
             "verify_enabled", "workers", "export_ply"}
KNOWN_KEYS = _FILTER_KEYS | _VERIFY_KEYS | _HOUGH_KEYS | _TOP_KEYS


@dataclass
class PipelineConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    hough: HoughConfig = field(default_factory=HoughConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    map_resolution: float = DEFAULT_RESOLUTION
    min_region_area: int = DEFAULT_MIN_REGION_AREA
    clamp_deg: float = 60.0
    work_rotation: list = field(default_factory=lambda: CAMERA_TO_WORK.tolist())
    verify_enabled: bool = True
    workers: int = 1
    export_ply: bool = False

    def __post_init__(self):
        if not self.map_resolution > 0:
            raise ConfigError(f"map_resolution must be > 0, got {self.map_resolution}")
        if self.min_region_area < 0:
            raise ConfigError(f"min_region_area must be >= 0, got {self.min_region_area}")
        if not 0 < self.clamp_deg <= 90:
            raise ConfigError(f"clamp_deg must lie in (0, 90], got {self.clamp_deg}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        WorkFrame(np.asarray(self.work_rotation, dtype=np.float64))

    @property
    def clamp(self) -> float:
        return math.radians(self.clamp_deg)

    @property
    def work_frame(self) -> WorkFrame:
        return WorkFrame(np.asarray(self.work_rotation, dtype=np.float64))

    # --- flat document <-> config ---
    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "PipelineConfig":
        data = dict(data or {})
        unknown = sorted(set(data) - KNOWN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            filt = FilterConfig(**{k: data[k] for k in _FILTER_KEYS if k in data})
            verify = VerifyConfig(**{k: data[k] for k in _VERIFY_KEYS if k in data})
            hough_kwargs = {k: data[k] for k in ("center_step", "radius_step", "center_margin") if k in data}
            if "r_accept" in data:
                r_accept = data["r_accept"]
                if not isinstance(r_accept, (list, tuple)) or len(r_accept) != 2:
                    raise ConfigError("r_accept must be a [r_min, r_max] pair")
                try:
                    hough_kwargs["r_min"], hough_kwargs["r_max"] = float(r_accept[0]), float(r_accept[1])
                except ValueError as e:
                    raise ConfigError(f"r_accept bounds must be numbers, got {r_accept}") from e
            hough = HoughConfig(**hough_kwargs)
            top = {k: data[k] for k in _TOP_KEYS if k in data}
            return cls(filter=filt, hough=hough, verify=verify, **top)
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from e

    @classmethod
    def from_file(cls, path: Path | str | None = None) -> "PipelineConfig":
        path = Path(path) if path else DEFAULT_CONFIG_PATH
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a key/value mapping")
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        out.update({f.name: getattr(self.filter, f.name) for f in fields(FilterConfig)})
        out.update({
            "center_step": self.hough.center_step,
            "radius_step": self.hough.radius_step,
            "center_margin": self.hough.center_margin,
            "r_accept": [self.hough.r_min, self.hough.r_max],
        })
        out.update({f.name: getattr(self.verify, f.name) for f in fields(VerifyConfig)})
        out.update({k: getattr(self, k) for k in sorted(_TOP_KEYS)})
        out["work_rotation"] = [[float(v) for v in row] for row in self.work_rotation]
        return out

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("workers")  # parallelism never changes results
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_config(path: Path | str | None = None) -> PipelineConfig:
    """Config from ``path``, or the built-in defaults when no path is given."""
    return PipelineConfig.from_file(path) if path else PipelineConfig()


__all__ = ["PipelineConfig", "load_config", "KNOWN_KEYS", "DEFAULT_CONFIG_PATH"]
