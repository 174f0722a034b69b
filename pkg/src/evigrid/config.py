"""Pipeline configuration: one YAML file with defaults for every field.

Sections mirror the pipeline stages: ``grid``, ``sensor``, ``ground``,
``scan``, ``fusion``, and ``render``. Unknown keys are rejected so typos
surface immediately.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .grid import DEFAULT_CELL_SIZE, DEFAULT_GRID_CELLS, DEFAULT_ORIGIN_OFFSET, GridSpec
from .ground import GroundFitConfig
from .raster import SensorModelConfig
from .simulate import ScanConfig


@dataclass(frozen=True)
class GridConfig:
    """Reference grid geometry, anchored per reference pose."""

    cell_size: float = DEFAULT_CELL_SIZE
    cells: int = DEFAULT_GRID_CELLS
    origin_offset: float = DEFAULT_ORIGIN_OFFSET

    def make_spec(self, x: float = 0.0, y: float = 0.0) -> GridSpec:
        return GridSpec.centered_at(x, y, cell_size=self.cell_size, cells=self.cells,
                                    origin_offset=self.origin_offset)


@dataclass(frozen=True)
class FusionConfig:
    radius: float = 40.0
    window_k: int = 5
    sigma_min: float = 1e-4

    def __post_init__(self) -> None:
        if self.radius <= 0 or self.sigma_min <= 0:
            raise ValueError("radius and sigma_min must be positive")
        if self.window_k < 0:
            raise ValueError("window_k must be >= 0")


@dataclass(frozen=True)
class RenderConfig:
    """Optional per-layer value ranges for PNG rendering, e.g. {"height": [0, 3]}."""

    ranges: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridConfig = GridConfig()
    sensor: SensorModelConfig = SensorModelConfig()
    ground: GroundFitConfig = GroundFitConfig()
    scan: ScanConfig = ScanConfig()
    fusion: FusionConfig = FusionConfig()
    render: RenderConfig = RenderConfig()
    ground_threshold: float = 0.3

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ValueError("config must be a mapping")
        sections = {
            "grid": GridConfig, "sensor": SensorModelConfig, "ground": GroundFitConfig,
            "scan": ScanConfig, "fusion": FusionConfig, "render": RenderConfig,
        }
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                klass = sections[key]
                if not isinstance(value, dict):
                    raise ValueError(f"config section {key!r} must be a mapping")
                known = {f.name for f in dataclasses.fields(klass)}
                unknown = set(value) - known
                if unknown:
                    raise ValueError(f"unknown keys in config section {key!r}: {sorted(unknown)}")
                kwargs[key] = klass(**value)
            elif key == "ground_threshold":
                kwargs[key] = float(value)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        if path is None:
            return cls()
        doc = yaml.safe_load(Path(path).read_text())
        return cls.from_dict(doc or {})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)
