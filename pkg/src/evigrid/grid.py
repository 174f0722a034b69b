"""Grid geometry, layer containers, and rigid transforms shared by all pipeline stages.

Conventions used throughout the package:

* cell index ``(i, j)`` means x-column ``i`` and y-row ``j``
* layer arrays have shape ``(height, width)``, row-major, row 0 at minimum y,
  so ``layer[j, i]`` addresses cell ``(i, j)``
* layers are stored as 32-bit floats, counts included
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_CELL_SIZE = 0.15
DEFAULT_GRID_CELLS = 536        # covers a 40 m fusion radius with margin at 0.15 m
DEFAULT_ORIGIN_OFFSET = -40.2   # lower-left grid corner relative to the reference pose

# Single-frame layers as written by `evigrid map` (plus the evidence triple).
INPUT_LAYERS = ("reflections", "observations", "reflected_energy", "height", "shadow_height")
# Fused layers written by `evigrid fuse`.
TARGET_LAYERS = ("reflections", "observation_height", "reflected_energy", "height",
                 "bel_free", "bel_occupied", "bel_unknown")
EVIDENCE_LAYERS = ("m_occupied", "m_free", "m_unknown")
# Extra per-frame layers a fusion run needs beyond the input schema.
INTERNAL_LAYERS = ("transmissions", "max_observable")

INPUT_SCHEMA = INPUT_LAYERS + EVIDENCE_LAYERS
FULL_FRAME_SCHEMA = INPUT_LAYERS + INTERNAL_LAYERS + EVIDENCE_LAYERS
BELIEF_LAYERS = frozenset(EVIDENCE_LAYERS) | {"bel_free", "bel_occupied", "bel_unknown"}

SCHEMAS = {
    "input": INPUT_SCHEMA,
    "input_full": FULL_FRAME_SCHEMA,
    "target": TARGET_LAYERS,
}


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a top-view grid: cell size, cell counts, and world origin.

    ``(origin_x, origin_y)`` is the world position of the lower-left corner of
    cell (0, 0). Points exactly on the max boundary are outside the grid.
    """

    cell_size: float = DEFAULT_CELL_SIZE
    width: int = DEFAULT_GRID_CELLS
    height: int = DEFAULT_GRID_CELLS
    origin_x: float = DEFAULT_ORIGIN_OFFSET
    origin_y: float = DEFAULT_ORIGIN_OFFSET

    def __post_init__(self) -> None:
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must have at least one cell, got {self.width}x{self.height}")

    @classmethod
    def centered_at(cls, x: float, y: float, cell_size: float = DEFAULT_CELL_SIZE,
                    cells: int = DEFAULT_GRID_CELLS,
                    origin_offset: float = DEFAULT_ORIGIN_OFFSET) -> "GridSpec":
        """Square grid anchored relative to a reference position (axis-aligned in world)."""
        return cls(cell_size=cell_size, width=cells, height=cells,
                   origin_x=x + origin_offset, origin_y=y + origin_offset)

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape (height, width) of a conforming layer."""
        return (self.height, self.width)

    def cell_center_grids(self) -> tuple[np.ndarray, np.ndarray]:
        """World x and y coordinates of all cell centers, each shaped (height, width)."""
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.origin_y + (np.arange(self.height) + 0.5) * self.cell_size
        return np.broadcast_arrays(xs[None, :], ys[:, None])


def world_to_cell(spec: GridSpec, p) -> Optional[tuple[int, int]]:
    """Cell index (i, j) containing world point ``p=(x, y)``, or None if outside."""
    i = math.floor((p[0] - spec.origin_x) / spec.cell_size)
    j = math.floor((p[1] - spec.origin_y) / spec.cell_size)
    if 0 <= i < spec.width and 0 <= j < spec.height:
        return (i, j)
    return None


def world_to_cell_array(spec: GridSpec, x: np.ndarray, y: np.ndarray):
    """Vectorized world_to_cell: returns (i, j, inside) integer arrays plus a bool mask."""
    i = np.floor((np.asarray(x) - spec.origin_x) / spec.cell_size).astype(np.int64)
    j = np.floor((np.asarray(y) - spec.origin_y) / spec.cell_size).astype(np.int64)
    inside = (i >= 0) & (i < spec.width) & (j >= 0) & (j < spec.height)
    return i, j, inside


def cell_center(spec: GridSpec, i: int, j: int) -> tuple[float, float]:
    """World coordinates of the center of cell (i, j). Raises for out-of-bounds indices."""
    if not (0 <= i < spec.width and 0 <= j < spec.height):
        raise IndexError(f"cell ({i}, {j}) outside {spec.width}x{spec.height} grid")
    return (spec.origin_x + (i + 0.5) * spec.cell_size,
            spec.origin_y + (j + 0.5) * spec.cell_size)


def quaternion_rotation_matrix(q) -> np.ndarray:
    """3x3 rotation matrix from a unit quaternion (w, x, y, z)."""
    w, x, y, z = (float(v) for v in q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class Pose:
    """Timestamped rigid transform: rotation (unit quaternion, w-first) then translation."""

    timestamp: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        norm = math.sqrt(sum(v * v for v in self.rotation))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {norm!r} not within 1e-9 of 1")

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> "Pose":
        return cls(timestamp=timestamp)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0), timestamp: float = 0.0) -> "Pose":
        h = 0.5 * yaw
        return cls(timestamp=timestamp, translation=tuple(float(v) for v in translation),
                   rotation=(math.cos(h), 0.0, 0.0, math.sin(h)))

    def rotation_matrix(self) -> np.ndarray:
        return quaternion_rotation_matrix(self.rotation)

    def inverse(self) -> "Pose":
        w, x, y, z = self.rotation
        conj = (w, -x, -y, -z)
        t_inv = -quaternion_rotation_matrix(conj) @ np.asarray(self.translation)
        return Pose(timestamp=self.timestamp, translation=tuple(t_inv), rotation=conj)


def transform_point(pose: Pose, p) -> np.ndarray:
    """Apply a pose to point(s) shaped (..., 3): rotation then translation."""
    p = np.asarray(p, dtype=float)
    return p @ pose.rotation_matrix().T + np.asarray(pose.translation)


def inverse_transform_point(pose: Pose, p) -> np.ndarray:
    """Map world point(s) back into the pose's local frame."""
    p = np.asarray(p, dtype=float)
    return (p - np.asarray(pose.translation)) @ pose.rotation_matrix()


@dataclass(frozen=True)
class PointCloud:
    """Range-sensor returns in the sensor frame: rows of (x, y, z, intensity)."""

    points: np.ndarray
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be (N, 4), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        if pts.shape[0] and np.min(pts[:, 3]) < 0:
            raise ValueError("intensity must be non-negative")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


def transform_cloud(cloud: PointCloud, pose: Pose) -> np.ndarray:
    """Cloud coordinates mapped into the pose's parent (world) frame, shape (N, 3)."""
    return transform_point(pose, cloud.xyz)


@dataclass(frozen=True)
class CellEvidence:
    """Per-cell mass triple over {occupied, free, unknown}; masses sum to one."""

    m_occupied: float
    m_free: float
    m_unknown: float

    def __post_init__(self) -> None:
        for name, v in (("m_occupied", self.m_occupied), ("m_free", self.m_free),
                        ("m_unknown", self.m_unknown)):
            if not (-1e-12 <= v <= 1.0 + 1e-12):
                raise ValueError(f"{name}={v!r} outside [0, 1]")
        total = self.m_occupied + self.m_free + self.m_unknown
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"evidence masses sum to {total!r}, expected 1")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.m_occupied, self.m_free, self.m_unknown)


UNKNOWN_EVIDENCE = CellEvidence(0.0, 0.0, 1.0)


@dataclass
class MultiLayerGridMap:
    """A GridSpec plus an ordered mapping of named float32 layers.

    ``schema`` optionally declares which layer schema the map satisfies
    ("input", "input_full", "target", or None for free-form maps).
    """

    spec: GridSpec
    layers: dict[str, np.ndarray]
    schema: Optional[str] = None

    def __post_init__(self) -> None:
        fixed: dict[str, np.ndarray] = {}
        for name, arr in self.layers.items():
            a = np.ascontiguousarray(arr, dtype=np.float32)
            if a.shape != self.spec.shape:
                raise ValueError(
                    f"layer {name!r} has shape {a.shape}, expected {self.spec.shape}")
            fixed[name] = a
        self.layers = fixed
        if self.schema is not None:
            self.validate_schema()

    def validate_schema(self) -> None:
        if self.schema not in SCHEMAS:
            raise ValueError(f"unknown schema {self.schema!r}")
        expected = SCHEMAS[self.schema]
        missing = [n for n in expected if n not in self.layers]
        if missing:
            raise ValueError(f"schema {self.schema!r} missing layers {missing}")
        for name in self.layers:
            if name in BELIEF_LAYERS:
                vals = self.layers[name]
                if vals.size and (np.nanmin(vals) < -1e-6 or np.nanmax(vals) > 1 + 1e-6):
                    raise ValueError(f"belief layer {name!r} has values outside [0, 1]")

    def layer_names(self) -> list[str]:
        return list(self.layers)

    def copy(self) -> "MultiLayerGridMap":
        return MultiLayerGridMap(self.spec, {k: v.copy() for k, v in self.layers.items()},
                                 self.schema)
