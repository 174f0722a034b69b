"""Synthetic scenes with known ground truth and a deterministic range-scan simulator.

Scenes are a planar ground surface plus axis-aligned boxes with footprint
center, extent, and height; moving boxes advance with constant planar
velocity. Scan noise is seeded from the scene content and the timestamp, so
repeated simulation of the same scene is byte-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import yaml

from .grid import GridSpec, PointCloud, Pose, inverse_transform_point

LABEL_FREE = 0
LABEL_OCCUPIED = 1
LABEL_DYNAMIC = 2
LABEL_UNKNOWN = 3
LABEL_LAYER = "gt_labels"

PRESET_NAMES = ("static_street", "crossing_pedestrian", "parking_row")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: footprint center/extent in meters, height above ground."""

    center: tuple[float, float]
    extent: tuple[float, float]
    height: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.extent[0] <= 0 or self.extent[1] <= 0 or self.height <= 0:
            raise ValueError("box extent and height must be positive")

    def center_at(self, t: float) -> tuple[float, float]:
        return (self.center[0] + self.velocity[0] * t,
                self.center[1] + self.velocity[1] * t)

    def footprint_at(self, t: float) -> tuple[float, float, float, float]:
        cx, cy = self.center_at(t)
        return (cx - 0.5 * self.extent[0], cy - 0.5 * self.extent[1],
                cx + 0.5 * self.extent[0], cy + 0.5 * self.extent[1])


@dataclass(frozen=True)
class Scene:
    """World description: ground plane z = a*x + b*y + c, boxes, and bounds."""

    bounds: tuple[float, float, float, float] = (-50.0, -50.0, 50.0, 50.0)
    ground: tuple[float, float, float] = (0.0, 0.0, 0.0)
    static_boxes: tuple[Box, ...] = ()
    moving_boxes: tuple[Box, ...] = ()

    def __post_init__(self) -> None:
        if self.bounds[2] <= self.bounds[0] or self.bounds[3] <= self.bounds[1]:
            raise ValueError("bounds must describe a non-empty rectangle")
        object.__setattr__(self, "static_boxes", tuple(self.static_boxes))
        object.__setattr__(self, "moving_boxes", tuple(self.moving_boxes))

    def ground_height(self, x, y):
        a, b, c = self.ground
        return a * np.asarray(x, dtype=float) + b * np.asarray(y, dtype=float) + c

    def boxes_at(self, t: float) -> list[tuple[Box, tuple[float, float, float, float]]]:
        out = [(box, box.footprint_at(0.0)) for box in self.static_boxes]
        out.extend((box, box.footprint_at(t)) for box in self.moving_boxes)
        return out

    def digest(self) -> int:
        """Stable content hash used to seed per-scene noise."""
        payload = scene_to_yaml(self).encode()
        return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def _box_to_dict(box: Box) -> dict:
    d = {"center": [float(v) for v in box.center],
         "extent": [float(v) for v in box.extent],
         "height": float(box.height)}
    if box.velocity != (0.0, 0.0):
        d["velocity"] = [float(v) for v in box.velocity]
    return d


def scene_to_yaml(scene: Scene) -> str:
    doc = {
        "bounds": [float(v) for v in scene.bounds],
        "ground": [float(v) for v in scene.ground],
        "static_boxes": [_box_to_dict(b) for b in scene.static_boxes],
        "moving_boxes": [_box_to_dict(b) for b in scene.moving_boxes],
    }
    return yaml.safe_dump(doc, sort_keys=False)


def scene_from_yaml(text: str) -> Scene:
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise ValueError("scene file must contain a mapping")

    def read_box(d: dict) -> Box:
        return Box(center=tuple(float(v) for v in d["center"]),
                   extent=tuple(float(v) for v in d["extent"]),
                   height=float(d["height"]),
                   velocity=tuple(float(v) for v in d.get("velocity", (0.0, 0.0))))

    return Scene(
        bounds=tuple(float(v) for v in doc.get("bounds", (-50, -50, 50, 50))),
        ground=tuple(float(v) for v in doc.get("ground", (0, 0, 0))),
        static_boxes=tuple(read_box(b) for b in doc.get("static_boxes", [])),
        moving_boxes=tuple(read_box(b) for b in doc.get("moving_boxes", [])),
    )


@dataclass(frozen=True)
class ScanConfig:
    """Spinning-sensor geometry: azimuth/elevation fan, range limit, and noise."""

    azimuth_count: int = 720
    elevation_count: int = 16
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 10.0
    max_range: float = 70.0
    sensor_height: float = 1.8
    noise_sigma: float = 0.01
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if self.azimuth_count < 1 or self.elevation_count < 1:
            raise ValueError("ray counts must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the sensor frame, shape (azimuths*elevations, 3)."""
        az = np.linspace(0.0, 2.0 * np.pi, self.azimuth_count, endpoint=False)
        el = np.deg2rad(np.linspace(self.elevation_min_deg, self.elevation_max_deg,
                                    self.elevation_count))
        az_g, el_g = np.meshgrid(az, el, indexing="ij")
        cos_el = np.cos(el_g)
        dirs = np.stack([cos_el * np.cos(az_g), cos_el * np.sin(az_g), np.sin(el_g)], axis=-1)
        return dirs.reshape(-1, 3)


def _intersect_ground(origin: np.ndarray, dirs: np.ndarray, ground) -> np.ndarray:
    """Ray parameter of the ground-plane hit for each ray (inf if none ahead)."""
    a, b, c = ground
    denom = dirs[:, 2] - a * dirs[:, 0] - b * dirs[:, 1]
    num = a * origin[0] + b * origin[1] + c - origin[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
    return t


def _intersect_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray,
                   hi: np.ndarray) -> np.ndarray:
    """Slab test: entry parameter of each ray into an axis-aligned box (inf if miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo[None, :] - origin[None, :]) * inv
        t_hi = (hi[None, :] - origin[None, :]) * inv
    # Rays parallel to an axis inside the slab produce +/-inf pairs; NaN (on the
    # slab boundary) means a grazing ray, treated as a miss.
    t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
    t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
    parallel_miss = ((dirs == 0.0) & ((origin[None, :] < lo[None, :])
                                      | (origin[None, :] > hi[None, :]))).any(axis=1)
    hit = (t_far >= np.maximum(t_near, 1e-9)) & (t_near > 1e-9) & ~parallel_miss
    return np.where(hit, t_near, np.inf)


def simulate_scan(scene: Scene, sensor_pose: Pose, cfg: ScanConfig = ScanConfig()) -> PointCloud:
    """First-hit simulation of one revolution; returns points in the sensor frame.

    Box hits carry intensity 1.0, ground hits 0.2. Range noise perturbs the hit
    point along the ray with a deterministic per-(scene, timestamp) seed.
    """
    origin = np.asarray(sensor_pose.translation, dtype=float)
    dirs = cfg.ray_directions() @ sensor_pose.rotation_matrix().T

    t_best = _intersect_ground(origin, dirs, scene.ground)
    is_box = np.zeros(len(dirs), dtype=bool)
    for box, (xmin, ymin, xmax, ymax) in scene.boxes_at(cfg.timestamp):
        z0 = float(scene.ground_height(*box.center_at(cfg.timestamp)))
        lo = np.array([xmin, ymin, z0])
        hi = np.array([xmax, ymax, z0 + box.height])
        t_box = _intersect_box(origin, dirs, lo, hi)
        closer = t_box < t_best
        t_best = np.where(closer, t_box, t_best)
        is_box |= closer

    valid = np.isfinite(t_best) & (t_best <= cfg.max_range)
    t = t_best[valid]
    d = dirs[valid]
    if cfg.noise_sigma > 0:
        seed = (scene.digest() ^ np.float64(cfg.timestamp).view(np.uint64).item()) % (2 ** 63)
        rng = np.random.default_rng(seed)
        t = t + rng.normal(0.0, cfg.noise_sigma, size=t.shape)
    world = origin[None, :] + t[:, None] * d
    local = inverse_transform_point(sensor_pose, world)
    intensity = np.where(is_box[valid], 1.0, 0.2)
    return PointCloud(np.column_stack([local, intensity]))


def ground_truth_labels(scene: Scene, spec: GridSpec, times) -> np.ndarray:
    """Per-cell label grid over a time window given by a sequence of timestamps.

    A cell is occupied when some box covers its center at every sampled time,
    dynamic when covered at some but not all times, free when never covered
    but inside the scene bounds, and unknown outside the bounds.
    """
    times = list(times)
    if not times:
        raise ValueError("need at least one timestamp")
    cx, cy = spec.cell_center_grids()
    covered_always = np.ones(spec.shape, dtype=bool)
    covered_ever = np.zeros(spec.shape, dtype=bool)
    for t in times:
        covered_now = np.zeros(spec.shape, dtype=bool)
        for _, (xmin, ymin, xmax, ymax) in scene.boxes_at(float(t)):
            covered_now |= (cx >= xmin) & (cx <= xmax) & (cy >= ymin) & (cy <= ymax)
        covered_always &= covered_now
        covered_ever |= covered_now

    xmin, ymin, xmax, ymax = scene.bounds
    inside = (cx >= xmin) & (cx <= xmax) & (cy >= ymin) & (cy <= ymax)
    labels = np.full(spec.shape, LABEL_FREE, dtype=np.uint8)
    labels[covered_ever & ~covered_always] = LABEL_DYNAMIC
    labels[covered_always] = LABEL_OCCUPIED
    labels[~inside] = LABEL_UNKNOWN
    return labels


def preset_scene(name: str) -> Scene:
    """One of the named deterministic scenes.

    Box footprints sit on 15 cm cell boundaries with half-cell face offsets so
    face returns land inside occupied-labeled cells; heights keep the boxes
    opaque for low-mounted sensors (no ray overflies them inside the map).
    """
    def yard_walls(half_x: float, half_y: float) -> tuple[Box, ...]:
        # Closed courtyard: every ray from a low sensor terminates inside the map,
        # so all labeled cells stay densely observed.
        return (
            Box(center=(0.0, half_y), extent=(2 * half_x + 0.75, 0.75), height=2.6),
            Box(center=(0.0, -half_y), extent=(2 * half_x + 0.75, 0.75), height=2.6),
            Box(center=(half_x, 0.0), extent=(0.75, 2 * half_y + 0.75), height=2.6),
            Box(center=(-half_x, 0.0), extent=(0.75, 2 * half_y + 0.75), height=2.6),
        )

    if name == "static_street":
        # Parked vans on both sides of a straight corridor inside a walled block.
        return Scene(
            bounds=(-16.5, -10.5, 16.5, 10.5),
            static_boxes=(
                Box(center=(-6.0, 4.2), extent=(4.35, 1.65), height=2.2),
                Box(center=(0.0, 4.5), extent=(4.35, 1.65), height=2.4),
                Box(center=(6.0, 4.2), extent=(4.35, 1.65), height=2.2),
                Box(center=(-3.0, -4.2), extent=(4.35, 1.65), height=2.3),
                Box(center=(4.5, -4.2), extent=(4.35, 1.65), height=2.2),
            ) + yard_walls(15.0, 9.0),
        )
    if name == "crossing_pedestrian":
        # One pedestrian-sized box crossing the corridor ahead of the sensor path.
        return Scene(
            bounds=(-16.5, -10.5, 16.5, 10.5),
            static_boxes=(
                Box(center=(-5.1, 5.1), extent=(4.35, 1.65), height=2.2),
                Box(center=(7.2, 5.1), extent=(4.35, 1.65), height=2.3),
            ) + yard_walls(15.0, 9.0),
            moving_boxes=(
                Box(center=(6.0, -3.5), extent=(0.5, 0.5), height=1.7, velocity=(0.0, 1.4)),
            ),
        )
    if name == "parking_row":
        return Scene(
            bounds=(-16.5, -10.5, 16.5, 10.5),
            static_boxes=tuple(
                Box(center=(x, 3.6), extent=(2.25, 4.35), height=2.2)
                for x in (-9.0, -6.0, -3.0, 0.0, 3.0, 6.0, 9.0)
            ) + yard_walls(15.0, 9.0),
        )
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")


def preset_trajectory(scene: Scene, frame_count: int, cfg: ScanConfig,
                      dt: float = 0.5, speed: float = 2.4) -> list[Pose]:
    """Sensor poses for a straight drive along x through the scene center.

    The default step of 1.2 m keeps every pose (and thus every frame's grid
    origin) on a 15 cm cell boundary.
    """
    if frame_count < 0:
        raise ValueError("frame_count must be >= 0")
    half = 0.5 * speed * dt * max(frame_count - 1, 0)
    poses = []
    for k in range(frame_count):
        x = -half + speed * dt * k
        z = float(scene.ground_height(x, 0.0)) + cfg.sensor_height
        poses.append(Pose(timestamp=k * dt, translation=(x, 0.0, z)))
    return poses
