"""Single-frame rasterization: one classified point cloud to a multi-layer grid map.

Per cell the raster holds reflection statistics (count, mean energy, max
detection height), transmission statistics from ray casting (count, shadow
height, max observable height), and the evidence triple derived from them.

Heights are measured relative to the fitted ground surface. Passage heights
are clamped into [0, relevant_height] before aggregation, so the observable
band is always well-ordered and rays passing entirely above the relevant band
carry no free-space evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .grid import (FULL_FRAME_SCHEMA, GridSpec, MultiLayerGridMap, PointCloud, Pose,
                   CellEvidence, transform_cloud, transform_point,
                   world_to_cell, world_to_cell_array)
from .ground import GroundSurface, eval_ground_on_grid


@dataclass(frozen=True)
class SensorModelConfig:
    """Inverse sensor model parameters.

    ``p_fp`` is the constant false-positive probability per reflection,
    ``p_fn_max`` bounds the false-negative probability reached at zero
    observable height or maximum range, ``max_range`` normalizes the distance
    ratio and ``relevant_height`` the observable-height ratio.
    """

    p_fp: float = 0.1
    p_fn_max: float = 0.9
    max_range: float = 70.0
    relevant_height: float = 3.0

    def __post_init__(self) -> None:
        if not (0.0 < self.p_fp < 1.0 and 0.0 < self.p_fn_max < 1.0):
            raise ValueError("p_fp and p_fn_max must lie in (0, 1)")
        if self.max_range <= 0 or self.relevant_height <= 0:
            raise ValueError("max_range and relevant_height must be positive")


def false_negative_prob(r_x, r_z, p_fn_max: float):
    """False-negative probability from distance ratio r_x and height ratio r_z.

    Both ratios are clamped to [0, 1]. The result equals ``p_fn_max`` at
    (r_x=0, r_z=1) and reaches 1 exactly when r_x = 1 or r_z = 0.
    """
    if not 0.0 < p_fn_max < 1.0:
        raise ValueError("p_fn_max must lie in (0, 1)")
    rx = np.clip(r_x, 0.0, 1.0)
    rz = np.clip(r_z, 0.0, 1.0)
    out = 1.0 - (1.0 - rx) * rz * (1.0 - p_fn_max)
    if np.isscalar(r_x) and np.isscalar(r_z):
        return float(out)
    return out


def sensor_bba(m: int, n: int, p_fn: float, p_fp: float) -> CellEvidence:
    """Evidence triple for a cell with m transmissions and n reflections."""
    if m < 0 or n < 0:
        raise ValueError("transmission and reflection counts must be non-negative")
    if not (0.0 < p_fn <= 1.0 and 0.0 < p_fp < 1.0):
        raise ValueError("need p_fn in (0, 1] and p_fp in (0, 1)")
    a = p_fn ** m
    b = p_fp ** n
    occupied = a * (1.0 - b)
    free = b * (1.0 - a)
    return CellEvidence(occupied, free, max(0.0, 1.0 - occupied - free))


def _bba_arrays(m: np.ndarray, n: np.ndarray, p_fn: np.ndarray, p_fp: float):
    """Vectorized evidence masses over count/probability grids."""
    a = np.power(p_fn, m)
    b = np.power(p_fp, n)
    occupied = a * (1.0 - b)
    free = b * (1.0 - a)
    unknown = np.maximum(1.0 - occupied - free, 0.0)
    return occupied, free, unknown


def _clip_segment(ox, oy, dx, dy, xmin, ymin, xmax, ymax):
    """Liang-Barsky clip of p(t)=o+t*d, t in [0,1], to a rectangle. None if outside."""
    t0, t1 = 0.0, 1.0
    for d, lo, hi, o in ((dx, xmin, xmax, ox), (dy, ymin, ymax, oy)):
        if d == 0.0:
            if o < lo or o > hi:
                return None
        else:
            ta = (lo - o) / d
            tb = (hi - o) / d
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    if t0 >= t1:
        return None
    return t0, t1


def traverse_ray(spec: GridSpec, origin, end):
    """Cells traversed by the horizontal projection of a ray, with passage heights.

    Returns a list of ``((i, j), z)`` pairs in traversal order, where ``z`` is
    the ray height linearly interpolated at the midpoint of the segment the ray
    spends inside each cell. The cell containing ``end`` is excluded; rays that
    start and end in the same cell (including vertical rays) return [].
    """
    ox, oy, oz = float(origin[0]), float(origin[1]), float(origin[2])
    ex, ey, ez = float(end[0]), float(end[1]), float(end[2])
    dx, dy = ex - ox, ey - oy
    if dx == 0.0 and dy == 0.0:
        return []
    cs = spec.cell_size
    gx, gy = spec.origin_x, spec.origin_y
    clip = _clip_segment(ox, oy, dx, dy, gx, gy, gx + spec.width * cs, gy + spec.height * cs)
    if clip is None:
        return []
    t0, t1 = clip
    end_cell = world_to_cell(spec, (ex, ey))

    px, py = ox + t0 * dx, oy + t0 * dy
    i = min(max(int(math.floor((px - gx) / cs)), 0), spec.width - 1)
    j = min(max(int(math.floor((py - gy) / cs)), 0), spec.height - 1)
    if dx > 0.0:
        step_x, t_max_x, t_dx = 1, t0 + (gx + (i + 1) * cs - px) / dx, cs / dx
    elif dx < 0.0:
        step_x, t_max_x, t_dx = -1, t0 + (gx + i * cs - px) / dx, -cs / dx
    else:
        step_x, t_max_x, t_dx = 0, math.inf, math.inf
    if dy > 0.0:
        step_y, t_max_y, t_dy = 1, t0 + (gy + (j + 1) * cs - py) / dy, cs / dy
    elif dy < 0.0:
        step_y, t_max_y, t_dy = -1, t0 + (gy + j * cs - py) / dy, -cs / dy
    else:
        step_y, t_max_y, t_dy = 0, math.inf, math.inf

    out = []
    t = t0
    while True:
        t_next = min(t_max_x, t_max_y, t1)
        if t_next > t and (i, j) != end_cell:
            t_mid = 0.5 * (t + t_next)
            out.append(((i, j), oz + t_mid * (ez - oz)))
        if t_next >= t1:
            break
        if t_max_x <= t_max_y:
            i += step_x
            t = t_max_x
            t_max_x += t_dx
        else:
            j += step_y
            t = t_max_y
            t_max_y += t_dy
        if not (0 <= i < spec.width and 0 <= j < spec.height):
            break
    return out


@njit(cache=True)
def _transmission_kernel(ends, sensor, gx, gy, cs, width, height, ground, relevant_height,
                         m_out, z_shadow, z_obs):  # pragma: no cover - exercised via wrapper
    """Accumulate transmission counts and clamped passage-height extrema per cell."""
    sx, sy, sz = sensor[0], sensor[1], sensor[2]
    xmax = gx + width * cs
    ymax = gy + height * cs
    for k in range(ends.shape[0]):
        ex, ey, ez = ends[k, 0], ends[k, 1], ends[k, 2]
        dx = ex - sx
        dy = ey - sy
        if dx == 0.0 and dy == 0.0:
            continue
        t0 = 0.0
        t1 = 1.0
        ok = True
        for axis in range(2):
            if axis == 0:
                d, lo, hi, o = dx, gx, xmax, sx
            else:
                d, lo, hi, o = dy, gy, ymax, sy
            if d == 0.0:
                if o < lo or o > hi:
                    ok = False
                    break
            else:
                ta = (lo - o) / d
                tb = (hi - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
        if not ok or t0 >= t1:
            continue

        ei = int(math.floor((ex - gx) / cs))
        ej = int(math.floor((ey - gy) / cs))
        end_inside = 0 <= ei < width and 0 <= ej < height

        px = sx + t0 * dx
        py = sy + t0 * dy
        i = int(math.floor((px - gx) / cs))
        if i < 0:
            i = 0
        elif i > width - 1:
            i = width - 1
        j = int(math.floor((py - gy) / cs))
        if j < 0:
            j = 0
        elif j > height - 1:
            j = height - 1

        if dx > 0.0:
            step_x = 1
            t_max_x = t0 + (gx + (i + 1) * cs - px) / dx
            t_dx = cs / dx
        elif dx < 0.0:
            step_x = -1
            t_max_x = t0 + (gx + i * cs - px) / dx
            t_dx = -cs / dx
        else:
            step_x = 0
            t_max_x = math.inf
            t_dx = math.inf
        if dy > 0.0:
            step_y = 1
            t_max_y = t0 + (gy + (j + 1) * cs - py) / dy
            t_dy = cs / dy
        elif dy < 0.0:
            step_y = -1
            t_max_y = t0 + (gy + j * cs - py) / dy
            t_dy = -cs / dy
        else:
            step_y = 0
            t_max_y = math.inf
            t_dy = math.inf

        t = t0
        while True:
            t_next = t_max_x
            if t_max_y < t_next:
                t_next = t_max_y
            if t1 < t_next:
                t_next = t1
            if t_next > t and not (end_inside and i == ei and j == ej):
                t_mid = 0.5 * (t + t_next)
                h = sz + t_mid * (ez - sz) - ground[j, i]
                if h < 0.0:
                    h = 0.0
                elif h > relevant_height:
                    h = relevant_height
                m_out[j, i] += 1
                if h < z_shadow[j, i]:
                    z_shadow[j, i] = h
                if h > z_obs[j, i]:
                    z_obs[j, i] = h
            if t_next >= t1:
                break
            if t_max_x <= t_max_y:
                i += step_x
                t = t_max_x
                t_max_x += t_dx
            else:
                j += step_y
                t = t_max_y
                t_max_y += t_dy
            if i < 0 or i >= width or j < 0 or j >= height:
                break


@dataclass
class FrameRaster:
    """All per-cell layers produced from a single scan, plus the sensor pose.

    Counts are kept as float32 like every other layer. ``height`` is the max
    non-ground reflection height above ground (z_max_det), ``shadow_height``
    and ``max_observable`` bound the observed vertical band of cells with
    transmissions.
    """

    spec: GridSpec
    sensor_pose: Pose
    reflections: np.ndarray
    transmissions: np.ndarray
    observations: np.ndarray
    reflected_energy: np.ndarray
    height: np.ndarray
    shadow_height: np.ndarray
    max_observable: np.ndarray
    m_occupied: np.ndarray
    m_free: np.ndarray
    m_unknown: np.ndarray

    LAYER_NAMES = FULL_FRAME_SCHEMA

    def __post_init__(self) -> None:
        for name in self.LAYER_NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.shape != self.spec.shape:
                raise ValueError(f"layer {name!r} shape {arr.shape} != {self.spec.shape}")
            setattr(self, name, arr)

    def layer(self, name: str) -> np.ndarray:
        if name not in self.LAYER_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def to_map(self, full: bool = False) -> MultiLayerGridMap:
        """Export as a grid map: the input schema plus evidence, or all layers."""
        if full:
            names, schema = self.LAYER_NAMES, "input_full"
        else:
            names = tuple(n for n in self.LAYER_NAMES if n not in ("transmissions",
                                                                   "max_observable"))
            schema = "input"
        return MultiLayerGridMap(self.spec, {n: self.layer(n).copy() for n in names}, schema)

    @classmethod
    def from_map(cls, grid_map: MultiLayerGridMap, sensor_pose: Pose) -> "FrameRaster":
        missing = [n for n in cls.LAYER_NAMES if n not in grid_map.layers]
        if missing:
            raise ValueError(
                f"map lacks layers {missing} needed to reconstruct a frame raster; "
                "write frame maps with --full to keep them")
        return cls(grid_map.spec, sensor_pose,
                   **{n: grid_map.layers[n] for n in cls.LAYER_NAMES})

    @classmethod
    def all_unknown(cls, spec: GridSpec, sensor_pose: Pose) -> "FrameRaster":
        zeros = np.zeros(spec.shape, np.float32)
        return cls(spec, sensor_pose, reflections=zeros, transmissions=zeros,
                   observations=zeros, reflected_energy=zeros, height=zeros,
                   shadow_height=zeros, max_observable=zeros,
                   m_occupied=zeros, m_free=zeros,
                   m_unknown=np.ones(spec.shape, np.float32))


def rasterize_frame(cloud: PointCloud, pose: Pose, ground: GroundSurface, spec: GridSpec,
                    cfg: SensorModelConfig = SensorModelConfig(), *,
                    ground_threshold: float = 0.3) -> FrameRaster:
    """Rasterize one scan into a FrameRaster on the given world-anchored grid.

    Non-ground reflections feed the reflection layers; every ray (ground
    returns included) contributes transmissions to the cells it crosses before
    its endpoint cell. An empty cloud yields a valid all-unknown raster.
    """
    h, w = spec.shape
    cx, cy = spec.cell_center_grids()
    sensor_w = transform_point(pose, np.asarray(cloud.sensor_origin, dtype=float))

    n = np.zeros((h, w), np.float64)
    energy_sum = np.zeros((h, w), np.float64)
    z_det = np.full((h, w), -np.inf)
    m = np.zeros((h, w), np.int64)
    z_shadow = np.full((h, w), np.inf)
    z_obs = np.full((h, w), -np.inf)

    if len(cloud):
        world = transform_cloud(cloud, pose)
        ground_grid = eval_ground_on_grid(ground, cx[0, :], cy[:, 0])

        # Heights are taken relative to the ground at the containing cell's
        # center, the same convention the passage heights use.
        i, j, inside = world_to_cell_array(spec, world[:, 0], world[:, 1])
        i = np.where(inside, i, 0)
        j = np.where(inside, j, 0)
        above = world[:, 2] - ground_grid[j, i]
        sel = (np.abs(above) > ground_threshold) & inside
        np.add.at(n, (j[sel], i[sel]), 1.0)
        np.add.at(energy_sum, (j[sel], i[sel]), cloud.intensity[sel])
        np.maximum.at(z_det, (j[sel], i[sel]), above[sel])

        _transmission_kernel(np.ascontiguousarray(world), np.asarray(sensor_w, dtype=float),
                             spec.origin_x, spec.origin_y, spec.cell_size, w, h,
                             ground_grid, cfg.relevant_height, m, z_shadow, z_obs)

    observed = m > 0
    z_shadow = np.where(observed, z_shadow, 0.0)
    z_obs = np.where(observed, z_obs, 0.0)
    r_z = np.clip((z_obs - z_shadow) / cfg.relevant_height, 0.0, 1.0)
    r_x = np.clip(np.hypot(cx - sensor_w[0], cy - sensor_w[1]) / cfg.max_range, 0.0, 1.0)
    p_fn = false_negative_prob(r_x, r_z, cfg.p_fn_max)
    occupied, free, unknown = _bba_arrays(m.astype(np.float64), n, p_fn, cfg.p_fp)

    hit = n > 0
    return FrameRaster(
        spec=spec, sensor_pose=pose,
        reflections=n,
        transmissions=m.astype(np.float64),
        observations=(observed | hit).astype(np.float64),
        reflected_energy=np.where(hit, energy_sum / np.maximum(n, 1.0), 0.0),
        height=np.where(hit, z_det, 0.0),
        shadow_height=z_shadow,
        max_observable=z_obs,
        m_occupied=occupied, m_free=free, m_unknown=unknown,
    )
