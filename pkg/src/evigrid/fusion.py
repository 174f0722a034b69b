"""Temporal fusion of frame rasters into an enriched target grid map.

Per cell, the frames' evidence triples combine under the assumption of
temporally independent cell states. With per-frame masses (o_i, f_i, u_i) the
fused beliefs have the closed form

    bel_occupied = prod(o_i + u_i) - prod(u_i)
    bel_free     = prod(f_i + u_i) - prod(u_i)
    bel_unknown  = 1 - bel_occupied - bel_free

where bel_unknown absorbs both the never-observed and the contradicting
(dynamic) observation sequences. ``fuse_cell_evidence_bruteforce`` keeps the
exponential enumeration over all per-frame state assignments as an oracle.

Cell heights above ground fuse as products of per-frame normal densities with
mean (max_observable + height)/2 and variance max_observable - height, the
variance clamped to SIGMA_MIN.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .grid import (TARGET_LAYERS, CellEvidence, GridSpec, MultiLayerGridMap, Pose,
                   inverse_transform_point, transform_point, world_to_cell_array)
from .raster import FrameRaster

SIGMA_MIN = 1e-4
DEFAULT_FUSION_RADIUS = 40.0

BRUTE_FORCE_MAX_FRAMES = 12


def worker_count() -> int:
    """Worker cap from EVIGRID_THREADS; 0 or unset means one worker per CPU."""
    raw = os.environ.get("EVIGRID_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"EVIGRID_THREADS={raw!r} is not an integer") from exc
    if n < 0:
        raise ValueError("EVIGRID_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class FusedBeliefs:
    """Fused belief triple per cell; fields are float arrays of a common shape."""

    bel_occupied: np.ndarray
    bel_free: np.ndarray
    bel_unknown: np.ndarray

    def __post_init__(self) -> None:
        for name in ("bel_occupied", "bel_free", "bel_unknown"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shapes = {self.bel_occupied.shape, self.bel_free.shape, self.bel_unknown.shape}
        if len(shapes) != 1:
            raise ValueError(f"belief fields have mismatched shapes {shapes}")
        total = self.bel_occupied + self.bel_free + self.bel_unknown
        for name in ("bel_occupied", "bel_free", "bel_unknown"):
            v = getattr(self, name)
            if v.size and (v.min() < -1e-6 or v.max() > 1 + 1e-6):
                raise ValueError(f"{name} outside [0, 1]")
        if total.size and np.max(np.abs(total - 1.0)) > 1e-6:
            raise ValueError("fused beliefs do not sum to 1")

    @classmethod
    def from_map(cls, grid_map: MultiLayerGridMap) -> "FusedBeliefs":
        try:
            return cls(grid_map.layers["bel_occupied"], grid_map.layers["bel_free"],
                       grid_map.layers["bel_unknown"])
        except KeyError as exc:
            raise ValueError(f"map lacks belief layer {exc}") from exc

    def as_tuple(self) -> tuple[float, float, float]:
        return (float(self.bel_occupied), float(self.bel_free), float(self.bel_unknown))


@dataclass(frozen=True)
class HeightEstimate:
    """Gaussian height belief; the variance is clamped to SIGMA_MIN on construction."""

    mu: float
    sigma_sq: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "sigma_sq", max(float(self.sigma_sq), SIGMA_MIN))
        object.__setattr__(self, "mu", float(self.mu))


def fuse_height(estimates: Sequence[HeightEstimate]) -> HeightEstimate:
    """Precision-weighted product of Gaussian height estimates."""
    if not estimates:
        raise ValueError("fuse_height needs at least one estimate")
    if len(estimates) == 1:
        return estimates[0]
    precision = math.fsum(1.0 / e.sigma_sq for e in estimates)
    mu = math.fsum(e.mu / e.sigma_sq for e in estimates) / precision
    return HeightEstimate(mu, 1.0 / precision)


def fuse_cell_evidence(masses: Sequence[CellEvidence]) -> FusedBeliefs:
    """Closed-form fusion of per-frame evidence triples for one cell.

    The reduction multiplies triples in a canonical sorted order, which makes
    the result exactly permutation-invariant; a single frame passes through
    unchanged.
    """
    if not masses:
        raise ValueError("fuse_cell_evidence needs at least one evidence triple")
    if len(masses) == 1:
        e = masses[0]
        return FusedBeliefs(e.m_occupied, e.m_free, e.m_unknown)
    ordered = sorted(masses, key=lambda e: e.as_tuple())
    p_occ = p_free = p_unk = 1.0
    for e in ordered:
        p_occ *= e.m_occupied + e.m_unknown
        p_free *= e.m_free + e.m_unknown
        p_unk *= e.m_unknown
    occupied = p_occ - p_unk
    free = p_free - p_unk
    return FusedBeliefs(occupied, free, max(0.0, 1.0 - occupied - free))


def fuse_cell_evidence_bruteforce(masses: Sequence[CellEvidence]) -> FusedBeliefs:
    """Oracle: enumerate all per-frame state assignments and sum the partition classes.

    Each of the 3^N assignments gives one product hypothesis whose per-frame
    component is occupied, free, or unknown. Hypotheses with at least one free
    and no occupied component form the free class, symmetrically for occupied;
    everything else (all-unknown or contradicting) lands in the unknown class.
    """
    if not masses:
        raise ValueError("fuse_cell_evidence_bruteforce needs at least one evidence triple")
    n = len(masses)
    if n > BRUTE_FORCE_MAX_FRAMES:
        raise ValueError(f"enumeration bounded to {BRUTE_FORCE_MAX_FRAMES} frames, got {n}")
    triples = [e.as_tuple() for e in masses]
    occ_terms, free_terms, unk_terms = [], [], []
    for assignment in itertools.product(range(3), repeat=n):
        mass = 1.0
        for frame, state in enumerate(assignment):
            mass *= triples[frame][state]
        has_occ = 0 in assignment
        has_free = 1 in assignment
        if has_occ and not has_free:
            occ_terms.append(mass)
        elif has_free and not has_occ:
            free_terms.append(mass)
        else:
            unk_terms.append(mass)
    return FusedBeliefs(math.fsum(occ_terms), math.fsum(free_terms), math.fsum(unk_terms))


_IDENTITY_ROTATION = (1.0, 0.0, 0.0, 0.0)


def _quantize_belief_pair(occupied: np.ndarray, free: np.ndarray):
    """Round beliefs to float32 while keeping occupied + free <= 1 exactly.

    Independent rounding can push the stored pair epsilon above 1, which would
    make a map contradict itself under the false-belief metrics; nudging the
    larger component down one ulp at a time restores the simplex constraint.
    """
    occ32 = np.asarray(occupied, dtype=np.float32).copy()
    free32 = np.asarray(free, dtype=np.float32).copy()
    for _ in range(4):
        over = occ32.astype(np.float64) + free32.astype(np.float64) > 1.0
        if not over.any():
            break
        shrink_free = over & (free32 >= occ32)
        shrink_occ = over & ~shrink_free
        free32[shrink_free] = np.nextafter(free32[shrink_free], np.float32(0.0))
        occ32[shrink_occ] = np.nextafter(occ32[shrink_occ], np.float32(0.0))
    return occ32, free32


def _resample_shift(raster: FrameRaster, ref_spec: GridSpec, di: int, dj: int) -> FrameRaster:
    """Resampling specialized to a constant integer cell shift (unrotated anchors)."""
    src_h, src_w = raster.spec.shape
    i0, i1 = max(0, -di), min(ref_spec.width, src_w - di)
    j0, j1 = max(0, -dj), min(ref_spec.height, src_h - dj)
    layers = {}
    for name in FrameRaster.LAYER_NAMES:
        fill = 1.0 if name == "m_unknown" else 0.0
        out = np.full(ref_spec.shape, np.float32(fill), dtype=np.float32)
        if i1 > i0 and j1 > j0:
            out[j0:j1, i0:i1] = raster.layer(name)[j0 + dj:j1 + dj, i0 + di:i1 + di]
        layers[name] = out
    return FrameRaster(spec=ref_spec, sensor_pose=raster.sensor_pose, **layers)


def resample_to_reference(raster: FrameRaster, frame_pose: Pose, ref_spec: GridSpec,
                          ref_pose: Pose) -> FrameRaster:
    """Nearest-neighbor lookup of a frame raster on the reference grid.

    ``frame_pose`` and ``ref_pose`` anchor the respective grid coordinates in
    a common world frame; for grids already laid out in world coordinates pass
    identity poses. Reference cells falling outside the source raster become
    all-unknown with zero counts.
    """
    if (frame_pose.rotation == _IDENTITY_ROTATION and ref_pose.rotation == _IDENTITY_ROTATION
            and raster.spec.cell_size == ref_spec.cell_size):
        # Unrotated anchors reduce the cell lookup to a constant integer shift.
        cs = ref_spec.cell_size
        delta_x = (ref_spec.origin_x + ref_pose.translation[0]
                   - raster.spec.origin_x - frame_pose.translation[0]) / cs
        delta_y = (ref_spec.origin_y + ref_pose.translation[1]
                   - raster.spec.origin_y - frame_pose.translation[1]) / cs
        di = math.floor(0.5 + delta_x)
        dj = math.floor(0.5 + delta_y)
        return _resample_shift(raster, ref_spec, di, dj)

    h, w = ref_spec.shape
    cx, cy = ref_spec.cell_center_grids()
    centers = np.stack([cx, cy, np.zeros_like(cx)], axis=-1).reshape(-1, 3)
    local = inverse_transform_point(frame_pose, transform_point(ref_pose, centers))
    i, j, inside = world_to_cell_array(raster.spec, local[:, 0], local[:, 1])
    i = np.where(inside, i, 0)
    j = np.where(inside, j, 0)
    inside = inside.reshape(h, w)
    i = i.reshape(h, w)
    j = j.reshape(h, w)

    layers = {}
    for name in FrameRaster.LAYER_NAMES:
        fill = 1.0 if name == "m_unknown" else 0.0
        layers[name] = np.where(inside, raster.layer(name)[j, i], np.float32(fill))
    return FrameRaster(spec=ref_spec, sensor_pose=raster.sensor_pose, **layers)


@dataclass
class FusionWindow:
    """Frames to fuse around a reference pose.

    Each entry pairs a raster with the pose anchoring its grid coordinates in
    the world frame. Frames whose sensor origin lies farther than ``radius``
    from the reference pose (horizontally) are dropped at construction.
    """

    frames: list[tuple[FrameRaster, Pose]]
    reference_pose: Pose
    radius: float = DEFAULT_FUSION_RADIUS

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("fusion radius must be positive")
        kept = []
        rx, ry = self.reference_pose.translation[0], self.reference_pose.translation[1]
        for raster, anchor in self.frames:
            origin = transform_point(anchor, np.asarray(raster.sensor_pose.translation))
            if math.hypot(origin[0] - rx, origin[1] - ry) <= self.radius:
                kept.append((raster, anchor))
        if not kept:
            raise ValueError("no frames within the fusion radius of the reference pose")
        self.frames = kept


def build_target_map(window: FusionWindow, ref_spec: GridSpec,
                     sigma_min: float = SIGMA_MIN,
                     ref_anchor: Optional[Pose] = None) -> MultiLayerGridMap:
    """Fuse a window of frame rasters into a target-schema grid map.

    ``ref_anchor`` places the reference grid coordinates in the world frame
    and defaults to identity (a world-anchored reference grid). Belief layers
    come from the closed-form evidence product; reflections sum over frames;
    reflected energy is the reflection-count-weighted mean; height is the
    Gaussian fusion over frames that saw a reflection; the observation height
    is the max observable height over frames with transmissions. Frames fold
    in window order, so the result does not depend on the worker count.
    """
    if ref_anchor is None:
        ref_anchor = Pose.identity()
    shape = ref_spec.shape
    p_occ = np.ones(shape)
    p_free = np.ones(shape)
    p_unk = np.ones(shape)
    reflections = np.zeros(shape)
    energy_weighted = np.zeros(shape)
    precision = np.zeros(shape)
    mu_weighted = np.zeros(shape)
    obs_height = np.zeros(shape)

    workers = max(1, worker_count())
    single_frame_beliefs: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    def resample(entry):
        raster, anchor = entry
        return resample_to_reference(raster, anchor, ref_spec, ref_anchor)

    def fold(r: FrameRaster) -> None:
        nonlocal single_frame_beliefs, p_occ, p_free, p_unk
        occ = r.m_occupied.astype(np.float64)
        free = r.m_free.astype(np.float64)
        unk = r.m_unknown.astype(np.float64)
        if len(window.frames) == 1:
            single_frame_beliefs = (occ, free, unk)
        p_occ *= occ + unk
        p_free *= free + unk
        p_unk *= unk

        n = r.reflections.astype(np.float64)
        reflections[:] += n
        energy_weighted[:] += n * r.reflected_energy

        hit = n > 0
        z_det = r.height.astype(np.float64)
        z_obs_eff = np.where(r.transmissions > 0, r.max_observable.astype(np.float64), z_det)
        var = np.maximum(z_obs_eff - z_det, sigma_min)
        precision[:] += np.where(hit, 1.0 / var, 0.0)
        mu_weighted[:] += np.where(hit, 0.5 * (z_obs_eff + z_det) / var, 0.0)

        observed = r.transmissions > 0
        np.maximum(obs_height, np.where(observed, r.max_observable, 0.0), out=obs_height)

    if workers == 1 or len(window.frames) == 1:
        for entry in window.frames:
            fold(resample(entry))
    else:
        # Resample in bounded waves so memory stays O(workers * grid), then fold
        # sequentially in window order for schedule-independent output.
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for start in range(0, len(window.frames), workers):
                wave = window.frames[start:start + workers]
                for resampled in pool.map(resample, wave):
                    fold(resampled)

    if single_frame_beliefs is not None:
        raw_occupied, raw_free = single_frame_beliefs[0], single_frame_beliefs[1]
    else:
        raw_occupied = p_occ - p_unk
        raw_free = p_free - p_unk
    bel_occupied, bel_free = _quantize_belief_pair(raw_occupied, raw_free)
    bel_unknown = np.maximum(
        1.0 - bel_occupied.astype(np.float64) - bel_free.astype(np.float64), 0.0)

    hit_any = reflections > 0
    layers = {
        "reflections": reflections,
        "observation_height": obs_height,
        "reflected_energy": np.where(hit_any, energy_weighted / np.maximum(reflections, 1.0), 0.0),
        "height": np.where(hit_any, mu_weighted / np.maximum(precision, 1e-300), 0.0),
        "bel_free": bel_free,
        "bel_occupied": bel_occupied,
        "bel_unknown": bel_unknown,
    }
    return MultiLayerGridMap(ref_spec, {name: layers[name] for name in TARGET_LAYERS}, "target")
