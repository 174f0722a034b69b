import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evigrid.grid import GridSpec, PointCloud, Pose, world_to_cell
from evigrid.ground import GroundSurface
from evigrid.raster import (FrameRaster, SensorModelConfig, false_negative_prob,
                            rasterize_frame, sensor_bba, traverse_ray)

SPEC = GridSpec(cell_size=0.15, width=40, height=40, origin_x=0.0, origin_y=0.0)


# --- false-negative probability -------------------------------------------

def test_p_fn_boundary_values():
    assert false_negative_prob(0.0, 1.0, 0.9) == 0.9
    assert false_negative_prob(1.0, 0.3, 0.9) == 1.0
    assert false_negative_prob(0.7, 0.0, 0.9) == 1.0
    assert false_negative_prob(0.5, 0.5, 0.9) == pytest.approx(0.975, abs=1e-15)


def test_p_fn_clamps_ratios():
    assert false_negative_prob(-2.0, 5.0, 0.9) == false_negative_prob(0.0, 1.0, 0.9)


def test_p_fn_monotone():
    r = np.linspace(0, 1, 101)
    rx, rz = np.meshgrid(r, r, indexing="ij")
    p = false_negative_prob(rx, rz, 0.9)
    assert np.all(np.diff(p, axis=0) >= 0)   # non-decreasing in r_x
    assert np.all(np.diff(p, axis=1) <= 0)   # non-increasing in r_z


# --- sensor evidence --------------------------------------------------------

def test_bba_no_observation_is_unknown():
    assert sensor_bba(0, 0, 0.9, 0.1).as_tuple() == (0.0, 0.0, 1.0)


def test_bba_two_reflections():
    ev = sensor_bba(0, 2, 0.9, 0.1)
    assert ev.m_occupied == pytest.approx(0.99, abs=1e-15)
    assert ev.m_free == 0.0
    assert ev.m_unknown == pytest.approx(0.01, abs=1e-15)


def test_bba_many_transmissions():
    ev = sensor_bba(50, 0, 0.5, 0.1)
    assert ev.m_free == pytest.approx(1.0 - 2.0 ** -50, abs=1e-15)
    assert ev.m_occupied == 0.0


def test_bba_rejects_bad_args():
    with pytest.raises(ValueError):
        sensor_bba(-1, 0, 0.9, 0.1)
    with pytest.raises(ValueError):
        sensor_bba(0, 0, 0.0, 0.1)
    with pytest.raises(ValueError):
        sensor_bba(0, 0, 0.9, 1.0)


@settings(max_examples=300)
@given(st.integers(0, 100), st.integers(0, 100),
       st.floats(1e-6, 1.0), st.floats(1e-6, 1.0 - 1e-9, exclude_max=False))
def test_bba_normalization(m, n, p_fn, p_fp):
    ev = sensor_bba(m, n, p_fn, min(p_fp, 1 - 1e-9))
    for v in ev.as_tuple():
        assert -1e-15 <= v <= 1.0 + 1e-15
    assert abs(sum(ev.as_tuple()) - 1.0) <= 1e-12


def test_bba_monotone_in_counts():
    for p_fn, p_fp in ((0.9, 0.1), (0.6, 0.3)):
        occ = np.array([[sensor_bba(m, n, p_fn, p_fp).m_occupied
                         for n in range(8)] for m in range(8)])
        free = np.array([[sensor_bba(m, n, p_fn, p_fp).m_free
                          for n in range(8)] for m in range(8)])
        assert np.all(np.diff(occ, axis=0) <= 1e-15)   # more transmissions
        assert np.all(np.diff(occ, axis=1) >= -1e-15)  # more reflections
        assert np.all(np.diff(free, axis=0) >= -1e-15)
        assert np.all(np.diff(free, axis=1) <= 1e-15)


# --- ray traversal ----------------------------------------------------------

def test_traverse_straight_ray():
    cells = traverse_ray(SPEC, (0.075, 0.075, 1.7), (0.525, 0.075, 1.0))
    assert [c for c, _ in cells] == [(0, 0), (1, 0), (2, 0)]
    heights = [h for _, h in cells]
    # midpoints of the per-cell segments, z interpolated over the full ray
    assert heights == pytest.approx([1.7 - 0.7 / 12, 1.7 - 0.7 / 3, 1.7 - 0.7 * 7 / 12],
                                    abs=1e-12)
    assert heights == sorted(heights, reverse=True)


def test_traverse_same_cell_empty():
    assert traverse_ray(SPEC, (0.075, 0.075, 1.0), (0.14, 0.1, 0.5)) == []


def test_traverse_vertical_ray_empty():
    assert traverse_ray(SPEC, (0.3, 0.3, 2.0), (0.3, 0.3, 0.0)) == []


def sample_supercover(spec, origin, end, step=1e-4):
    """Brute-force rasterization by dense sampling of the segment."""
    o = np.asarray(origin[:2], float)
    e = np.asarray(end[:2], float)
    ts = np.arange(0.0, 1.0 + step, step)
    pts = o[None, :] + ts[:, None] * (e - o)[None, :]
    cells = []
    for p in pts:
        c = world_to_cell(spec, p)
        if c is not None and (not cells or cells[-1] != c):
            cells.append(c)
    return cells


@given(st.integers(0, 39), st.integers(0, 39), st.integers(0, 39), st.integers(0, 39))
@settings(max_examples=60, deadline=None)
def test_traverse_matches_sampling_oracle(i0, j0, i1, j1):
    origin = (SPEC.origin_x + (i0 + 0.37) * SPEC.cell_size,
              SPEC.origin_y + (j0 + 0.61) * SPEC.cell_size, 2.0)
    end = (SPEC.origin_x + (i1 + 0.43) * SPEC.cell_size,
           SPEC.origin_y + (j1 + 0.29) * SPEC.cell_size, 0.5)
    got = [c for c, _ in traverse_ray(SPEC, origin, end)]
    expected = sample_supercover(SPEC, origin, end)
    if expected and expected[-1] == (i1, j1):
        expected = expected[:-1]
    assert got == expected


def test_traverse_diagonal_cell_count():
    # corner-free diagonal: traversed cells (endpoint excluded) number di + dj
    origin = (0.075 + 0.001, 0.075, 1.0)
    end = (SPEC.origin_x + 7.43 * SPEC.cell_size, SPEC.origin_y + 5.31 * SPEC.cell_size, 1.0)
    cells = traverse_ray(SPEC, origin, end)
    assert len(cells) == 7 + 5


def test_traverse_clips_outside_origin():
    origin = (-1.0, 0.075, 1.0)
    end = (0.525, 0.075, 1.0)
    cells = [c for c, _ in traverse_ray(SPEC, origin, end)]
    assert cells == [(0, 0), (1, 0), (2, 0)]


def test_traverse_endpoint_outside_grid():
    origin = (0.075, 0.075, 1.0)
    end = (100.0, 0.075, 1.0)
    cells = [c for c, _ in traverse_ray(SPEC, origin, end)]
    assert cells[0] == (0, 0)
    assert cells[-1] == (39, 0)
    assert len(cells) == 40


# --- frame rasterization ----------------------------------------------------

FLAT = GroundSurface.flat(0.0, u_origin=-10.0, v_origin=-10.0)
CFG = SensorModelConfig()


def test_rasterize_empty_cloud_all_unknown():
    raster = rasterize_frame(PointCloud(np.zeros((0, 4))), Pose.identity(), FLAT, SPEC, CFG)
    assert np.all(raster.m_unknown == 1.0)
    assert np.all(raster.m_occupied == 0.0)
    assert np.all(raster.reflections == 0.0)
    assert np.all(raster.observations == 0.0)


def test_rasterize_single_ray_composes_operation_oracles():
    pose = Pose(translation=(0.075, 0.075, 1.7))
    point = np.array([[0.45, 0.0, -0.7, 1.0]])  # sensor frame -> world (0.525, 0.075, 1.0)
    raster = rasterize_frame(PointCloud(point), pose, FLAT, SPEC, CFG)

    end_cell = (3, 0)
    assert raster.reflections[end_cell[1], end_cell[0]] == 1.0
    assert raster.transmissions[end_cell[1], end_cell[0]] == 0.0

    traversal = traverse_ray(SPEC, (0.075, 0.075, 1.7), (0.525, 0.075, 1.0))
    for (i, j), z in traversal:
        assert raster.transmissions[j, i] == 1.0
        assert raster.reflections[j, i] == 0.0
        cx = SPEC.origin_x + (i + 0.5) * SPEC.cell_size
        cy = SPEC.origin_y + (j + 0.5) * SPEC.cell_size
        clamped = min(max(z - 0.0, 0.0), CFG.relevant_height)
        assert raster.shadow_height[j, i] == pytest.approx(clamped, abs=1e-6)
        assert raster.max_observable[j, i] == pytest.approx(clamped, abs=1e-6)
        r_x = min(math.hypot(cx - 0.075, cy - 0.075) / CFG.max_range, 1.0)
        p_fn = false_negative_prob(r_x, 0.0, CFG.p_fn_max)  # single ray: zero band
        expected = sensor_bba(1, 0, p_fn, CFG.p_fp)
        assert raster.m_free[j, i] == pytest.approx(expected.m_free, abs=1e-6)
        assert raster.m_occupied[j, i] == pytest.approx(expected.m_occupied, abs=1e-6)


def test_rasterize_multi_ray_band():
    pose = Pose(translation=(0.075, 0.075, 0.0))
    # two rays through the same column of cells at different heights
    pts = np.array([[3.0, 0.0, 0.5, 1.0], [3.0, 0.0, 2.0, 1.0]])
    raster = rasterize_frame(PointCloud(pts), pose, FLAT, SPEC, CFG)
    j, i = 0, 10
    assert raster.transmissions[j, i] == 2.0
    assert raster.max_observable[j, i] > raster.shadow_height[j, i]
    assert raster.m_free[j, i] > 0.0


def test_rasterize_evidence_sums_and_invariants(street_run):
    for raster in street_run.rasters[:3]:
        total = (raster.m_occupied.astype(float) + raster.m_free.astype(float)
                 + raster.m_unknown.astype(float))
        assert np.abs(total - 1.0).max() < 1e-6
        observed = raster.transmissions > 0
        assert np.all(raster.max_observable[observed] >= raster.shadow_height[observed])
        band = raster.max_observable - raster.shadow_height
        assert band[observed].min() >= 0.0
        assert band[observed].max() <= 1.2 + 1e-6
        flagged = raster.observations > 0
        should = observed | (raster.reflections > 0)
        assert np.array_equal(flagged, should)


def test_rasterize_deterministic():
    rng = np.random.default_rng(5)
    pts = np.column_stack([rng.uniform(-2, 5, (500, 3)), rng.uniform(0, 1, 500)])
    pts[:, 2] = rng.uniform(0.0, 2.0, 500)
    cloud = PointCloud(pts)
    pose = Pose(translation=(0.3, 0.3, 1.5))
    a = rasterize_frame(cloud, pose, FLAT, SPEC, CFG)
    b = rasterize_frame(cloud, pose, FLAT, SPEC, CFG)
    for name in FrameRaster.LAYER_NAMES:
        assert np.array_equal(a.layer(name), b.layer(name))


def test_rasterize_box_scene_geometry(street_run):
    # cells strictly between a sensor and a box face collect transmissions only,
    # while the face cells themselves collect reflections
    raster = street_run.rasters[0]
    pose = street_run.poses[0]
    spec = raster.spec
    sensor = np.asarray(pose.translation)
    van_center, van_extent = (-6.0, 4.2), (4.35, 1.65)
    face_y = van_center[1] - van_extent[1] / 2
    x = van_center[0]  # aim straight at the face from below
    for frac in (0.3, 0.6, 0.9):
        y = sensor[1] + frac * (face_y - 0.25 - sensor[1])
        i, j = world_to_cell(spec, (x, y))
        assert raster.transmissions[j, i] > 0
        assert raster.reflections[j, i] == 0
    face_i, face_j = world_to_cell(spec, (x, face_y + 0.05))
    assert raster.reflections[face_j, face_i] > 0


def test_frame_raster_map_round_trip():
    pose = Pose(translation=(0.075, 0.075, 1.7))
    point = np.array([[0.45, 0.0, -0.7, 1.0]])
    raster = rasterize_frame(PointCloud(point), pose, FLAT, SPEC, CFG)
    full = raster.to_map(full=True)
    assert full.layer_names() == list(FrameRaster.LAYER_NAMES)
    rebuilt = FrameRaster.from_map(full, pose)
    for name in FrameRaster.LAYER_NAMES:
        assert np.array_equal(rebuilt.layer(name), raster.layer(name))

    slim = raster.to_map(full=False)
    assert len(slim.layers) == 8
    with pytest.raises(ValueError, match="--full"):
        FrameRaster.from_map(slim, pose)
