import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evigrid.grid import (CellEvidence, GridSpec, MultiLayerGridMap, PointCloud, Pose,
                          cell_center, inverse_transform_point, transform_point,
                          world_to_cell)


@pytest.fixture
def small_spec():
    return GridSpec(cell_size=0.15, width=10, height=10, origin_x=0.0, origin_y=0.0)


def test_world_to_cell_origin_corner(small_spec):
    assert world_to_cell(small_spec, (0.0, 0.0)) == (0, 0)


def test_world_to_cell_interior(small_spec):
    # 0.45/0.15 lands a hair above 3.0 in binary; floor must still give 3
    assert world_to_cell(small_spec, (0.45, 0.0)) == (3, 0)
    assert world_to_cell(small_spec, (0.449, 0.0)) == (2, 0)
    assert world_to_cell(small_spec, (0.31, 0.62)) == (2, 4)


def test_world_to_cell_outside(small_spec):
    assert world_to_cell(small_spec, (-0.01, 0.5)) is None
    assert world_to_cell(small_spec, (1.5, 0.0)) is None  # max boundary is outside
    assert world_to_cell(small_spec, (0.0, 1.5)) is None


def test_cell_center_values(small_spec):
    assert cell_center(small_spec, 0, 0) == pytest.approx((0.075, 0.075), abs=1e-15)
    assert cell_center(small_spec, 3, 0) == pytest.approx((0.525, 0.075), abs=1e-15)
    with pytest.raises(IndexError):
        cell_center(small_spec, 10, 0)


@given(st.integers(0, 9), st.integers(0, 9),
       st.floats(-50, 50), st.floats(-50, 50),
       st.sampled_from([0.05, 0.15, 0.5, 1.0]))
def test_center_roundtrip(i, j, ox, oy, cs):
    spec = GridSpec(cell_size=cs, width=10, height=10, origin_x=ox, origin_y=oy)
    assert world_to_cell(spec, cell_center(spec, i, j)) == (i, j)


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(cell_size=0.0)
    with pytest.raises(ValueError):
        GridSpec(width=0)


def test_default_grid_covers_fusion_radius():
    spec = GridSpec.centered_at(12.0, -3.0)
    assert spec.width >= 534 and spec.height >= 534
    assert spec.origin_x == pytest.approx(12.0 - 40.2)
    assert spec.width * spec.cell_size / 2 >= 40.0


def test_transform_identity():
    assert np.allclose(transform_point(Pose.identity(), (1.0, 2.0, 3.0)), (1, 2, 3))


def test_transform_translation():
    pose = Pose(translation=(10.0, 0.0, 0.0))
    assert np.allclose(transform_point(pose, (1.0, 0.0, 0.0)), (11, 0, 0))


def test_transform_yaw_90():
    pose = Pose.from_yaw(math.pi / 2)
    assert np.allclose(transform_point(pose, (1.0, 0.0, 0.0)), (0, 1, 0), atol=1e-12)


@given(st.floats(-math.pi, math.pi), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_transform_inverse_roundtrip(yaw, x, y, z):
    pose = Pose.from_yaw(yaw, translation=(1.5, -2.0, 0.3))
    p = np.array([x, y, z])
    assert np.allclose(transform_point(pose.inverse(), transform_point(pose, p)), p, atol=1e-9)
    assert np.allclose(inverse_transform_point(pose, transform_point(pose, p)), p, atol=1e-9)


def test_pose_rejects_unnormalized_quaternion():
    with pytest.raises(ValueError):
        Pose(rotation=(0.9, 0.0, 0.0, 0.0))


def test_cell_evidence_invariants():
    CellEvidence(0.2, 0.3, 0.5)
    with pytest.raises(ValueError):
        CellEvidence(0.5, 0.6, 0.2)
    with pytest.raises(ValueError):
        CellEvidence(-0.1, 0.6, 0.5)
    with pytest.raises(ValueError):
        CellEvidence(0.2, 0.3, 0.4)


@given(st.floats(0, 1), st.floats(0, 1))
def test_cell_evidence_simplex_construction(a, b):
    o = min(a, b)
    f = max(a, b) - o
    CellEvidence(o, f, max(0.0, 1.0 - o - f))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, np.nan, 1.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, 0.0, -1.0]]))
    empty = PointCloud(np.zeros((0, 4)))
    assert len(empty) == 0


def test_map_schema_validation(small_spec):
    zeros = np.zeros(small_spec.shape, np.float32)
    with pytest.raises(ValueError):
        MultiLayerGridMap(small_spec, {"reflections": zeros}, schema="target")
    with pytest.raises(ValueError):
        MultiLayerGridMap(small_spec, {"reflections": np.zeros((3, 3))})
    bad_belief = {name: zeros for name in
                  ("reflections", "observation_height", "reflected_energy", "height",
                   "bel_free", "bel_occupied")}
    bad_belief["bel_unknown"] = np.full(small_spec.shape, 2.0, np.float32)
    with pytest.raises(ValueError):
        MultiLayerGridMap(small_spec, bad_belief, schema="target")
