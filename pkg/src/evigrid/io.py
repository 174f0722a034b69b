"""Bit-exact readers and writers for point clouds, poses, and grid map files.

Grid maps use the little-endian "EGMF" container documented in FORMATS.md;
layer payloads round-trip bit-exactly, NaN patterns included. Poses are plain
text, one ``timestamp x y z qw qx qy qz`` line each.
"""

from __future__ import annotations

import math
import struct
import warnings
from pathlib import Path
from typing import Union

import numpy as np

from .grid import GridSpec, MultiLayerGridMap, PointCloud, Pose, SCHEMAS

GRID_MAP_MAGIC = b"EGMF"
GRID_MAP_VERSION = 1

POINT_FORMATS = {"xyzi_f32": 4, "nuscenes_bin": 5}

PathLike = Union[str, Path]


class GridMapFormatError(ValueError):
    """Malformed grid map file: bad magic, version, sizes, or duplicate layers."""


def read_point_cloud(path: PathLike, fmt: str = "xyzi_f32") -> PointCloud:
    """Read packed little-endian float32 records; non-finite records are dropped.

    ``xyzi_f32`` has 4 floats per point, ``nuscenes_bin`` 5 (the trailing ring
    index is discarded).
    """
    if fmt not in POINT_FORMATS:
        raise ValueError(f"unknown point cloud format {fmt!r}; expected {list(POINT_FORMATS)}")
    fields = POINT_FORMATS[fmt]
    data = Path(path).read_bytes()
    stride = 4 * fields
    if len(data) % stride:
        raise ValueError(f"{path}: {len(data)} bytes is not a multiple of the "
                         f"{stride}-byte {fmt} record stride")
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, fields)[:, :4]
    finite = np.all(np.isfinite(raw), axis=1)
    dropped = int(len(raw) - finite.sum())
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} non-finite point records", stacklevel=2)
    return PointCloud(raw[finite].astype(np.float64))


def write_point_cloud(cloud: PointCloud, path: PathLike, fmt: str = "xyzi_f32") -> None:
    if fmt not in POINT_FORMATS:
        raise ValueError(f"unknown point cloud format {fmt!r}; expected {list(POINT_FORMATS)}")
    fields = POINT_FORMATS[fmt]
    out = np.zeros((len(cloud), fields), dtype="<f4")
    out[:, :4] = cloud.points
    Path(path).write_bytes(out.tobytes())


def write_grid_map(grid_map: MultiLayerGridMap, path: PathLike) -> None:
    spec = grid_map.spec
    parts = [GRID_MAP_MAGIC,
             struct.pack("<IIIfdd", GRID_MAP_VERSION, spec.width, spec.height,
                         spec.cell_size, spec.origin_x, spec.origin_y),
             struct.pack("<I", len(grid_map.layers))]
    for name, values in grid_map.layers.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_grid_map(path: PathLike) -> MultiLayerGridMap:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != GRID_MAP_MAGIC:
        raise GridMapFormatError(f"{path}: bad magic {data[:4]!r}, expected {GRID_MAP_MAGIC!r}")
    header = struct.calcsize("<IIIfdd")
    if len(data) < 4 + header + 4:
        raise GridMapFormatError(f"{path}: truncated header")
    version, width, height, cell_size, origin_x, origin_y = struct.unpack_from("<IIIfdd", data, 4)
    if version != GRID_MAP_VERSION:
        raise GridMapFormatError(f"{path}: unsupported version {version}")
    (layer_count,) = struct.unpack_from("<I", data, 4 + header)
    offset = 4 + header + 4

    spec = GridSpec(cell_size=float(cell_size), width=width, height=height,
                    origin_x=origin_x, origin_y=origin_y)
    payload = 4 * width * height
    layers: dict[str, np.ndarray] = {}
    for _ in range(layer_count):
        if offset + 4 > len(data):
            raise GridMapFormatError(f"{path}: truncated layer table")
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + name_len + payload > len(data):
            raise GridMapFormatError(f"{path}: truncated layer payload")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        if name in layers:
            raise GridMapFormatError(f"{path}: duplicate layer name {name!r}")
        values = np.frombuffer(data, dtype="<f4", count=width * height, offset=offset)
        layers[name] = values.reshape(height, width).copy()
        offset += payload
    if offset != len(data):
        raise GridMapFormatError(f"{path}: {len(data) - offset} trailing bytes")

    names = tuple(layers)
    schema = next((s for s, expected in SCHEMAS.items() if names == tuple(expected)), None)
    return MultiLayerGridMap(spec, layers, schema)


def read_poses(path: PathLike) -> list[Pose]:
    """Parse a pose-per-line text file; timestamps must be strictly increasing.

    Quaternions within 1e-3 of unit norm are renormalized; anything farther is
    rejected. ``#`` starts a comment line.
    """
    poses: list[Pose] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            t, x, y, z, qw, qx, qy, qz = (float(v) for v in fields)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        norm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        if abs(norm - 1.0) > 1e-3:
            raise ValueError(f"{path}:{lineno}: quaternion norm {norm} too far from 1")
        if poses and t <= poses[-1].timestamp:
            raise ValueError(f"{path}:{lineno}: timestamp {t} not after {poses[-1].timestamp}")
        poses.append(Pose(timestamp=t, translation=(x, y, z),
                          rotation=(qw / norm, qx / norm, qy / norm, qz / norm)))
    return poses


def write_poses(poses, path: PathLike) -> None:
    lines = ["# timestamp x y z qw qx qy qz"]
    for p in poses:
        x, y, z = p.translation
        qw, qx, qy, qz = p.rotation
        lines.append(f"{p.timestamp!r} {x!r} {y!r} {z!r} {qw!r} {qx!r} {qy!r} {qz!r}")
    Path(path).write_text("\n".join(lines) + "\n")
