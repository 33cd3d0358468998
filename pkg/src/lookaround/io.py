"""On-disk formats: ASCII PLY clouds, DMAP depth files, pose JSON."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .geometry import DepthMap, PointCloud, RigidPose

DMAP_MAGIC = b"DMAP"
DMAP_FLAG_SIGMA = 1
DMAP_FLAG_MASK = 2


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# -- DMAP -----------------------------------------------------------------
#
# 16-byte header: magic "DMAP", u32 width, u32 height, u32 flags, followed by
# little-endian float32 row-major planes. Flag bit 0: a sigma plane follows the
# depth plane. Flag bit 1: a u8 validity plane (1 = valid) follows; invalid
# depths are stored as 0. In memory, NaN marks a missing pixel.


def encode_dmap(dm: DepthMap) -> bytes:
    flags = DMAP_FLAG_MASK | (DMAP_FLAG_SIGMA if dm.sigma is not None else 0)
    valid = dm.valid()
    header = DMAP_MAGIC + struct.pack("<III", dm.width, dm.height, flags)
    body = np.where(valid, dm.depth, 0.0).astype("<f4").tobytes()
    if dm.sigma is not None:
        body += np.where(valid, dm.sigma, 0.0).astype("<f4").tobytes()
    body += valid.astype(np.uint8).tobytes()
    return header + body


def decode_dmap(data: bytes) -> DepthMap:
    if len(data) < 16 or data[:4] != DMAP_MAGIC:
        raise FormatError("not a DMAP file")
    width, height, flags = struct.unpack("<III", data[4:16])
    n = width * height
    planes = 2 if flags & DMAP_FLAG_SIGMA else 1
    mask_bytes = n if flags & DMAP_FLAG_MASK else 0
    if len(data) != 16 + 4 * n * planes + mask_bytes:
        raise FormatError("DMAP payload size does not match header")
    arr = np.frombuffer(data, dtype="<f4", count=n * planes, offset=16).astype(np.float64)
    depth = arr[:n].reshape(height, width).copy()
    sigma = arr[n:].reshape(height, width).copy() if planes == 2 else None
    if mask_bytes:
        valid = np.frombuffer(data, dtype=np.uint8, offset=16 + 4 * n * planes).reshape(height, width) > 0
    else:
        valid = np.isfinite(depth) & (depth > 0)
    depth[~valid] = np.nan
    if sigma is not None:
        sigma[~valid] = np.nan
    return DepthMap(depth, sigma)


def write_dmap(path, dm: DepthMap) -> None:
    atomic_write_bytes(path, encode_dmap(dm))


def read_dmap(path) -> DepthMap:
    return decode_dmap(Path(path).read_bytes())


# -- PLY ------------------------------------------------------------------


def write_ply(path, cloud: PointCloud, extra: dict | None = None) -> None:
    """ASCII PLY with x, y, z plus optional ``confidence`` and named extra columns."""
    cols = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2]}
    if cloud.confidence is not None:
        cols["confidence"] = cloud.confidence
    for name, values in (extra or {}).items():
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != len(cloud):
            raise ValueError(f"column {name!r} has the wrong length")
        cols[name] = values
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property double {name}" for name in cols]
    lines.append("end_header")
    table = np.stack(list(cols.values()), axis=1) if len(cloud) else np.zeros((0, len(cols)))
    lines += [" ".join(repr(float(x)) for x in row) for row in table]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_ply(path):
    """Returns ``(cloud, columns)`` where ``columns`` holds every non-xyz property."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError("not a PLY file")
    names, count, i = [], None, 1
    while i < len(text):
        parts = text[i].split()
        i += 1
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            names.append(parts[-1])
        elif parts and parts[0] == "end_header":
            break
    if count is None or names[:3] != ["x", "y", "z"]:
        raise FormatError("PLY must declare a vertex element with x, y, z first")
    rows = [list(map(float, line.split())) for line in text[i:i + count]]
    table = np.asarray(rows, dtype=np.float64).reshape(count, len(names))
    columns = {n: table[:, j] for j, n in enumerate(names)}
    conf = columns.pop("confidence", None)
    cloud = PointCloud(table[:, :3], conf)
    for n in ("x", "y", "z"):
        columns.pop(n)
    return cloud, columns


# -- poses ----------------------------------------------------------------


def write_pose(path, g: RigidPose) -> None:
    atomic_write_json(path, g.to_json())


def read_pose(path) -> RigidPose:
    return RigidPose.from_json(json.loads(Path(path).read_text()))
