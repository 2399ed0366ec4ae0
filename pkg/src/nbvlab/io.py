"""File formats: ascii PLY point clouds, raw depth maps, ascii OBJ meshes, PGM previews."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError, DimensionError
from .geom import PointCloud

DEPTH_MAGIC = b"DPTH"
_DEPTH_HEADER = struct.Struct("<4sIII")


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise DimensionError("depth map must be 2-D")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, 0))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _DEPTH_HEADER.size:
        raise ArtifactError(f"{path}: truncated depth header")
    magic, w, h, _ = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise ArtifactError(f"{path}: bad depth magic {magic!r}")
    body = data[_DEPTH_HEADER.size:]
    if len(body) != 4 * w * h:
        raise ArtifactError(f"{path}: expected {4 * w * h} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def write_ply(path, cloud: PointCloud) -> None:
    props = ["property double x", "property double y", "property double z"]
    cols = [cloud.points]
    fmt = ["%.17g"] * 3
    if cloud.normals is not None:
        props += ["property double nx", "property double ny", "property double nz"]
        cols.append(cloud.normals)
        fmt += ["%.17g"] * 3
    if cloud.visibility is not None:
        props.append("property int visibility")
        cols.append(cloud.visibility[:, None])
        fmt.append("%d")
    if cloud.source_view is not None:
        props.append("property int source_view")
        cols.append(cloud.source_view[:, None])
        fmt.append("%d")
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}", *props, "end_header"]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(header) + "\n")
        if len(cloud):
            np.savetxt(fh, np.hstack(cols), fmt=fmt)


def read_ply(path) -> PointCloud:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ArtifactError(f"{path}: not a PLY file")
        names, count = [], None
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ArtifactError(f"{path}: only ascii PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                count = int(tok[2])
            elif tok[0] == "property":
                names.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if count is None:
            raise ArtifactError(f"{path}: missing vertex element")
        rows = np.loadtxt(fh, ndmin=2, max_rows=count) if count else np.zeros((0, len(names)))
    if rows.shape != (count, len(names)):
        raise ArtifactError(f"{path}: expected {count} rows of {len(names)} values")
    col = {name: rows[:, i] for i, name in enumerate(names)}
    try:
        points = np.stack([col["x"], col["y"], col["z"]], axis=1)
    except KeyError as exc:
        raise ArtifactError(f"{path}: missing coordinate property {exc}") from None
    normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1) if "nx" in col else None
    visibility = col["visibility"].astype(np.int64) if "visibility" in col else None
    source = col["source_view"].astype(np.int64) if "source_view" in col else None
    return PointCloud(points, normals, visibility, source)


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w", newline="\n") as fh:
        for v in vertices:
            fh.write("v %.17g %.17g %.17g\n" % tuple(v))
        for t in triangles:
            fh.write("f %d %d %d\n" % tuple(t + 1))


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit greyscale image, linearly stretched over the finite nonzero range."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError("PGM image must be 2-D")
    valid = np.isfinite(image) & (image != 0)
    out = np.zeros(image.shape, dtype=np.uint8)
    if valid.any():
        lo, hi = image[valid].min(), image[valid].max()
        scale = 254.0 / (hi - lo) if hi > lo else 0.0
        out[valid] = (1 + np.round((image[valid] - lo) * scale)).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(out.tobytes())
