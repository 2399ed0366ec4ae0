"""Point clouds, pinhole cameras and reconstruction-quality metrics.

Depth images are plain ``(H, W)`` float arrays in meters where ``0`` marks a
pixel with no surface.  Camera poses map world to camera coordinates with the
OpenCV convention (x right, y down, z forward).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, DimensionError, ParameterError

NORMAL_K = 16


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    visibility: Optional[np.ndarray] = None
    source_view: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        n = len(pts)
        for name, dtype, shape in (
            ("normals", np.float64, (n, 3)),
            ("visibility", np.int64, (n,)),
            ("source_view", np.int64, (n,)),
        ):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.asarray(value, dtype=dtype)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_enriched(self) -> bool:
        return self.normals is not None and self.visibility is not None

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def subset(self, index) -> "PointCloud":
        def pick(a):
            return None if a is None else a[index]

        return PointCloud(
            self.points[index], pick(self.normals), pick(self.visibility), pick(self.source_view)
        )


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera with intrinsics in pixels and a world->camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    _center: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if self.width <= 0 or self.height <= 0:
            raise ParameterError("camera resolution must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParameterError("principal point outside the image")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ParameterError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "_center", -rot.T @ trans)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return self._center

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[2]

    @classmethod
    def look_at(cls, eye, target, fov_deg: float, width: int, height: int) -> "CameraView":
        """Camera at ``eye`` looking at ``target`` with world +z as the up hint."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise ParameterError("eye and target coincide")
        forward /= norm
        up = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up) > 1 - 1e-9:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        fx, fy, cx, cy = intrinsics_from_fov(fov_deg, width, height)
        return cls(fx, fy, cx, cy, rot, -rot @ eye, width, height)

    def rescaled(self, width: int, height: int) -> "CameraView":
        """Same pose and field of view rendered at another resolution."""
        sx, sy = width / self.width, height / self.height
        return replace(
            self,
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation


def intrinsics_from_fov(fov_deg: float, width: int, height: int):
    """Square-pixel intrinsics whose horizontal field of view is ``fov_deg``."""
    if not 0 < fov_deg < 180:
        raise ParameterError("fov must lie in (0, 180) degrees")
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return f, f, (width - 1) / 2, (height - 1) / 2


def backproject(depth: np.ndarray, cam: CameraView, view_index: int = 0) -> PointCloud:
    """Lift every valid depth pixel to a world-space point."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise DimensionError(
            f"depth shape {depth.shape} does not match camera {cam.height}x{cam.width}"
        )
    v, u = np.nonzero(depth > 0)
    d = depth[v, u]
    cam_pts = np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=1)
    return PointCloud(cam.camera_to_world(cam_pts), source_view=np.full(len(d), view_index))


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output points are ordered by voxel key.  Normals are averaged and
    renormalized, visibility takes the member maximum, source view the
    member minimum.
    """
    if not voxel > 0:
        raise ParameterError("voxel size must be positive")
    n = len(cloud)
    if n == 0:
        return cloud
    keys = voxel_keys(cloud.points, voxel)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    order = np.argsort(flat, kind="stable")
    sorted_keys = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    counts = np.diff(np.r_[starts, n])

    pts = cloud.points[order]
    centroid = np.add.reduceat(pts, starts, axis=0) / counts[:, None]
    # float rounding must never move a centroid outside its members' extent
    centroid = np.clip(
        centroid, np.minimum.reduceat(pts, starts, axis=0), np.maximum.reduceat(pts, starts, axis=0)
    )

    normals = visibility = source = None
    if cloud.normals is not None:
        nrm = cloud.normals[order]
        summed = np.add.reduceat(nrm, starts, axis=0)
        length = np.linalg.norm(summed, axis=1)
        bad = length < 1e-12
        summed[bad] = nrm[starts[bad]]
        length[bad] = np.linalg.norm(summed[bad], axis=1)
        normals = summed / length[:, None]
    if cloud.visibility is not None:
        visibility = np.maximum.reduceat(cloud.visibility[order], starts)
    if cloud.source_view is not None:
        source = np.minimum.reduceat(cloud.source_view[order], starts)
    return PointCloud(centroid, normals, visibility, source)


def estimate_normals(cloud: PointCloud, k: int = NORMAL_K, sensor_origin=None) -> PointCloud:
    """PCA normals from each point and its ``k`` nearest neighbours.

    ``sensor_origin`` is either one 3-vector or one origin per point; normals
    are flipped to face it.  Neighbourhoods without a well-defined plane fall
    back to the unit direction toward the sensor.
    """
    n = len(cloud)
    if n < k + 1:
        raise DegenerateInputError(f"need at least {k + 1} points for k={k}, got {n}")
    pts = cloud.points
    origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, dtype=np.float64)
    origin = np.broadcast_to(origin, pts.shape)

    _, idx = cKDTree(pts).query(pts, k=k + 1)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]

    to_sensor = origin - pts
    dist = np.linalg.norm(to_sensor, axis=1)
    fallback = to_sensor / np.where(dist > 0, dist, 1.0)[:, None]
    fallback[dist == 0] = (0.0, 0.0, 1.0)
    degenerate = evals[:, 1] <= 1e-10 * np.maximum(evals[:, 2], 1e-300)
    normals = np.where(degenerate[:, None], fallback, normals)

    flip = np.einsum("ij,ij->i", normals, to_sensor) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return replace(cloud, normals=normals)


def _nearest(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    # sliding-midpoint splits without node shrinking answer far-off queries about twice as fast
    return cKDTree(target, balanced_tree=False, compact_nodes=False).query(query, k=1)[0]


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean (unsquared) nearest-neighbour distance."""
    if len(a) == 0 or len(b) == 0:
        raise DegenerateInputError("chamfer distance needs two non-empty clouds")
    ab = float(np.mean(_nearest(a.points, b.points)))
    ba = float(np.mean(_nearest(b.points, a.points)))
    return 0.5 * (ab + ba)


class ChamferReference:
    """Chamfer distance against a fixed cloud whose k-d tree is built once."""

    def __init__(self, reference: PointCloud):
        if len(reference) == 0:
            raise DegenerateInputError("reference cloud is empty")
        self.points = reference.points
        self.tree = cKDTree(self.points)

    def __call__(self, cloud: PointCloud) -> float:
        if len(cloud) == 0:
            raise DegenerateInputError("chamfer distance needs two non-empty clouds")
        ab = float(np.mean(self.tree.query(cloud.points, k=1)[0]))
        ba = float(np.mean(_nearest(self.points, cloud.points)))
        return 0.5 * (ab + ba)


def default_tau(gt: PointCloud) -> float:
    """1% of the ground-truth bounding-box diagonal."""
    lo, hi = gt.points.min(axis=0), gt.points.max(axis=0)
    return 0.01 * float(np.linalg.norm(hi - lo))


def coverage_pct(recon: PointCloud, gt: PointCloud, tau: float) -> float:
    if len(gt) == 0:
        raise DegenerateInputError("ground truth cloud is empty")
    if not tau > 0:
        raise ParameterError("tau must be positive")
    if len(recon) == 0:
        return 0.0
    covered = _nearest(gt.points, recon.points) <= tau
    return 100.0 * int(covered.sum()) / len(gt)


def f1_score(recon: PointCloud, gt: PointCloud, tau: float) -> float:
    if len(recon) == 0 or len(gt) == 0:
        raise DegenerateInputError("F1 needs two non-empty clouds")
    if not tau > 0:
        raise ParameterError("tau must be positive")
    precision = float(np.mean(_nearest(recon.points, gt.points) <= tau))
    recall = float(np.mean(_nearest(gt.points, recon.points) <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
