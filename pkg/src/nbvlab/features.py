"""Per-candidate view featurization of the current reconstruction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, PreconditionError
from .geom import CameraView, PointCloud
from .render import default_radius, project_points

CHANNELS = 5  # normal x/y/z (camera frame), visibility count, depth


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    data: np.ndarray
    empty_mask: np.ndarray

    @property
    def resolution(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    f_p: np.ndarray
    f_v: np.ndarray
    f_empty: tuple
    f_base: int


def build_feature_grid(
    cloud: PointCloud, cam: CameraView, grid_res: int, radius_px: float | None = None
) -> FeatureGrid:
    """Project the enriched cloud into ``cam`` at ``grid_res`` x ``grid_res``.

    Every occupied pixel carries the winning point's camera-frame normal,
    visibility count and camera depth.
    """
    if grid_res < 16:
        raise ParameterError("grid resolution must be at least 16")
    if len(cloud) and not cloud.is_enriched:
        raise PreconditionError("cloud must carry normals and visibility counts")
    if radius_px is None:
        radius_px = default_radius(grid_res)
    gcam = cam.rescaled(grid_res, grid_res)
    proj = project_points(cloud, gcam, radius_px)
    data = np.zeros((grid_res, grid_res, CHANNELS))
    occ = proj.occupied
    if occ.any():
        idx = proj.pixel_to_point[occ]
        data[occ, 0:3] = cloud.normals[idx] @ gcam.rotation.T
        data[occ, 3] = cloud.visibility[idx]
        data[occ, 4] = proj.depth_at_pixel[occ]
    return FeatureGrid(data, ~occ)


def pool_with_variance(grid: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    """2x2 mean and population variance over the occupied pixels of each block."""
    g = grid.resolution
    if g % 2:
        raise ParameterError("grid resolution must be even for 2x2 pooling")
    p = g // 2
    data = grid.data.reshape(p, 2, p, 2, CHANNELS).transpose(0, 2, 1, 3, 4).reshape(p, p, 4, CHANNELS)
    valid = (~grid.empty_mask).reshape(p, 2, p, 2).transpose(0, 2, 1, 3).reshape(p, p, 4, 1)
    count = valid.sum(axis=2)
    safe = np.maximum(count, 1)
    mean = np.where(valid, data, 0.0).sum(axis=2) / safe
    var = (np.where(valid, data - mean[:, :, None, :], 0.0) ** 2).sum(axis=2) / safe
    return mean, var


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise monotone-chain hull without collinear vertices."""
    pts = sorted(set(map(tuple, np.asarray(points).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def strictly_inside(hull: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Mask of query points strictly inside a counter-clockwise convex polygon."""
    inside = np.ones(len(query), dtype=bool)
    nxt = np.roll(hull, -1, axis=0)
    for a, b in zip(hull, nxt):
        side = (b[0] - a[0]) * (query[:, 1] - a[1]) - (b[1] - a[1]) * (query[:, 0] - a[0])
        inside &= side > 0
    return inside


def f_empty(grid: FeatureGrid) -> tuple[int, int]:
    """Empty pixels (inside, outside) the convex hull of occupied pixel centres."""
    empty = grid.empty_mask
    total_empty = int(empty.sum())
    occ_v, occ_u = np.nonzero(~empty)
    if len(occ_u) < 3:
        return 0, total_empty
    # only the outline of the occupied set can contribute hull vertices
    rows = np.unique(occ_v)
    first = np.searchsorted(occ_v, rows, side="left")
    last = np.searchsorted(occ_v, rows, side="right") - 1
    outline = np.concatenate([
        np.stack([occ_u[first], rows], axis=1), np.stack([occ_u[last], rows], axis=1)
    ])
    hull = convex_hull(outline)
    if len(hull) < 3:
        return 0, total_empty
    ev, eu = np.nonzero(empty)
    inside = int(strictly_inside(hull, np.stack([eu, ev], axis=1).astype(np.float64)).sum())
    return inside, total_empty - inside


def make_bundle(state, cam_q: CameraView, grid_res: int) -> FeatureBundle:
    """Featurize ``cam_q`` against ``state.reconstruction``."""
    recon = state.reconstruction
    if len(recon) == 0:
        raise PreconditionError("reconstruction is empty")
    grid = build_feature_grid(recon, cam_q, grid_res)
    f_p, f_v = pool_with_variance(grid)
    return FeatureBundle(
        f_p.astype(np.float32), f_v.astype(np.float32), f_empty(grid), len(state.base_views)
    )
