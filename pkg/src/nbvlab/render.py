"""Simulated depth sensor and z-buffered point splatting."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ParameterError
from .geom import CameraView, PointCloud
from .scenes import SceneMesh

NEAR = 1e-6
BASE_RESOLUTION = 128


@numba.njit(cache=True)
def _fill(depth, pa, pb, pc, fx, fy, cx, cy):
    """Rasterize one camera-space triangle lying entirely in front of the near plane."""
    height, width = depth.shape
    za, zb, zc = pa[2], pb[2], pc[2]
    ax, ay = fx * pa[0] / za + cx, fy * pa[1] / za + cy
    bx, by = fx * pb[0] / zb + cx, fy * pb[1] / zb + cy
    qx, qy = fx * pc[0] / zc + cx, fy * pc[1] / zc + cy
    area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
    if abs(area) < 1e-12:
        return
    u0 = max(0, int(np.ceil(min(ax, bx, qx))))
    u1 = min(width - 1, int(np.floor(max(ax, bx, qx))))
    v0 = max(0, int(np.ceil(min(ay, by, qy))))
    v1 = min(height - 1, int(np.floor(max(ay, by, qy))))
    for v in range(v0, v1 + 1):
        for u in range(u0, u1 + 1):
            w0 = ((bx - u) * (qy - v) - (by - v) * (qx - u)) / area
            w1 = ((qx - u) * (ay - v) - (qy - v) * (ax - u)) / area
            w2 = 1.0 - w0 - w1
            if w0 < 0 or w1 < 0 or w2 < 0:
                continue
            z = 1.0 / (w0 / za + w1 / zb + w2 / zc)
            if z < depth[v, u]:
                depth[v, u] = z


@numba.njit(cache=True)
def _rasterize(cam_verts, tris, fx, fy, cx, cy, width, height, far):
    depth = np.full((height, width), np.inf)
    poly = np.empty((4, 3))
    for t in range(tris.shape[0]):
        # clip against z = NEAR, leaving a polygon of 0, 3 or 4 vertices
        m = 0
        for k in range(3):
            p = cam_verts[tris[t, k]]
            q = cam_verts[tris[t, (k + 1) % 3]]
            p_in = p[2] > NEAR
            q_in = q[2] > NEAR
            if p_in:
                poly[m] = p
                m += 1
            if p_in != q_in:
                s = (NEAR - p[2]) / (q[2] - p[2])
                poly[m] = p + s * (q - p)
                poly[m, 2] = NEAR
                m += 1
        for k in range(1, m - 1):
            _fill(depth, poly[0], poly[k], poly[k + 1], fx, fy, cx, cy)
    for v in range(height):
        for u in range(width):
            if depth[v, u] > far:
                depth[v, u] = 0.0
    return depth


def render_depth(mesh: SceneMesh, cam: CameraView, far: float | None = None) -> np.ndarray:
    """Noise-free z-buffer depth image of ``mesh``; 0 where no surface is hit."""
    if len(mesh.triangles) == 0:
        return np.zeros((cam.height, cam.width))
    if far is None:
        far = 10.0 * mesh.diagonal
    verts = cam.world_to_camera(mesh.vertices)
    return _rasterize(
        np.ascontiguousarray(verts), mesh.triangles, cam.fx, cam.fy, cam.cx, cam.cy,
        cam.width, cam.height, far,
    )


def default_radius(resolution: int) -> float:
    """Splat radius of 1 px at 128 px, scaled with resolution, never below 0.5."""
    return max(0.5, resolution / BASE_RESOLUTION)


@dataclass(frozen=True, eq=False)
class ProjectionMap:
    """Per-pixel z-buffer winner; ``pixel_to_point`` is -1 on empty pixels."""

    pixel_to_point: np.ndarray
    depth_at_pixel: np.ndarray

    @property
    def occupied(self) -> np.ndarray:
        return self.pixel_to_point >= 0


def _disk_offsets(radius: float) -> np.ndarray:
    r = int(np.ceil(radius)) + 1
    g = np.arange(-r, r + 1)
    du, dv = np.meshgrid(g, g)
    return np.stack([du.ravel(), dv.ravel()], axis=1)


def project_points(cloud: PointCloud, cam: CameraView, radius_px: float = 1.0) -> ProjectionMap:
    """Splat each point as a disk; the smallest camera depth wins each pixel.

    A pixel centre (u, v) is covered when it lies within ``radius_px`` of the
    point's projection.  Depth ties go to the lower point index.
    """
    if radius_px < 0.5:
        raise ParameterError("radius_px must be at least 0.5")
    h, w = cam.height, cam.width
    index = np.full((h, w), -1, dtype=np.int64)
    depth = np.zeros((h, w))
    if len(cloud) == 0:
        return ProjectionMap(index, depth)
    pc = cam.world_to_camera(cloud.points)
    z = pc[:, 2]
    front = np.nonzero(z > NEAR)[0]
    if len(front) == 0:
        return ProjectionMap(index, depth)
    zf = z[front]
    x = cam.fx * pc[front, 0] / zf + cam.cx
    y = cam.fy * pc[front, 1] / zf + cam.cy
    near = (x > -radius_px - 1) & (x < w + radius_px) & (y > -radius_px - 1) & (y < h + radius_px)
    front, zf, x, y = front[near], zf[near], x[near], y[near]

    offs = _disk_offsets(radius_px)
    u = np.rint(x)[:, None].astype(np.int64) + offs[None, :, 0]
    v = np.rint(y)[:, None].astype(np.int64) + offs[None, :, 1]
    hit = ((u - x[:, None]) ** 2 + (v - y[:, None]) ** 2 <= radius_px * radius_px)
    hit &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
    pi, oi = np.nonzero(hit)
    if len(pi) == 0:
        return ProjectionMap(index, depth)
    pix = v[pi, oi] * w + u[pi, oi]
    pid = front[pi]
    pz = zf[pi]
    order = np.lexsort((pid, pz, pix))
    pix, pid, pz = pix[order], pid[order], pz[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    index.ravel()[pix[first]] = pid[first]
    depth.ravel()[pix[first]] = pz[first]
    return ProjectionMap(index, depth)


def visibility_counts(cloud: PointCloud, base_cams, radius_px: float = 1.0) -> PointCloud:
    """Count, per point, the base cameras in which it wins at least one pixel."""
    counts = np.zeros(len(cloud), dtype=np.int64)
    for cam in base_cams:
        winners = project_points(cloud, cam, radius_px).pixel_to_point
        seen = np.unique(winners[winners >= 0])
        counts[seen] += 1
    return PointCloud(cloud.points, cloud.normals, counts, cloud.source_view)
