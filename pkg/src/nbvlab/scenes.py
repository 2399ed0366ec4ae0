"""Procedural ground-truth objects and hemispherical candidate-view catalogs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .geom import CameraView, PointCloud

CATEGORIES = ("house", "toy", "creature")
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
SHELL_FACTORS = (1.5, 2.0, 2.5)


@dataclass(frozen=True, eq=False)
class SceneMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ParameterError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.vertices) == 0:
            return np.zeros(3), np.zeros(3)
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.bounds
        return 0.5 * (lo + hi)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


class _Builder:
    """Accumulates primitive parts into one vertex/triangle soup."""

    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.tris: list[np.ndarray] = []
        self.count = 0

    def add(self, verts, tris):
        verts = np.asarray(verts, dtype=np.float64)
        tris = np.asarray(tris, dtype=np.int64)
        self.verts.append(verts)
        self.tris.append(tris + self.count)
        self.count += len(verts)

    def quad(self, a, b, c, d):
        self.add([a, b, c, d], [[0, 1, 2], [0, 2, 3]])

    def box(self, lo, hi):
        (x0, y0, z0), (x1, y1, z1) = lo, hi
        corners = [
            (x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
            (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1),
        ]
        faces = [
            (0, 2, 1), (0, 3, 2), (4, 5, 6), (4, 6, 7), (0, 1, 5), (0, 5, 4),
            (1, 2, 6), (1, 6, 5), (2, 3, 7), (2, 7, 6), (3, 0, 4), (3, 4, 7),
        ]
        self.add(corners, faces)

    def cylinder(self, base, radius, height, segments=16):
        ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
        ring = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(segments)], axis=1)
        base = np.asarray(base, dtype=np.float64)
        verts = np.vstack([ring + base, ring + base + (0, 0, height), [base, base + (0, 0, height)]])
        tris = []
        for i in range(segments):
            j = (i + 1) % segments
            tris += [(i, j, segments + j), (i, segments + j, segments + i)]
            tris += [(2 * segments, j, i), (2 * segments + 1, segments + i, segments + j)]
        self.add(verts, tris)

    def ellipsoid(self, center, radii, rings=10, segments=16):
        lat = np.linspace(0, np.pi, rings + 1)[1:-1]
        lon = np.linspace(0, 2 * np.pi, segments, endpoint=False)
        sl, cl = np.sin(lat)[:, None], np.cos(lat)[:, None]
        body = np.stack(
            [sl * np.cos(lon), sl * np.sin(lon), np.broadcast_to(cl, (len(lat), segments))], axis=2
        ).reshape(-1, 3)
        unit = np.vstack([[0, 0, 1], body, [0, 0, -1]])
        verts = unit * np.asarray(radii) + np.asarray(center)
        bottom = len(verts) - 1
        tris = []
        for j in range(segments):
            k = (j + 1) % segments
            tris.append((0, 1 + j, 1 + k))
            last = 1 + (rings - 2) * segments
            tris.append((bottom, last + k, last + j))
        for i in range(rings - 2):
            r0, r1 = 1 + i * segments, 1 + (i + 1) * segments
            for j in range(segments):
                k = (j + 1) % segments
                tris += [(r0 + j, r1 + j, r1 + k), (r0 + j, r1 + k, r0 + k)]
        self.add(verts, tris)

    def wall(self, origin, u_axis, v_axis, nu, nv, holes=()):
        """Planar grid of ``nu x nv`` quads spanning ``u_axis`` and ``v_axis``, minus ``holes``."""
        origin, u_axis, v_axis = (np.asarray(a, dtype=np.float64) for a in (origin, u_axis, v_axis))
        holes = set(holes)
        for i in range(nu):
            for j in range(nv):
                if (i, j) in holes:
                    continue
                p = origin + u_axis * (i / nu) + v_axis * (j / nv)
                du, dv = u_axis / nu, v_axis / nv
                self.quad(p, p + du, p + du + dv, p + dv)

    def mesh(self) -> SceneMesh:
        if not self.verts:
            return SceneMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return SceneMesh(np.vstack(self.verts), np.vstack(self.tris))


def _house(rng: np.random.Generator) -> _Builder:
    b = _Builder()
    w, d, h = rng.uniform(8, 12), rng.uniform(5, 8), rng.uniform(3, 5)
    nu_w, nu_d, nv = int(round(w)), int(round(d)), 4

    def windows(nu):
        cells = [(i, j) for i in range(1, nu - 1) for j in (1, 2)]
        k = int(rng.integers(1, max(2, len(cells) // 3) + 1))
        return [cells[i] for i in sorted(rng.choice(len(cells), size=k, replace=False))]

    x0, y0 = -w / 2, -d / 2
    b.wall((x0, y0, 0), (w, 0, 0), (0, 0, h), nu_w, nv, windows(nu_w))
    b.wall((x0 + w, y0 + d, 0), (-w, 0, 0), (0, 0, h), nu_w, nv, windows(nu_w))
    b.wall((x0 + w, y0, 0), (0, d, 0), (0, 0, h), nu_d, nv, windows(nu_d))
    b.wall((x0, y0 + d, 0), (0, -d, 0), (0, 0, h), nu_d, nv)

    rh, ov = rng.uniform(1.5, 3.0), rng.uniform(0.2, 0.6)
    ridge = h + rh
    b.quad((x0 - ov, y0 - ov, h), (x0 + w + ov, y0 - ov, h), (x0 + w + ov, 0, ridge), (x0 - ov, 0, ridge))
    b.quad((x0 - ov, 0, ridge), (x0 + w + ov, 0, ridge), (x0 + w + ov, y0 + d + ov, h), (x0 - ov, y0 + d + ov, h))
    b.add([(x0, y0, h), (x0, y0 + d, h), (x0, 0, ridge)], [[0, 1, 2]])
    b.add([(x0 + w, y0, h), (x0 + w, y0 + d, h), (x0 + w, 0, ridge)], [[0, 2, 1]])

    # detached fence in front of the body: the guaranteed occluder
    gap = rng.uniform(1.0, 2.5)
    flen, fh = rng.uniform(0.5, 0.9) * w, rng.uniform(0.4, 0.6) * h
    fx = rng.uniform(-0.5, 0.5) * (w - flen)
    b.box((fx - flen / 2, y0 - gap - 0.2, 0), (fx + flen / 2, y0 - gap, fh))
    if rng.random() < 0.5:
        b.cylinder((x0 + w * rng.uniform(0.2, 0.8), y0 + d * 0.3, h), 0.4, rh + 1.0, segments=10)
    return b


def _toy(rng: np.random.Generator) -> _Builder:
    b = _Builder()
    bw, bd, bh = rng.uniform(3, 5), rng.uniform(2, 4), rng.uniform(0.8, 1.5)
    b.box((-bw / 2, -bd / 2, 0), (bw / 2, bd / 2, bh))
    z = bh
    for _ in range(int(rng.integers(2, 4))):
        if rng.random() < 0.5:
            r, hh = rng.uniform(0.3, 0.8), rng.uniform(1.0, 2.0)
            cx, cy = rng.uniform(-bw / 3, bw / 3), rng.uniform(-bd / 3, bd / 3)
            b.cylinder((cx, cy, z), r, hh)
        else:
            sw, sd, hh = rng.uniform(0.8, 2.0), rng.uniform(0.8, 2.0), rng.uniform(0.8, 1.6)
            cx, cy = rng.uniform(-bw / 4, bw / 4), rng.uniform(-bd / 4, bd / 4)
            b.box((cx - sw / 2, cy - sd / 2, z), (cx + sw / 2, cy + sd / 2, z + hh))
        z += hh
    # overhanging slab wider than its supports
    sw, sd = bw * rng.uniform(1.1, 1.4), bd * rng.uniform(0.6, 1.2)
    b.box((-sw / 2, -sd / 2, z), (sw / 2, sd / 2, z + 0.3))
    for sx in (-1, 1):
        b.cylinder((sx * (bw / 2 + 0.6), -bd / 2 - 0.3, 0.4), 0.5, 0.4, segments=12)
    return b


def _creature(rng: np.random.Generator) -> _Builder:
    b = _Builder()
    bl, bw, bh = rng.uniform(3, 5), rng.uniform(1.2, 2.0), rng.uniform(1.0, 1.6)
    leg = rng.uniform(1.2, 2.2)
    bz = leg + bh * 0.6
    b.ellipsoid((0, 0, bz), (bl / 2, bw / 2, bh / 2))
    hr = rng.uniform(0.5, 0.9)
    b.ellipsoid((bl / 2 + hr * 0.6, 0, bz + bh * rng.uniform(0.4, 0.9)), (hr * 1.3, hr, hr))
    b.ellipsoid((-bl / 2 - 0.8, 0, bz + 0.2), (1.2, 0.25, 0.25), rings=6, segments=10)
    for sx in (-1, 1):
        for sy in (-1, 1):
            lx, ly = sx * bl * 0.3, sy * bw * 0.3
            b.ellipsoid((lx, ly, leg / 2 + 0.2), (0.3, 0.3, leg / 2 + 0.2), rings=8, segments=10)
    return b


_GENERATORS = {"house": _house, "toy": _toy, "creature": _creature}


def generate_scene(category: str, seed: int, target_size: float = 14.0) -> SceneMesh:
    """Deterministic object of ``category`` scaled to a ``target_size`` bbox diagonal.

    The bounding box is centred on the origin.
    """
    if category not in _GENERATORS:
        raise ParameterError(f"unknown scene category {category!r}; expected one of {CATEGORIES}")
    if not target_size > 0:
        raise ParameterError("target_size must be positive")
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    mesh = _GENERATORS[category](rng).mesh()
    keep = mesh.triangle_areas() > 1e-9
    verts = mesh.vertices - mesh.center
    verts *= target_size / np.linalg.norm(verts.max(axis=0) - verts.min(axis=0))
    return SceneMesh(verts, mesh.triangles[keep])


def connected_components(mesh: SceneMesh) -> int:
    """Number of vertex-connected triangle groups (union-find over shared vertices)."""
    parent = np.arange(len(mesh.vertices))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    # coincident vertices of separately built parts are the same surface point
    _, canon = np.unique(np.round(mesh.vertices, 9), axis=0, return_inverse=True)
    canon = canon.reshape(-1)
    for a, b_, c in canon[mesh.triangles]:
        ra, rb, rc = find(a), find(b_), find(c)
        parent[rb] = ra
        parent[find(rc)] = ra
    used = np.unique(canon[mesh.triangles])
    return len({find(i) for i in used})


def sample_gt_cloud(mesh: SceneMesh, n: int, seed: int) -> PointCloud:
    """``n`` points distributed uniformly by area over the mesh surface."""
    if n <= 0:
        raise ParameterError("n must be positive")
    if len(mesh.triangles) == 0:
        raise DegenerateInputError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    pts = (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c
    return PointCloud(pts)


@dataclass(frozen=True, eq=False)
class ViewCatalog:
    views: list
    radii: tuple
    per_shell: int
    center: np.ndarray

    def __len__(self) -> int:
        return len(self.views)

    @property
    def positions(self) -> np.ndarray:
        return np.array([v.center for v in self.views])


def fibonacci_hemisphere(n: int, phase: float = 0.0) -> np.ndarray:
    """``n`` unit vectors with z > 0 on a golden-angle spiral."""
    i = np.arange(n)
    z = (i + 0.5) / n
    r = np.sqrt(1 - z * z)
    phi = phase + i * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sample_view_catalog(
    center, radii, per_shell: int = 40, width: int = 128, height: int = 128, fov_deg: float = 60.0
) -> ViewCatalog:
    radii = tuple(float(r) for r in radii)
    if len(radii) == 0 or radii[0] <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ParameterError("shell radii must be positive and strictly increasing")
    if per_shell < 1:
        raise ParameterError("per_shell must be at least 1")
    center = np.asarray(center, dtype=np.float64)
    views = []
    for s, radius in enumerate(radii):
        dirs = fibonacci_hemisphere(per_shell, phase=s * GOLDEN_ANGLE / len(radii))
        for d in dirs:
            views.append(CameraView.look_at(center + radius * d, center, fov_deg, width, height))
    return ViewCatalog(views, radii, per_shell, center)


def default_catalog(mesh: SceneMesh, per_shell=40, width=128, height=128, fov_deg=60.0) -> ViewCatalog:
    """Catalog on shells at 1.5x, 2x and 2.5x the bounding-sphere radius."""
    radius = 0.5 * mesh.diagonal
    return sample_view_catalog(
        mesh.center, [f * radius for f in SHELL_FACTORS], per_shell, width, height, fov_deg
    )
