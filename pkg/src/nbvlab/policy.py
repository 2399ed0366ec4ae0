"""Greedy next-best-view loop with pluggable fitness criteria."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError
from .geom import (
    NORMAL_K, CameraView, ChamferReference, PointCloud, backproject, coverage_pct,
    default_tau, estimate_normals, f1_score, voxel_downsample,
)
from .render import default_radius, project_points, render_depth, visibility_counts
from .scenes import SceneMesh, ViewCatalog, sample_gt_cloud

MPH4 = 1.78816  # 4 mph in m/s
VOXEL_FRACTION = 0.01


def _same_view(a: tuple, b: tuple) -> bool:
    (ca, da), (cb, db) = a, b
    return (
        ca is cb or (
            (ca.fx, ca.fy, ca.cx, ca.cy, ca.width, ca.height) == (cb.fx, cb.fy, cb.cx, cb.cy, cb.width, cb.height)
            and np.array_equal(ca.rotation, cb.rotation)
            and np.array_equal(ca.translation, cb.translation)
        )
    ) and (da is db or np.array_equal(da, db))


def fuse_views(views: Sequence[tuple], voxel: float, clouds: Optional[Sequence[PointCloud]] = None) -> PointCloud:
    """Back-project ``(camera, depth)`` pairs and voxel-merge them.

    Exact duplicate views are dropped first so that re-adding a view leaves
    the fused positions bit-identical.  ``clouds`` optionally supplies the
    already back-projected clouds of ``views``.
    """
    keep = []
    for i, view in enumerate(views):
        if not any(_same_view(view, views[j]) for j in keep):
            keep.append(i)
    parts = []
    for i in keep:
        cloud = clouds[i] if clouds is not None else backproject(views[i][1], views[i][0])
        parts.append((cloud.points, np.full(len(cloud), i)))
    points = np.concatenate([p for p, _ in parts]) if parts else np.zeros((0, 3))
    source = np.concatenate([s for _, s in parts]) if parts else np.zeros(0, dtype=np.int64)
    return voxel_downsample(PointCloud(points, source_view=source), voxel)


def enrich(cloud: PointCloud, cams: Sequence[CameraView]) -> PointCloud:
    """Attach sensor-facing normals and base-view visibility counts."""
    if len(cloud) == 0:
        return PointCloud(cloud.points, np.zeros((0, 3)), np.zeros(0, dtype=np.int64), cloud.source_view)
    origins = np.array([c.center for c in cams])[cloud.source_view]
    if len(cloud) > NORMAL_K:
        cloud = estimate_normals(cloud, NORMAL_K, origins)
    else:
        to_sensor = origins - cloud.points
        cloud = PointCloud(
            cloud.points, to_sensor / np.linalg.norm(to_sensor, axis=1, keepdims=True),
            None, cloud.source_view,
        )
    return visibility_counts(cloud, cams, default_radius(cams[0].width))


@dataclass(frozen=True, eq=False)
class CaptureState:
    base_views: tuple
    reconstruction: PointCloud
    visited: tuple
    agent_position: np.ndarray
    path_length: float
    elapsed_motion_time: float
    base_clouds: tuple = field(repr=False, default=())

    @property
    def base_cams(self) -> list:
        return [cam for cam, _ in self.base_views]


def build_state(views, visited, positions, voxel, speed=MPH4, clouds=None) -> CaptureState:
    """Deterministic rebuild of a capture state from its ordered captures."""
    views = tuple(views)
    if clouds is None:
        clouds = tuple(backproject(d, c, i) for i, (c, d) in enumerate(views))
    recon = enrich(fuse_views(views, voxel, clouds), [c for c, _ in views])
    path = 0.0
    for a, b in zip(positions, positions[1:]):
        path += float(np.linalg.norm(np.asarray(b) - np.asarray(a)))
    return CaptureState(
        views, recon, tuple(visited), np.asarray(positions[-1], dtype=np.float64),
        path, path / speed, tuple(clouds),
    )


class Simulator:
    """Ground-truth side of an episode: renders and caches catalog captures."""

    def __init__(self, mesh: SceneMesh, catalog: ViewCatalog, gt_points: int = 10000,
                 gt_seed: int = 0, voxel: Optional[float] = None):
        self.mesh = mesh
        self.catalog = catalog
        self.gt = sample_gt_cloud(mesh, gt_points, gt_seed)
        self.gt_ref = ChamferReference(self.gt)
        self.voxel = voxel if voxel is not None else VOXEL_FRACTION * mesh.diagonal
        self.tau = default_tau(self.gt)
        self._depth: dict[int, np.ndarray] = {}
        self._cloud: dict[int, PointCloud] = {}

    def __len__(self) -> int:
        return len(self.catalog)

    def camera(self, index: int) -> CameraView:
        return self.catalog.views[index]

    def depth(self, index: int) -> np.ndarray:
        if index not in self._depth:
            self._depth[index] = render_depth(self.mesh, self.catalog.views[index])
        return self._depth[index]

    def render(self, cam: CameraView) -> np.ndarray:
        return render_depth(self.mesh, cam)

    def cloud(self, index: int) -> PointCloud:
        if index not in self._cloud:
            self._cloud[index] = backproject(self.depth(index), self.camera(index))
        return self._cloud[index]

    def state_for(self, visited: Sequence[int], speed: float = MPH4) -> CaptureState:
        views = [(self.camera(i), self.depth(i)) for i in visited]
        positions = [self.camera(i).center for i in visited]
        return build_state(views, visited, positions, self.voxel, speed, [self.cloud(i) for i in visited])

    def capture(self, state: CaptureState, index: int, speed: float = MPH4) -> CaptureState:
        cam = self.camera(index)
        views = state.base_views + ((cam, self.depth(index)),)
        clouds = state.base_clouds + (self.cloud(index),)
        recon = enrich(fuse_views(views, self.voxel, clouds), [c for c, _ in views])
        path = state.path_length + float(np.linalg.norm(cam.center - state.agent_position))
        return CaptureState(
            views, recon, state.visited + (index,), cam.center.copy(), path, path / speed, clouds
        )

    def candidate_cd(self, state: CaptureState, index: int) -> float:
        """Chamfer distance to ground truth after adding catalog view ``index``."""
        views = state.base_views + ((self.camera(index), self.depth(index)),)
        clouds = state.base_clouds + (self.cloud(index),)
        return self.gt_ref(fuse_views(views, self.voxel, clouds))

    def metrics(self, cloud: PointCloud) -> tuple[float, float, float]:
        if len(cloud) == 0:
            return float("inf"), 0.0, 0.0
        return self.gt_ref(cloud), coverage_pct(cloud, self.gt, self.tau), f1_score(cloud, self.gt, self.tau)


def init_state(sim: Simulator, seed: int, speed: float = MPH4) -> CaptureState:
    """Random first view plus its nearest catalog neighbour."""
    n = len(sim.catalog)
    if n < 2:
        raise ParameterError("catalog needs at least two views")
    first = int(np.random.default_rng(seed).integers(n))
    pos = sim.catalog.positions
    dist = np.linalg.norm(pos - pos[first], axis=1)
    dist[first] = np.inf
    second = int(np.argmin(dist))
    return sim.state_for([first, second], speed)


def coverage_fitness(state: CaptureState, cam_q: CameraView, radius_px: Optional[float] = None) -> float:
    """Number of pixels of ``cam_q`` left empty by the current reconstruction."""
    if radius_px is None:
        radius_px = default_radius(cam_q.width)
    occupied = project_points(state.reconstruction, cam_q, radius_px).occupied
    return float(cam_q.width * cam_q.height - int(occupied.sum()))


def oracle_rri(state: CaptureState, cam_q: CameraView, gt_cloud, renderer, voxel: float,
               base_cd: Optional[float] = None) -> float:
    """Relative Chamfer improvement from actually capturing ``cam_q``.

    ``renderer`` maps a camera to its ground-truth depth image; ``gt_cloud``
    is a PointCloud or a prepared ChamferReference.
    """
    ref = gt_cloud if isinstance(gt_cloud, ChamferReference) else ChamferReference(gt_cloud)
    before = ref(state.reconstruction) if base_cd is None else base_cd
    if before <= 0:
        warnings.warn("base reconstruction already matches ground truth; RRI set to 0")
        return 0.0
    depth = renderer(cam_q)
    views = state.base_views + ((cam_q, depth),)
    clouds = state.base_clouds + (backproject(depth, cam_q),) if state.base_clouds else None
    after = ref(fuse_views(views, voxel, clouds))
    return (before - after) / before


class CoverageCriterion:
    kind = "coverage"

    def scores(self, sim: Simulator, state: CaptureState, indices: Sequence[int]) -> np.ndarray:
        return np.array([coverage_fitness(state, sim.camera(i)) for i in indices])


class OracleCriterion:
    kind = "oracle_rri"

    def scores(self, sim: Simulator, state: CaptureState, indices: Sequence[int]) -> np.ndarray:
        before = sim.gt_ref(state.reconstruction)
        if before <= 0:
            return np.zeros(len(indices))
        return np.array([(before - sim.candidate_cd(state, i)) / before for i in indices])


class RandomCriterion:
    kind = "random"

    def __init__(self, seed: int):
        self.seed = seed

    def scores(self, sim: Simulator, state: CaptureState, indices: Sequence[int]) -> np.ndarray:
        draw = np.random.default_rng([self.seed, len(state.base_views)]).random(len(sim.catalog))
        return draw[np.asarray(indices, dtype=np.int64)]


def select_next(sim: Simulator, state: CaptureState, candidates: Sequence[int], criterion):
    """Highest-scoring candidate, ties to the smallest catalog index.

    Returns ``(index, score)`` or ``None`` when there is nothing to choose.
    """
    if len(candidates) == 0:
        return None
    ordered = sorted(candidates)
    scores = np.asarray(criterion.scores(sim, state, ordered), dtype=np.float64)
    best = int(np.argmax(scores))
    return ordered[best], float(scores[best])


@dataclass(frozen=True)
class TerminationCriteria:
    max_captures: Optional[int] = None
    time_budget: Optional[float] = None
    speed: float = MPH4
    min_clearance: Optional[float] = None

    def __post_init__(self):
        if self.max_captures is None and self.time_budget is None:
            raise ParameterError("set max_captures, time_budget or both")
        if not self.speed > 0:
            raise ParameterError("speed must be positive")


def segment_point_distance(a: np.ndarray, b: np.ndarray, points: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def feasible(state: CaptureState, cam_q: CameraView, term: TerminationCriteria) -> bool:
    target = cam_q.center
    if term.time_budget is not None:
        step = float(np.linalg.norm(target - state.agent_position))
        if state.path_length + step > term.speed * term.time_budget:
            return False
    if term.min_clearance is not None and len(state.reconstruction):
        gap = segment_point_distance(state.agent_position, target, state.reconstruction.points)
        if gap.min() < term.min_clearance:
            return False
    return True


@dataclass
class StepRecord:
    step: int
    chosen_view: int
    fitness: Optional[float]
    cd_cm: float
    coverage_pct: float
    f1: float
    path_m: float
    time_s: float
    points: int


CSV_FIELDS = ("step", "chosen_view", "fitness", "cd_cm", "coverage_pct", "f1", "path_m", "time_s")


@dataclass
class RolloutRecord:
    criterion: str
    steps: list
    final: CaptureState

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_FIELDS)
            for s in self.steps:
                writer.writerow([
                    s.step, s.chosen_view, "" if s.fitness is None else repr(s.fitness),
                    repr(s.cd_cm), repr(s.coverage_pct), repr(s.f1), repr(s.path_m), repr(s.time_s),
                ])


def _record(sim: Simulator, state: CaptureState, fitness) -> StepRecord:
    cd, cov, f1 = sim.metrics(state.reconstruction)
    return StepRecord(
        len(state.base_views), state.visited[-1], fitness, 100.0 * cd, cov, f1,
        state.path_length, state.elapsed_motion_time, len(state.reconstruction),
    )


def run_policy(sim: Simulator, criterion, term: TerminationCriteria, seed: int,
               candidate_limit: Optional[int] = None) -> RolloutRecord:
    """Capture greedily until the budget, the catalog or feasibility runs out."""
    state = init_state(sim, seed, term.speed)
    steps = [_record(sim, state, None)]
    sampler = np.random.default_rng([seed, 7])
    while term.max_captures is None or len(state.base_views) < term.max_captures:
        visited = set(state.visited)
        candidates = [
            i for i in range(len(sim.catalog))
            if i not in visited and feasible(state, sim.camera(i), term)
        ]
        if candidate_limit is not None and len(candidates) > candidate_limit:
            candidates = sorted(sampler.choice(candidates, candidate_limit, replace=False).tolist())
        choice = select_next(sim, state, candidates, criterion)
        if choice is None:
            break
        index, score = choice
        state = sim.capture(state, index, term.speed)
        steps.append(_record(sim, state, score))
    return RolloutRecord(criterion.kind, steps, state)


def read_rollout_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

