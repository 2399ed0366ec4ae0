"""Pipeline stages behind the CLI subcommands.

Every stage writes per-scene files first and merges them single-threaded in
scene order, so outputs do not depend on the worker count.
"""
from __future__ import annotations

import csv
import functools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .. import __version__
from ..errors import ArtifactError, ParameterError
from ..features import make_bundle
from ..io import write_obj, write_pgm, write_ply
from ..policy import (
    CoverageCriterion, OracleCriterion, RandomCriterion, Simulator, TerminationCriteria,
    init_state, read_rollout_csv, run_policy,
)
from ..scenes import generate_scene, sample_view_catalog
from .config import ExperimentConfig, dump_config, subseed

log = logging.getLogger("nbvlab")

LABEL_FIELDS = ("stage", "view", "rri", "inside", "outside", "f_base")
AGG_FIELDS = ("constraint", "criterion", "step", "n_scenes", "mean_cd_cm", "mean_coverage_pct", "mean_f1", "mean_path_m")


def scene_id(category: str, seed: int) -> str:
    return f"{category}-{seed:05d}"


def make_simulator(config: ExperimentConfig, category: str, seed: int) -> Simulator:
    mesh = generate_scene(category, seed, config.scenes.target_size)
    cat = config.catalog
    radius = 0.5 * mesh.diagonal
    catalog = sample_view_catalog(
        mesh.center, [f * radius for f in cat.shell_factors], cat.per_shell,
        cat.resolution, cat.resolution, cat.fov_deg,
    )
    return Simulator(mesh, catalog, config.scenes.gt_points, subseed(seed, "gt"))


def _pmap(fn: Callable, items: Iterable, workers: int) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Manifest:
    """``manifest.json`` in the run directory, updated by every command."""

    def __init__(self, config: ExperimentConfig):
        self.path = config.out / "manifest.json"
        self.data = {}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        if self.data.get("config_hash") != config.digest():
            self.data = {"config_hash": config.digest(), "scenes": {}, "timings": {}, "files": {}}
        self.data["code_version"] = __version__

    def record_scene(self, sid: str, category: str, seed: int, files: list[str]) -> None:
        entry = self.data["scenes"].setdefault(sid, {"category": category, "seed": seed, "files": []})
        entry["files"] = sorted(set(entry["files"]) | set(files))

    def record_files(self, command: str, files: list[str]) -> None:
        self.data["files"][command] = sorted(files)

    def save(self, command: str, seconds: float) -> None:
        self.data["timings"][command] = round(seconds, 3)
        root = self.path.parent
        referenced = [f for e in self.data["scenes"].values() for f in e["files"]]
        referenced += [f for files in self.data["files"].values() for f in files]
        missing = [f for f in referenced if not (root / f).exists()]
        if missing:
            raise ArtifactError(f"manifest references missing files: {missing[:5]}")
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _prepare(config: ExperimentConfig) -> None:
    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / "config.yaml").write_text(dump_config(config))


def _timed(command: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(config: ExperimentConfig, *args, **kwargs):
            _prepare(config)
            start = time.perf_counter()
            manifest = Manifest(config)
            result = fn(config, manifest, *args, **kwargs)
            manifest.save(command, time.perf_counter() - start)
            return result
        return run
    return wrap


# gen-scenes ---------------------------------------------------------------

def _gen_scene(args) -> tuple[str, list[str]]:
    config, category, seed = args
    sid = scene_id(category, seed)
    sim = make_simulator(config, category, seed)
    rel = Path("scenes") / sid
    (config.out / rel).mkdir(parents=True, exist_ok=True)
    write_obj(config.out / rel / "mesh.obj", sim.mesh.vertices, sim.mesh.triangles)
    write_ply(config.out / rel / "gt.ply", sim.gt)
    return sid, [str(rel / "mesh.obj"), str(rel / "gt.ply")]


@_timed("gen-scenes")
def cmd_gen_scenes(config: ExperimentConfig, manifest: Manifest) -> list[str]:
    scenes = config.scenes.train.scenes() + config.scenes.eval.scenes()
    results = _pmap(_gen_scene, [(config, c, s) for c, s in scenes], config.workers)
    for (category, seed), (sid, files) in zip(scenes, results):
        manifest.record_scene(sid, category, seed, files)
    return [sid for sid, _ in results]


# gen-labels ---------------------------------------------------------------

def label_scene(config: ExperimentConfig, category: str, seed: int, dump_dir: Path | None = None):
    """Oracle RRI and feature bundle for every unvisited view at each stage.

    The base trajectory follows the oracle's own greedy choice.  With
    ``dump_dir`` set, each candidate's pooled depth channel is saved as PGM.
    """
    from ..vin import bundle_arrays, get_profile

    profile = get_profile(config.profile)
    sim = make_simulator(config, category, seed)
    state = init_state(sim, subseed(config.seed, "init", seed))
    oracle = OracleCriterion()
    rows, grids = [], []
    for stage in range(2, config.labels.max_stage + 1):
        visited = set(state.visited)
        cands = [i for i in range(len(sim.catalog)) if i not in visited]
        rri = oracle.scores(sim, state, cands)
        bundles = [make_bundle(state, sim.camera(i), profile.grid_res) for i in cands]
        g, _ = bundle_arrays(bundles, profile)
        grids.append(g.astype(np.float16))
        for i, r, b in zip(cands, rri, bundles):
            rows.append((stage, i, float(r), b.f_empty[0], b.f_empty[1], b.f_base))
            if dump_dir is not None:
                write_pgm(dump_dir / f"stage{stage}-view{i:03d}.pgm", b.f_p[:, :, 4])
        if stage < config.labels.max_stage:
            best = cands[int(np.argmax(rri))]
            state = sim.capture(state, best)
    return rows, np.concatenate(grids)


def _gen_labels_scene(args) -> list[str]:
    config, category, seed, dump_grids = args
    sid = scene_id(category, seed)
    rel = Path("labels") / sid
    (config.out / rel).mkdir(parents=True, exist_ok=True)
    dump_dir = None
    if dump_grids:
        dump_dir = config.out / rel / "grids"
        dump_dir.mkdir(exist_ok=True)
    rows, grids = label_scene(config, category, seed, dump_dir)
    with open(config.out / rel / "records.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_FIELDS)
        for stage, view, rri, inside, outside, f_base in rows:
            writer.writerow([stage, view, repr(rri), inside, outside, f_base])
    np.save(config.out / rel / "grids.npy", grids)
    return [str(rel / "records.csv"), str(rel / "grids.npy")]


@_timed("gen-labels")
def cmd_gen_labels(config: ExperimentConfig, manifest: Manifest, dump_grids: bool = False) -> int:
    scenes = config.scenes.train.scenes()
    results = _pmap(_gen_labels_scene, [(config, c, s, dump_grids) for c, s in scenes], config.workers)
    total = 0
    for (category, seed), files in zip(scenes, results):
        manifest.record_scene(scene_id(category, seed), category, seed, files)
        total += len(read_label_records(config.out / files[0]))
    log.info("labelled %d records over %d scenes", total, len(scenes))
    return total


def read_label_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_label_dataset(config: ExperimentConfig):
    """Concatenate every training scene's records into TrainingArrays."""
    from ..vin import TrainingArrays, get_profile, make_labels

    profile = get_profile(config.profile)
    pixels = float(profile.grid_res ** 2)
    grids, scalars, stages, rri, groups = [], [], [], [], []
    for k, (category, seed) in enumerate(config.scenes.train.scenes()):
        base = config.out / "labels" / scene_id(category, seed)
        if not (base / "records.csv").exists():
            raise ArtifactError(f"missing label records for {base.name}; run gen-labels first")
        records = read_label_records(base / "records.csv")
        grids.append(np.load(base / "grids.npy"))
        for r in records:
            stage = int(r["stage"])
            stages.append(stage)
            rri.append(float(r["rri"]))
            scalars.append((int(r["inside"]) / pixels, int(r["outside"]) / pixels,
                            int(r["f_base"]) / profile.max_stage))
            groups.append(k * 1000 + stage)
    labels = make_labels(list(zip(stages, rri)))
    return TrainingArrays(
        np.concatenate(grids), np.array(scalars, dtype=np.float32),
        np.array([lab.class_index for lab in labels], dtype=np.int64), np.array(groups, dtype=np.int64),
    )


# train --------------------------------------------------------------------

@_timed("train")
def cmd_train(config: ExperimentConfig, manifest: Manifest):
    from ..vin import TrainConfig, save_checkpoint, train, write_history

    data = load_label_dataset(config)
    tc = TrainConfig(
        epochs=config.training.epochs, lr=config.training.lr,
        weight_decay=config.training.weight_decay, seed=subseed(config.seed, "train"),
    )
    model, history = train(
        data, config.profile, tc,
        log=lambda s: log.info("epoch %d loss %.4f within1 %.3f", s.epoch, s.mean_loss, s.within1_acc),
    )
    (config.out / "model").mkdir(exist_ok=True)
    save_checkpoint(model, config.out / "model" / "vin.ckpt")
    write_history(config.out / "model" / "train.csv", history)
    manifest.record_files("train", ["model/vin.ckpt", "model/train.csv"])
    return model, history


# rollout ------------------------------------------------------------------

@functools.lru_cache(maxsize=4)
def _load_model(path: str):
    from ..vin import load_checkpoint

    return load_checkpoint(path)


def make_criterion(kind: str, config: ExperimentConfig, scene_seed: int):
    if kind == "random":
        return RandomCriterion(subseed(config.seed, "random", scene_seed))
    if kind == "coverage":
        return CoverageCriterion()
    if kind == "oracle":
        return OracleCriterion()
    if kind == "vin":
        from ..vin import VinCriterion

        ckpt = config.out / "model" / "vin.ckpt"
        if not ckpt.exists():
            raise ArtifactError(f"vin criterion needs a checkpoint at {ckpt}; run train first")
        return VinCriterion(_load_model(str(ckpt)))
    raise ParameterError(f"unknown criterion {kind!r}")


def termination(c) -> TerminationCriteria:
    return TerminationCriteria(c.max_captures, c.time_budget, c.speed, c.min_clearance)


def _rollout_scene(args) -> list[str]:
    config, category, seed = args
    sid = scene_id(category, seed)
    sim = make_simulator(config, category, seed)
    files = []
    for constraint in config.rollout.constraints:
        for kind in config.rollout.criteria:
            rel = Path("rollouts") / constraint.name / kind
            (config.out / rel).mkdir(parents=True, exist_ok=True)
            record = run_policy(
                sim, make_criterion(kind, config, seed), termination(constraint),
                subseed(config.seed, "init", seed), config.rollout.candidate_limit,
            )
            record.write_csv(config.out / rel / f"{sid}.csv")
            write_ply(config.out / rel / f"{sid}.ply", record.final.reconstruction)
            files += [str(rel / f"{sid}.csv"), str(rel / f"{sid}.ply")]
    return files


def aggregate(per_scene: list[list[dict]]) -> list[dict]:
    """Mean metrics per step over the scenes that reached that step."""
    by_step: dict[int, list[dict]] = {}
    for rows in per_scene:
        for r in rows:
            by_step.setdefault(int(r["step"]), []).append(r)
    out = []
    for step in sorted(by_step):
        rows = by_step[step]
        n = len(rows)
        out.append({
            "step": step, "n_scenes": n,
            "mean_cd_cm": sum(float(r["cd_cm"]) for r in rows) / n,
            "mean_coverage_pct": sum(float(r["coverage_pct"]) for r in rows) / n,
            "mean_f1": sum(float(r["f1"]) for r in rows) / n,
            "mean_path_m": sum(float(r["path_m"]) for r in rows) / n,
        })
    return out


@_timed("rollout")
def cmd_rollout(config: ExperimentConfig, manifest: Manifest) -> Path:
    scenes = config.scenes.eval.scenes()
    if "vin" in config.rollout.criteria and not (config.out / "model" / "vin.ckpt").exists():
        raise ArtifactError("vin criterion requested but no checkpoint found; run train first")
    results = _pmap(_rollout_scene, [(config, c, s) for c, s in scenes], config.workers)
    for (category, seed), files in zip(scenes, results):
        manifest.record_scene(scene_id(category, seed), category, seed, files)
    agg_path = config.out / "rollouts" / "aggregate.csv"
    with open(agg_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGG_FIELDS)
        for constraint in config.rollout.constraints:
            for kind in config.rollout.criteria:
                per_scene = [
                    read_rollout_csv(config.out / "rollouts" / constraint.name / kind / f"{scene_id(c, s)}.csv")
                    for c, s in scenes
                ]
                for row in aggregate(per_scene):
                    writer.writerow([constraint.name, kind] + [
                        row[k] if isinstance(row[k], int) else repr(row[k]) for k in AGG_FIELDS[2:]
                    ])
    manifest.record_files("rollout", ["rollouts/aggregate.csv"])
    return agg_path


# report -------------------------------------------------------------------

def final_cd(config: ExperimentConfig, constraint: str, kind: str) -> float:
    values = []
    for c, s in config.scenes.eval.scenes():
        rows = read_rollout_csv(config.out / "rollouts" / constraint / kind / f"{scene_id(c, s)}.csv")
        values.append(float(rows[-1]["cd_cm"]))
    return sum(values) / len(values)


@_timed("report")
def cmd_report(config: ExperimentConfig, manifest: Manifest) -> str:
    rows = []
    for constraint in config.rollout.constraints:
        finals = {}
        for kind in config.rollout.criteria:
            path = config.out / "rollouts" / constraint.name / kind
            if not path.exists():
                raise ArtifactError(f"no rollouts under {path}; run rollout first")
            finals[kind] = final_cd(config, constraint.name, kind)
        for kind, cd in finals.items():
            vs_cov = (finals["coverage"] - cd) / finals["coverage"] if "coverage" in finals else float("nan")
            vs_rand = (finals["random"] - cd) / finals["random"] if "random" in finals else float("nan")
            rows.append((constraint.name, kind, cd, vs_cov, vs_rand))
    with open(config.out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["constraint", "criterion", "final_cd_cm", "rel_vs_coverage", "rel_vs_random"])
        for r in rows:
            writer.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4])])
    lines = [f"{'constraint':<14}{'criterion':<10}{'CD (cm)':>10}{'vs cov':>10}{'vs rand':>10}"]
    for name, kind, cd, vc, vr in rows:
        lines.append(f"{name:<14}{kind:<10}{cd:>10.3f}{100 * vc:>9.1f}%{100 * vr:>9.1f}%")
    text = "\n".join(lines) + "\n"
    (config.out / "report.txt").write_text(text)
    manifest.record_files("report", ["report.csv", "report.txt"])
    return text

