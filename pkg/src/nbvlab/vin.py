"""View Introspection Network: conv encoder, MLP and CORAL ordinal head."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArtifactError, DimensionError, ParameterError
from .features import CHANNELS, FeatureBundle, make_bundle

NUM_CLASSES = 15
NUM_TASKS = NUM_CLASSES - 1
TANH_SCALE = 3.0
MAGIC = b"VINW"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Profile:
    name: str
    grid_res: int
    widths: tuple
    view_dim: int = 256
    hidden: int = 256
    max_stage: int = 20

    @property
    def pooled(self) -> int:
        return self.grid_res // 2

    @property
    def ident(self) -> str:
        w = "-".join(map(str, self.widths))
        return (
            f"{self.name}/g{self.grid_res}/w{w}/v{self.view_dim}/h{self.hidden}"
            f"/s{self.max_stage}/silu/coral{NUM_CLASSES}"
        )


PROFILES = {
    "desk": Profile("desk", 64, (16, 32, 64, 128)),
    "paper": Profile("paper", 512, (32, 64, 128, 256)),
    "micro": Profile("micro", 16, (2, 3, 4, 5), view_dim=6, hidden=8),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ParameterError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None


def signed_log(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


class VIN(nn.Module):
    def __init__(self, profile: Profile):
        super().__init__()
        self.profile = profile
        layers, c = [], 2 * CHANNELS
        for w in profile.widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.SiLU()]
            c = w
        self.encoder = nn.Sequential(*layers)
        self.project = nn.Linear(c, profile.view_dim)
        self.mlp = nn.Sequential(
            nn.Linear(profile.view_dim + 3, profile.hidden), nn.SiLU(),
            nn.Linear(profile.hidden, profile.hidden), nn.SiLU(),
        )
        self.coral_weight = nn.Linear(profile.hidden, 1, bias=False)
        # start from the balanced-class prior P(rank > j) = (14 - j) / 15
        prior = (NUM_TASKS - torch.arange(NUM_TASKS, dtype=torch.float64)) / NUM_CLASSES
        self.coral_bias = nn.Parameter(torch.logit(prior).float())

    def forward(self, grids: torch.Tensor, scalars: torch.Tensor) -> torch.Tensor:
        """Rank logits of shape ``(batch, 14)``.

        ``grids`` is ``(batch, 10, P, P)`` with variance channels first;
        ``scalars`` holds normalized (inside, outside, base count).
        """
        p = self.profile.pooled
        if grids.shape[1:] != (2 * CHANNELS, p, p) or scalars.shape[1:] != (3,):
            raise DimensionError(
                f"expected grids (*, {2 * CHANNELS}, {p}, {p}) and scalars (*, 3), "
                f"got {tuple(grids.shape)} and {tuple(scalars.shape)}"
            )
        view = self.encoder(signed_log(grids)).mean(dim=(2, 3))
        view = F.silu(self.project(view))
        hidden = self.mlp(torch.cat([view, scalars], dim=1))
        return self.coral_weight(hidden) + self.coral_bias

    @torch.no_grad()
    def sort_biases(self) -> None:
        self.coral_bias.copy_(torch.sort(self.coral_bias, descending=True).values)


def bundle_arrays(bundles: Sequence[FeatureBundle], profile: Profile) -> tuple[np.ndarray, np.ndarray]:
    """Stack bundles into ``(grids, scalars)`` float32 network inputs."""
    pixels = float(profile.grid_res ** 2)
    grids = np.stack([
        np.concatenate([b.f_v, b.f_p], axis=2).transpose(2, 0, 1) for b in bundles
    ]).astype(np.float32)
    scalars = np.array([
        (b.f_empty[0] / pixels, b.f_empty[1] / pixels, b.f_base / profile.max_stage) for b in bundles
    ], dtype=np.float32)
    return grids, scalars


def expected_rank(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits).sum(dim=-1)


def forward(model: VIN, bundle: FeatureBundle) -> tuple[np.ndarray, float]:
    """``(rank_logits, score)`` for one bundle; score is the expected rank in [0, 14]."""
    grids, scalars = bundle_arrays([bundle], model.profile)
    with torch.no_grad():
        logits = model(torch.from_numpy(grids), torch.from_numpy(scalars))[0]
    return logits.numpy().astype(np.float64), float(expected_rank(logits))


def coral_loss(logits, levels) -> torch.Tensor:
    """Summed binary cross-entropy over the rank tasks, one value per row."""
    logits = torch.as_tensor(logits)
    levels = torch.as_tensor(levels, dtype=logits.dtype)
    if logits.shape != levels.shape:
        raise DimensionError(f"logits {tuple(logits.shape)} vs levels {tuple(levels.shape)}")
    log_p = F.logsigmoid(logits)
    return -(log_p * levels + (log_p - logits) * (1 - levels)).sum(dim=-1)


@dataclass(frozen=True)
class OrdinalLabel:
    class_index: int

    def __post_init__(self):
        if not 0 <= self.class_index < NUM_CLASSES:
            raise ParameterError(f"class index {self.class_index} outside [0, {NUM_CLASSES - 1}]")

    @property
    def binary_targets(self) -> tuple:
        return tuple(j < self.class_index for j in range(NUM_TASKS))


def levels_from_classes(classes) -> np.ndarray:
    classes = np.asarray(classes)
    return (np.arange(NUM_TASKS)[None, :] < classes[:, None]).astype(np.float32)


def soft_z_scores(stages, rri) -> np.ndarray:
    """Per-stage z-scores soft-clipped with tanh(z / 3)."""
    stages = np.asarray(stages)
    rri = np.asarray(rri, dtype=np.float64)
    z = np.zeros(len(rri))
    for stage in np.unique(stages):
        group = stages == stage
        if group.sum() < NUM_CLASSES:
            raise ParameterError(
                f"stage {stage} has {int(group.sum())} samples; need at least {NUM_CLASSES}"
            )
        values = rri[group]
        std = values.std()
        z[group] = 0.0 if std < 1e-12 else (values - values.mean()) / std
    return np.tanh(z / TANH_SCALE)


def make_labels(samples: Sequence[tuple]) -> list[OrdinalLabel]:
    """Equal-count ordinal classes from ``(stage, raw_rri)`` pairs."""
    if len(samples) == 0:
        return []
    stages, rri = zip(*samples)
    clipped = soft_z_scores(stages, rri)
    order = np.argsort(clipped, kind="stable")
    classes = np.empty(len(order), dtype=np.int64)
    classes[order] = np.arange(len(order)) * NUM_CLASSES // len(order)
    return [OrdinalLabel(int(c)) for c in classes]


@dataclass
class TrainingSample:
    bundle: FeatureBundle
    label: OrdinalLabel
    stage: int
    raw_rri: float
    group: int = 0


@dataclass
class TrainingArrays:
    """Column-stored training set; ``group`` ids define per-object batches."""

    grids: np.ndarray
    scalars: np.ndarray
    classes: np.ndarray
    group: np.ndarray

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample], profile: Profile) -> "TrainingArrays":
        grids, scalars = bundle_arrays([s.bundle for s in samples], profile)
        return cls(
            grids, scalars,
            np.array([s.label.class_index for s in samples], dtype=np.int64),
            np.array([s.group for s in samples], dtype=np.int64),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    max_batch: int = 256


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    within1_acc: float


def predicted_class(logits: torch.Tensor) -> torch.Tensor:
    return (torch.sigmoid(logits) > 0.5).sum(dim=-1)


def _batches(group: np.ndarray, max_batch: int) -> list[np.ndarray]:
    batches = []
    for g in np.unique(group):
        idx = np.flatnonzero(group == g)
        batches += [idx[i:i + max_batch] for i in range(0, len(idx), max_batch)]
    return batches


def train(data, profile: Profile | str = "desk", config: TrainConfig = TrainConfig(),
          log=None) -> tuple[VIN, list[EpochStats]]:
    """Fit a VIN with AdamW and cosine annealing, one batch per object and stage.

    ``data`` is a TrainingArrays or a list of TrainingSample.  Biases are kept
    sorted in descending order after every step.
    """
    if isinstance(profile, str):
        profile = get_profile(profile)
    if len(data) == 0:
        raise ParameterError("training set is empty")
    if not isinstance(data, TrainingArrays):
        data = TrainingArrays.from_samples(list(data), profile)
    if config.epochs < 1:
        raise ParameterError("epochs must be at least 1")

    torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    model = VIN(profile)
    batches = _batches(data.group, config.max_batch)
    opt = torch.optim.AdamW(
        model.parameters(), lr=config.lr, betas=(0.9, 0.999), weight_decay=config.weight_decay
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs * len(batches), eta_min=0.0)
    levels_all = levels_from_classes(data.classes)
    history = []
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(batches))
        loss_sum, hits = 0.0, 0
        for b in order:
            idx = batches[b]
            grids = torch.from_numpy(np.asarray(data.grids[idx], dtype=np.float32))
            scalars = torch.from_numpy(np.asarray(data.scalars[idx], dtype=np.float32))
            levels = torch.from_numpy(levels_all[idx])
            logits = model(grids, scalars)
            per_sample = coral_loss(logits, levels)
            loss = per_sample.mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            model.sort_biases()
            loss_sum += float(per_sample.detach().sum())
            pred = predicted_class(logits.detach()).numpy()
            hits += int((np.abs(pred - data.classes[idx]) <= 1).sum())
        stats = EpochStats(epoch, loss_sum / len(data), hits / len(data))
        history.append(stats)
        if log is not None:
            log(stats)
    model.eval()
    return model, history


def write_history(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", "within1_acc"])
        for h in history:
            writer.writerow([h.epoch, repr(h.mean_loss), repr(h.within1_acc)])


def predict_scores(model: VIN, bundles: Sequence[FeatureBundle]) -> np.ndarray:
    grids, scalars = bundle_arrays(bundles, model.profile)
    with torch.no_grad():
        logits = model(torch.from_numpy(grids), torch.from_numpy(scalars))
    return expected_rank(logits).numpy().astype(np.float64)


def predict_rri_score(model: VIN, state, cam_q) -> float:
    return forward(model, make_bundle(state, cam_q, model.profile.grid_res))[1]


class VinCriterion:
    kind = "vin"

    def __init__(self, model: VIN):
        self.model = model

    def scores(self, sim, state, indices) -> np.ndarray:
        g = self.model.profile.grid_res
        bundles = [make_bundle(state, sim.camera(i), g) for i in indices]
        return predict_scores(self.model, bundles)


def save_checkpoint(model: VIN, path) -> None:
    """Write parameters in the versioned little-endian VINW format."""
    ident = model.profile.ident.encode()
    state = model.state_dict()
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(ident)), ident, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        raw = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> VIN:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from None
    if data[:4] != MAGIC:
        raise ArtifactError(f"{path}: not a VIN checkpoint")
    pos = 4
    version, nid = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version {version}")
    ident = data[pos:pos + nid].decode()
    pos += nid
    profile = next((p for p in PROFILES.values() if p.ident == ident), None)
    if profile is None:
        raise ArtifactError(f"{path}: unknown profile id {ident!r}")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = 4 * math.prod(shape)
        arr = np.frombuffer(data[pos:pos + size], dtype="<f4").reshape(shape)
        pos += size
        tensors[name] = torch.from_numpy(arr.copy())
    model = VIN(profile)
    model.load_state_dict(tensors)
    model.eval()
    return model


def finite_difference_check(model: VIN, grids, scalars, levels, eps: float = 1e-3) -> dict[str, float]:
    """Relative error between autograd and central differences, per parameter tensor.

    Runs on a float64 copy of ``model``; intended for micro-profile sizes.
    """
    m = VIN(model.profile).double()
    m.load_state_dict({k: v.double() for k, v in model.state_dict().items()})
    grids = torch.as_tensor(grids, dtype=torch.float64)
    scalars = torch.as_tensor(scalars, dtype=torch.float64)
    levels = torch.as_tensor(levels, dtype=torch.float64)

    def loss_fn():
        return coral_loss(m(grids, scalars), levels).mean()

    m.zero_grad()
    loss_fn().backward()
    errors = {}
    with torch.no_grad():
        for name, param in m.named_parameters():
            analytic = param.grad.detach().clone().reshape(-1)
            numeric = torch.zeros_like(analytic)
            flat = param.data.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
            scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
            errors[name] = float((analytic - numeric).norm()) / scale
    return errors
