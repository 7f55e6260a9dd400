"""Adapter fine-tuning for gaze regression.

Two phases mirror how the model is deployed:

* generalized: all adapters are tuned on a multi-subject dataset with
  cluster-balanced sampling (k-means over gaze labels, round-robin draws),
  after a single head-only warmup epoch that gives the regression head a
  usable starting point.
* personalized: exactly five calibration shots from one subject tune only the
  final-stage adapters; every step replays a balanced handful of generalized
  samples so the model does not forget the population.

Angles are (pitch, yaw) in radians throughout; errors are reported in degrees
between the corresponding 3D gaze vectors.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
from pathlib import Path

import numpy as np

from . import ops
from .dataio import GazeDataset, GazeSample
from .errors import ConfigError, DataError
from .models import GazeModel, adapter_param_count, backbone_hash
from .optim import AdamW
from .tensor import Tensor, no_grad

# -- metrics ------------------------------------------------------------------


def gaze_to_vector(angles: np.ndarray) -> np.ndarray:
    """(pitch, yaw) radians -> unit 3D gaze vector, computed in 64-bit."""
    a = np.asarray(angles, np.float64)
    pitch, yaw = a[..., 0], a[..., 1]
    return np.stack(
        [np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)], axis=-1
    )


def angular_error(pred, truth) -> float:
    """Angle in degrees between two gaze directions given as (pitch, yaw)."""
    return float(angular_error_batch(np.asarray(pred)[None], np.asarray(truth)[None])[0])


def angular_error_batch(preds: np.ndarray, truths: np.ndarray) -> np.ndarray:
    vp = gaze_to_vector(preds)
    vt = gaze_to_vector(truths)
    dots = np.clip(np.sum(vp * vt, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


# -- clustering and balanced sampling -----------------------------------------


@dataclasses.dataclass
class ClusterModel:
    """K-means result over (pitch, yaw) labels; a Lloyd fixed point."""

    k: int
    centroids: np.ndarray  # (k, 2) float64
    assignments: np.ndarray  # (n,) int64, nearest-centroid ids

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster_id)


def _labels_of(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.asarray(samples, np.float64)
    return np.array([s.gaze for s in samples], np.float64)


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, 2), np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans_cluster(samples, k: int = 15, seed: int = 0, max_iter: int = 100) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding over gaze labels.

    Converges when assignments stop changing; an emptied cluster is re-seeded
    with the point currently farthest from its own centroid.
    """
    points = _labels_of(samples)
    n = len(points)
    if n < k:
        raise DataError(f"k-means needs at least k={k} samples, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC1A5]))
    centroids = _kmeanspp_init(points, k, rng)
    assignments = _assign(points, centroids)
    for _ in range(max_iter):
        for cid in range(k):
            members = points[assignments == cid]
            if len(members):
                centroids[cid] = members.mean(axis=0)
            else:
                dist = ((points - centroids[assignments]) ** 2).sum(axis=1)
                centroids[cid] = points[int(dist.argmax())]
        new_assignments = _assign(points, centroids)
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
    return ClusterModel(k=k, centroids=centroids, assignments=assignments.astype(np.int64))


def balanced_batches(cluster: ClusterModel, batch_size: int, seed: int = 0):
    """Endless stream of index batches, round-robin over non-empty clusters.

    Each cluster keeps its own shuffled queue and is reshuffled on exhaustion,
    so over any window of draws the per-cluster counts differ by at most one.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBA7C]))
    live = [cid for cid in range(cluster.k) if len(cluster.members(cid))]
    if not live:
        raise DataError("balanced_batches: every cluster is empty")
    queues = {cid: list(rng.permutation(cluster.members(cid))) for cid in live}

    def draws():
        for cid in itertools.cycle(live):
            if not queues[cid]:
                queues[cid] = list(rng.permutation(cluster.members(cid)))
            yield int(queues[cid].pop())

    stream = draws()
    while True:
        yield [next(stream) for _ in range(batch_size)]


# -- shared training plumbing --------------------------------------------------


def predict_gaze(model: GazeModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode batched forward; returns (n, 2) predicted (pitch, yaw)."""
    model.eval()
    outputs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model.forward_gaze(Tensor(images[start : start + batch_size]))
            outputs.append(out.data)
    return np.concatenate(outputs, axis=0)


@dataclasses.dataclass
class EvalReport:
    n: int
    mean_deg: float
    median_deg: float
    per_subject: dict  # subject_id -> (n, mean_deg, median_deg)


def evaluate(model: GazeModel, samples: list, batch_size: int = 64) -> EvalReport:
    if not samples:
        raise DataError("evaluate: empty sample set")
    images = np.stack([s.image for s in samples])
    truths = np.array([s.gaze for s in samples], np.float64)
    preds = predict_gaze(model, images, batch_size)
    errors = angular_error_batch(preds, truths)
    per_subject = {}
    for sid in sorted({s.subject_id for s in samples}):
        e = errors[[i for i, s in enumerate(samples) if s.subject_id == sid]]
        per_subject[sid] = (len(e), float(e.mean()), float(np.median(e)))
    return EvalReport(
        n=len(samples),
        mean_deg=float(errors.mean()),
        median_deg=float(np.median(errors)),
        per_subject=per_subject,
    )


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "n", "mean_deg", "median_deg"])
        for sid, (n, mean_deg, median_deg) in report.per_subject.items():
            w.writerow([sid, n, f"{mean_deg:.4f}", f"{median_deg:.4f}"])
        w.writerow(["ALL", report.n, f"{report.mean_deg:.4f}", f"{report.median_deg:.4f}"])


def _snapshot(model: GazeModel, keep) -> dict:
    return {name: p.data.copy() for name, p in model.named_parameters() if keep(name)}


def _restore(model: GazeModel, snapshot: dict) -> None:
    for name, p in model.named_parameters():
        if name in snapshot:
            p.data[...] = snapshot[name]


def _train_step(model: GazeModel, optimizer: AdamW, images: np.ndarray, targets: np.ndarray) -> float:
    model.train()
    pred = model.forward_gaze(Tensor(images))
    loss = ops.l1_loss(pred, Tensor(targets.astype(np.float32)))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


# -- generalized phase ---------------------------------------------------------


@dataclasses.dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 15
    warmup_epochs: int = 1
    warmup_lr: float = 5e-3
    weight_decay: float = 0.05
    k: int = 15
    seed: int = 0

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls(**_read_kv_config(path, cls))


@dataclasses.dataclass
class PersonalizeConfig:
    lr: float = 1e-3
    epochs: int = 50
    replay_r: int = 15
    patience: int = 15
    warmup: int = 10
    weight_decay: float = 0.05
    seed: int = 0

    @classmethod
    def from_file(cls, path) -> "PersonalizeConfig":
        return cls(**_read_kv_config(path, cls))


def _read_kv_config(path, cls) -> dict:
    """Flat `key=value` config file; unknown keys are rejected."""
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
        caster = int if fields[key] == "int" else float
        try:
            out[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{ln}: bad value for {key}: {value!r}") from exc
    return out


@dataclasses.dataclass
class TrainReport:
    tunable_params: int
    epochs_run: int
    best_epoch: int
    val_mean_deg: float
    val_history: list
    train_losses: list
    backbone_hash_before: str
    backbone_hash_after: str


def train_generalized(model: GazeModel, dataset: GazeDataset, config: TrainConfig | None = None):
    """Tune all adapters (plus a one-epoch head warmup) with L1 gaze loss.

    Keeps the adapter/head state from the best validation epoch. The backbone
    is bit-frozen for the whole run; the returned report carries its hashes.
    """
    cfg = config or TrainConfig()
    if not any(True for _ in model.adapters()):
        raise ConfigError("train_generalized: model has no adapters attached")
    train_samples = dataset.filter_split("train")
    val_samples = dataset.filter_split("val")
    if not train_samples or not val_samples:
        raise DataError("train_generalized: need non-empty train and val splits")

    hash_before = backbone_hash(model)
    images = np.stack([s.image for s in train_samples])
    targets = np.array([s.gaze for s in train_samples], np.float64)
    cluster = kmeans_cluster(train_samples, k=min(cfg.k, len(train_samples)), seed=cfg.seed)
    batches = balanced_batches(cluster, cfg.batch_size, seed=cfg.seed)
    steps_per_epoch = max(1, len(train_samples) // cfg.batch_size)

    # Phase 1: the head alone learns a usable linear readout; adapters stay at
    # their zero-output initialization so the backbone sees no shift yet.
    model.set_trainable(False)
    for mod in model.head_modules():
        mod.set_trainable(True)
    head_params = [p for p in model.parameters() if p.trainable]
    warmup_opt = AdamW(head_params, lr=cfg.warmup_lr, weight_decay=cfg.weight_decay)
    train_losses = []
    for _ in range(cfg.warmup_epochs):
        for idx in itertools.islice(batches, steps_per_epoch):
            train_losses.append(_train_step(model, warmup_opt, images[idx], targets[idx]))

    # Phase 2: adapters only.
    model.set_trainable(False)
    for adapter in model.adapters():
        adapter.set_trainable(True)
    adapter_params = [p for p in model.parameters() if p.trainable]
    optimizer = AdamW(adapter_params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    tuned = lambda name: ".adapter." in name or name.startswith("head_")
    best = _snapshot(model, tuned)
    best_err = evaluate(model, val_samples).mean_deg
    best_epoch = 0
    val_history = [best_err]
    for epoch in range(1, cfg.epochs + 1):
        for idx in itertools.islice(batches, steps_per_epoch):
            train_losses.append(_train_step(model, optimizer, images[idx], targets[idx]))
        val_err = evaluate(model, val_samples).mean_deg
        val_history.append(val_err)
        if val_err < best_err:
            best_err, best_epoch, best = val_err, epoch, _snapshot(model, tuned)
    _restore(model, best)

    hash_after = backbone_hash(model)
    assert hash_after == hash_before, "backbone changed during adapter training"
    report = TrainReport(
        tunable_params=adapter_param_count(model),
        epochs_run=cfg.epochs,
        best_epoch=best_epoch,
        val_mean_deg=best_err,
        val_history=val_history,
        train_losses=train_losses,
        backbone_hash_before=hash_before,
        backbone_hash_after=hash_after,
    )
    return model, report


# -- personalized phase ---------------------------------------------------------


@dataclasses.dataclass
class ReplaySource:
    """Balanced supply of generalized samples for anti-forgetting replay."""

    cluster: ClusterModel
    samples: list

    @classmethod
    def from_dataset(cls, dataset: GazeDataset, k: int = 15, seed: int = 0) -> "ReplaySource":
        samples = dataset.filter_split("train")
        return cls(cluster=kmeans_cluster(samples, k=k, seed=seed), samples=samples)


@dataclasses.dataclass
class PersonalizeReport:
    tunable_params: int
    tunable_params_optimizer: int
    steps_run: int
    best_step: int
    shot_error_history: list
    probe_error_history: list
    frozen_hash_before: str
    frozen_hash_after: str


def _stage4_adapter_names(model: GazeModel) -> set:
    last = len(model.stages) - 1
    prefix = f"stages.{last}."
    return {
        name
        for name, _ in model.named_parameters()
        if name.startswith(prefix) and ".adapter." in name
    }


def personalize(
    model: GazeModel,
    personal_samples: list,
    replay: ReplaySource,
    config: PersonalizeConfig | None = None,
):
    """Five-shot calibration of the final-stage adapters with replay.

    Every step trains on the 5 personal shots plus ``replay_r`` generalized
    samples drawn one-per-cluster, so subject fit improves without losing the
    population behavior. Three guards keep the five-sample regime stable:
    adapter normalization runs on its frozen statistics (five shots are far
    too few to re-estimate them), the learning rate warms up linearly while
    the optimizer moments calibrate, and the kept step is the one minimizing
    personal-shot error plus the error on a fixed probe of generalized
    samples, so the selection cannot trade population accuracy for shot fit.
    """
    cfg = config or PersonalizeConfig()
    if len(personal_samples) != 5:
        raise DataError(f"personalize: need exactly 5 personal samples, got {len(personal_samples)}")
    subjects = {s.subject_id for s in personal_samples}
    if len(subjects) != 1:
        raise DataError(f"personalize: personal samples span several subjects: {sorted(subjects)}")

    stage4 = _stage4_adapter_names(model)
    frozen_hash = lambda: _hash_excluding(model, stage4)
    hash_before = frozen_hash()

    model.set_trainable(False)
    for name, p in model.named_parameters():
        if name in stage4:
            p.trainable = True

    trainable = [p for p in model.parameters() if p.trainable]
    optimizer = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)

    personal_images = np.stack([s.image for s in personal_samples])
    personal_targets = np.array([s.gaze for s in personal_samples], np.float64)
    replay_stream = balanced_batches(replay.cluster, cfg.replay_r, seed=cfg.seed)
    replay_images = np.stack([s.image for s in replay.samples])
    replay_targets = np.array([s.gaze for s in replay.samples], np.float64)

    # fixed generalized probe for the keep-best score: a few balanced draws,
    # frozen once so scores at different steps are comparable
    probe_stream = balanced_batches(replay.cluster, cfg.replay_r, seed=cfg.seed + 0x9B0E)
    probe_idx = np.unique(np.concatenate([next(probe_stream) for _ in range(4)]))
    probe_images = replay_images[probe_idx]
    probe_targets = replay_targets[probe_idx]

    def shot_error() -> float:
        preds = predict_gaze(model, personal_images)
        return float(angular_error_batch(preds, personal_targets).mean())

    def probe_error() -> float:
        preds = predict_gaze(model, probe_images)
        return float(angular_error_batch(preds, probe_targets).mean())

    keep = lambda name: name in stage4
    best = _snapshot(model, keep)
    shot_history = [shot_error()]
    probe_history = [probe_error()]
    best_score = shot_history[0] + probe_history[0]
    best_step = 0
    for step in range(1, cfg.epochs + 1):
        idx = next(replay_stream)
        batch_images = np.concatenate([personal_images, replay_images[idx]])
        batch_targets = np.concatenate([personal_targets, replay_targets[idx]])
        lr_step = cfg.lr * min(1.0, step / cfg.warmup) if cfg.warmup > 0 else cfg.lr
        _train_step_stage4(model, optimizer, batch_images, batch_targets, lr_step)
        shot_history.append(shot_error())
        probe_history.append(probe_error())
        score = shot_history[-1] + probe_history[-1]
        if score < best_score - 1e-9:
            best_score, best_step, best = score, step, _snapshot(model, keep)
        elif step - best_step >= cfg.patience:
            break
    _restore(model, best)

    hash_after = frozen_hash()
    assert hash_after == hash_before, "personalization touched frozen parameters"
    n_state = sum(p.size for name, p in model.named_parameters() if name in stage4)
    n_opt = sum(p.size for name, p in model.named_parameters() if name in stage4 and not p.stat)
    return model, PersonalizeReport(
        tunable_params=n_state,
        tunable_params_optimizer=n_opt,
        steps_run=len(shot_history) - 1,
        best_step=best_step,
        shot_error_history=shot_history,
        probe_error_history=probe_history,
        frozen_hash_before=hash_before,
        frozen_hash_after=hash_after,
    )


def _train_step_stage4(model, optimizer, images, targets, lr: float) -> float:
    """Training-mode step with every adapter's normalization held in eval
    mode: running statistics are used and never rewritten, because batch
    statistics over a few-shot batch are mostly noise. The final-stage
    projections and affine terms still receive gradients."""
    model.train()
    for stage in model.stages:
        for block in stage:
            if block.adapter is not None:
                block.adapter.eval()
    pred = model.forward_gaze(Tensor(images))
    loss = ops.l1_loss(pred, Tensor(targets.astype(np.float32)))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr=lr)
    return loss.item()


def _hash_excluding(model: GazeModel, names: set) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if name in names:
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
