"""Masked-reconstruction knowledge distillation from teacher to student.

A random subset of input patches is zeroed; the student (plus three decoders)
must reconstruct the masked image pixels and the teacher's stage-3/4 features
at the masked positions. The loss is

    L = masked_mse(image) + gamma * (masked_mse(feat3) + masked_mse(feat4))

with gamma = 0.5 and each term normalized by its own masked-position count.
The teacher runs frozen in eval mode on the unmasked input; the student's
stem and stage 1 hold the teacher's copied weights and stay frozen.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

from . import ops
from .dataio import GazeDataset, load_tensors, load_weights, save_tensors, save_weights
from .errors import ConfigError, MaskError
from .models import DecoderBank, GazeModel, build_decoders, build_student_from_teacher, state_hash
from .optim import AdamW
from .tensor import Tensor, no_grad

GAMMA = 0.5
FROZEN_STUDENT_PREFIXES = ("stem.", "stages.0.")


@dataclasses.dataclass
class MaskSpec:
    """Binary patch grid; 1 = masked. Patches tile the image exactly."""

    patch_size: int
    grid: np.ndarray  # (h_patches, w_patches) uint8
    ratio: float
    seed: int

    @property
    def n_masked(self) -> int:
        return int(self.grid.sum())

    def _check_cover(self, h: int, w: int) -> None:
        hp, wp = self.grid.shape
        if hp * self.patch_size != h or wp * self.patch_size != w:
            raise MaskError(
                f"mask grid {hp}x{wp} with patch {self.patch_size} does not tile image {h}x{w}"
            )

    def pixel_mask(self, h: int, w: int) -> np.ndarray:
        self._check_cover(h, w)
        return np.kron(self.grid, np.ones((self.patch_size, self.patch_size), np.float32))

    def stage_mask(self, stride: int, image_h: int, image_w: int) -> np.ndarray:
        """Nearest-neighbor downsample of the pixel mask to a stage's grid."""
        self._check_cover(image_h, image_w)
        if self.patch_size % stride:
            raise MaskError(f"patch size {self.patch_size} not divisible by stage stride {stride}")
        reps = self.patch_size // stride
        return np.kron(self.grid, np.ones((reps, reps), np.float32))


def generate_mask(h_patches: int, w_patches: int, ratio: float, seed: int, patch_size: int = 32) -> MaskSpec:
    """Uniform without-replacement patch mask; count = round(ratio * total)."""
    if not 0.0 < ratio < 1.0:
        raise MaskError(f"mask ratio must lie strictly inside (0, 1), got {ratio}")
    if h_patches < 1 or w_patches < 1:
        raise MaskError(f"mask grid must be at least 1x1, got {h_patches}x{w_patches}")
    total = h_patches * w_patches
    count = int(round(ratio * total))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x3A5C]))
    chosen = rng.choice(total, size=count, replace=False)
    grid = np.zeros(total, np.uint8)
    grid[chosen] = 1
    return MaskSpec(patch_size=patch_size, grid=grid.reshape(h_patches, w_patches), ratio=ratio, seed=seed)


@dataclasses.dataclass
class DistillBatch:
    images: Tensor
    mask: MaskSpec
    teacher_feat3: Tensor
    teacher_feat4: Tensor


def prepare_batch(teacher: GazeModel, images: Tensor, mask: MaskSpec) -> DistillBatch:
    """Teacher features are computed on the unmasked images, graph-free."""
    teacher.eval()
    with no_grad():
        feats = teacher.forward_features(images)
    return DistillBatch(images=images, mask=mask, teacher_feat3=feats[2], teacher_feat4=feats[3])


def reconstruction_loss(
    images: Tensor,
    student_feats: list[Tensor],
    teacher_feats: tuple[Tensor, Tensor],
    decoders: DecoderBank,
    mask: MaskSpec,
):
    """Masked image + feature reconstruction objective.

    Returns (scalar loss tensor, dict of float parts). Raises on an empty mask.
    """
    if mask.n_masked == 0:
        raise MaskError("reconstruction_loss: mask selects no patches")
    h, w = images.shape[2], images.shape[3]
    pm = Tensor(mask.pixel_mask(h, w)[None, None])
    img_pred = decoders.image(student_feats[3])
    img_term = ops.masked_mse(img_pred, images, pm)

    t3, t4 = teacher_feats
    m3 = Tensor(mask.stage_mask(stride=16, image_h=h, image_w=w)[None, None])
    m4 = Tensor(mask.stage_mask(stride=32, image_h=h, image_w=w)[None, None])
    feat3_term = ops.masked_mse(decoders.feat3(student_feats[2]), t3, m3)
    feat4_term = ops.masked_mse(decoders.feat4(student_feats[3]), t4, m4)

    total = ops.add(img_term, ops.scale(ops.add(feat3_term, feat4_term), GAMMA))
    parts = {
        "image": img_term.item(),
        "feat3": feat3_term.item(),
        "feat4": feat4_term.item(),
        "total": total.item(),
    }
    return total, parts


def apply_distill_freeze(teacher: GazeModel, student: GazeModel) -> None:
    """Teacher fully frozen; student stem/stage-1/head frozen, rest trainable."""
    teacher.set_trainable(False)
    student.set_trainable(True)
    frozen = FROZEN_STUDENT_PREFIXES + ("head_norm.", "head_fc.")
    for name, p in student.named_parameters():
        if any(name.startswith(px) for px in frozen):
            p.trainable = False


def distill_step(teacher: GazeModel, student: GazeModel, decoders: DecoderBank,
                 batch: DistillBatch, optimizer: AdamW) -> dict:
    """One masked-reconstruction optimizer step; returns the loss parts."""
    if any(p.trainable for p in teacher.parameters()):
        raise ConfigError("distill_step: teacher has trainable parameters")
    feats = student.forward_features(batch.images, mask=batch.mask)
    loss, parts = reconstruction_loss(
        batch.images, feats, (batch.teacher_feat3, batch.teacher_feat4), decoders, batch.mask
    )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return parts


@dataclasses.dataclass
class DistillConfig:
    batch_size: int = 8
    mask_ratio: float = 0.6
    patch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only at the end


@dataclasses.dataclass
class DistillResult:
    student: GazeModel
    decoders: DecoderBank
    losses: list[dict]
    steps: int


def _mask_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step * 7919 + 17) % (2**31)


def distill_run(
    teacher: GazeModel,
    dataset: GazeDataset,
    epochs: int,
    config: DistillConfig | None = None,
    out_dir=None,
    resume_from=None,
    student: GazeModel | None = None,
    decoders: DecoderBank | None = None,
) -> DistillResult:
    """Full distillation loop with per-step CSV logging and resumable checkpoints.

    Batch order is derived from (seed, epoch) and the mask from (seed, step),
    so resuming from a checkpoint reproduces the continuation bit-exactly.
    """
    if len(dataset) == 0:
        raise ConfigError("distill_run: empty dataset")
    cfg = config or DistillConfig()
    if student is None:
        student = build_student_from_teacher(teacher, seed=cfg.seed + 1)
    if decoders is None:
        decoders = build_decoders(student.config, teacher.config, seed=cfg.seed + 2)
    apply_distill_freeze(teacher, student)
    trainable = [p for p in list(student.parameters()) + list(decoders.parameters()) if p.trainable]
    optimizer = AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)

    start_step = 0
    if resume_from is not None:
        resume_from = Path(resume_from)
        load_weights(student, resume_from / "student.dftw", strict=True)
        load_weights(decoders, resume_from / "decoders.dftw", strict=True)
        optimizer.load_state_tensors(load_tensors(resume_from / "optim.dftw"))
        start_step = json.loads((resume_from / "meta.json").read_text())["step"]

    n = len(dataset)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = steps_per_epoch * epochs
    res = dataset[0].image.shape[-1]
    hp = wp = res // cfg.patch_size
    images_all = dataset.images()

    losses: list[dict] = []
    log_writer = None
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if (resume_from is not None and (out_dir / "loss.csv").exists()) else "w"
        log_file = open(out_dir / "loss.csv", mode, newline="")
        log_writer = csv.writer(log_file)
        if mode == "w":
            log_writer.writerow(["step", "total", "img_term", "feat3_term", "feat4_term"])

    teacher_hash_before = state_hash(teacher)
    try:
        for step in range(start_step, total_steps):
            epoch, k = divmod(step, steps_per_epoch)
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 0xE90C, epoch])
            ).permutation(n)
            idx = order[k * bs : (k + 1) * bs]
            images = Tensor(images_all[idx])
            mask = generate_mask(hp, wp, cfg.mask_ratio, _mask_seed(cfg.seed, step), cfg.patch_size)
            batch = prepare_batch(teacher, images, mask)
            parts = distill_step(teacher, student, decoders, batch, optimizer)
            losses.append(parts)
            if log_writer is not None:
                log_writer.writerow(
                    [step, f"{parts['total']:.6f}", f"{parts['image']:.6f}",
                     f"{parts['feat3']:.6f}", f"{parts['feat4']:.6f}"]
                )
            at_end = step + 1 == total_steps
            if out_dir is not None and (at_end or (cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0)):
                _write_checkpoint(out_dir, student, decoders, optimizer, step + 1, res)
    finally:
        if log_file is not None:
            log_file.close()

    assert state_hash(teacher) == teacher_hash_before
    return DistillResult(student=student, decoders=decoders, losses=losses, steps=total_steps)


def _write_checkpoint(out_dir: Path, student, decoders, optimizer, step: int, resolution: int) -> None:
    save_weights(student, out_dir / "student.dftw", resolution=resolution)
    save_weights(decoders, out_dir / "decoders.dftw")
    save_tensors(out_dir / "optim.dftw", optimizer.state_tensors())
    (out_dir / "meta.json").write_text(json.dumps({"step": step, "resolution": resolution}))
