"""Synthetic grayscale eye-image generator with exact gaze labels.

Each image is a soft-edged sclera ellipse on a skin-toned background, an iris
disk whose center displaces linearly with (pitch, yaw), and a darker
concentric pupil. Per-subject geometry (iris radius, eyelid opening, the
gaze-to-displacement gain and offset per axis) is drawn once per subject, so
a model must adapt per subject to be exact: that is the personalization
signal. Optional stressors reproduce the conditions that break appearance
models in practice: blinks (eyelid occlusion) and specular glare spots.

Labels are the sampled (pitch, yaw), never re-derived from pixels, so they
are exact by construction even on occluded frames.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .dataio import GazeDataset, GazeSample, split_assign, write_manifest, write_pgm

BG = 0.55  # skin
SCLERA = 0.85
IRIS = 0.45
PUPIL = 0.12
LID = 0.50


@dataclasses.dataclass(frozen=True)
class SyntheticEyeConfig:
    """Ranges are uniform per-subject draws; scalars apply to every sample.

    Pixel-valued fields assume the default 64x64 resolution; scale them along
    with ``resolution`` if you change it.
    """

    resolution: int = 64
    iris_radius: tuple = (7.0, 10.0)  # px
    opening: tuple = (0.62, 0.85)  # eyelid opening ratio, 1 = fully open
    gain_x: tuple = (11.0, 14.0)  # px per radian of yaw
    gain_y: tuple = (11.0, 14.0)  # px per radian of pitch
    offset_x: tuple = (-0.7, 0.7)  # px
    offset_y: tuple = (-0.7, 0.7)  # px
    glare_prob: tuple = (0.0, 0.12)
    blink_prob: tuple = (0.0, 0.06)
    gaze_mean: tuple = (-0.10, 0.10)  # per-subject mean gaze, radians
    gaze_spread: float = 0.20  # per-sample std, radians
    gaze_limit: float = 0.45  # |pitch|, |yaw| clip, radians
    noise_std: float = 0.02
    seed: int = 0


def personal_subject_config(base: SyntheticEyeConfig, shift_px: float = 3.0) -> SyntheticEyeConfig:
    """Config for a held-out subject whose eye geometry sits outside the
    population ranges on every axis: iris rest position displaced by about
    ``shift_px`` pixels, larger iris, wider eyelid opening, steeper
    gaze-to-displacement gain. The displacement is a systematic label bias a
    generalized model cannot explain; the appearance traits make the subject
    recognizable per frame, which is what lets a few calibration shots train
    a correction that fires for this subject and nobody else."""
    lo, hi = shift_px - 0.5, shift_px + 0.5
    return dataclasses.replace(
        base,
        iris_radius=(11.0, 12.5),
        opening=(0.88, 0.95),
        gain_x=(15.5, 17.5),
        gain_y=(15.5, 17.5),
        offset_x=(lo, hi),
        offset_y=(-hi, -lo),
        seed=base.seed + 101,
    )


@dataclasses.dataclass(frozen=True)
class SubjectParams:
    subject_id: str
    iris_radius: float
    opening: float
    gain_x: float
    gain_y: float
    offset_x: float
    offset_y: float
    glare_prob: float
    blink_prob: float
    gaze_mean: tuple


def _draw(rng, lohi):
    lo, hi = lohi
    return float(rng.uniform(lo, hi))


def draw_subject(config: SyntheticEyeConfig, subject_id: str, rng: np.random.Generator) -> SubjectParams:
    return SubjectParams(
        subject_id=subject_id,
        iris_radius=_draw(rng, config.iris_radius),
        opening=_draw(rng, config.opening),
        gain_x=_draw(rng, config.gain_x),
        gain_y=_draw(rng, config.gain_y),
        offset_x=_draw(rng, config.offset_x),
        offset_y=_draw(rng, config.offset_y),
        glare_prob=_draw(rng, config.glare_prob),
        blink_prob=_draw(rng, config.blink_prob),
        gaze_mean=(_draw(rng, config.gaze_mean), _draw(rng, config.gaze_mean)),
    )


def _soft(dist, width=1.2):
    # 1 inside the boundary, 0 outside, linear ramp of `width` px across it
    return np.clip(0.5 - dist / width, 0.0, 1.0)


def render_eye(config: SyntheticEyeConfig, subject: SubjectParams, pitch: float, yaw: float,
               rng: np.random.Generator) -> np.ndarray:
    """One (H, W) float32 frame in [0, 1]."""
    res = config.resolution
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
    cx = cy = (res - 1) / 2.0

    a = 0.42 * res  # sclera half-width
    b = 0.58 * a  # sclera half-height
    img = np.full((res, res), BG, np.float32)

    # sclera ellipse (distance normalized to ~px near the boundary)
    d_ell = (np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2) - 1.0) * min(a, b)
    sclera_alpha = _soft(d_ell)
    img += sclera_alpha * (SCLERA - img)

    # iris + pupil, clipped to the sclera
    icx = cx + subject.gain_x * yaw + subject.offset_x
    icy = cy + subject.gain_y * pitch + subject.offset_y
    r_iris = subject.iris_radius
    d_iris = np.sqrt((xx - icx) ** 2 + (yy - icy) ** 2)
    iris_alpha = _soft(d_iris - r_iris) * sclera_alpha
    img += iris_alpha * (IRIS - img)
    pupil_alpha = _soft(d_iris - 0.45 * r_iris) * sclera_alpha
    img += pupil_alpha * (PUPIL - img)

    # glare: small bright spot near the iris
    if rng.uniform() < subject.glare_prob:
        gx = icx + rng.uniform(-0.6, 0.6) * r_iris
        gy = icy + rng.uniform(-0.6, 0.6) * r_iris
        r_glare = rng.uniform(1.5, 3.0)
        d_glare = np.sqrt((xx - gx) ** 2 + (yy - gy) ** 2)
        img += _soft(d_glare - r_glare) * 0.7

    # eyelid: covers the top of the opening; a blink closes most of the eye
    opening = subject.opening
    if rng.uniform() < subject.blink_prob:
        opening = rng.uniform(0.0, 0.25)
    lid_y = cy - b * (2.0 * opening - 1.0)
    lid_alpha = _soft(yy - lid_y)
    img += lid_alpha * (LID - img)

    if config.noise_std > 0:
        img += rng.normal(0.0, config.noise_std, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _sample_gaze(config, subject, rng):
    lim = config.gaze_limit
    pitch = float(np.clip(rng.normal(subject.gaze_mean[0], config.gaze_spread), -lim, lim))
    yaw = float(np.clip(rng.normal(subject.gaze_mean[1], config.gaze_spread), -lim, lim))
    return pitch, yaw


def synth_generate(
    config: SyntheticEyeConfig,
    n_subjects: int,
    n_per_subject: int,
    out_dir=None,
    subject_prefix: str = "s",
    personal_shots: int = 0,
) -> GazeDataset:
    """Deterministic dataset of ``n_subjects * n_per_subject`` frames.

    With ``personal_shots`` = k > 0, the first k samples of every subject are
    marked split="personal" (few-shot tuning set) and the remainder alternate
    val/test: the layout personalization consumes. Otherwise samples get the
    hash-based 8:1:1 train/val/test split.

    When ``out_dir`` is given, writes PGM images plus ``manifest.jsonl`` and
    returns samples whose in-memory pixels equal the on-disk quantized ones.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5EED]))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    records = []
    for si in range(n_subjects):
        subject = draw_subject(config, f"{subject_prefix}{si:02d}", rng)
        for idx in range(n_per_subject):
            pitch, yaw = _sample_gaze(config, subject, rng)
            img = render_eye(config, subject, pitch, yaw, rng)
            q = np.round(img * 255.0).astype(np.uint8)
            if personal_shots > 0:
                if idx < personal_shots:
                    split = "personal"
                else:
                    split = "val" if idx % 2 == 0 else "test"
            else:
                split = split_assign(subject.subject_id, idx)
            name = f"{subject.subject_id}_{idx:05d}.pgm"
            if out_dir is not None:
                write_pgm(out_dir / name, q)
                records.append(
                    {"image": name, "pitch": pitch, "yaw": yaw,
                     "subject": subject.subject_id, "split": split}
                )
            samples.append(
                GazeSample(
                    image=(q.astype(np.float32) / 255.0)[None],
                    gaze=(pitch, yaw),
                    subject_id=subject.subject_id,
                    split=split,
                )
            )
    if out_dir is not None:
        write_manifest(out_dir / "manifest.jsonl", records)
    return GazeDataset(samples)
