"""Backbones, adapters and decoders.

The trunk is a four-stage ConvNeXt-V2 style network: a stride-4 stem, three
stride-2 downsample layers between stages, and blocks of
depthwise 7x7 -> LayerNorm -> 1x1 expand (x4) -> GELU -> GRN -> 1x1 project
with a residual sum. Cumulative strides per stage are 4/8/16/32.

The teacher preset uses dims (40, 80, 160, 320); the student keeps stage 1 at
the teacher width (its weights are copied bit-exactly) and quarters stages
2..4 to (20, 40, 80). Adapters are bottleneck FC_up(LReLU(BN(FC_down(.))))
branches added after each block's final 1x1 conv, before the residual sum,
with zero-initialized up-projections so attaching them changes nothing.
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .nn import GRN, BatchNorm, ChannelLinear, Conv2d, LayerNorm, Linear, Module, ModuleList
from .tensor import Tensor


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    stage_depths: tuple = (2, 2, 6, 2)
    stage_dims: tuple = (40, 80, 160, 320)
    patch_stride: int = 4
    head_outputs: int = 2
    adapters_enabled: bool = False


TEACHER_CONFIG = ModelConfig()
STUDENT_DIMS = (40, 20, 40, 80)


def student_config() -> ModelConfig:
    return dataclasses.replace(TEACHER_CONFIG, stage_dims=STUDENT_DIMS)


def stage_strides(config: ModelConfig) -> tuple:
    s = config.patch_stride
    return tuple(s * 2**i for i in range(len(config.stage_depths)))


class Adapter(Module):
    """Bottleneck feature modifier: FC_up(LReLU(BN(FC_down(f)))).

    FC_down compresses channels by 4x; FC_up is zero-initialized so a freshly
    attached adapter is exactly the zero function.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.fc_down = ChannelLinear(dim, dim // 4, rng)
        self.bn = BatchNorm(dim // 4)
        self.fc_up = ChannelLinear(dim // 4, dim, rng, zero_init=True)

    def forward(self, f):
        return self.fc_up(ops.leaky_relu(self.bn(self.fc_down(f))))


class ConvNeXtBlock(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dwconv = Conv2d(dim, dim, 7, rng, groups=dim)
        self.norm = LayerNorm(dim, channels_first=True)
        self.pw_expand = Conv2d(dim, 4 * dim, 1, rng)
        self.grn = GRN(4 * dim)
        self.pw_project = Conv2d(4 * dim, dim, 1, rng)
        self.adapter = None

    def forward(self, x):
        z = self.dwconv(x)
        z = self.norm(z)
        z = self.pw_expand(z)
        z = ops.gelu(z)
        z = self.grn(z)
        z = self.pw_project(z)
        if self.adapter is not None:
            z = ops.add(z, self.adapter(z))
        return ops.add(x, z)


class Stem(Module):
    def __init__(self, cin, dim, stride, rng):
        super().__init__()
        self.conv = Conv2d(cin, dim, stride, rng, stride=stride)
        self.norm = LayerNorm(dim, channels_first=True)

    def forward(self, x):
        return self.norm(self.conv(x))


class Downsample(Module):
    def __init__(self, cin, cout, rng):
        super().__init__()
        self.norm = LayerNorm(cin, channels_first=True)
        self.conv = Conv2d(cin, cout, 2, rng, stride=2)

    def forward(self, x):
        return self.conv(self.norm(x))


class GazeModel(Module):
    """Four-stage trunk plus a pooled gaze regression head (pitch, yaw)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FFEE]))
        dims = config.stage_dims
        self.stem = Stem(config.in_channels, dims[0], config.patch_stride, rng)
        stages = []
        downs = []
        for i, depth in enumerate(config.stage_depths):
            if i > 0:
                downs.append(Downsample(dims[i - 1], dims[i], rng))
            stages.append(ModuleList([ConvNeXtBlock(dims[i], rng) for _ in range(depth)]))
        self.downsamples = ModuleList(downs)
        self.stages = ModuleList(stages)
        self.head_norm = LayerNorm(dims[-1])
        self.head_fc = Linear(dims[-1], config.head_outputs, rng)
        self.assign_names()

    # -- forward ------------------------------------------------------------

    def _check_input(self, images: Tensor) -> None:
        if images.ndim != 4:
            raise ShapeError(f"expected NCHW input, got shape {images.shape}")
        n, c, h, w = images.shape
        if c != self.config.in_channels:
            raise ShapeError(f"model expects {self.config.in_channels} channel(s), got {c}")
        total = stage_strides(self.config)[-1]
        if h % total or w % total:
            raise ShapeError(f"input {h}x{w} not divisible by the total stride {total}")

    def forward_features(self, images: Tensor, mask=None) -> list[Tensor]:
        """Stage outputs f1..f4. With a mask, masked patches are zeroed at input."""
        self._check_input(images)
        x = images
        if mask is not None:
            pixel = mask.pixel_mask(images.shape[2], images.shape[3])
            keep = (1.0 - pixel)[None, None].astype(np.float32)
            x = ops.mul_const(x, keep)
        x = self.stem(x)
        feats = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.downsamples[i - 1](x)
            for block in stage:
                x = block(x)
            feats.append(x)
        return feats

    def forward_gaze(self, images: Tensor) -> Tensor:
        f4 = self.forward_features(images)[-1]
        pooled = ops.global_avg_pool(f4)
        return self.head_fc(self.head_norm(pooled))

    # -- structure helpers ----------------------------------------------------

    def blocks(self):
        for stage in self.stages:
            yield from stage

    def adapters(self):
        for block in self.blocks():
            if block.adapter is not None:
                yield block.adapter

    def head_modules(self):
        return (self.head_norm, self.head_fc)

    def forward(self, images):
        return self.forward_gaze(images)


def build_teacher(config: ModelConfig | None = None, seed: int = 0) -> GazeModel:
    return GazeModel(config or TEACHER_CONFIG, seed=seed)


def build_student_from_teacher(teacher: GazeModel, seed: int = 0) -> GazeModel:
    """Quarter-width student whose stem and stage 1 are bit-exact teacher copies."""
    if teacher.config.stage_dims != TEACHER_CONFIG.stage_dims:
        raise ConfigError(f"teacher must use the teacher preset dims, got {teacher.config.stage_dims}")
    cfg = dataclasses.replace(
        student_config(),
        in_channels=teacher.config.in_channels,
        stage_depths=teacher.config.stage_depths,
        patch_stride=teacher.config.patch_stride,
        head_outputs=teacher.config.head_outputs,
    )
    student = GazeModel(cfg, seed=seed)
    tparams = dict(teacher.named_parameters())
    for name, p in student.named_parameters():
        if name.startswith("stem.") or name.startswith("stages.0."):
            src = tparams[name]
            if src.data.shape != p.data.shape:
                raise ConfigError(f"shared-stage shape mismatch at {name}")
            p.data[...] = src.data
    return student


def attach_adapters(model: GazeModel, seed: int = 0) -> GazeModel:
    """Add one adapter per block; adapters trainable, everything else frozen."""
    if model.config.adapters_enabled or any(True for _ in model.adapters()):
        raise ConfigError("adapters already attached")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xADA9]))
    for block in model.blocks():
        dim = block.pw_project.weight.shape[0]
        block.adapter = Adapter(dim, rng)
    model.config = dataclasses.replace(model.config, adapters_enabled=True)
    model.assign_names()
    model.set_trainable(False)
    for adapter in model.adapters():
        adapter.set_trainable(True)
    return model


def count_params(model: Module, trainable_only: bool = False) -> int:
    """Exact element count from the registry (stat buffers count when not
    filtering to trainable)."""
    total = 0
    for p in model.parameters():
        if trainable_only and not p.trainable:
            continue
        total += p.size
    return total


def adapter_param_count(model: GazeModel, optimizer_only: bool = False) -> int:
    """State owned by the adapters: the per-user tunable footprint.

    The reported tunable count includes the adapter BatchNorm running
    statistics (they change during fine-tuning and must be stored per user);
    ``optimizer_only`` restricts to gradient-updated values.
    """
    total = 0
    for name, p in model.named_parameters():
        if ".adapter." not in name:
            continue
        if optimizer_only and p.stat:
            continue
        total += p.size
    return total


def state_hash(model: Module, prefixes=None, exclude=None) -> str:
    """SHA-256 over named parameter bytes, optionally filtered by name prefix."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if prefixes is not None and not any(name.startswith(px) for px in prefixes):
            continue
        if exclude is not None and any(name.startswith(px) for px in exclude):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def backbone_hash(model: Module) -> str:
    """SHA-256 over everything except adapters and the gaze head.

    This is the group that must stay bit-identical across any fine-tuning run.
    """
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if ".adapter." in name or name.startswith("head_"):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# decoders (used only while distilling)


class FeatureDecoder(Module):
    """Project student features into the teacher's feature space.

    z_hat = Conv1x1(LN(DConv7x7(z))); out = FC(z + Conv1x1(GRN(GELU(z_hat)))).
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.dwconv = Conv2d(in_dim, in_dim, 7, rng, groups=in_dim)
        self.norm = LayerNorm(in_dim, channels_first=True)
        self.expand = Conv2d(in_dim, 4 * in_dim, 1, rng)
        self.grn = GRN(4 * in_dim)
        self.project = Conv2d(4 * in_dim, in_dim, 1, rng)
        self.fc = ChannelLinear(in_dim, out_dim, rng)

    def forward(self, z):
        zh = self.expand(self.norm(self.dwconv(z)))
        y = ops.add(z, self.project(self.grn(ops.gelu(zh))))
        return self.fc(y)


class ImageDecoder(Module):
    """One block over stage-4 features, then a per-position linear map to
    patch_size^2 * channels values reassembled into the image plane."""

    def __init__(self, dim: int, patch: int, channels: int, rng: np.random.Generator):
        super().__init__()
        self.patch = patch
        self.channels = channels
        self.block = ConvNeXtBlock(dim, rng)
        self.proj = ChannelLinear(dim, patch * patch * channels, rng)

    def forward(self, f4):
        x = self.proj(self.block(f4))
        return ops.patches_to_image(x, self.patch, self.channels)


class DecoderBank(Module):
    """The three reconstruction decoders trained alongside the student."""

    def __init__(self, student_cfg: ModelConfig, teacher_cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDEC0]))
        sd, td = student_cfg.stage_dims, teacher_cfg.stage_dims
        patch = stage_strides(student_cfg)[-1]
        self.image = ImageDecoder(sd[3], patch, student_cfg.in_channels, rng)
        self.feat3 = FeatureDecoder(sd[2], td[2], rng)
        self.feat4 = FeatureDecoder(sd[3], td[3], rng)
        self.assign_names()


def build_decoders(student_cfg: ModelConfig, teacher_cfg: ModelConfig | None = None, seed: int = 0) -> DecoderBank:
    return DecoderBank(student_cfg, teacher_cfg or TEACHER_CONFIG, seed=seed)
