"""Binary weight persistence, image codecs, manifests and datasets.

Weight file layout (little-endian throughout):

    magic   4 bytes  b"DFTW"
    version u32
    count   u32
    count entries of:
        name_len u16, name utf-8 bytes
        dtype    u8   (0 = float32)
        ndim     u8
        dims     u32 * ndim
        data     raw little-endian values
    crc32   u32 of every byte before it

Names starting with "_meta/" are reserved for self-description (architecture
record) and are excluded from strict name-set comparison on load.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError, LoadMismatchError, WeightCorruptionError, WeightFormatError
from .models import GazeModel, ModelConfig, attach_adapters
from .nn import Module

MAGIC = b"DFTW"
VERSION = 1
DTYPE_F32 = 0
META_PREFIX = "_meta/"


# ---------------------------------------------------------------------------
# raw tensor file


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        # not ascontiguousarray: that would silently promote 0-d scalars to
        # shape (1,); tobytes() already serializes any layout in C order
        arr = np.asarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise WeightFormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise WeightCorruptionError(f"{path}: checksum mismatch, file is corrupt")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        dtype_code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        if dtype_code != DTYPE_F32:
            raise WeightFormatError(f"{path}: unsupported dtype code {dtype_code} for {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.astype(np.float32)  # own, native-order copy
    if off != len(blob) - 4:
        raise WeightFormatError(f"{path}: trailing bytes after last tensor")
    return out


# ---------------------------------------------------------------------------
# model checkpoints


def _arch_record(model: GazeModel, resolution: int) -> np.ndarray:
    c = model.config
    vals = [1.0, c.in_channels, *c.stage_dims, *c.stage_depths,
            c.patch_stride, c.head_outputs, 1.0 if c.adapters_enabled else 0.0, resolution]
    return np.asarray(vals, np.float32)


def _config_from_arch(rec: np.ndarray) -> tuple[ModelConfig, int]:
    v = [float(x) for x in rec]
    if len(v) != 14 or v[0] != 1.0:
        raise WeightFormatError("unrecognized architecture record in weight file")
    cfg = ModelConfig(
        in_channels=int(v[1]),
        stage_dims=tuple(int(x) for x in v[2:6]),
        stage_depths=tuple(int(x) for x in v[6:10]),
        patch_stride=int(v[10]),
        head_outputs=int(v[11]),
        adapters_enabled=bool(v[12]),
    )
    return cfg, int(v[13])


def save_weights(model: Module, path, resolution: int = 128, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    if isinstance(model, GazeModel):
        tensors[META_PREFIX + "arch"] = _arch_record(model, resolution)
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors)


def load_weights(model: Module, path, strict: bool = True) -> dict[str, np.ndarray]:
    """Copy file tensors into the model registry; returns "_meta/*" records."""
    tensors = load_tensors(path)
    meta = {k: v for k, v in tensors.items() if k.startswith(META_PREFIX)}
    payload = {k: v for k, v in tensors.items() if not k.startswith(META_PREFIX)}
    params = dict(model.named_parameters())
    unknown = sorted(set(payload) - set(params))
    if unknown:
        raise LoadMismatchError(f"{path}: file tensors not present in model: {unknown[:5]}")
    if strict:
        missing = sorted(set(params) - set(payload))
        if missing:
            raise LoadMismatchError(f"{path}: model parameters missing from file: {missing[:5]}")
    for name, arr in payload.items():
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise LoadMismatchError(
                f"{path}: shape mismatch for {name!r}: file {arr.shape} vs model {p.data.shape}"
            )
        p.data[...] = arr.astype(p.data.dtype)
    return meta


def save_model(model: GazeModel, path, resolution: int = 128) -> None:
    save_weights(model, path, resolution=resolution)


def load_model(path, seed: int = 0) -> tuple[GazeModel, int]:
    """Rebuild a model from a self-describing weight file. Returns (model, resolution)."""
    tensors = load_tensors(path)
    rec = tensors.get(META_PREFIX + "arch")
    if rec is None:
        raise WeightFormatError(f"{path}: missing architecture record; cannot rebuild model")
    cfg, resolution = _config_from_arch(rec)
    model = GazeModel(dataclasses.replace(cfg, adapters_enabled=False), seed=seed)
    if cfg.adapters_enabled:
        attach_adapters(model, seed=seed)
    load_weights(model, path, strict=True)
    return model, resolution


# ---------------------------------------------------------------------------
# images


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    if img.dtype != np.uint8 or img.ndim != 2:
        raise DataError(f"write_pgm expects 2-d uint8, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM file")
    fields = []
    off = 2
    while len(fields) < 3:
        while off < len(blob) and blob[off : off + 1].isspace():
            off += 1
        if blob[off : off + 1] == b"#":
            while off < len(blob) and blob[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(blob) and not blob[off : off + 1].isspace():
            off += 1
        fields.append(blob[start:off])
    off += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    if len(blob) - off < w * h:
        raise DataError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, np.uint8, count=w * h, offset=off)
    return data.reshape(h, w).copy()


def read_image(path) -> np.ndarray:
    """Grayscale float32 in [0, 1] from PGM (native) or PNG (via Pillow)."""
    p = Path(path)
    if p.suffix.lower() == ".pgm":
        return read_pgm(p).astype(np.float32) / 255.0
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover
        raise DataError(f"{path}: reading {p.suffix} requires Pillow") from e
    with Image.open(p) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resample with edge clamping (align_corners=False style)."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32, copy=False)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


# ---------------------------------------------------------------------------
# samples, manifests, splits


@dataclasses.dataclass
class GazeSample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    gaze: tuple[float, float]  # (pitch, yaw) radians
    subject_id: str
    split: str  # train | val | test | personal


class GazeDataset:
    def __init__(self, samples: list[GazeSample]):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def filter_split(self, split: str) -> "GazeDataset":
        return GazeDataset([s for s in self.samples if s.split == split])

    def filter_subject(self, subject_id: str) -> "GazeDataset":
        return GazeDataset([s for s in self.samples if s.subject_id == subject_id])

    def labels(self) -> np.ndarray:
        return np.asarray([s.gaze for s in self.samples], np.float32)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def subjects(self) -> list[str]:
        seen = {}
        for s in self.samples:
            seen.setdefault(s.subject_id, None)
        return list(seen)


_SPLITS = ("train", "val", "test", "personal")


def split_assign(subject_id: str, index: int) -> str:
    """Deterministic 8:1:1 split from a hash of (subject, index)."""
    import hashlib

    digest = hashlib.sha256(f"{subject_id}:{index}".encode()).digest()
    bucket = digest[0] % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


def write_manifest(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_manifest(path) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                image = rec["image"]
                pitch = float(rec["pitch"])
                yaw = float(rec["yaw"])
                subject = str(rec["subject"])
                split = rec["split"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}: malformed manifest record at line {lineno}: {e}") from e
            if split not in _SPLITS:
                raise DataError(f"{path}: unknown split {split!r} at line {lineno}")
            records.append(
                {"image": image, "pitch": pitch, "yaw": yaw, "subject": subject, "split": split}
            )
    return records


def load_dataset(manifest_path, resolution: int | None = None) -> GazeDataset:
    """Eager-load a manifest; images are resized (bilinear) when a resolution is given."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    for rec in read_manifest(manifest_path):
        img = read_image(base / rec["image"])
        if resolution is not None:
            img = bilinear_resize(img, resolution, resolution)
        samples.append(
            GazeSample(
                image=img[None].astype(np.float32),
                gaze=(rec["pitch"], rec["yaw"]),
                subject_id=rec["subject"],
                split=rec["split"],
            )
        )
    return GazeDataset(samples)
