"""Weight-file persistence, image codecs, manifests and dataset loading."""

import dataclasses
import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gazekit.dataio import (
    GazeDataset,
    GazeSample,
    bilinear_resize,
    load_dataset,
    load_model,
    load_tensors,
    load_weights,
    read_image,
    read_manifest,
    read_pgm,
    save_model,
    save_tensors,
    save_weights,
    split_assign,
    write_manifest,
    write_pgm,
)
from gazekit.errors import (
    DataError,
    LoadMismatchError,
    WeightCorruptionError,
    WeightFormatError,
)
from gazekit.models import GazeModel, ModelConfig, attach_adapters
from gazekit.synth import SyntheticEyeConfig, synth_generate
from gazekit.tensor import Tensor

TINY = ModelConfig(stage_dims=(8, 8, 8, 8), stage_depths=(1, 1, 1, 1))


# ---------------------------------------------------------------------------
# raw tensor files


def test_tensor_roundtrip_bit_exact(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "b/weight": rng.standard_normal((7,)).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    path = tmp_path / "t.dftw"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert set(back) == set(tensors)
    for name in tensors:
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name], tensors[name])


def test_tensor_file_flipped_byte_fails_crc(tmp_path, rng):
    path = tmp_path / "t.dftw"
    save_tensors(path, {"w": rng.standard_normal((16,)).astype(np.float32)})
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(WeightCorruptionError, match="checksum"):
        load_tensors(path)


def test_tensor_file_truncated(tmp_path, rng):
    path = tmp_path / "t.dftw"
    save_tensors(path, {"w": rng.standard_normal((16,)).astype(np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(WeightCorruptionError):
        load_tensors(path)


def test_tensor_file_bad_magic(tmp_path):
    path = tmp_path / "t.dftw"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(WeightFormatError, match="magic"):
        load_tensors(path)


def test_tensor_file_too_short(tmp_path):
    path = tmp_path / "t.dftw"
    path.write_bytes(b"DFTW\x01")
    with pytest.raises(WeightFormatError):
        load_tensors(path)


def _rewrite_crc(blob: bytearray) -> bytes:
    body = bytes(blob[:-4])
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_tensor_file_unsupported_version(tmp_path, rng):
    path = tmp_path / "t.dftw"
    save_tensors(path, {"w": rng.standard_normal((4,)).astype(np.float32)})
    blob = bytearray(path.read_bytes())
    struct.pack_into("<I", blob, 4, 2)
    path.write_bytes(_rewrite_crc(blob))
    with pytest.raises(WeightFormatError, match="version 2"):
        load_tensors(path)


def test_tensor_file_unknown_dtype_code(tmp_path, rng):
    path = tmp_path / "t.dftw"
    save_tensors(path, {"w": rng.standard_normal((4,)).astype(np.float32)})
    blob = bytearray(path.read_bytes())
    # header (12) + name_len (2) + name ("w") puts the dtype byte at offset 15
    assert blob[15] == 0
    blob[15] = 9
    path.write_bytes(_rewrite_crc(blob))
    with pytest.raises(WeightFormatError, match="dtype code 9"):
        load_tensors(path)


def test_tensor_file_trailing_bytes(tmp_path, rng):
    path = tmp_path / "t.dftw"
    save_tensors(path, {"w": rng.standard_normal((4,)).astype(np.float32)})
    blob = bytearray(path.read_bytes())
    blob = blob[:-4] + b"XTRA" + blob[-4:]
    path.write_bytes(_rewrite_crc(bytearray(blob)))
    with pytest.raises(WeightFormatError, match="trailing"):
        load_tensors(path)


# ---------------------------------------------------------------------------
# model checkpoints


def test_model_weights_roundtrip(tmp_path):
    model = attach_adapters(GazeModel(TINY, seed=3), seed=4)
    for p in model.parameters():
        p.data += np.random.default_rng(0).standard_normal(p.data.shape).astype(p.data.dtype)
    path = tmp_path / "m.dftw"
    save_weights(model, path)

    twin = attach_adapters(GazeModel(TINY, seed=9), seed=10)
    load_weights(twin, path)
    for (na, pa), (nb, pb) in zip(
        sorted(model.named_parameters()), sorted(twin.named_parameters())
    ):
        assert na == nb
        assert np.array_equal(pa.data, pb.data), na


def test_load_strict_rejects_extra_file_tensors(tmp_path):
    with_adapters = attach_adapters(GazeModel(TINY, seed=0), seed=0)
    path = tmp_path / "m.dftw"
    save_weights(with_adapters, path)
    plain = GazeModel(TINY, seed=0)
    with pytest.raises(LoadMismatchError, match="not present in model"):
        load_weights(plain, path)


def test_load_strict_rejects_missing_file_tensors(tmp_path):
    plain = GazeModel(TINY, seed=0)
    path = tmp_path / "m.dftw"
    save_weights(plain, path)
    with_adapters = attach_adapters(GazeModel(TINY, seed=1), seed=1)
    with pytest.raises(LoadMismatchError, match="missing from file"):
        load_weights(with_adapters, path)


def test_load_non_strict_fills_subset(tmp_path):
    plain = GazeModel(TINY, seed=0)
    path = tmp_path / "m.dftw"
    save_weights(plain, path)
    with_adapters = attach_adapters(GazeModel(TINY, seed=1), seed=1)
    load_weights(with_adapters, path, strict=False)
    expected = dict(plain.named_parameters())
    for name, p in with_adapters.named_parameters():
        if name in expected:
            assert np.array_equal(p.data, expected[name].data), name


def test_load_shape_mismatch(tmp_path):
    small = GazeModel(TINY, seed=0)
    path = tmp_path / "m.dftw"
    save_weights(small, path)
    bigger = GazeModel(dataclasses.replace(TINY, stage_dims=(8, 16, 16, 16)), seed=0)
    with pytest.raises(LoadMismatchError, match="shape mismatch"):
        load_weights(bigger, path)


def test_self_describing_checkpoint_rebuilds_model(tmp_path, rng):
    model = attach_adapters(GazeModel(TINY, seed=7), seed=8)
    path = tmp_path / "m.dftw"
    save_model(model, path, resolution=32)

    rebuilt, resolution = load_model(path)
    assert resolution == 32
    assert rebuilt.config == model.config
    x = Tensor(rng.standard_normal((2, 1, 32, 32)).astype(np.float32))
    model.eval()
    rebuilt.eval()
    assert np.array_equal(model.forward_gaze(x).data, rebuilt.forward_gaze(x).data)


def test_load_model_without_arch_record(tmp_path, rng):
    path = tmp_path / "m.dftw"
    save_tensors(path, {"w": rng.standard_normal((4,)).astype(np.float32)})
    with pytest.raises(WeightFormatError, match="architecture record"):
        load_model(path)


# ---------------------------------------------------------------------------
# images


def test_pgm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(17, 23), dtype=np.uint8)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    assert np.array_equal(read_pgm(path), img)


def test_pgm_with_comment_line(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n# a comment\n4 3\n255\n" + img.tobytes())
    assert np.array_equal(read_pgm(path), img)


def test_pgm_rejects_wrong_dtype(tmp_path):
    with pytest.raises(DataError, match="uint8"):
        write_pgm(tmp_path / "x.pgm", np.zeros((4, 4), np.float32))


def test_pgm_rejects_bad_magic(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(DataError, match="not a binary PGM"):
        read_pgm(path)


def test_pgm_rejects_odd_maxval(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n2 2\n128\n" + bytes(4))
    with pytest.raises(DataError, match="maxval"):
        read_pgm(path)


def test_pgm_rejects_truncated_pixels(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
    with pytest.raises(DataError, match="truncated"):
        read_pgm(path)


def test_read_image_scales_to_unit_range(tmp_path):
    img = np.array([[0, 128], [255, 64]], np.uint8)
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    out = read_image(path)
    assert out.dtype == np.float32
    assert np.allclose(out, img / 255.0)


def test_resize_identity_when_same_shape(rng):
    img = rng.random((9, 13)).astype(np.float32)
    assert np.array_equal(bilinear_resize(img, 9, 13), img)


def test_resize_constant_image_stays_constant():
    img = np.full((6, 8), 0.37, np.float32)
    out = bilinear_resize(img, 15, 5)
    assert out.shape == (15, 5)
    assert np.allclose(out, 0.37, atol=1e-6)


def test_resize_to_single_pixel_averages_center():
    img = np.zeros((4, 4), np.float32)
    img[1:3, 1:3] = [[1.0, 2.0], [3.0, 4.0]]
    out = bilinear_resize(img, 1, 1)
    # the lone sample point falls midway between the central four pixels
    assert out.shape == (1, 1)
    assert abs(out[0, 0] - 2.5) < 1e-6


def test_resize_reproduces_linear_ramp():
    w, out_w = 8, 20
    img = np.tile(np.arange(w, dtype=np.float32), (3, 1))
    out = bilinear_resize(img, 3, out_w)
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    interior = (xs >= 0) & (xs <= w - 1)
    assert np.allclose(out[1, interior], xs[interior], atol=1e-5)


# ---------------------------------------------------------------------------
# manifests and datasets


def _write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))


def test_manifest_roundtrip(tmp_path):
    records = [
        {"image": "a.pgm", "pitch": 0.125, "yaw": -0.25, "subject": "s00", "split": "train"},
        {"image": "b.pgm", "pitch": -0.5, "yaw": 0.0, "subject": "s01", "split": "test"},
    ]
    path = tmp_path / "manifest.jsonl"
    write_manifest(path, records)
    assert read_manifest(path) == records


def test_manifest_blank_lines_skipped(tmp_path):
    path = tmp_path / "m.jsonl"
    rec = {"image": "a.pgm", "pitch": 0.0, "yaw": 0.0, "subject": "s", "split": "val"}
    _write_lines(path, [json.dumps(rec), "", json.dumps(rec)])
    assert len(read_manifest(path)) == 2


def test_manifest_malformed_line_cites_line_number(tmp_path):
    path = tmp_path / "m.jsonl"
    good = json.dumps({"image": "a.pgm", "pitch": 0.0, "yaw": 0.0, "subject": "s", "split": "val"})
    _write_lines(path, [good, good, "{not json"])
    with pytest.raises(DataError, match="line 3"):
        read_manifest(path)


def test_manifest_missing_key_cites_line_number(tmp_path):
    path = tmp_path / "m.jsonl"
    _write_lines(path, [json.dumps({"image": "a.pgm", "pitch": 0.0, "yaw": 0.0, "split": "val"})])
    with pytest.raises(DataError, match="line 1"):
        read_manifest(path)


def test_manifest_non_numeric_angle(tmp_path):
    path = tmp_path / "m.jsonl"
    rec = {"image": "a.pgm", "pitch": "up", "yaw": 0.0, "subject": "s", "split": "val"}
    _write_lines(path, [json.dumps(rec)])
    with pytest.raises(DataError, match="line 1"):
        read_manifest(path)


def test_manifest_unknown_split(tmp_path):
    path = tmp_path / "m.jsonl"
    rec = {"image": "a.pgm", "pitch": 0.0, "yaw": 0.0, "subject": "s", "split": "holdout"}
    _write_lines(path, [json.dumps(rec)])
    with pytest.raises(DataError, match="'holdout' at line 1"):
        read_manifest(path)


def test_load_dataset_roundtrips_synth_output(tmp_path):
    cfg = SyntheticEyeConfig(resolution=32, seed=11)
    generated = synth_generate(cfg, n_subjects=2, n_per_subject=6, out_dir=tmp_path)
    loaded = load_dataset(tmp_path / "manifest.jsonl")
    assert len(loaded) == len(generated)
    for a, b in zip(generated, loaded):
        assert a.gaze == b.gaze
        assert a.subject_id == b.subject_id
        assert a.split == b.split
        assert np.array_equal(a.image, b.image)


def test_load_dataset_resizes_when_asked(tmp_path):
    cfg = SyntheticEyeConfig(resolution=32, seed=11)
    synth_generate(cfg, n_subjects=1, n_per_subject=2, out_dir=tmp_path)
    loaded = load_dataset(tmp_path / "manifest.jsonl", resolution=48)
    assert all(s.image.shape == (1, 48, 48) for s in loaded)


def test_load_dataset_missing_image(tmp_path):
    path = tmp_path / "m.jsonl"
    rec = {"image": "ghost.pgm", "pitch": 0.0, "yaw": 0.0, "subject": "s", "split": "val"}
    _write_lines(path, [json.dumps(rec)])
    with pytest.raises(FileNotFoundError):
        load_dataset(path)


def test_dataset_filters_and_accessors():
    def sample(subject, split, pitch):
        return GazeSample(
            image=np.zeros((1, 4, 4), np.float32), gaze=(pitch, 0.0),
            subject_id=subject, split=split,
        )

    ds = GazeDataset(
        [sample("a", "train", 0.1), sample("a", "val", 0.2), sample("b", "train", 0.3)]
    )
    assert len(ds.filter_split("train")) == 2
    assert len(ds.filter_subject("b")) == 1
    assert ds.subjects() == ["a", "b"]
    assert ds.labels().shape == (3, 2)
    assert ds.images().shape == (3, 1, 4, 4)
    assert ds[2].subject_id == "b"


# ---------------------------------------------------------------------------
# split assignment


@given(st.text(max_size=12), st.integers(min_value=0, max_value=10**6))
def test_split_assign_is_deterministic(subject, index):
    first = split_assign(subject, index)
    assert first == split_assign(subject, index)
    assert first in ("train", "val", "test")


def test_split_assign_ratio_is_8_1_1():
    labels = [split_assign(f"s{i % 7}", i) for i in range(5000)]
    frac_train = labels.count("train") / len(labels)
    frac_val = labels.count("val") / len(labels)
    frac_test = labels.count("test") / len(labels)
    assert abs(frac_train - 0.8) < 0.03
    assert abs(frac_val - 0.1) < 0.02
    assert abs(frac_test - 0.1) < 0.02
