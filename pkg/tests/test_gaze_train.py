"""Gaze metrics, clustering, balanced sampling, and the fine-tuning loops."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gazekit.dataio import GazeSample
from gazekit.errors import ConfigError, DataError
from gazekit.gaze_train import (
    ClusterModel,
    PersonalizeConfig,
    ReplaySource,
    TrainConfig,
    angular_error,
    angular_error_batch,
    balanced_batches,
    evaluate,
    gaze_to_vector,
    kmeans_cluster,
    personalize,
    predict_gaze,
    train_generalized,
    write_eval_csv,
)
from gazekit.models import (
    GazeModel,
    ModelConfig,
    adapter_param_count,
    attach_adapters,
    backbone_hash,
)
from gazekit.synth import SyntheticEyeConfig, synth_generate

TINY_CFG = ModelConfig(stage_dims=(8, 8, 8, 8), stage_depths=(1, 1, 1, 1))

angles = st.tuples(
    st.floats(-1.2, 1.2, allow_nan=False), st.floats(-1.5, 1.5, allow_nan=False)
)


def _sample(gaze, subject="s00", split="train", res=64, rng=None, image=None):
    if image is None:
        image = (rng or np.random.default_rng(0)).random((1, res, res)).astype(np.float32)
    return GazeSample(image=image, gaze=np.asarray(gaze, np.float64), subject_id=subject, split=split)


def _label_samples(points):
    return [_sample(p, image=np.zeros((1, 4, 4), np.float32)) for p in points]


# -- angular metric ----------------------------------------------------------


def test_angular_error_unit_cases():
    assert angular_error((0.0, 0.0), (0.0, 0.0)) == 0.0
    assert angular_error((0.0, 0.0), (0.0, np.pi / 2)) == pytest.approx(90.0, abs=1e-9)
    assert angular_error((0.0, 0.0), (0.0, 0.1)) == pytest.approx(5.7296, abs=1e-3)


def test_gaze_to_vector_known_directions():
    np.testing.assert_allclose(gaze_to_vector(np.array([0.0, 0.0])), [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(
        gaze_to_vector(np.array([np.pi / 2, 0.0])), [0, 1, 0], atol=1e-15
    )
    np.testing.assert_allclose(
        gaze_to_vector(np.array([0.0, np.pi / 2])), [1, 0, 0], atol=1e-15
    )


@given(a=angles, b=angles)
def test_angular_error_metric_properties(a, b):
    e = angular_error(a, b)
    assert 0.0 <= e <= 180.0
    assert e == pytest.approx(angular_error(b, a), abs=1e-9)


@given(a=angles)
def test_angular_error_zero_on_self(a):
    assert angular_error(a, a) < 1e-5


@given(a=angles)
def test_vectors_are_unit(a):
    assert np.linalg.norm(gaze_to_vector(np.array(a))) == pytest.approx(1.0, abs=1e-12)


def test_batch_matches_scalar_loop(rng):
    preds = rng.uniform(-1.0, 1.0, (40, 2))
    truths = rng.uniform(-1.0, 1.0, (40, 2))
    batch = angular_error_batch(preds, truths)
    for i in range(40):
        assert batch[i] == pytest.approx(angular_error(preds[i], truths[i]), abs=1e-9)


# -- clustering ---------------------------------------------------------------


def test_kmeans_singleton_clusters(rng):
    pts = rng.uniform(-1, 1, (15, 2))
    cm = kmeans_cluster(_label_samples(pts), k=15, seed=0)
    assert sorted(cm.assignments.tolist()) == list(range(15))
    inertia = sum(
        ((pts[i] - cm.centroids[cm.assignments[i]]) ** 2).sum() for i in range(15)
    )
    assert inertia == pytest.approx(0.0, abs=1e-12)


def test_kmeans_separates_blobs(rng):
    a = rng.normal((-0.5, -0.5), 0.02, (30, 2))
    b = rng.normal((0.5, 0.5), 0.02, (30, 2))
    pts = np.concatenate([a, b])
    cm = kmeans_cluster(_label_samples(pts), k=2, seed=1)
    first_half = set(cm.assignments[:30].tolist())
    second_half = set(cm.assignments[30:].tolist())
    assert len(first_half) == 1 and len(second_half) == 1
    assert first_half != second_half
    # brute-force nearest-centroid agreement
    dists = ((pts[:, None, :] - cm.centroids[None]) ** 2).sum(axis=2)
    np.testing.assert_array_equal(cm.assignments, dists.argmin(axis=1))


def test_kmeans_deterministic_under_seed(rng):
    pts = rng.uniform(-1, 1, (60, 2))
    a = kmeans_cluster(_label_samples(pts), k=5, seed=9)
    b = kmeans_cluster(_label_samples(pts), k=5, seed=9)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_kmeans_requires_enough_samples(rng):
    with pytest.raises(DataError):
        kmeans_cluster(_label_samples(rng.uniform(-1, 1, (10, 2))), k=15)


def test_kmeans_result_is_lloyd_fixed_point(rng):
    pts = rng.uniform(-1, 1, (80, 2))
    cm = kmeans_cluster(_label_samples(pts), k=6, seed=3)
    # one further iteration: recompute means, reassign; nothing may change
    centroids = cm.centroids.copy()
    for cid in range(cm.k):
        members = pts[cm.assignments == cid]
        if len(members):
            centroids[cid] = members.mean(axis=0)
    np.testing.assert_allclose(centroids, cm.centroids, atol=1e-12)
    dists = ((pts[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    np.testing.assert_array_equal(dists.argmin(axis=1), cm.assignments)


# -- balanced sampling ---------------------------------------------------------


def _cluster_of(assignments, k):
    return ClusterModel(k=k, centroids=np.zeros((k, 2)), assignments=np.asarray(assignments))


def test_balanced_batch_one_per_cluster(rng):
    pts = rng.uniform(-1, 1, (45, 2))
    cm = kmeans_cluster(_label_samples(pts), k=15, seed=0)
    batch = next(balanced_batches(cm, 15, seed=0))
    assert len(batch) == 15
    assert sorted(cm.assignments[batch].tolist()) == list(range(15))


def test_balanced_window_counts(rng):
    pts = rng.uniform(-1, 1, (90, 2))
    cm = kmeans_cluster(_label_samples(pts), k=15, seed=2)
    stream = balanced_batches(cm, 15, seed=0)
    drawn = np.concatenate([next(stream) for _ in range(10)])
    counts = np.bincount(cm.assignments[drawn], minlength=15)
    assert counts.min() >= 9 and counts.max() <= 11
    assert counts.sum() == 150


def test_balanced_batches_skip_empty_cluster():
    # cluster 1 has no members; the stream must not stall or emit it
    cm = _cluster_of([0, 0, 2, 2, 2], k=3)
    stream = balanced_batches(cm, 4, seed=0)
    for _ in range(5):
        batch = next(stream)
        assert len(batch) == 4
        assert 1 not in cm.assignments[batch]


def test_balanced_batches_deterministic():
    cm = _cluster_of([0, 1, 2, 0, 1, 2, 0, 1, 2], k=3)
    a = [next(balanced_batches(cm, 3, seed=5)) for _ in range(1)]
    b = [next(balanced_batches(cm, 3, seed=5)) for _ in range(1)]
    np.testing.assert_array_equal(a[0], b[0])


# -- evaluation ----------------------------------------------------------------


def _tiny_model(seed=0, adapters=True):
    model = GazeModel(TINY_CFG, seed=seed)
    if adapters:
        attach_adapters(model, seed=seed)
    return model


def _rotate_by_degrees(gaze, deg, rng):
    """A gaze label exactly `deg` degrees away from `gaze`."""
    v = gaze_to_vector(np.asarray(gaze, np.float64))
    helper = np.array([1.0, 0.0, 0.0])
    if abs(v @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(v, helper)
    u /= np.linalg.norm(u)
    w = np.cos(np.radians(deg)) * v + np.sin(np.radians(deg)) * u
    return np.array([np.arcsin(w[1]), np.arctan2(w[0], w[2])])


def test_evaluate_zero_when_truth_matches_predictions(rng):
    model = _tiny_model()
    model.eval()
    images = rng.random((3, 1, 64, 64)).astype(np.float32)
    preds = predict_gaze(model, images)
    samples = [_sample(preds[i], image=images[i]) for i in range(3)]
    report = evaluate(model, samples)
    assert report.mean_deg == pytest.approx(0.0, abs=1e-4)


def test_evaluate_mean_of_zero_and_ten(rng):
    model = _tiny_model()
    model.eval()
    images = rng.random((2, 1, 64, 64)).astype(np.float32)
    preds = predict_gaze(model, images)
    samples = [
        _sample(preds[0], image=images[0]),
        _sample(_rotate_by_degrees(preds[1], 10.0, rng), image=images[1]),
    ]
    report = evaluate(model, samples)
    assert report.mean_deg == pytest.approx(5.0, abs=1e-3)


def test_evaluate_matches_per_sample_loop(rng):
    model = _tiny_model(seed=4)
    model.eval()
    images = rng.random((10, 1, 64, 64)).astype(np.float32)
    gazes = rng.uniform(-0.5, 0.5, (10, 2))
    samples = [
        _sample(gazes[i], subject=f"s{i % 3:02d}", image=images[i]) for i in range(10)
    ]
    report = evaluate(model, samples)
    preds = predict_gaze(model, images)
    errors = [angular_error(preds[i], gazes[i]) for i in range(10)]
    assert report.mean_deg == pytest.approx(np.mean(errors), abs=1e-9)
    assert report.median_deg == pytest.approx(np.median(errors), abs=1e-9)
    assert set(report.per_subject) == {"s00", "s01", "s02"}
    n_by_subject = sum(n for n, _, _ in report.per_subject.values())
    assert n_by_subject == 10


def test_evaluate_empty_rejected():
    with pytest.raises(DataError):
        evaluate(_tiny_model(), [])


def test_eval_csv_layout(tmp_path, rng):
    model = _tiny_model()
    model.eval()
    images = rng.random((4, 1, 64, 64)).astype(np.float32)
    samples = [
        _sample((0.1, 0.1), subject=f"s{i % 2:02d}", image=images[i]) for i in range(4)
    ]
    report = evaluate(model, samples)
    path = tmp_path / "eval.csv"
    write_eval_csv(report, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "subject_id,n,mean_deg,median_deg"
    assert lines[1].startswith("s00,2,") and lines[2].startswith("s01,2,")
    assert lines[3].startswith("ALL,4,")
    assert f"{report.mean_deg:.4f}" in lines[3]


# -- config files --------------------------------------------------------------


def test_train_config_from_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("lr = 0.002  # smaller\nepochs=7\n\n# comment line\nk=5\n")
    cfg = TrainConfig.from_file(path)
    assert cfg.lr == 0.002 and cfg.epochs == 7 and cfg.k == 5
    assert cfg.batch_size == 15  # untouched default


def test_train_config_unknown_key(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("lr=0.001\nmomentum=0.9\n")
    with pytest.raises(ConfigError, match=r":2: unknown config key 'momentum'"):
        TrainConfig.from_file(path)


def test_train_config_bad_value(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("epochs=seven\n")
    with pytest.raises(ConfigError, match=r":1: bad value for epochs"):
        TrainConfig.from_file(path)


def test_train_config_missing_equals(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("just some words\n")
    with pytest.raises(ConfigError, match="key=value"):
        TrainConfig.from_file(path)


# -- training loops -------------------------------------------------------------


@pytest.fixture(scope="module")
def micro_dataset():
    cfg = SyntheticEyeConfig(resolution=64, seed=21)
    return synth_generate(cfg, n_subjects=2, n_per_subject=30)


def test_train_generalized_requires_adapters(micro_dataset):
    model = _tiny_model(adapters=False)
    with pytest.raises(ConfigError):
        train_generalized(model, micro_dataset, TrainConfig(epochs=1, k=2))


def test_train_generalized_smoke(micro_dataset):
    model = _tiny_model(seed=6)
    h_before = backbone_hash(model)
    cfg = TrainConfig(epochs=2, k=4, batch_size=4, seed=0)
    model, report = train_generalized(model, micro_dataset, cfg)
    assert report.epochs_run == 2
    assert len(report.val_history) == cfg.warmup_epochs + 2
    assert report.backbone_hash_before == report.backbone_hash_after == h_before
    assert backbone_hash(model) == h_before
    assert report.val_mean_deg == min(report.val_history)
    # the tunable footprint counts adapter state incl. running stats; the
    # optimizer sees the strict subset that carries gradients
    assert report.tunable_params == adapter_param_count(model)
    assert adapter_param_count(model, optimizer_only=True) == sum(
        p.size for p in model.parameters() if p.trainable
    )


def test_personalize_needs_exactly_five(micro_dataset):
    model = _tiny_model(seed=7)
    replay = ReplaySource.from_dataset(micro_dataset, k=4)
    shots = micro_dataset.filter_subject("s00")[:4]
    with pytest.raises(DataError, match="exactly 5"):
        personalize(model, shots, replay, PersonalizeConfig(epochs=1))


def test_personalize_rejects_subject_mix(micro_dataset):
    model = _tiny_model(seed=7)
    replay = ReplaySource.from_dataset(micro_dataset, k=4)
    shots = micro_dataset.filter_subject("s00")[:3] + micro_dataset.filter_subject("s01")[:2]
    with pytest.raises(DataError, match="subject"):
        personalize(model, shots, replay, PersonalizeConfig(epochs=1))


def test_personalize_touches_only_stage4_adapters(micro_dataset):
    model = _tiny_model(seed=8)
    replay = ReplaySource.from_dataset(micro_dataset, k=4)
    shots = micro_dataset.filter_subject("s00")[:5]
    non_stage4 = {
        name
        for name, _ in model.named_parameters()
        if not (name.startswith("stages.3.") and ".adapter." in name)
    }
    before = {
        name: p.data.copy() for name, p in model.named_parameters() if name in non_stage4
    }
    model, report = personalize(
        model, shots, replay, PersonalizeConfig(epochs=3, patience=3, seed=0)
    )
    for name, p in model.named_parameters():
        if name in non_stage4:
            assert np.array_equal(p.data, before[name]), name
    assert report.frozen_hash_before == report.frozen_hash_after
    assert report.tunable_params == sum(
        p.size
        for name, p in model.named_parameters()
        if name.startswith("stages.3.") and ".adapter." in name
    )
    assert report.steps_run <= 3
    assert len(report.shot_error_history) == report.steps_run + 1
