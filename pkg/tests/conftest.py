import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "gazekit",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("gazekit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Desk-scale end-to-end pipeline, trained once per session. Several tests
# (the accuracy acceptance checks, CLI predict) share these artifacts because
# the training run is the expensive part of the suite.

PIPELINE_SEED = 0
PIPELINE_RESOLUTION = 64


@pytest.fixture(scope="session")
def trained_pipeline(tmp_path_factory):
    from gazekit.dataio import save_model
    from gazekit.distill import DistillConfig, distill_run
    from gazekit.gaze_train import (
        PersonalizeConfig,
        ReplaySource,
        TrainConfig,
        evaluate,
        personalize,
        train_generalized,
    )
    from gazekit.models import attach_adapters, build_teacher
    from gazekit.synth import SyntheticEyeConfig, personal_subject_config, synth_generate

    started = time.perf_counter()
    root = tmp_path_factory.mktemp("pipeline")
    base_cfg = SyntheticEyeConfig(resolution=PIPELINE_RESOLUTION, seed=5)
    dataset = synth_generate(base_cfg, n_subjects=4, n_per_subject=500,
                             out_dir=root / "general")

    teacher = build_teacher(seed=PIPELINE_SEED)
    distilled = distill_run(
        teacher,
        dataset.filter_split("train"),
        epochs=3,
        config=DistillConfig(batch_size=8, lr=1e-3, seed=PIPELINE_SEED),
    )

    student = attach_adapters(distilled.student, seed=PIPELINE_SEED)
    train_cfg = TrainConfig(seed=PIPELINE_SEED)
    student, train_report = train_generalized(student, dataset, train_cfg)
    general_val = evaluate(student, dataset.filter_split("val"))
    general_test = evaluate(student, dataset.filter_split("test"))
    model_path = root / "student_trained.dftw"
    save_model(student, model_path, resolution=PIPELINE_RESOLUTION)

    personal_cfg = personal_subject_config(base_cfg)
    personal_ds = synth_generate(personal_cfg, n_subjects=1, n_per_subject=60,
                                 out_dir=root / "personal", subject_prefix="p",
                                 personal_shots=5)
    shots = [s for s in personal_ds if s.split == "personal"]
    held_out = [s for s in personal_ds if s.split != "personal"]
    personal_before = evaluate(student, held_out)

    replay = ReplaySource.from_dataset(dataset, seed=PIPELINE_SEED)
    student, personal_report = personalize(
        student, shots, replay, PersonalizeConfig(seed=PIPELINE_SEED)
    )
    personal_after = evaluate(student, held_out)
    general_val_after = evaluate(student, dataset.filter_split("val"))

    return {
        "elapsed_s": time.perf_counter() - started,
        "root": root,
        "teacher": teacher,
        "student": student,
        "dataset": dataset,
        "personal_dataset": personal_ds,
        "model_path": model_path,
        "distill_losses": distilled.losses,
        "train_report": train_report,
        "personal_report": personal_report,
        "general_val": general_val,
        "general_test": general_test,
        "general_val_after": general_val_after,
        "personal_before": personal_before,
        "personal_after": personal_after,
    }
