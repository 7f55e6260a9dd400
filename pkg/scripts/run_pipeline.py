"""Run the whole training pipeline at desk scale and print a summary.

Stages: synthesize eye data, distill the teacher into the compact student,
fine-tune the adapters for generalized gaze, then personalize on five shots
from a new subject while replaying population data against forgetting.

Takes a few minutes on one CPU core with the defaults:

    python3 scripts/run_pipeline.py --out runs/demo
"""

import argparse
import time
from pathlib import Path

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


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="output directory for data and weights")
    ap.add_argument("--subjects", type=int, default=4)
    ap.add_argument("--per-subject", type=int, default=500)
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--distill-epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    base_cfg = SyntheticEyeConfig(resolution=args.resolution, seed=args.seed + 5)
    dataset = synth_generate(base_cfg, args.subjects, args.per_subject,
                             out_dir=out / "general")
    print(f"[1/5] synthesized {len(dataset)} frames "
          f"({args.subjects} subjects) in {time.perf_counter() - t0:.0f}s")

    t = time.perf_counter()
    teacher = build_teacher(seed=args.seed)
    distilled = distill_run(
        teacher,
        dataset.filter_split("train"),
        epochs=args.distill_epochs,
        config=DistillConfig(seed=args.seed),
        out_dir=out / "distill",
    )
    first, last = distilled.losses[0]["total"], distilled.losses[-1]["total"]
    print(f"[2/5] distilled {distilled.steps} steps, loss {first:.4f} -> {last:.4f} "
          f"in {time.perf_counter() - t:.0f}s")

    t = time.perf_counter()
    student = attach_adapters(distilled.student, seed=args.seed)
    student, report = train_generalized(student, dataset, TrainConfig(seed=args.seed))
    val = evaluate(student, dataset.filter_split("val"))
    test = evaluate(student, dataset.filter_split("test"))
    model_path = out / "student_trained.dftw"
    save_model(student, model_path, resolution=args.resolution)
    print(f"[3/5] generalized training: best epoch {report.best_epoch}, "
          f"val {val.mean_deg:.3f} deg, test {test.mean_deg:.3f} deg "
          f"in {time.perf_counter() - t:.0f}s -> {model_path}")

    t = time.perf_counter()
    personal_ds = synth_generate(
        personal_subject_config(base_cfg), 1, 60,
        out_dir=out / "personal", subject_prefix="p", personal_shots=5,
    )
    shots = [s for s in personal_ds if s.split == "personal"]
    held_out = [s for s in personal_ds if s.split != "personal"]
    before = evaluate(student, held_out)
    print(f"[4/5] new subject: {before.mean_deg:.3f} deg before personalization "
          f"({len(shots)} calibration shots, {len(held_out)} held out)")

    replay = ReplaySource.from_dataset(dataset, seed=args.seed)
    student, prep = personalize(student, shots, replay, PersonalizeConfig(seed=args.seed))
    after = evaluate(student, held_out)
    val_after = evaluate(student, dataset.filter_split("val"))
    save_model(student, out / "student_personalized.dftw", resolution=args.resolution)

    improvement = (before.mean_deg - after.mean_deg) / before.mean_deg
    drift = (val_after.mean_deg - val.mean_deg) / val.mean_deg
    print(f"[5/5] personalized in {time.perf_counter() - t:.0f}s "
          f"({prep.steps_run} steps, kept step {prep.best_step}, "
          f"{prep.tunable_params:,} tunable params)")
    print(f"      subject error {before.mean_deg:.3f} -> {after.mean_deg:.3f} deg "
          f"({improvement:+.1%}), generalized val drift {drift:+.1%}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
