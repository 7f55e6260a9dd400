"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
Every subcommand takes --seed, and identical invocations produce identical
artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import bench as bench_mod
from . import detect as detect_mod
from .dataio import (
    bilinear_resize,
    load_dataset,
    load_model,
    read_image,
    save_model,
)
from .distill import DistillConfig, distill_run
from .errors import DataError, GazekitError
from .gaze_train import (
    PersonalizeConfig,
    ReplaySource,
    TrainConfig,
    evaluate,
    personalize,
    train_generalized,
    write_eval_csv,
)
from .models import attach_adapters
from .synth import SyntheticEyeConfig, synth_generate
from .tensor import Tensor, no_grad


def _xy_pair(text: str):
    try:
        x, y = text.split(",")
        return float(x), float(y)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected X,Y got {text!r}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazekit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
        return p

    p = cmd("synth", "generate a synthetic eye-image dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--per-subject", type=int, default=500)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--personal-shots", type=int, default=0,
                   help="mark this many samples per subject as the personal split")

    p = cmd("distill", "distill a teacher into the compact student")
    p.add_argument("--data", required=True, help="image manifest (labels ignored)")
    p.add_argument("--teacher", required=True, help="teacher weight file")
    p.add_argument("--out", required=True, help="output student weight file")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--mask-ratio", type=float, default=0.6)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)

    p = cmd("train", "generalized adapter training on a gaze dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value config file")

    p = cmd("personalize", "5-shot adapter calibration for one subject")
    p.add_argument("--model", required=True)
    p.add_argument("--personal", required=True, help="manifest holding the personal shots")
    p.add_argument("--replay", required=True, help="manifest for anti-forgetting replay")
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value config file")

    p = cmd("eval", "angular-error report over a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--split", default="test", help="train|val|test|personal|all")

    p = cmd("predict", "print pitch,yaw (radians) for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)

    p = cmd("detect", "gaze-directed detection over a stored feature grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--gaze", required=True, type=_xy_pair, metavar="X,Y")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--score", type=float, default=0.5)

    p = cmd("bench", "single-image forward latency")
    p.add_argument("--model", required=True)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--json", default=None, help="write the report JSON here")
    p.add_argument("--csv", default=None, help="write per-run timings CSV here")
    p.add_argument("--baseline", default=None,
                   help="second weight file; prints a comparison table and ratio")
    return parser


def _cmd_synth(args) -> int:
    config = SyntheticEyeConfig(resolution=args.resolution, seed=args.seed)
    out = Path(args.out)
    synth_generate(config, args.subjects, args.per_subject, out_dir=out,
                   personal_shots=args.personal_shots)
    print(out / "manifest.jsonl")
    return 0


def _cmd_distill(args) -> int:
    teacher, resolution = load_model(args.teacher, seed=args.seed)
    dataset = load_dataset(args.data, resolution=resolution)
    cfg = DistillConfig(batch_size=args.batch_size, mask_ratio=args.mask_ratio,
                        lr=args.lr, seed=args.seed)
    result = distill_run(teacher, dataset, epochs=args.epochs, config=cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.student, out, resolution=resolution)
    with open(out.with_suffix(".loss.csv"), "w") as fh:
        fh.write("step,total,img_term,feat3_term,feat4_term\n")
        fh.writelines(
            f"{i},{p['total']:.6f},{p['image']:.6f},{p['feat3']:.6f},{p['feat4']:.6f}\n"
            for i, p in enumerate(result.losses)
        )
    first, last = result.losses[0]["total"], result.losses[-1]["total"]
    print(f"distilled {result.steps} steps, loss {first:.4f} -> {last:.4f}, wrote {out}")
    return 0


def _with_overrides(cfg, args, keys):
    updates = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    return dataclasses.replace(cfg, seed=args.seed, **updates)


def _cmd_train(args) -> int:
    model, resolution = load_model(args.model, seed=args.seed)
    if not any(True for _ in model.adapters()):
        attach_adapters(model, seed=args.seed)
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    cfg = _with_overrides(cfg, args, ("lr", "epochs", "batch_size"))
    dataset = load_dataset(args.data, resolution=resolution)
    model, report = train_generalized(model, dataset, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out, resolution=resolution)
    print(f"tunable params: {report.tunable_params}")
    print(f"val mean angular error: {report.val_mean_deg:.4f} deg (best epoch {report.best_epoch})")
    print(f"wrote {out}")
    return 0


def _cmd_personalize(args) -> int:
    model, resolution = load_model(args.model, seed=args.seed)
    personal_ds = load_dataset(args.personal, resolution=resolution).filter_subject(args.subject)
    shots = [s for s in personal_ds.samples if s.split == "personal"] or list(personal_ds.samples)
    replay_ds = load_dataset(args.replay, resolution=resolution)
    replay = ReplaySource.from_dataset(replay_ds, seed=args.seed)
    cfg = PersonalizeConfig.from_file(args.config) if args.config else PersonalizeConfig()
    cfg = _with_overrides(cfg, args, ("lr", "epochs"))
    model, report = personalize(model, shots, replay, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out, resolution=resolution)
    first, best = report.shot_error_history[0], min(report.shot_error_history)
    print(f"tunable params: {report.tunable_params}")
    print(f"personal-shot error: {first:.4f} -> {best:.4f} deg over {report.steps_run} steps")
    print(f"wrote {out}")
    return 0


def _cmd_eval(args) -> int:
    model, resolution = load_model(args.model, seed=args.seed)
    dataset = load_dataset(args.data, resolution=resolution)
    samples = dataset.samples if args.split == "all" else dataset.filter_split(args.split)
    if not samples:
        raise DataError(f"empty dataset for split {args.split!r}")
    report = evaluate(model, samples)
    write_eval_csv(report, args.report)
    print(f"n={report.n} mean={report.mean_deg:.4f} median={report.median_deg:.4f} deg")
    return 0


def _cmd_predict(args) -> int:
    model, resolution = load_model(args.model, seed=args.seed)
    img = read_image(args.image)
    img = bilinear_resize(img, resolution, resolution)
    with no_grad():
        out = model.forward_gaze(Tensor(img[None, None]))
    pitch, yaw = (float(v) for v in out.data[0])
    print(f"{pitch:.6f},{yaw:.6f}")
    return 0


def _cmd_detect(args) -> int:
    grid = detect_mod.load_grid(args.grid)
    result = detect_mod.detect_at_gaze(
        grid, args.gaze, k=args.k, score_threshold=args.score, iou_threshold=args.iou
    )
    for box in result.boxes:
        print(box.to_json())
    print(
        f"examined {result.cells_examined}/{result.total_cells} cells"
        + (" (gaze clamped)" if result.gaze_clamped else ""),
        file=sys.stderr,
    )
    return 0


def _cmd_bench(args) -> int:
    model, _ = load_model(args.model, seed=args.seed)
    shape = (1, 1, args.resolution, args.resolution)
    report = bench_mod.measure_latency(
        model, input_shape=shape, n_runs=args.runs, warmup=args.warmup,
        threads=args.threads, seed=args.seed, name=Path(args.model).stem,
        csv_path=args.csv,
    )
    if args.json:
        Path(args.json).write_text(report.to_json())
    if args.baseline:
        base_model, _ = load_model(args.baseline, seed=args.seed)
        base_report = bench_mod.measure_latency(
            base_model, input_shape=shape, n_runs=args.runs, warmup=args.warmup,
            threads=args.threads, seed=args.seed, name=Path(args.baseline).stem,
        )
        ratio, table = bench_mod.compare(base_report, report)
        print(table)
    else:
        print(report.to_json())
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "distill": _cmd_distill,
    "train": _cmd_train,
    "personalize": _cmd_personalize,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "detect": _cmd_detect,
    "bench": _cmd_bench,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except (GazekitError, OSError, ValueError) as exc:
        print(f"gazekit {args.command}: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    entry()
