"""Measure single-image CPU latency of the teacher against the compact student.

Builds both networks fresh (or loads saved weights when paths are given) and
prints the side-by-side latency table plus the student/teacher ratio.

    python3 scripts/bench_compare.py --runs 1000 --resolution 128
"""

import argparse

from gazekit.bench import compare, measure_latency
from gazekit.dataio import load_model
from gazekit.models import build_student_from_teacher, build_teacher


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--teacher", default=None, help="teacher weight file (default: fresh build)")
    ap.add_argument("--student", default=None, help="student weight file (default: fresh build)")
    ap.add_argument("--runs", type=int, default=1000)
    ap.add_argument("--warmup", type=int, default=20)
    ap.add_argument("--resolution", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    teacher = load_model(args.teacher) if args.teacher else build_teacher(seed=args.seed)
    student = (
        load_model(args.student)
        if args.student
        else build_student_from_teacher(teacher, seed=args.seed + 1)
    )

    shape = (1, 1, args.resolution, args.resolution)
    a = measure_latency(teacher, shape, n_runs=args.runs, warmup=args.warmup,
                        seed=args.seed, name="teacher")
    b = measure_latency(student, shape, n_runs=args.runs, warmup=args.warmup,
                        seed=args.seed, name="student")
    ratio, table = compare(a, b)
    print(table)


if __name__ == "__main__":
    main()
