"""Build a randomly initialized teacher network and save it as a weight file.

The distill subcommand of the CLI needs a teacher weight file to start from;
this produces one with a pinned seed so runs are reproducible.

    python3 scripts/make_teacher.py --out teacher.dftw --seed 0
"""

import argparse

from gazekit.dataio import save_model
from gazekit.models import build_teacher, count_params


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="output weight file")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--resolution", type=int, default=128,
                    help="input resolution recorded with the weights")
    args = ap.parse_args()

    teacher = build_teacher(seed=args.seed)
    save_model(teacher, args.out, resolution=args.resolution)
    print(f"teacher saved to {args.out} ({count_params(teacher):,} params)")


if __name__ == "__main__":
    main()
