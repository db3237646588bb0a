"""Test accuracy against the number of inducing points on the controlled blobs data.

    python scripts/inducing_sweep.py --sizes 2 10 30 --seeds 5 --epochs 20
"""
import argparse
from pathlib import Path

from svgpcr.data_io import fmt, write_table
from svgpcr.experiments import blobs_problem, inducing_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[2, 10, 30])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out", type=Path, default=Path("results/inducing_sweep.csv"))
    args = p.parse_args()

    acc = inducing_sweep(blobs_problem(), args.sizes, range(args.seeds), epochs=args.epochs)
    for M, row in zip(args.sizes, acc):
        print(f"M={M:3d}  mean {row.mean():.4f}  sd {row.std(ddof=1):.4f}  runs {' '.join(f'{a:.3f}' for a in row)}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_table(args.out, ["num_inducing", "seed", "test_accuracy"],
                [[M, s, fmt(a)] for M, row in zip(args.sizes, acc) for s, a in enumerate(row)],
                [f"epochs={args.epochs}"])


if __name__ == "__main__":
    main()
