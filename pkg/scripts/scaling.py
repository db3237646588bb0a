"""Single-thread timing: seconds per step against minibatch size, seconds per epoch against N.

    python scripts/scaling.py
"""
import argparse
from pathlib import Path

import numpy as np

from svgpcr.data_io import fmt, write_table
from svgpcr.experiments import epoch_seconds, step_seconds


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch-sizes", type=int, nargs="+", default=[32, 64, 128, 256])
    p.add_argument("--sizes", type=int, nargs="+", default=[2000, 8000, 32000])
    p.add_argument("--out", type=Path, default=Path("results/scaling.csv"))
    args = p.parse_args()

    rows = []
    steps = [step_seconds(b) for b in args.batch_sizes]
    for b, t in zip(args.batch_sizes, steps):
        print(f"minibatch {b:4d}: {1e3 * t:8.2f} ms/step")
        rows.append(["step", b, fmt(t)])
    epochs = [epoch_seconds(N) for N in args.sizes]
    for N, t in zip(args.sizes, epochs):
        print(f"N {N:6d}: {t:8.3f} s/epoch")
        rows.append(["epoch", N, fmt(t)])
    # log-log slopes; 1.0 is linear growth
    print(f"slope vs minibatch {np.polyfit(np.log(args.batch_sizes), np.log(steps), 1)[0]:.2f}, "
          f"slope vs N {np.polyfit(np.log(args.sizes), np.log(epochs), 1)[0]:.2f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_table(args.out, ["measure", "size", "seconds"], rows)


if __name__ == "__main__":
    main()
