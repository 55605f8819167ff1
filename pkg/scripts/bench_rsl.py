"""Time the latent-target solver on a batch of 32 masks at 48x48."""

import argparse

from interseg.config import RSLConfig
from interseg.rsl import benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--b", type=float, default=0.7)
    args = ap.parse_args()
    benchmark(args.batch, args.size, 1)
    t = benchmark(args.batch, args.size, args.repeats, cfg=RSLConfig(b=args.b))
    print(f"median {t * 1000:.1f} ms per batch of {args.batch} at {args.size}x{args.size}")


if __name__ == "__main__":
    main()
