"""Measure how often interaction masks are imperfect under a noise setting.

    python scripts/calibrate_noise.py [--set noise.KEY=VALUE ...] [--scenes 40]
"""

import argparse
import json

from interseg import evalbench
from interseg.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--scenes", type=int, default=40)
    ap.add_argument("--per-scene", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = load_config(args.config, args.set)
    q = evalbench.label_quality(cfg.arena, cfg.noise, args.scenes, args.per_scene, args.seed, cfg.pseudo)
    print(json.dumps(q, indent=2))


if __name__ == "__main__":
    main()
