"""Loss ablation on a collected run: CE vs RSL on the same replayed examples.

    python scripts/rsl_vs_ce.py RUN_DIR [--steps 1500] [--trials 3] [--out DIR]
"""

import argparse
import json

from interseg import activeloop
from interseg import evalbench as eb


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run")
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--seeds-per-trial", type=int, default=3)
    ap.add_argument("--b", type=float, default=0.7)
    ap.add_argument("--out")
    args = ap.parse_args()

    cfg = activeloop.RunManifest.read(args.run).resolved_config()
    store = activeloop.store_from_run(args.run)
    scenes = eb.make_eval_scenes(cfg, "test", "test")
    rows = eb.loss_ablation(
        store, cfg, scenes, args.trials, args.seeds_per_trial, args.steps, args.b,
        progress=lambda r: print(json.dumps(r), flush=True),
    )
    print(json.dumps(eb.ablation_summary(rows), indent=2))
    if args.out:
        eb.emit_report({"loss_ablation": rows}, args.out)


if __name__ == "__main__":
    main()
