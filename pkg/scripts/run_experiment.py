"""Full desk-scale experiment: collect, learning curves, generalization, rearrangement.

    python scripts/run_experiment.py OUT_DIR [--seed 0] [--steps 2000]

Writes the run under OUT_DIR/run and CSV + SVG reports under OUT_DIR/report.
The loss ablation is separate (scripts/rsl_vs_ce.py) because it dominates
the running time.
"""

import argparse
import logging
from pathlib import Path

from interseg import activeloop, evalbench, rearrange
from interseg.cli import report_rows
from interseg.config import load_config
from interseg.model import load_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    run_dir = out / "run"
    man = activeloop.RunManifest.read(run_dir) if (run_dir / "manifest").exists() else None
    if man is None or man.interactions < args.steps:
        man = activeloop.run(args.seed, args.steps, cfg, run_dir, resume=man is not None, progress=True)

    scenes = evalbench.make_eval_scenes(cfg, "test", "test")
    results = report_rows(run_dir, cfg, scenes)
    final = load_checkpoint(run_dir / man.checkpoints[max(man.checkpoints)])

    gm = evalbench.generalization_matrix(final, cfg)
    results["generalization"] = [
        {"cell": c, "objects": evalbench.CELLS[c][0], "background": evalbench.CELLS[c][1], "iou": t, "ap": ap}
        for c, vals in gm["cells"].items()
        for t, ap in vals.items()
    ]
    preds = evalbench.predict(final, scenes, cfg.eval)
    results["pr_curve"] = [
        {"curve": f"iou{t}", "rank": k + 1, "precision": p, "recall": r}
        for t in (0.3, 0.5)
        for k, (p, r) in enumerate(evalbench.average_precision(scenes, preds, t).pr)
    ]

    easy = load_config(args.config, args.set + ["noise.noise_free=true"])
    seeds = list(range(20))
    results["rearrange"] = (
        rearrange.run_episodes(seeds, easy, rearrange.oracle_segmenter, "oracle")
        + rearrange.run_episodes(seeds, easy, rearrange.learned_segmenter(final, easy), "learned")
        + rearrange.run_episodes(seeds, easy, None, "random")
    )
    for p in evalbench.emit_report(results, out / "report"):
        print(p)
    for row in results["ap_vs_interactions"]:
        print(f"{row['interactions']:5d} interactions: AP@0.3 {row['ap_iou30']:.3f}  AP@0.5 {row['ap_iou50']:.3f}")


if __name__ == "__main__":
    main()
