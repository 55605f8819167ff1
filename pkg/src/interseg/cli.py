"""Command-line entry point.

    interseg collect   --seed S --steps N --out DIR [--config F] [--set k=v ...] [--resume]
    interseg train     --run DIR --seed S --steps N --loss-mode {ce,rsl} --out FILE.ckpt
    interseg eval      --checkpoint F (--scenes MANIFEST | --objects SPLIT --background SPLIT) --out DIR
    interseg rearrange (--checkpoint F | --oracle) --seed S --seeds N --out DIR
    interseg report    --run DIR --out DIR
    interseg scenes    --seed S --n N --objects SPLIT --background SPLIT --out MANIFEST

Relative ``--out`` paths are resolved under ``$INTERSEG_OUT`` when it is set.
Errors are reported on stderr as one JSON line and exit with status 1; bad
usage exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import activeloop, arena, evalbench, rearrange
from .config import Config, load_config
from .model import init_params, load_checkpoint, save_checkpoint


def _out(path: str) -> Path:
    p = Path(path)
    base = os.environ.get("INTERSEG_OUT")
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _config(args) -> Config:
    return load_config(args.config, args.set)


def cmd_collect(args) -> int:
    cfg = _config(args)
    man = activeloop.run(args.seed, args.steps, cfg, _out(args.out), resume=args.resume, progress=args.verbose)
    pos = sum(r["label"] == "positive" for r in man.records)
    print(f"collected {man.interactions} interactions ({pos} positive) into {_out(args.out)}")
    return 0


def cmd_train(args) -> int:
    man = activeloop.RunManifest.read(args.run)
    cfg = man.resolved_config()
    for item in args.set or []:
        k, v = item.split("=", 1)
        cfg.set(k, v)
    store = activeloop.store_from_run(args.run)
    params = activeloop.train_offline(store, args.seed, args.steps, cfg, args.loss_mode, args.b)
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, params)
    print(f"trained {args.steps} steps ({args.loss_mode}) on {len(store)} examples -> {out}")
    return 0


def _scenes(args, cfg: Config) -> list[evalbench.EvalScene]:
    if args.scenes:
        return evalbench.scenes_from_manifest(args.scenes)
    return evalbench.make_eval_scenes(cfg, args.objects, args.background, args.n, args.scene_seed)


def cmd_eval(args) -> int:
    cfg = _config(args)
    params = load_checkpoint(args.checkpoint)
    scenes = _scenes(args, cfg)
    preds = evalbench.predict(params, scenes, cfg.eval)
    results = evalbench.evaluate(preds, scenes, args.iou)
    pr_rows = []
    for t, res in results.items():
        pr_rows += [{"curve": f"iou{t}", "rank": k + 1, "precision": p, "recall": r} for k, (p, r) in enumerate(res.pr)]
    report = {"pr_curve": pr_rows}
    if args.generalization:
        gm = evalbench.generalization_matrix(params, cfg, args.n)
        report["generalization"] = [
            {"cell": c, "objects": evalbench.CELLS[c][0], "background": evalbench.CELLS[c][1], "iou": t, "ap": ap}
            for c, vals in gm["cells"].items()
            for t, ap in vals.items()
        ]
    evalbench.emit_report(report, _out(args.out))
    for t, res in results.items():
        print(f"AP@{t}: {res.ap:.4f} ({res.n_gt} objects, {len(scenes)} scenes)")
    return 0


def cmd_rearrange(args) -> int:
    cfg = _config(args)
    if not args.oracle and not args.checkpoint:
        raise ValueError("rearrange needs --checkpoint or --oracle")
    if args.oracle:
        seg, name = rearrange.oracle_segmenter, "oracle"
    else:
        seg, name = rearrange.learned_segmenter(load_checkpoint(args.checkpoint), cfg), "learned"
    if args.scene or args.target_scene:
        if not (args.scene and args.target_scene):
            raise ValueError("--scene and --target-scene go together")
        start = arena.read_scene_manifest(args.scene)[0][0]
        target = arena.read_scene_manifest(args.target_scene)[0][0]
        out = rearrange.execute(start, seg, arena.render(target), cfg, target)
        rows = [{"seed": args.seed, "segmenter": name, "success": int(out.success), "interactions": out.interactions,
                 "max_displacement": round(out.max_displacement, 6)}]
    else:
        seeds = list(range(args.seed, args.seed + args.seeds))
        rows = rearrange.run_episodes(seeds, cfg, seg, name, args.objects, args.background)
    evalbench.emit_report({"rearrange": rows}, _out(args.out))
    ok = sum(r["success"] for r in rows)
    print(f"{name}: {ok}/{len(rows)} episodes succeeded")
    return 0


def report_rows(run_dir: str | Path, cfg: Config, scenes: list[evalbench.EvalScene]) -> dict[str, list[dict]]:
    """AP and hypothesis recall at every checkpoint of a run (step 0 = fresh init)."""
    man = activeloop.RunManifest.read(run_dir)
    ap_rows, rec_rows = [], []
    points = [(0, init_params(activeloop.stream(man.seed, "init"), cfg.model))]
    points += [(k, load_checkpoint(Path(run_dir) / p)) for k, p in sorted(man.checkpoints.items())]
    for k, params in points:
        preds = evalbench.predict(params, scenes, cfg.eval)
        res = evalbench.evaluate(preds, scenes, (0.3, 0.5))
        ap_rows.append({"interactions": k, "ap_iou30": res[0.3].ap, "ap_iou50": res[0.5].ap})
        rec = evalbench.average_precision(scenes, preds, cfg.eval.recall_iou)
        for level in cfg.eval.precision_levels:
            rec_rows.append({"interactions": k, "precision_level": level, "recall": rec.recall_at(level)})
    return {"ap_vs_interactions": ap_rows, "recall_vs_interactions": rec_rows}


def cmd_report(args) -> int:
    man = activeloop.RunManifest.read(args.run)
    cfg = man.resolved_config()
    scenes = evalbench.make_eval_scenes(cfg, args.objects, args.background, args.n, args.scene_seed)
    rows = report_rows(args.run, cfg, scenes)
    paths = evalbench.emit_report(rows, _out(args.out))
    print("\n".join(str(p) for p in paths))
    return 0


def cmd_scenes(args) -> int:
    cfg = _config(args)
    bgs = arena.background_split(args.background, cfg.arena)
    states = [arena.new_scene(cfg.arena, args.objects, args.background, args.seed + k, bg_index=k % len(bgs)) for k in range(args.n)]
    tags = [{"objects": args.objects, "background": args.background, "seed": args.seed + k} for k in range(args.n)]
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    arena.write_scene_manifest(out, states, tags)
    print(f"wrote {len(states)} scenes to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="interseg", description="Instance segmentation learned by simulated interaction.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(sp, seed_required: bool):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, required=seed_required)

    def split_args(sp):
        sp.add_argument("--objects", default="test", choices=arena.SPLITS)
        sp.add_argument("--background", default="test", choices=arena.SPLITS)
        sp.add_argument("--n", type=int, default=None, help="number of generated scenes")
        sp.add_argument("--scene-seed", type=int, default=None)

    sp = sub.add_parser("collect", help="run the interaction loop")
    common(sp, True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("train", help="train offline on a collected run")
    common(sp, True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--loss-mode", choices=("ce", "rsl"), default="rsl")
    sp.add_argument("--b", type=float, default=None, help="IoU margin for the robust loss")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="AP of a checkpoint on held-out scenes")
    common(sp, False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenes", help="scene manifest (default: generate from splits)")
    split_args(sp)
    sp.add_argument("--iou", type=_floats, default=(0.3, 0.5))
    sp.add_argument("--generalization", action="store_true", help="also compute the split matrix")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rearrange", help="goal-directed rearrangement episodes")
    common(sp, True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="use true masks")
    sp.add_argument("--scene")
    sp.add_argument("--target-scene")
    sp.add_argument("--seeds", type=int, default=20)
    split_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_rearrange)

    sp = sub.add_parser("report", help="learning curves over a run's checkpoints")
    sp.add_argument("--run", required=True)
    split_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("scenes", help="write a scene manifest")
    common(sp, True)
    split_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_scenes, n=10)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "steps", 1) is not None and getattr(args, "steps", 1) < 1:
        parser.error("--steps must be >= 1")
    try:
        return args.func(args)
    except Exception as exc:  # reported as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
