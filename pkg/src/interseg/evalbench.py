"""Evaluation protocols: matching, AP, hypothesis recall, split generalization, reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import arena
from .config import ArenaConfig, Config, EvalConfig, NoiseConfig, PseudoLabelConfig
from .maskcore import Hypothesis, Point2, centroid, connected_components, iou, pairwise_iou, principal_axis
from .model import ModelParams, infer_segments
from .pseudolabel import extract_interaction_mask


@dataclass(eq=False)
class EvalScene:
    image: np.ndarray
    gt: list[np.ndarray]
    objects: str = "test"
    background: str = "test"
    seed: int = 0


@dataclass
class APResult:
    iou_thresh: float
    ap: float
    pr: list[tuple[float, float]] = field(default_factory=list)
    n_gt: int = 0

    def recall_at(self, precision: float) -> float | None:
        return recall_at_precision(self.pr, precision)


# ---------------------------------------------------------------------------
# scenes


def make_eval_scenes(cfg: Config, objects: str, background: str, n: int | None = None, seed: int | None = None) -> list[EvalScene]:
    """Fresh scenes with exact simulator ground truth.

    Scene ``k`` uses seed ``seed + k`` whatever the splits, so cells of the
    generalization matrix share layouts whenever their pools coincide.
    """
    n = cfg.eval.n_scenes if n is None else n
    seed = cfg.eval.scene_seed if seed is None else seed
    bgs = arena.background_split(background, cfg.arena)
    out = []
    for k in range(n):
        state = arena.new_scene(cfg.arena, objects, background, seed + k, bg_index=k % len(bgs))
        gt = [m for _, m in arena.true_masks(state) if m.any()]
        out.append(EvalScene(arena.render(state), gt, objects, background, seed + k))
    return out


def scenes_from_manifest(path: str | Path) -> list[EvalScene]:
    states, tags = arena.read_scene_manifest(path)
    out = []
    for state, tag in zip(states, tags):
        gt = [m for _, m in arena.true_masks(state) if m.any()]
        out.append(EvalScene(arena.render(state), gt, tag.get("objects", "?"), tag.get("background", "?"), tag.get("seed", 0)))
    return out


# ---------------------------------------------------------------------------
# matching and AP


def _score_order(preds: Sequence[Hypothesis]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))


def match_predictions(
    preds: Sequence[Hypothesis], gt: Sequence[np.ndarray], iou_thresh: float
) -> list[tuple[int, int | None]]:
    """Greedy one-to-one matching, in descending score.

    Each prediction takes the unmatched gt with the highest IoU (lowest index
    on ties) provided the IoU reaches ``iou_thresh``. Returned in score order.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    order = _score_order(preds)
    if not gt or not preds:
        return [(i, None) for i in order]
    ious = pairwise_iou([p.mask for p in preds], list(gt))
    free = np.ones(len(gt), dtype=bool)
    out = []
    for i in order:
        row = np.where(free, ious[i], -1.0)
        j = int(np.argmax(row))
        if row[j] >= iou_thresh:
            free[j] = False
            out.append((i, j))
        else:
            out.append((i, None))
    return out


def pr_curve(flags: Sequence[bool], n_gt: int) -> list[tuple[float, float]]:
    """(precision, recall) after each prediction of a ranked TP/FP list."""
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    k = np.arange(1, len(tp) + 1)
    return [(float(t / c), float(t / n_gt)) for t, c in zip(tp, k)]


def ap_from_pr(pr: Sequence[tuple[float, float]]) -> float:
    """Area under the precision envelope (max precision at recall >= r)."""
    if not pr:
        return 0.0
    prec = np.array([p for p, _ in pr] + [0.0])
    rec = np.array([0.0] + [r for _, r in pr])
    env = np.maximum.accumulate(prec[::-1])[::-1]
    return float(np.sum(np.diff(rec) * env[:-1]))


def average_precision(
    scenes: Sequence[EvalScene], preds: Sequence[Sequence[Hypothesis]], iou_thresh: float
) -> APResult:
    """AP with predictions pooled across scenes and ranked by score."""
    if len(scenes) != len(preds):
        raise ValueError("one prediction list per scene required")
    n_gt = sum(len(s.gt) for s in scenes)
    if n_gt == 0:
        raise ValueError("no ground-truth objects")
    pooled = []
    for s, (scene, ps) in enumerate(zip(scenes, preds)):
        for rank, (i, j) in enumerate(match_predictions(ps, scene.gt, iou_thresh)):
            pooled.append((-ps[i].score, s, rank, j is not None))
    pooled.sort(key=lambda t: t[:3])
    pr = pr_curve([t[3] for t in pooled], n_gt)
    return APResult(iou_thresh, ap_from_pr(pr), pr, n_gt)


def recall_at_precision(pr: Sequence[tuple[float, float]], precision: float) -> float | None:
    """Best recall over score cuts whose precision reaches ``precision``; None if none does."""
    best = None
    for p, r in pr:
        if p >= precision and (best is None or r > best):
            best = r
    return best


# ---------------------------------------------------------------------------
# model evaluation


def predict(params: ModelParams, scenes: Sequence[EvalScene], ecfg: EvalConfig) -> list[list[Hypothesis]]:
    return [infer_segments(params, s.image, ecfg.score_thresh, ecfg.nms_thresh, ecfg.top_k) for s in scenes]


def evaluate(
    preds: Sequence[Sequence[Hypothesis]], scenes: Sequence[EvalScene], thresholds: Sequence[float]
) -> dict[float, APResult]:
    return {t: average_precision(scenes, preds, t) for t in thresholds}


def hypothesis_recall(
    params: ModelParams,
    scenes: Sequence[EvalScene],
    iou_thresh: float,
    precision_levels: Sequence[float],
    ecfg: EvalConfig | None = None,
    preds: Sequence[Sequence[Hypothesis]] | None = None,
) -> dict[float, float | None]:
    """Recall of ground-truth objects at each precision level (None if unreachable)."""
    ecfg = ecfg or EvalConfig()
    if preds is None:
        preds = predict(params, scenes, ecfg)
    res = average_precision(scenes, preds, iou_thresh)
    return {p: recall_at_precision(res.pr, p) for p in precision_levels}


CELLS = {
    "A": ("train", "train"),
    "B": ("test", "train"),
    "C": ("train", "test"),
    "D": ("test", "test"),
}


def generalization_matrix(params: ModelParams, cfg: Config, n: int | None = None) -> dict:
    """AP per (objects, background) split cell and the drops relative to cell A.

    Returns ``{"cells": {cell: {iou: ap}}, "deltas": {...}}`` where the deltas
    are ``object_swap = A - B``, ``background_swap = A - C`` and ``both = A - D``.
    """
    cells = {}
    for name, (objs, bg) in CELLS.items():
        scenes = make_eval_scenes(cfg, objs, bg, n)
        res = evaluate(predict(params, scenes, cfg.eval), scenes, cfg.eval.iou_thresholds)
        cells[name] = {t: r.ap for t, r in res.items()}
    deltas = {}
    for t in cfg.eval.iou_thresholds:
        a = cells["A"][t]
        deltas[t] = {"object_swap": a - cells["B"][t], "background_swap": a - cells["C"][t], "both": a - cells["D"][t]}
    return {"cells": cells, "deltas": deltas}


def loss_ablation(
    store,
    cfg: Config,
    scenes: Sequence[EvalScene],
    trials: int = 3,
    seeds_per_trial: int = 3,
    steps: int = 1500,
    b: float = 0.7,
    iou_thresh: float = 0.5,
    progress=None,
) -> list[dict]:
    """CE vs RSL trained on the same replayed store, ``seeds_per_trial`` seeds per trial.

    Seed ``trial * seeds_per_trial + k`` drives both models of a pair, so the
    two differ only in the mask loss.
    """
    from .activeloop import train_offline

    rows = []
    for trial in range(trials):
        for k in range(seeds_per_trial):
            seed = trial * seeds_per_trial + k
            for mode in ("ce", "rsl"):
                params = train_offline(store, seed, steps, cfg, mode, rsl_b=b if mode == "rsl" else None)
                ap = average_precision(scenes, predict(params, scenes, cfg.eval), iou_thresh).ap
                rows.append({"trial": trial, "seed": seed, "loss_mode": mode, "ap_iou50": ap})
                if progress:
                    progress(rows[-1])
    return rows


def ablation_summary(rows: Sequence[dict]) -> dict:
    """Pooled means per loss mode and the across-seed spread of each trial."""
    out: dict = {"mean": {}, "std": {}}
    for mode in ("ce", "rsl"):
        aps = [r["ap_iou50"] for r in rows if r["loss_mode"] == mode]
        out["mean"][mode] = float(np.mean(aps))
        trials = sorted({r["trial"] for r in rows})
        out["std"][mode] = [
            float(np.std([r["ap_iou50"] for r in rows if r["loss_mode"] == mode and r["trial"] == t], ddof=1))
            for t in trials
        ]
    out["rsl_lower_std_trials"] = sum(r <= c for r, c in zip(out["std"]["rsl"], out["std"]["ce"]))
    return out


# ---------------------------------------------------------------------------
# pseudo-label quality


def label_quality(
    acfg: ArenaConfig,
    noise: NoiseConfig,
    n_scenes: int = 40,
    per_scene: int = 10,
    seed: int = 0,
    pcfg: PseudoLabelConfig | None = None,
    good_iou: float = 0.8,
) -> dict:
    """How clean are interaction masks when the agent always aims well?

    Each interaction picks a random visible object at its centroid with the
    gripper perpendicular to its major axis. A mask is imperfect when its IoU
    with that object's true mask is below ``good_iou``; ``imperfect_fraction``
    is taken over interactions that produced a mask.
    """
    pcfg = pcfg or PseudoLabelConfig()
    rng = np.random.default_rng(seed)
    ious, missing, n = [], 0, 0
    for k in range(n_scenes):
        state = arena.new_scene(acfg, "train", "train", seed * 100_003 + k)
        for _ in range(per_scene):
            visible = [(i, m) for i, m in arena.true_masks(state) if m.sum() >= 2]
            _, m = visible[int(rng.integers(len(visible)))]
            c = centroid(m)
            place = Point2(float(rng.uniform(0, acfg.width - 1)), float(rng.uniform(0, acfg.height - 1)))
            action = arena.PickPlaceAction(c, (principal_axis(m) + np.pi / 2) % np.pi, place)
            state, out = arena.pick_place(state, action, noise, acfg)
            got = extract_interaction_mask(*out.images, c, pcfg)
            n += 1
            if got is None:
                missing += 1
            else:
                ious.append(iou(got, m))
    ious = np.array(ious)
    return {
        "interactions": n,
        "no_mask_fraction": missing / n,
        "mean_iou": float(ious.mean()) if ious.size else float("nan"),
        "imperfect_fraction": float((ious < good_iou).mean()) if ious.size else float("nan"),
    }


# ---------------------------------------------------------------------------
# bottom-up colour baseline


def color_threshold_segments(image: np.ndarray, threshold: float, min_area: int = 20) -> list[Hypothesis]:
    """Pixels far from the median colour, split into connected components.

    Each component is scored by its mean colour deviation.
    """
    med = np.median(image.reshape(-1, 3), axis=0)
    dev = np.abs(image - med).max(axis=2)
    out = []
    for comp in connected_components(dev > threshold, connectivity=8):
        area = int(comp.sum())
        if area < min_area:
            break
        ys, xs = np.nonzero(comp)
        out.append(Hypothesis(comp, float(dev[comp].mean()), Point2(float(xs.mean()), float(ys.mean()))))
    return out


def tune_color_baseline(scenes: Sequence[EvalScene], iou_thresh: float, grid: Sequence[float] | None = None) -> float:
    """Threshold maximising AP on the given (training) scenes."""
    grid = grid if grid is not None else np.round(np.arange(0.04, 0.61, 0.02), 2)
    best, best_ap = float(grid[0]), -1.0
    for t in grid:
        ap = average_precision(scenes, [color_threshold_segments(s.image, float(t)) for s in scenes], iou_thresh).ap
        if ap > best_ap:
            best, best_ap = float(t), ap
    return best


# ---------------------------------------------------------------------------
# reports

# column schema per experiment; the first column is the x axis of its plot
SCHEMAS = {
    "ap_vs_interactions": ("interactions", "ap_iou30", "ap_iou50"),
    "recall_vs_interactions": ("interactions", "precision_level", "recall"),
    "pr_curve": ("curve", "rank", "precision", "recall"),
    "generalization": ("cell", "objects", "background", "iou", "ap"),
    "loss_ablation": ("trial", "seed", "loss_mode", "ap_iou50"),
    "rearrange": ("seed", "segmenter", "success", "interactions", "max_displacement"),
}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def _plot(name: str, columns: Sequence[str], rows: Sequence[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "interseg", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if name == "ap_vs_interactions":
            xs = [r["interactions"] for r in rows]
            for c in ("ap_iou30", "ap_iou50"):
                ax.plot(xs, [r[c] for r in rows], marker="o", label=c)
            ax.set_xlabel("interactions")
            ax.set_ylabel("AP")
        elif name == "recall_vs_interactions":
            for level in sorted({r["precision_level"] for r in rows}):
                sel = [r for r in rows if r["precision_level"] == level]
                ax.plot([r["interactions"] for r in sel], [r["recall"] if r["recall"] is not None else np.nan for r in sel],
                        marker="o", label=f"precision {level}")
            ax.set_xlabel("interactions")
            ax.set_ylabel("recall")
        elif name == "pr_curve":
            for curve in sorted({r["curve"] for r in rows}):
                sel = [r for r in rows if r["curve"] == curve]
                ax.plot([r["recall"] for r in sel], [r["precision"] for r in sel], label=curve)
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
        elif name == "generalization":
            ious = sorted({r["iou"] for r in rows})
            cells = sorted({r["cell"] for r in rows})
            width = 0.8 / max(len(ious), 1)
            for k, t in enumerate(ious):
                vals = {r["cell"]: r["ap"] for r in rows if r["iou"] == t}
                ax.bar(np.arange(len(cells)) + k * width, [vals.get(c, 0.0) for c in cells], width, label=f"IoU {t}")
            ax.set_xticks(np.arange(len(cells)) + width * (len(ious) - 1) / 2, cells)
            ax.set_ylabel("AP")
        elif name == "loss_ablation":
            for mode in sorted({r["loss_mode"] for r in rows}):
                sel = [r for r in rows if r["loss_mode"] == mode]
                ax.plot([r["seed"] for r in sel], [r["ap_iou50"] for r in sel], "o", label=mode)
            ax.set_xlabel("seed")
            ax.set_ylabel("AP@0.5")
        elif name == "rearrange":
            for seg in sorted({r["segmenter"] for r in rows}):
                sel = [r for r in rows if r["segmenter"] == seg]
                ax.plot([r["seed"] for r in sel], [r["max_displacement"] for r in sel], "o", label=seg)
            ax.set_xlabel("seed")
            ax.set_ylabel("max displacement (px)")
        ax.set_title(name.replace("_", " "))
        if rows:
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(results: dict[str, Sequence[dict]], out_dir: str | Path) -> list[Path]:
    """One CSV and one SVG per experiment, named after it. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(results):
        if name not in SCHEMAS:
            raise ValueError(f"unknown experiment {name!r}; known: {', '.join(sorted(SCHEMAS))}")
        rows = list(results[name])
        cols = SCHEMAS[name]
        write_csv(out / f"{name}.csv", cols, rows)
        _plot(name, cols, rows, out / f"{name}.svg")
        written += [out / f"{name}.csv", out / f"{name}.svg"]
    return written


def read_csv(path: str | Path) -> list[dict]:
    """Rows of a report CSV with numeric fields converted back."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            conv = {}
            for k, v in row.items():
                if v == "":
                    conv[k] = None
                    continue
                try:
                    conv[k] = int(v)
                except ValueError:
                    try:
                        conv[k] = float(v)
                    except ValueError:
                        conv[k] = v
            out.append(conv)
    return out
