"""Goal-directed rearrangement: segment, describe, match, move until the scene matches a target."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import arena
from .config import Config
from .maskcore import Hypothesis, Point2, centroid, principal_axis
from .model import ModelParams, infer_segments

HIST_BINS = 8
AREA_WEIGHT = 20.0
SHAPE_WEIGHT = 10.0
# matching cost of a full arena width of separation
POSITION_WEIGHT = 0.5

Segmenter = Callable[[arena.ArenaState, np.ndarray], list[Hypothesis]]


@dataclass(eq=False)
class SegmentDescriptor:
    histogram: np.ndarray  # 3 * HIST_BINS, sums to 1
    area_fraction: float
    shape: np.ndarray  # (major, minor) second moments over area, anisotropy

    def vector(self) -> np.ndarray:
        return np.concatenate([self.histogram, [AREA_WEIGHT * self.area_fraction], SHAPE_WEIGHT * self.shape])


def describe(image: np.ndarray, mask: np.ndarray) -> SegmentDescriptor:
    """Colour histogram, relative area and rotation-invariant moment signature of a segment."""
    if mask.shape != image.shape[:2]:
        raise ValueError("dimension mismatch")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cannot describe an empty segment")
    px = image[mask]
    bins = np.minimum((px * HIST_BINS).astype(int), HIST_BINS - 1)
    hist = np.concatenate([np.bincount(bins[:, c], minlength=HIST_BINS) for c in range(3)]).astype(np.float64)
    hist /= hist.sum()
    ys, xs = np.nonzero(mask)
    if n >= 2:
        cov = np.cov(np.stack([xs, ys]).astype(np.float64), bias=True)
        lo, hi = np.linalg.eigvalsh(cov)
    else:
        lo = hi = 0.0
    aniso = (hi - lo) / (hi + lo) if hi + lo > 0 else 0.0
    shape = np.array([hi / n, lo / n, aniso])
    return SegmentDescriptor(hist, n / mask.size, shape)


def descriptor_distance(a: SegmentDescriptor, b: SegmentDescriptor) -> float:
    return float(np.abs(a.vector() - b.vector()).sum())


@dataclass
class Pairing:
    pairs: list[tuple[int, int]]
    cost: float
    unmatched_current: list[int] = field(default_factory=list)
    unmatched_target: list[int] = field(default_factory=list)


def match_segments(
    cur: list[tuple[Hypothesis, SegmentDescriptor]],
    tgt: list[tuple[Hypothesis, SegmentDescriptor]],
    position_weight: float = 0.0,
) -> Pairing:
    """Minimum total L1 descriptor cost, one to one.

    ``position_weight`` adds that much cost per pixel of centre distance,
    which separates look-alike objects.
    """
    if not cur or not tgt:
        return Pairing([], 0.0, list(range(len(cur))), list(range(len(tgt))))
    cost = np.array([[descriptor_distance(a, b) for _, b in tgt] for _, a in cur])
    if position_weight:
        pc = np.array([h.center for h, _ in cur])
        pt = np.array([h.center for h, _ in tgt])
        cost = cost + position_weight * np.hypot(pc[:, None, 0] - pt[None, :, 0], pc[:, None, 1] - pt[None, :, 1])
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    total = float(sum(cost[i, j] for i, j in pairs))
    return Pairing(
        pairs,
        total,
        sorted(set(range(len(cur))) - set(rows.tolist())),
        sorted(set(range(len(tgt))) - set(cols.tolist())),
    )


# ---------------------------------------------------------------------------
# segmenters


def learned_segmenter(params: ModelParams, cfg: Config) -> Segmenter:
    def seg(state: arena.ArenaState, image: np.ndarray) -> list[Hypothesis]:
        return infer_segments(params, image, cfg.model.score_thresh, cfg.model.nms_thresh, cfg.model.top_k)

    return seg


def oracle_segmenter(state: arena.ArenaState, image: np.ndarray) -> list[Hypothesis]:
    """True masks of the simulator state (ignores the image)."""
    out = []
    for _, m in arena.true_masks(state):
        if m.any():
            out.append(Hypothesis(m, 1.0, centroid(m)))
    return out


# ---------------------------------------------------------------------------
# task construction and execution


def tolerance(cfg: Config) -> float:
    return cfg.rearrange.tolerance_fraction * cfg.arena.width


def make_target(state: arena.ArenaState, rng: np.random.Generator, cfg: Config, n_displaced: int | None = None) -> arena.ArenaState:
    """Copy of ``state`` with 1..max_displaced objects moved to free spots.

    Moved objects keep their orientation and land more than twice the
    tolerance away from where they were.
    """
    target = state.copy()
    if not target.objects:
        return target
    k = n_displaced if n_displaced is not None else int(rng.integers(1, cfg.rearrange.max_displaced + 1))
    k = min(k, len(target.objects))
    ids = sorted(rng.choice([o.id for o in target.objects], size=k, replace=False).tolist())
    tol = tolerance(cfg)
    for oid in ids:
        obj = target.object_by_id(oid)
        others = [o for o in target.objects if o.id != oid]
        old = (obj.x, obj.y)
        hx, hy = obj.half_extent()
        for _ in range(cfg.arena.max_placement_tries):
            obj.x = float(rng.uniform(hx, target.width - 1 - hx))
            obj.y = float(rng.uniform(hy, target.height - 1 - hy))
            if np.hypot(obj.x - old[0], obj.y - old[1]) > 2 * tol and arena._fits(obj, others, 2.0):
                break
        else:
            obj.x, obj.y = old
    return target


def displacements(state: arena.ArenaState, target: arena.ArenaState) -> dict[int, float]:
    """Distance of each object to its target position.

    Copies of the same template are interchangeable: within each group of
    look-alikes, objects are assigned to target slots minimising total distance.
    """
    out: dict[int, float] = {}
    groups: dict[str, list[int]] = {}
    for o in state.objects:
        groups.setdefault(o.template.name, []).append(o.id)
    for ids in groups.values():
        cur = np.array([[state.object_by_id(i).x, state.object_by_id(i).y] for i in ids])
        tgt = np.array([[target.object_by_id(i).x, target.object_by_id(i).y] for i in ids])
        d = np.hypot(cur[:, None, 0] - tgt[None, :, 0], cur[:, None, 1] - tgt[None, :, 1])
        rows, cols = linear_sum_assignment(d)
        for r, c in zip(rows, cols):
            out[ids[r]] = float(d[r, c])
    return dict(sorted(out.items()))


@dataclass
class RearrangeOutcome:
    success: bool
    interactions: int
    displacements: dict[int, float]
    believed_done: bool
    actions: list[arena.PickPlaceAction] = field(default_factory=list)

    @property
    def max_displacement(self) -> float:
        return max(self.displacements.values(), default=0.0)


def _clip(p: Point2, w: int, h: int) -> Point2:
    return Point2(float(np.clip(p.x, 0, w - 1)), float(np.clip(p.y, 0, h - 1)))


def execute(
    state: arena.ArenaState,
    segmenter: Segmenter,
    target_image: np.ndarray,
    cfg: Config,
    target_state: arena.ArenaState | None = None,
) -> RearrangeOutcome:
    """Move matched segments, worst first, until every pair is within tolerance.

    The controller only sees images and the segmenter. ``target_state`` is
    used for scoring (and by the oracle segmenter); success means every
    object ends within tolerance of its target position.
    """
    tol = tolerance(cfg)
    tgt_hyps = segmenter(target_state, target_image)
    tgt = [(h, describe(target_image, h.mask)) for h in tgt_hyps]
    actions: list[arena.PickPlaceAction] = []
    believed = False
    s = state
    for it in range(cfg.rearrange.max_interactions + 1):
        image = arena.render(s)
        cur = [(h, describe(image, h.mask)) for h in segmenter(s, image)]
        pairing = match_segments(cur, tgt, POSITION_WEIGHT / s.width)
        worst, worst_d = None, -1.0
        for i, j in pairing.pairs:
            a, b = centroid(cur[i][0].mask), centroid(tgt[j][0].mask)
            d = float(np.hypot(a.x - b.x, a.y - b.y))
            if d > worst_d:
                worst, worst_d = (i, j), d
        if worst is None or worst_d <= tol:
            believed = True
            break
        if it == cfg.rearrange.max_interactions:
            break
        src, dst = cur[worst[0]][0].mask, tgt[worst[1]][0].mask
        axis = principal_axis(src) if src.sum() >= 2 else 0.0
        action = arena.PickPlaceAction(
            _clip(centroid(src), s.width, s.height), (axis + np.pi / 2) % np.pi, _clip(centroid(dst), s.width, s.height)
        )
        s, _ = arena.pick_place(s, action, cfg.noise, cfg.arena)
        actions.append(action)
    disp = displacements(s, target_state) if target_state is not None else {}
    success = bool(disp) and all(d <= tol for d in disp.values())
    return RearrangeOutcome(success, len(actions), disp, believed, actions)


def execute_random(
    state: arena.ArenaState, target_state: arena.ArenaState, rng: np.random.Generator, cfg: Config
) -> RearrangeOutcome:
    """Control without segmentation: uniform picks and places, stopped by ground truth."""
    tol = tolerance(cfg)
    s = state
    actions = []
    for _ in range(cfg.rearrange.max_interactions):
        if all(d <= tol for d in displacements(s, target_state).values()):
            break
        action = arena.PickPlaceAction(
            Point2(float(rng.uniform(0, s.width - 1)), float(rng.uniform(0, s.height - 1))),
            float(rng.uniform(0, np.pi)),
            Point2(float(rng.uniform(0, s.width - 1)), float(rng.uniform(0, s.height - 1))),
        )
        s, _ = arena.pick_place(s, action, cfg.noise, cfg.arena)
        actions.append(action)
    disp = displacements(s, target_state)
    return RearrangeOutcome(all(d <= tol for d in disp.values()), len(actions), disp, False, actions)


def episode(seed: int, cfg: Config, objects: str = "test", background: str = "test") -> tuple[arena.ArenaState, arena.ArenaState]:
    """Start and target states for one seeded rearrangement task."""
    start = arena.new_scene(cfg.arena, objects, background, seed)
    target = make_target(start, arena.make_rng(seed + 7919), cfg)
    return start, target


def run_episodes(
    seeds: list[int], cfg: Config, segmenter: Segmenter | None = None, name: str = "learned",
    objects: str = "test", background: str = "test",
) -> list[dict]:
    """One CSV-ready row per seed. ``segmenter=None`` runs the random controller."""
    rows = []
    for seed in seeds:
        start, target = episode(seed, cfg, objects, background)
        if segmenter is None:
            out = execute_random(start, target, arena.make_rng(seed + 104729), cfg)
        else:
            out = execute(start, segmenter, arena.render(target), cfg, target)
        rows.append(
            {
                "seed": seed,
                "segmenter": name,
                "success": int(out.success),
                "interactions": out.interactions,
                "max_displacement": round(out.max_displacement, 6),
            }
        )
    return rows
