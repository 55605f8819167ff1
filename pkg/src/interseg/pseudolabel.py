"""Turn one interaction's image triple into training examples."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import PseudoLabelConfig
from .maskcore import Point2, difference_mask, largest_component, load_image, load_mask, save_image, save_mask

# positive crops are clamped to the pyramid's scale range widened by one
# augmentation step on each side
SCALE_MIN = 2.0**-1.5
SCALE_MAX = 2.0**0.5


@dataclass(eq=False)
class TrainingExample:
    patch: np.ndarray
    mask: np.ndarray | None
    positive: bool
    source_pick: Point2
    scale: float
    center: Point2
    source: int = -1
    meta: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return "positive" if self.positive else "negative"


def window_size(cfg: PseudoLabelConfig, width: int, height: int) -> int:
    return max(1, int(round(cfg.window_fraction * min(width, height))))


def area_threshold(cfg: PseudoLabelConfig, width: int, height: int) -> int:
    return max(1, int(np.ceil(cfg.area_fraction * width * height - 1e-9)))


def hard_negative_threshold(cfg: PseudoLabelConfig, patch_size: int) -> float:
    return cfg.hard_negative_fraction * patch_size


def sample_patch(image: np.ndarray, center: Point2, scale: float, size: int, order: int = 1) -> np.ndarray:
    """Resample a ``size`` x ``size`` window of ``image`` around ``center``.

    Patch pixel ``j`` maps to image coordinate ``center + (j + 0.5 - size/2) / scale``.
    Out-of-bounds image samples replicate the nearest edge pixel; boolean
    masks are padded with False so a border mask survives unchanged.
    ``order=0`` gives nearest-neighbour sampling (used for masks).
    """
    off = (np.arange(size, dtype=np.float64) + 0.5 - size / 2.0) / scale
    ys = center.y + off
    xs = center.x + off
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([yy, xx])
    if image.ndim == 2:
        src = image.astype(np.float64)
        if image.dtype == bool:
            out = ndimage.map_coordinates(src, coords, order=order, mode="grid-constant", cval=0.0)
            return out > 0.5
        return ndimage.map_coordinates(src, coords, order=order, mode="nearest")
    chans = [ndimage.map_coordinates(image[..., c], coords, order=order, mode="nearest") for c in range(image.shape[2])]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def _extract(a: np.ndarray, b: np.ndarray, center: Point2, cfg: PseudoLabelConfig) -> np.ndarray | None:
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    h, w = a.shape[:2]
    diff = difference_mask(a, b, center, window_size(cfg, w, h), cfg.diff_threshold)
    comp = largest_component(diff, connectivity=8)
    if comp is None or comp.sum() < area_threshold(cfg, w, h):
        return None
    return comp


def extract_interaction_mask(
    i_before: np.ndarray,
    i_mid: np.ndarray,
    i_after: np.ndarray,
    pick: Point2,
    cfg: PseudoLabelConfig,
) -> np.ndarray | None:
    """Mask of what disappeared at the pick location, or None.

    Uses the before/mid pair (the object is held by the gripper in ``i_mid``)
    inside a window around the pick point, keeps the largest connected
    component, and rejects it below the area threshold.
    """
    if not (i_before.shape == i_mid.shape == i_after.shape):
        raise ValueError("dimension mismatch")
    return _extract(i_before, i_mid, pick, cfg)


def extract_place_mask(i_mid: np.ndarray, i_after: np.ndarray, place: Point2, cfg: PseudoLabelConfig) -> np.ndarray | None:
    """Second mask from the mid/after pair, around the place location."""
    return _extract(i_mid, i_after, place, cfg)


def extract_motion_mask(before: np.ndarray, after: np.ndarray, cfg: PseudoLabelConfig) -> np.ndarray | None:
    """Whole-image frame difference for passively observed motion."""
    h, w = before.shape[:2]
    c = Point2((w - 1) / 2.0, (h - 1) / 2.0)
    if before.shape != after.shape:
        raise ValueError("dimension mismatch")
    diff = difference_mask(before, after, c, 2 * max(w, h), cfg.diff_threshold)
    comp = largest_component(diff, connectivity=8)
    if comp is None or comp.sum() < area_threshold(cfg, w, h):
        return None
    return comp


def fit_scale(mask: np.ndarray, cfg: PseudoLabelConfig, patch_size: int) -> tuple[Point2, float]:
    """Bounding-box centre and the scale that maps the mask extent to the canonical size."""
    ys, xs = np.nonzero(mask)
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    extent = max(x1 - x0 + 1, y1 - y0 + 1)
    scale = cfg.fit_fraction * patch_size / extent
    scale = float(np.clip(scale, SCALE_MIN, SCALE_MAX))
    return snap_center(Point2((x0 + x1) / 2.0, (y0 + y1) / 2.0)), scale


def snap_center(p: Point2) -> Point2:
    """Move a crop centre onto the half-pixel lattice so that scale-1 crops
    of an even-sized patch sample pixel centres exactly."""
    return Point2(float(np.floor(p.x) + 0.5), float(np.floor(p.y) + 0.5))


def make_examples(
    i_before: np.ndarray,
    mask: np.ndarray | None,
    pick: Point2,
    cfg: PseudoLabelConfig,
    patch_size: int = 48,
    source: int = -1,
) -> list[TrainingExample]:
    if mask is None:
        c = snap_center(pick)
        patch = sample_patch(i_before, c, 1.0, patch_size)
        return [TrainingExample(patch, None, False, pick, 1.0, c, source)]
    center, scale = fit_scale(mask, cfg, patch_size)
    patch = sample_patch(i_before, center, scale, patch_size)
    pmask = sample_patch(mask, center, scale, patch_size, order=0)
    return [TrainingExample(patch, pmask, True, pick, scale, center, source)]


def augment_positive(
    ex: TrainingExample,
    rng: np.random.Generator,
    n: int,
    cfg: PseudoLabelConfig | None = None,
    image: np.ndarray | None = None,
    full_mask: np.ndarray | None = None,
    factors: list[float] | None = None,
) -> list[TrainingExample]:
    """Rescaled copies of a positive example.

    With ``image`` and ``full_mask`` the copies are re-cropped from the source
    frame; otherwise the stored patch itself is resampled about its centre.
    Masks always use nearest-neighbour sampling.
    """
    if not ex.positive:
        raise ValueError("augment_positive needs a positive example")
    cfg = cfg or PseudoLabelConfig()
    if factors is None:
        lo, hi = 2.0**-cfg.scale_jitter_log2, 2.0**cfg.scale_jitter_log2
        factors = [float(rng.uniform(lo, hi)) for _ in range(n)]
    size = ex.patch.shape[0]
    out = []
    for f in factors:
        if image is not None and full_mask is not None:
            scale = ex.scale * f
            patch = sample_patch(image, ex.center, scale, size)
            pmask = sample_patch(full_mask, ex.center, scale, size, order=0)
        else:
            scale = ex.scale * f
            mid = Point2(size / 2.0 - 0.5, size / 2.0 - 0.5)
            patch = sample_patch(ex.patch, mid, f, size)
            pmask = sample_patch(ex.mask, mid, f, size, order=0)
        out.append(
            TrainingExample(patch, pmask, True, ex.source_pick, scale, ex.center, ex.source, {"augment": f})
        )
    return out


def is_hard_offset(dx: float, dy: float, threshold: float) -> bool:
    return abs(dx) + abs(dy) > threshold


def mine_hard_negatives(
    ex: TrainingExample,
    full_image: np.ndarray,
    rng: np.random.Generator,
    n: int,
    cfg: PseudoLabelConfig | None = None,
) -> list[TrainingExample]:
    """Negatives shifted from the positive centre by more than the L1 threshold.

    Offsets are measured in patch pixels, so the image-space shift is the
    offset divided by the example's scale.
    """
    if not ex.positive:
        raise ValueError("mine_hard_negatives needs a positive example")
    cfg = cfg or PseudoLabelConfig()
    size = ex.patch.shape[0]
    thr = hard_negative_threshold(cfg, size)
    out = []
    while len(out) < n:
        dx, dy = rng.uniform(-2.0 * thr, 2.0 * thr, size=2)
        if not is_hard_offset(dx, dy, thr):
            continue
        c = Point2(ex.center.x + dx / ex.scale, ex.center.y + dy / ex.scale)
        patch = sample_patch(full_image, c, ex.scale, size)
        out.append(
            TrainingExample(patch, None, False, ex.source_pick, ex.scale, c, ex.source, {"offset": (float(dx), float(dy))})
        )
    return out


def jitter_negative(
    ex: TrainingExample, full_image: np.ndarray, rng: np.random.Generator, cfg: PseudoLabelConfig | None = None
) -> TrainingExample:
    """Shift a negative by at most half the hard-negative distance and pick a random pyramid scale."""
    cfg = cfg or PseudoLabelConfig()
    size = ex.patch.shape[0]
    lim = hard_negative_threshold(cfg, size) / 2.0
    while True:
        dx, dy = rng.uniform(-lim, lim, size=2)
        if abs(dx) + abs(dy) <= lim:
            break
    scale = float(2.0 ** (0.25 * rng.integers(0, 7) - 1.25))
    c = Point2(ex.center.x + dx / scale, ex.center.y + dy / scale)
    patch = sample_patch(full_image, c, scale, size)
    return TrainingExample(patch, None, False, ex.source_pick, scale, c, ex.source, {"jitter": (float(dx), float(dy))})


def examples_from_mask(
    image: np.ndarray,
    mask: np.ndarray | None,
    pick: Point2,
    rng: np.random.Generator,
    cfg: PseudoLabelConfig,
    patch_size: int,
    source: int = -1,
) -> list[TrainingExample]:
    """Base example plus its augmentations, as used by the collection loop."""
    base = make_examples(image, mask, pick, cfg, patch_size, source)[0]
    if not base.positive:
        return [jitter_negative(base, image, rng, cfg)]
    out = [base]
    out += augment_positive(base, rng, cfg.n_augment, cfg, image=image, full_mask=mask)
    out += mine_hard_negatives(base, image, rng, cfg.n_hard_negatives, cfg)
    return out


# ---------------------------------------------------------------------------
# persistence: one patch PNG, one mask PNG and one manifest line per example


def save_examples(examples: list[TrainingExample], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "examples.jsonl", "w") as fh:
        for k, ex in enumerate(examples):
            patch_name = f"patch_{k:06d}.png"
            save_image(out / patch_name, ex.patch)
            mask_name = None
            if ex.mask is not None:
                mask_name = f"mask_{k:06d}.png"
                save_mask(out / mask_name, ex.mask)
            rec = {
                "label": ex.label,
                "pick": [ex.source_pick.x, ex.source_pick.y],
                "center": [ex.center.x, ex.center.y],
                "scale": ex.scale,
                "source": ex.source,
                "patch": patch_name,
                "mask": mask_name,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_examples(in_dir: str | Path) -> list[TrainingExample]:
    """Inverse of :func:`save_examples`; patches come back quantised to 1/255."""
    d = Path(in_dir)
    out = []
    with open(d / "examples.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            mask = load_mask(d / rec["mask"]) if rec["mask"] else None
            out.append(
                TrainingExample(
                    load_image(d / rec["patch"]),
                    mask,
                    rec["label"] == "positive",
                    Point2(*rec["pick"]),
                    float(rec["scale"]),
                    Point2(*rec["center"]),
                    int(rec["source"]),
                )
            )
    return out
