"""Mask geometry and image-difference primitives.

Conventions used across the package:

* a mask is a 2-D ``bool`` array indexed ``[y, x]``;
* an image is a float array of shape ``(H, W, 3)`` with values in ``[0, 1]``;
* points are ``Point2(x, y)`` in pixel units, ``x`` along columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

_ISOTROPIC_GAP = 1e-9


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(eq=False)
class Hypothesis:
    """A proposed object: full-image mask plus confidence."""

    mask: np.ndarray
    score: float
    center: Point2
    scale: float = 1.0

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"dimension mismatch: {a.shape[:2]} vs {b.shape[:2]}")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Jaccard index of two masks. Two empty masks have IoU 1."""
    _check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[np.ndarray]:
    """Split ``mask`` into maximal connected regions, largest first.

    Ties in pixel count are ordered by the raster position of the region's
    first pixel, so the output is deterministic.
    """
    if connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    elif connectivity == 8:
        structure = ndimage.generate_binary_structure(2, 2)
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return []
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    # labels are assigned in raster order, so a stable sort on -count keeps
    # first-pixel order among equal sizes
    order = np.argsort(-counts, kind="stable")
    return [labels == (k + 1) for k in order]


def largest_component(mask: np.ndarray, connectivity: int = 8) -> np.ndarray | None:
    comps = connected_components(mask, connectivity)
    return comps[0] if comps else None


def centroid(mask: np.ndarray) -> Point2:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("centroid of an empty mask")
    return Point2(float(xs.mean()), float(ys.mean()))


def principal_axis(mask: np.ndarray) -> float:
    """Orientation in ``[0, pi)`` of the major axis of the mask's pixels.

    The angle is measured from the +x axis towards +y (image rows). For an
    isotropic pixel distribution the axis is undefined and 0 is returned.
    """
    ys, xs = np.nonzero(mask)
    if xs.size < 2:
        raise ValueError("principal axis needs at least 2 pixels")
    coords = np.stack([xs, ys]).astype(np.float64)
    coords -= coords.mean(axis=1, keepdims=True)
    cov = coords @ coords.T / xs.size
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] - evals[0] < _ISOTROPIC_GAP:
        return 0.0
    vx, vy = evecs[:, 1]
    angle = float(np.arctan2(vy, vx)) % np.pi
    # fold values that are pi up to rounding back to 0
    if np.pi - angle < 1e-12:
        angle = 0.0
    return angle


def difference_mask(
    a: np.ndarray,
    b: np.ndarray,
    center: Point2,
    window: int,
    threshold: float,
) -> np.ndarray:
    """Pixels inside a square window whose max-channel change exceeds ``threshold``."""
    _check_same_shape(a, b)
    if window <= 0:
        raise ValueError("window must be positive")
    h, w = a.shape[:2]
    x0 = int(np.floor(center.x - window / 2 + 0.5))
    y0 = int(np.floor(center.y - window / 2 + 0.5))
    xs, xe = max(x0, 0), min(x0 + window, w)
    ys, ye = max(y0, 0), min(y0 + window, h)
    out = np.zeros((h, w), dtype=bool)
    if xs >= xe or ys >= ye:
        return out
    diff = np.abs(a[ys:ye, xs:xe] - b[ys:ye, xs:xe])
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    out[ys:ye, xs:xe] = diff > threshold
    return out


def _nms_key(h: Hypothesis) -> tuple:
    return (-h.score, h.area, h.center.x, h.center.y)


def nms(hyps: Sequence[Hypothesis], iou_thresh: float) -> list[Hypothesis]:
    """Greedy mask non-maximum suppression.

    A hypothesis survives iff its IoU with every already kept mask is at most
    ``iou_thresh``. Score ties are broken by smaller area, then location.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in [0, 1]")
    ordered = sorted(hyps, key=_nms_key)
    if not ordered:
        return []
    ious = pairwise_iou([h.mask for h in ordered])
    kept: list[int] = []
    for i in range(len(ordered)):
        if kept and np.any(ious[kept, i] > iou_thresh):
            continue
        kept.append(i)
    return [ordered[i] for i in kept]


def pairwise_iou(masks: Sequence[np.ndarray], others: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """IoU matrix between two lists of equally sized masks (float64 exact ratios)."""
    a = np.stack([m.ravel() for m in masks]).astype(np.float32)
    b = a if others is None else np.stack([m.ravel() for m in others]).astype(np.float32)
    # float32 products of 0/1 vectors are exact below 2**24 pixels
    inter = (a @ b.T).astype(np.float64)
    union = a.sum(axis=1, dtype=np.float64)[:, None] + b.sum(axis=1, dtype=np.float64)[None, :] - inter
    out = np.ones_like(inter)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a mask as an 8-bit single channel PNG (0 / 255)."""
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def load_mask(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write an RGB image in ``[0, 1]`` as 8-bit PNG."""
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def load_image(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
