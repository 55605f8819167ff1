"""Robust Set Loss.

Instead of fitting a noisy mask ``m`` exactly, the mask head is trained
against a latent target ``x`` that stays within an IoU margin ``b`` of ``m``:

    minimise  -sum_i log q_i(x_i)   subject to  IoU(x, m) >= b

The latent target is searched in the common-bias family: every logit inside
``m`` is raised and every logit outside lowered by the same ``beta >= 0`` and
the per-pixel argmax is taken. A pixel whose own argmax disagrees with ``m``
flips to agree once ``beta`` reaches ``|logit|``, so sorting those margins
gives every distinct member of the family. The smallest feasible ``beta`` is
returned; it also has the lowest cross-entropy on the path, because each flip
moves a pixel to its less likely label.

Ties (a shifted logit of exactly 0) resolve towards ``m``. Slack is always
zero: ``beta`` past the largest margin reproduces ``m`` itself (IoU 1).
"""

from __future__ import annotations

import time

import numpy as np

from .config import RSLConfig


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def cross_entropy(logits: np.ndarray, target: np.ndarray, reduction: str = "mean") -> float:
    """Binary cross-entropy of per-pixel logits against a 0/1 target."""
    if logits.shape != target.shape:
        raise ValueError(f"dimension mismatch: {logits.shape} vs {target.shape}")
    z = np.asarray(logits, dtype=np.float64)
    per_pixel = np.logaddexp(0.0, z) - target.astype(np.float64) * z
    return _reduce(per_pixel, reduction)


def _reduce(values: np.ndarray, reduction: str) -> float:
    if reduction == "mean":
        return float(values.mean())
    if reduction == "sum":
        return float(values.sum())
    raise ValueError(f"unknown reduction {reduction!r}")


def _check(logits: np.ndarray, mask: np.ndarray) -> None:
    if logits.shape != mask.shape:
        raise ValueError(f"dimension mismatch: {logits.shape} vs {mask.shape}")
    if not mask.any():
        raise ValueError("noisy mask is empty")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")


def solve_latent(logits: np.ndarray, mask: np.ndarray, cfg: RSLConfig) -> tuple[np.ndarray, float]:
    """Return ``(latent, beta)`` for the smallest feasible common bias."""
    _check(logits, mask)
    if not 0.0 < cfg.b <= 1.0:
        raise ValueError("b must lie in (0, 1]")
    z = np.asarray(logits, dtype=np.float64).ravel()
    m = np.asarray(mask, dtype=bool).ravel()
    own = np.where(z == 0.0, m, z > 0.0)
    inter = np.count_nonzero(own & m)
    union = np.count_nonzero(own | m)
    if inter / union >= cfg.b:
        return own.reshape(mask.shape), 0.0

    dis = np.flatnonzero(own != m)
    margins = np.abs(z[dis])
    order = np.argsort(margins, kind="stable")
    sorted_margins = margins[order]
    gains = m[dis][order]
    # flipping a missed mask pixel grows the intersection, flipping a spurious
    # pixel shrinks the union
    inter_k = inter + np.cumsum(gains)
    union_k = union - np.cumsum(~gains)
    # pixels with equal margins flip together
    group_end = np.append(sorted_margins[1:] != sorted_margins[:-1], True)
    candidates = np.flatnonzero(group_end)
    if cfg.bias_resolution > 0 and candidates.size > cfg.bias_resolution:
        pick = np.unique(np.round(np.linspace(0, candidates.size - 1, cfg.bias_resolution)).astype(int))
        candidates = candidates[pick]
    feasible = inter_k[candidates] / union_k[candidates] >= cfg.b
    k = candidates[np.argmax(feasible)]
    beta = float(sorted_margins[k])
    latent = own.copy()
    flipped = dis[order[: k + 1]]
    latent[flipped] = m[flipped]
    return latent.reshape(mask.shape), beta


def infer_latent(logits: np.ndarray, mask: np.ndarray, cfg: RSLConfig) -> np.ndarray:
    return solve_latent(logits, mask, cfg)[0]


def rsl_loss(logits: np.ndarray, mask: np.ndarray, cfg: RSLConfig, reduction: str = "mean") -> float:
    """Cross-entropy against the inferred latent target (per-pixel mean by default)."""
    latent = infer_latent(logits, mask, cfg)
    return cross_entropy(logits, latent, reduction)


def rsl_gradient(logits: np.ndarray, mask: np.ndarray, cfg: RSLConfig) -> np.ndarray:
    """``sigmoid(logit) - latent`` per pixel, with the latent target held fixed.

    This is the gradient of the summed loss; divide by the pixel count for the
    gradient of the mean.
    """
    latent = infer_latent(logits, mask, cfg)
    return sigmoid(np.asarray(logits, dtype=np.float64)) - latent


def latent_targets(logits: np.ndarray, masks: np.ndarray, cfg: RSLConfig) -> np.ndarray:
    """Batched :func:`infer_latent` over a leading axis."""
    return np.stack([infer_latent(z, m, cfg) for z, m in zip(logits, masks)])


def benchmark(batch: int = 32, size: int = 48, repeats: int = 5, seed: int = 0, cfg: RSLConfig | None = None) -> float:
    """Median seconds to solve a batch of latent targets."""
    cfg = cfg or RSLConfig()
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, 3.0, size=(batch, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = size / 4.0, 3.0 * size / 4.0
    masks = np.stack(
        [
            (xx - rng.uniform(lo, hi)) ** 2 + (yy - rng.uniform(lo, hi)) ** 2 < (size * rng.uniform(0.125, 0.3)) ** 2
            for _ in range(batch)
        ]
    )
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        latent_targets(logits, masks, cfg)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
