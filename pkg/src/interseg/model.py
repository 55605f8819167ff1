"""Patch segmenter with a score head and a mask head, trained by SGD with momentum.

Architecture (patch side ``P``, feature grid ``G = P / 4``)::

    x - 0.5
    conv 2x2 stride 2  -> relu      (P/2 x P/2 x c1)
    conv 2x2 stride 2  -> relu      (G x G x c2)
    conv 1x1           -> relu      F (G x G x c3)
    h = relu(W_h flat(F))                       shared hidden layer
    score logit = w_s . h
    coarse mask = w_l . F (per cell)  +  W_g h  (G x G)
    mask logits = upsample(coarse)              (P x P)

All convolutions are non-overlapping, so the trunk of any patch whose
origin lies on the 4-pixel lattice is a crop of the trunk computed once on the
whole image. :func:`infer_segments` relies on this to score every pyramid
window without re-running the trunk per patch.

Gradients are derived by hand; everything runs in float64.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .config import ModelConfig, RSLConfig
from .maskcore import Hypothesis, Point2, nms
from .pseudolabel import TrainingExample
from .rsl import latent_targets, sigmoid

CKPT_MAGIC = b"ISEGCKPT"
CKPT_VERSION = 1

_WEIGHTS = ("W1", "W2", "W3", "Wh", "ws", "wl", "Wg")


@dataclass
class ModelParams:
    arch: ModelConfig
    weights: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.velocity.items()},
            self.step,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.weights.values())


@dataclass
class TrainBatch:
    patches: np.ndarray  # (N, P, P, 3)
    labels: np.ndarray  # (N,) bool
    masks: np.ndarray  # (N, P, P) bool, all False for negatives

    @property
    def size(self) -> int:
        return len(self.labels)


def make_batch(examples: Sequence[TrainingExample]) -> TrainBatch:
    p = examples[0].patch.shape[0]
    patches = np.stack([e.patch for e in examples]).astype(np.float64)
    labels = np.array([e.positive for e in examples], dtype=bool)
    masks = np.stack([e.mask if e.mask is not None else np.zeros((p, p), bool) for e in examples])
    return TrainBatch(patches, labels, masks)


def grid_size(arch: ModelConfig) -> int:
    if arch.patch_size % 4:
        raise ValueError("patch size must be a multiple of 4")
    return arch.patch_size // 4


def init_params(rng: np.random.Generator, arch: ModelConfig) -> ModelParams:
    g = grid_size(arch)
    c1, c2, c3, hd = arch.conv1, arch.conv2, arch.conv3, arch.hidden

    def he(fan_in, shape):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    w = {
        "W1": he(12, (12, c1)),
        "b1": np.zeros(c1),
        "W2": he(4 * c1, (4 * c1, c2)),
        "b2": np.zeros(c2),
        "W3": he(c2, (c2, c3)),
        "b3": np.zeros(c3),
        "Wh": he(g * g * c3, (g * g * c3, hd)),
        "bh": np.zeros(hd),
        "ws": rng.normal(0.0, 0.01, size=hd),
        "bs": np.zeros(1),
        "wl": rng.normal(0.0, 0.01, size=c3),
        "bl": np.zeros(1),
        "Wg": rng.normal(0.0, 0.01, size=(hd, g * g)),
        "bg": np.zeros(g * g),
    }
    return ModelParams(arch, w, {k: np.zeros_like(v) for k, v in w.items()}, 0)


def upsample_matrix(g: int, p: int, mode: str) -> np.ndarray:
    """(p, g) matrix mapping a coarse axis onto the patch axis."""
    factor = p // g
    u = np.zeros((p, g))
    if mode == "nearest":
        u[np.arange(p), np.arange(p) // factor] = 1.0
        return u
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    pos = np.clip((np.arange(p) + 0.5) / factor - 0.5, 0.0, g - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, g - 1)
    t = pos - lo
    u[np.arange(p), lo] += 1.0 - t
    u[np.arange(p), hi] += t
    return u


# ---------------------------------------------------------------------------
# forward / backward


def _blocks(a: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H/2, W/2, 4C) non-overlapping 2x2 blocks."""
    n, h, w, c = a.shape
    return a.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4 * c)


def _unblocks(d: np.ndarray, c: int) -> np.ndarray:
    n, h2, w2, _ = d.shape
    return d.reshape(n, h2, w2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h2, 2 * w2, c)


def _trunk(w: dict, x: np.ndarray) -> dict:
    b1 = _blocks(x - 0.5)
    z1 = b1 @ w["W1"] + w["b1"]
    a1 = np.maximum(z1, 0.0)
    b2 = _blocks(a1)
    z2 = b2 @ w["W2"] + w["b2"]
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ w["W3"] + w["b3"]
    f = np.maximum(z3, 0.0)
    return {"b1": b1, "z1": z1, "b2": b2, "z2": z2, "a2": a2, "z3": z3, "F": f}


def forward_batch(params: ModelParams, patches: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    """Return (score logits (N,), mask logits (N, P, P), cache)."""
    arch = params.arch
    p = arch.patch_size
    if patches.ndim != 4 or patches.shape[1:] != (p, p, 3):
        raise ValueError(f"expected patches of shape (N, {p}, {p}, 3), got {patches.shape}")
    w = params.weights
    g = grid_size(arch)
    cache = _trunk(w, patches.astype(np.float64))
    f = cache["F"]
    n = f.shape[0]
    flat = f.reshape(n, -1)
    zh = flat @ w["Wh"] + w["bh"]
    h = np.maximum(zh, 0.0)
    score = h @ w["ws"] + w["bs"][0]
    local = f @ w["wl"] + w["bl"][0]
    glob = (h @ w["Wg"] + w["bg"]).reshape(n, g, g)
    coarse = local + glob
    u = upsample_matrix(g, p, arch.upsample)
    logits = np.einsum("pi,nij,qj->npq", u, coarse, u, optimize=True)
    cache.update(flat=flat, zh=zh, h=h, u=u)
    return score, logits, cache


def forward(params: ModelParams, patch: np.ndarray) -> tuple[float, np.ndarray]:
    """Score probability and mask logits for a single patch."""
    s, m, _ = forward_batch(params, patch[None])
    return float(sigmoid(s)[0]), m[0]


def backward(params: ModelParams, cache: dict, dscore: np.ndarray, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    w = params.weights
    arch = params.arch
    g = grid_size(arch)
    f, h, zh, u = cache["F"], cache["h"], cache["zh"], cache["u"]
    n = f.shape[0]
    grads: dict[str, np.ndarray] = {}

    dcoarse = np.einsum("pi,npq,qj->nij", u, dlogits, u, optimize=True)
    dglob = dcoarse.reshape(n, g * g)
    grads["Wg"] = h.T @ dglob
    grads["bg"] = dglob.sum(axis=0)
    grads["wl"] = np.einsum("nijc,nij->c", f, dcoarse)
    grads["bl"] = np.array([dcoarse.sum()])
    grads["ws"] = h.T @ dscore
    grads["bs"] = np.array([dscore.sum()])

    dh = np.outer(dscore, w["ws"]) + dglob @ w["Wg"].T
    dzh = dh * (zh > 0)
    grads["Wh"] = cache["flat"].T @ dzh
    grads["bh"] = dzh.sum(axis=0)
    df = (dzh @ w["Wh"].T).reshape(f.shape) + dcoarse[..., None] * w["wl"]

    dz3 = df * (cache["z3"] > 0)
    a2 = cache["a2"]
    grads["W3"] = a2.reshape(-1, a2.shape[-1]).T @ dz3.reshape(-1, dz3.shape[-1])
    grads["b3"] = dz3.sum(axis=(0, 1, 2))
    da2 = dz3 @ w["W3"].T

    dz2 = da2 * (cache["z2"] > 0)
    b2 = cache["b2"]
    grads["W2"] = b2.reshape(-1, b2.shape[-1]).T @ dz2.reshape(-1, dz2.shape[-1])
    grads["b2"] = dz2.sum(axis=(0, 1, 2))
    da1 = _unblocks(dz2 @ w["W2"].T, arch.conv1)

    dz1 = da1 * (cache["z1"] > 0)
    b1 = cache["b1"]
    grads["W1"] = b1.reshape(-1, b1.shape[-1]).T @ dz1.reshape(-1, dz1.shape[-1])
    grads["b1"] = dz1.sum(axis=(0, 1, 2))
    return grads


# ---------------------------------------------------------------------------
# losses and training


def _bce(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z) - y * z


def loss_and_grads(
    params: ModelParams,
    batch: TrainBatch,
    loss_mode: str = "ce",
    rsl_cfg: RSLConfig | None = None,
) -> tuple[float, float, dict[str, np.ndarray]]:
    """Score loss (mean BCE), mask loss (per-pixel mean BCE over positives) and their gradients.

    In ``rsl`` mode the mask target is the latent mask inferred from the
    current logits; it is held fixed when differentiating.
    """
    score, logits, cache = forward_batch(params, batch.patches)
    n = batch.size
    y = batch.labels.astype(np.float64)
    score_loss = float(_bce(score, y).mean())
    dscore = (sigmoid(score) - y) / n

    dlogits = np.zeros_like(logits)
    mask_loss = 0.0
    pos = np.flatnonzero(batch.labels)
    if pos.size:
        z = logits[pos]
        m = batch.masks[pos]
        if loss_mode == "ce":
            target = m.astype(np.float64)
        elif loss_mode == "rsl":
            nonempty = m.reshape(len(pos), -1).any(axis=1)
            target = m.astype(np.float64)
            if nonempty.any():
                target[nonempty] = latent_targets(z[nonempty], m[nonempty], rsl_cfg or RSLConfig())
        else:
            raise ValueError(f"unknown loss mode {loss_mode!r}")
        npix = z.shape[1] * z.shape[2]
        mask_loss = float(_bce(z, target).sum() / (npix * pos.size))
        dlogits[pos] = (sigmoid(z) - target) / (npix * pos.size)
    grads = backward(params, cache, dscore, dlogits)
    return score_loss, mask_loss, grads


def train_step(
    params: ModelParams,
    batch: TrainBatch,
    lr: float,
    momentum: float,
    loss_mode: str = "ce",
    rsl_cfg: RSLConfig | None = None,
    weight_decay: float = 0.0,
) -> tuple[ModelParams, float, float]:
    """One SGD-with-momentum update; returns the losses measured before it."""
    if not params.is_finite():
        raise FloatingPointError("parameters are not finite")
    score_loss, mask_loss, grads = loss_and_grads(params, batch, loss_mode, rsl_cfg)
    if not (np.isfinite(score_loss) and np.isfinite(mask_loss)):
        raise FloatingPointError(f"non-finite loss at step {params.step}: score={score_loss} mask={mask_loss}")
    new_w, new_v = {}, {}
    for k, wk in params.weights.items():
        gk = grads[k]
        if weight_decay and k in _WEIGHTS:
            gk = gk + weight_decay * wk
        vk = momentum * params.velocity.get(k, np.zeros_like(wk)) + gk
        new_v[k] = vk
        new_w[k] = wk - lr * vk
    return ModelParams(params.arch, new_w, new_v, params.step + 1), score_loss, mask_loss


# ---------------------------------------------------------------------------
# multi-scale inference


def pyramid_scale(level: int) -> float:
    return float(2.0 ** (0.25 * level - 1.25))


@dataclass
class PyramidLevel:
    level: int
    scale: float
    width: int
    height: int
    origins: np.ndarray  # (K, 2) patch origins (x, y) in the padded rescaled image
    centers: np.ndarray  # (K, 2) patch centres (x, y) in full-image coordinates
    pad: int = 0


def pyramid_stride(arch: ModelConfig) -> int:
    stride = int(round(arch.stride_fraction * arch.patch_size))
    return max(stride, 1)


def pyramid_pad(arch: ModelConfig) -> int:
    """Border added around each rescaled image so window centres reach the image edge."""
    half = arch.patch_size // 2
    return half - half % 4


def build_pyramid(image: np.ndarray, arch: ModelConfig) -> list[PyramidLevel]:
    h, w = image.shape[:2]
    p = arch.patch_size
    stride = pyramid_stride(arch)
    pad = pyramid_pad(arch)
    out = []
    for lvl in arch.pyramid_levels:
        s = pyramid_scale(lvl)
        ws, hs = int(round(w * s)), int(round(h * s))
        if ws + 2 * pad < p or hs + 2 * pad < p:
            out.append(PyramidLevel(lvl, s, ws, hs, np.zeros((0, 2), int), np.zeros((0, 2)), pad))
            continue
        xs = np.arange(0, ws + 2 * pad - p + 1, stride)
        ys = np.arange(0, hs + 2 * pad - p + 1, stride)
        oy, ox = np.meshgrid(ys, xs, indexing="ij")
        origins = np.stack([ox.ravel(), oy.ravel()], axis=1)
        centers = (origins + p / 2.0 - pad) / s - 0.5
        out.append(PyramidLevel(lvl, s, ws, hs, origins, centers, pad))
    return out


def resize_image(image: np.ndarray, scale: float, width: int, height: int, pad: int = 0) -> np.ndarray:
    """Bilinear resample with the same pixel-centre convention as patch sampling.

    ``pad`` extra pixels on every side are filled by edge replication.
    """
    ys = (np.arange(-pad, height + pad) + 0.5) / scale - 0.5
    xs = (np.arange(-pad, width + pad) + 0.5) / scale - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([yy, xx])
    chans = [ndimage.map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(image.shape[2])]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def _dense_level(params: ModelParams, scaled: np.ndarray, stride: int):
    """Trunk on the whole rescaled image, then hidden features for every window."""
    arch = params.arch
    g = grid_size(arch)
    hs, ws = scaled.shape[:2]
    crop = scaled[: hs - hs % 4, : ws - ws % 4]
    # single precision: the window matmul dominates inference time
    w = {k: v.astype(np.float32) for k, v in params.weights.items()}
    f = _trunk(w, crop[None].astype(np.float32))["F"][0]
    win = sliding_window_view(f, (g, g), axis=(0, 1))  # (ny, nx, c3, g, g)
    step = stride // 4
    win = win[::step, ::step]
    ny, nx = win.shape[:2]
    flat = win.transpose(0, 1, 3, 4, 2).reshape(ny * nx, -1)
    h = np.maximum(flat @ w["Wh"] + w["bh"], 0.0)
    score = (h @ w["ws"] + w["bs"][0]).astype(np.float64)
    local = f @ w["wl"] + w["bl"][0]
    return score, h, local, (ny, nx)


def _mask_to_full(patch_mask: np.ndarray, scale: float, ox: int, oy: int, width: int, height: int) -> np.ndarray:
    p = patch_mask.shape[0]
    cols = np.round((np.arange(width) + 0.5) * scale - 0.5 - ox).astype(int)
    rows = np.round((np.arange(height) + 0.5) * scale - 0.5 - oy).astype(int)
    vc = (cols >= 0) & (cols < p)
    vr = (rows >= 0) & (rows < p)
    out = np.zeros((height, width), dtype=bool)
    out[np.ix_(vr, vc)] = patch_mask[np.ix_(rows[vr], cols[vc])]
    return out


def infer_segments(
    params: ModelParams,
    image: np.ndarray,
    score_thresh: float,
    nms_thresh: float,
    top_k: int | None = None,
) -> list[Hypothesis]:
    """Score every pyramid window, segment the best ones, suppress duplicates."""
    arch = params.arch
    p = arch.patch_size
    g = grid_size(arch)
    stride = pyramid_stride(arch)
    if stride % 4:
        raise ValueError("pyramid stride must be a multiple of 4 for dense evaluation")
    top_k = arch.top_k if top_k is None else top_k
    h_img, w_img = image.shape[:2]

    cands = []  # (score, level index, window index)
    dense = []
    levels = build_pyramid(image, arch)
    for li, lvl in enumerate(levels):
        if len(lvl.origins) == 0:
            dense.append(None)
            continue
        scaled = resize_image(image, lvl.scale, lvl.width, lvl.height, lvl.pad)
        score, h, local, shape = _dense_level(params, scaled, stride)
        assert score.shape[0] == len(lvl.origins)
        prob = sigmoid(score)
        dense.append((prob, h, local))
        for k in np.flatnonzero(prob > score_thresh):
            cands.append((float(prob[k]), li, int(k)))
    # deterministic order independent of evaluation order
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    cands = cands[:top_k]

    u = upsample_matrix(g, p, arch.upsample)
    hyps = []
    for prob, li, k in cands:
        lvl = levels[li]
        _, h, local = dense[li]
        ox, oy = (int(v) for v in lvl.origins[k])
        fx, fy = ox // 4, oy // 4
        coarse = local[fy : fy + g, fx : fx + g] + (h[k] @ params.weights["Wg"] + params.weights["bg"]).reshape(g, g)
        logits = u @ coarse @ u.T
        full = _mask_to_full(logits > 0.0, lvl.scale, ox - lvl.pad, oy - lvl.pad, w_img, h_img)
        if not full.any():
            continue
        cx, cy = lvl.centers[k]
        hyps.append(Hypothesis(full, prob, Point2(float(cx), float(cy)), lvl.scale))
    return nms(hyps, nms_thresh)


# ---------------------------------------------------------------------------
# checkpoints: magic, version, little-endian length-prefixed records


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    buf = io.BytesIO()
    arch_json = json.dumps(asdict(params.arch), sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQI", CKPT_VERSION, params.step, len(arch_json)))
    buf.write(arch_json)
    records = [(0, k, v) for k, v in sorted(params.weights.items())]
    records += [(1, k, v) for k, v in sorted(params.velocity.items())]
    buf.write(struct.pack("<I", len(records)))
    for kind, name, arr in records:
        nb = name.encode()
        buf.write(struct.pack("<BH", kind, len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = 8
    version, step, alen = struct.unpack_from("<IQI", data, off)
    off += struct.calcsize("<IQI")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch_d = json.loads(data[off : off + alen])
    off += alen
    arch_d = {k: tuple(v) if isinstance(v, list) else v for k, v in arch_d.items()}
    arch = ModelConfig(**arch_d)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    weights, velocity = {}, {}
    for _ in range(count):
        kind, nlen = struct.unpack_from("<BH", data, off)
        off += 3
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        (weights if kind == 0 else velocity)[name] = arr
    return ModelParams(arch, weights, velocity, int(step))
