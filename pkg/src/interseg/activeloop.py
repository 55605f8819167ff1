"""The interaction loop: bootstrap, hypothesise, poke, label, retrain, reset.

A run directory looks like::

    run/
      config.txt          resolved configuration (key=value)
      manifest            one JSON object per line, append-only
      images/             000123_before.png, _mid.png, _after.png
      masks/              000123_pick.png, 000123_place.png
      checkpoints/        step_000250.ckpt + step_000250.state.json

The first manifest line describes the run; every interaction appends one
``interaction`` line and every checkpoint one ``checkpoint`` line.
Everything stochastic is derived from the run seed, so a run directory can be
regenerated bit for bit from ``config.txt`` and the seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import arena
from .config import Config
from .maskcore import Hypothesis, Point2, centroid, load_image, load_mask, principal_axis, save_image, save_mask
from .model import ModelParams, TrainBatch, infer_segments, init_params, load_checkpoint, save_checkpoint, train_step
from .pseudolabel import (
    TrainingExample,
    examples_from_mask,
    extract_interaction_mask,
    extract_motion_mask,
    extract_place_mask,
)
from .rsl import RSLConfig

log = logging.getLogger(__name__)

MANIFEST = "manifest"


class ReplayError(RuntimeError):
    pass


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent named generator derived from the run seed."""
    key = [int(seed), sum(ord(c) * 131**i for i, c in enumerate(name)) % (2**32), *map(int, extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


# ---------------------------------------------------------------------------
# replay store


class ReplayStore:
    """Training examples kept compactly (uint8 patches) for uniform replay."""

    def __init__(self, patch_size: int):
        self.patch_size = patch_size
        self._pos_patches: list[np.ndarray] = []
        self._pos_masks: list[np.ndarray] = []
        self._neg_patches: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._pos_patches) + len(self._neg_patches)

    @property
    def n_positive(self) -> int:
        return len(self._pos_patches)

    @property
    def n_negative(self) -> int:
        return len(self._neg_patches)

    def add(self, examples: list[TrainingExample]) -> None:
        for ex in examples:
            q = np.round(np.clip(ex.patch, 0.0, 1.0) * 255.0).astype(np.uint8)
            if ex.positive:
                self._pos_patches.append(q)
                self._pos_masks.append(ex.mask.copy())
            else:
                self._neg_patches.append(q)

    def sample(self, rng: np.random.Generator, batch_size: int) -> TrainBatch:
        """Half positives, half negatives, uniformly with replacement."""
        n_pos = batch_size // 2 if self._neg_patches else batch_size
        if not self._pos_patches:
            n_pos = 0
        n_neg = batch_size - n_pos
        pi = rng.integers(len(self._pos_patches), size=n_pos) if n_pos else np.zeros(0, int)
        ni = rng.integers(len(self._neg_patches), size=n_neg) if n_neg else np.zeros(0, int)
        p = self.patch_size
        patches = np.empty((batch_size, p, p, 3), dtype=np.float64)
        masks = np.zeros((batch_size, p, p), dtype=bool)
        for j, i in enumerate(pi):
            patches[j] = self._pos_patches[i] / 255.0
            masks[j] = self._pos_masks[i]
        for j, i in enumerate(ni):
            patches[n_pos + j] = self._neg_patches[i] / 255.0
        labels = np.zeros(batch_size, dtype=bool)
        labels[:n_pos] = True
        return TrainBatch(patches, labels, masks)


def train_on_store(
    params: ModelParams,
    store: ReplayStore,
    steps: int,
    rng: np.random.Generator,
    cfg: Config,
    loss_mode: str | None = None,
) -> tuple[ModelParams, list[tuple[float, float]]]:
    loss_mode = loss_mode or cfg.loop.loss_mode
    history = []
    if len(store) == 0:
        return params, history
    for _ in range(steps):
        batch = store.sample(rng, cfg.model.batch_size)
        params, sl, ml = train_step(
            params, batch, cfg.model.lr, cfg.model.momentum, loss_mode, cfg.rsl, cfg.model.weight_decay
        )
        history.append((sl, ml))
    return params, history


# ---------------------------------------------------------------------------
# passive bootstrap


def passive_examples(seed: int, pairs: int, cfg: Config) -> list[TrainingExample]:
    """Masks from scripted pushes in scenes the agent only watches."""
    rng = stream(seed, "passive-scenes")
    ex_rng = stream(seed, "passive-examples")
    out: list[TrainingExample] = []
    state = None
    noise = cfg.noise
    for k in range(pairs):
        if k % 10 == 0:
            state = arena.new_scene(cfg.arena, cfg.loop.object_split, cfg.loop.background_split, int(rng.integers(2**31)))
        state, seq = arena.scripted_passive_motion(state, 1, cfg.arena, noise)
        before, after, _ = seq[0]
        mask = extract_motion_mask(before, after, cfg.pseudo)
        if mask is None:
            continue
        out += examples_from_mask(before, mask, centroid(mask), ex_rng, cfg.pseudo, cfg.model.patch_size)
        # a few background crops as negatives
        p = Point2(float(ex_rng.uniform(0, cfg.arena.width - 1)), float(ex_rng.uniform(0, cfg.arena.height - 1)))
        out += examples_from_mask(before, None, p, ex_rng, cfg.pseudo, cfg.model.patch_size)
    return out


def passive_bootstrap(seed: int, params: ModelParams, steps: int, cfg: Config) -> ModelParams:
    """Pre-train with plain cross-entropy on passively observed motion."""
    if steps <= 0:
        return params
    store = ReplayStore(cfg.model.patch_size)
    store.add(passive_examples(seed, cfg.loop.passive_pairs, cfg))
    params, _ = train_on_store(params, store, steps, stream(seed, "passive-train"), cfg, loss_mode="ce")
    return params


# ---------------------------------------------------------------------------
# acting


def uniform_point(rng: np.random.Generator, width: int, height: int) -> Point2:
    return Point2(float(rng.uniform(0, width - 1)), float(rng.uniform(0, height - 1)))


def action_for_mask(mask: np.ndarray, place: Point2) -> arena.PickPlaceAction:
    """Grasp at the centroid, perpendicular to the major axis."""
    pick = centroid(mask)
    axis = principal_axis(mask) if mask.sum() >= 2 else 0.0
    return arena.PickPlaceAction(pick, (axis + np.pi / 2.0) % np.pi, place)


def choose_interaction(
    params: ModelParams | None,
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: Config,
    hyps: list[Hypothesis] | None = None,
) -> tuple[arena.PickPlaceAction, Hypothesis | None]:
    h, w = image.shape[:2]
    if hyps is None:
        hyps = [] if params is None else infer_segments(params, image, cfg.model.score_thresh, cfg.model.nms_thresh)
    explore = rng.random() < cfg.loop.epsilon
    pick_u = uniform_point(rng, w, h)
    angle_u = float(rng.uniform(0.0, np.pi))
    choice = int(rng.integers(len(hyps))) if hyps else -1
    place = uniform_point(rng, w, h)
    if explore or not hyps:
        return arena.PickPlaceAction(pick_u, angle_u, place), None
    hyp = hyps[choice]
    return action_for_mask(hyp.mask, place), hyp


# ---------------------------------------------------------------------------
# run


@dataclass
class RunManifest:
    seed: int
    config: dict
    total_steps: int
    reset_interval: int
    update_interval: int
    records: list[dict] = field(default_factory=list)
    checkpoints: dict[int, str] = field(default_factory=dict)

    @property
    def interactions(self) -> int:
        return len(self.records)

    @classmethod
    def read(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST
        if not path.exists():
            raise ReplayError(f"{path} is missing")
        head = None
        records, ckpts = [], {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ReplayError(f"{path}:{lineno}: corrupt manifest line") from exc
                kind = rec.get("kind")
                if kind == "run":
                    head = rec
                elif kind == "interaction":
                    records.append(rec)
                elif kind == "checkpoint":
                    ckpts[int(rec["step"])] = rec["path"]
        if head is None:
            raise ReplayError(f"{path}: no run header")
        return cls(
            int(head["seed"]),
            head["config"],
            int(head["total_steps"]),
            int(head["reset_interval"]),
            int(head["update_interval"]),
            records,
            ckpts,
        )

    def resolved_config(self) -> Config:
        cfg = Config()
        for k, v in self.config.items():
            cfg.set(k, v)
        return cfg


def _config_snapshot(cfg: Config) -> dict:
    return {k: v for k, v in (line.split("=", 1) for line in cfg.dumps().splitlines())}


def interaction_examples(
    seed: int, step: int, image_before: np.ndarray, image_after: np.ndarray, rec: dict,
    pick_mask: np.ndarray | None, place_mask: np.ndarray | None, cfg: Config
) -> list[TrainingExample]:
    """Examples for one interaction; deterministic in (seed, step)."""
    rng = stream(seed, "examples", step)
    pick = Point2(*rec["action"]["pick"])
    place = Point2(*rec["action"]["place"])
    p = cfg.model.patch_size
    out = examples_from_mask(image_before, pick_mask, pick, rng, cfg.pseudo, p, source=step)
    if place_mask is not None:
        out += examples_from_mask(image_after, place_mask, place, rng, cfg.pseudo, p, source=step)
    return out


class _Loop:
    """Mutable state of a run, so that it can be checkpointed and resumed."""

    def __init__(self, seed: int, cfg: Config, out: Path):
        self.seed = seed
        self.cfg = cfg
        self.out = out
        self.bgs = arena.background_split(cfg.loop.background_split, cfg.arena)
        self.scene_rng = stream(seed, "scenes")
        self.policy_rng = stream(seed, "policy")
        self.train_rng = stream(seed, "train")
        self.state = self._fresh_scene(0)
        self.params = init_params(stream(seed, "init"), cfg.model)
        self.store = ReplayStore(cfg.model.patch_size)
        self.step = 0

    def _fresh_scene(self, epoch: int) -> arena.ArenaState:
        rng = arena.make_rng(int(self.scene_rng.integers(2**31)))
        bg = self.bgs[epoch % len(self.bgs)]
        pool = arena.template_split(self.cfg.loop.object_split, self.cfg.arena)
        return arena.spawn_scene(self.cfg.arena, bg, pool, rng)

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "sim": self.state.to_dict(),
            "scene_rng": arena._rng_state(self.scene_rng),
            "policy_rng": arena._rng_state(self.policy_rng),
            "train_rng": arena._rng_state(self.train_rng),
        }

    def load_state_dict(self, d: dict) -> None:
        self.step = int(d["step"])
        self.state = arena.ArenaState.from_dict(d["sim"])
        self.scene_rng = arena._rng_from_state(d["scene_rng"])
        self.policy_rng = arena._rng_from_state(d["policy_rng"])
        self.train_rng = arena._rng_from_state(d["train_rng"])


def _append(path: Path, rec: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _hyp_record(h: Hypothesis | None) -> dict | None:
    if h is None:
        return None
    return {"score": round(float(h.score), 12), "center": [h.center.x, h.center.y], "scale": h.scale, "area": h.area}


def run(
    seed: int,
    total_steps: int,
    cfg: Config,
    out_dir: str | Path,
    resume: bool = False,
    progress: bool = False,
) -> RunManifest:
    """Collect ``total_steps`` interactions into ``out_dir``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    out = Path(out_dir)
    lc = cfg.loop
    manifest_path = out / MANIFEST
    loop = _Loop(seed, cfg, out)

    if resume and manifest_path.exists():
        _resume(loop, out)
    else:
        for sub in ("images", "masks", "checkpoints"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        if manifest_path.exists():
            manifest_path.unlink()
        (out / "config.txt").write_text(cfg.dumps())
        loop.params = passive_bootstrap(seed, loop.params, lc.passive_steps, cfg)
        _append(
            manifest_path,
            {
                "kind": "run",
                "seed": seed,
                "total_steps": total_steps,
                "reset_interval": lc.reset_interval,
                "update_interval": lc.update_interval,
                "config": _config_snapshot(cfg),
            },
        )

    while loop.step < total_steps:
        t = loop.step + 1
        image = arena.render(loop.state)
        action, hyp = choose_interaction(loop.params, image, loop.policy_rng, cfg)
        loop.state, outcome = arena.pick_place(loop.state, action, cfg.noise, cfg.arena)
        i_before, i_mid, i_after = outcome.images
        pick_mask = extract_interaction_mask(i_before, i_mid, i_after, action.pick, cfg.pseudo)
        place_mask = extract_place_mask(i_mid, i_after, action.place, cfg.pseudo)
        rec = {
            "kind": "interaction",
            "step": t,
            "action": {
                "pick": [action.pick.x, action.pick.y],
                "angle": action.gripper_angle,
                "place": [action.place.x, action.place.y],
            },
            "label": "positive" if pick_mask is not None else "negative",
            "images": [f"images/{t:06d}_{s}.png" for s in ("before", "mid", "after")],
            "pick_mask": f"masks/{t:06d}_pick.png" if pick_mask is not None else None,
            "place_mask": f"masks/{t:06d}_place.png" if place_mask is not None else None,
            "hypothesis": _hyp_record(hyp),
            "grasped": outcome.grasped_object,
            "perturbed": outcome.perturbed_objects,
            "flicker": outcome.flickered,
        }
        if lc.save_images:
            for name, img in zip(rec["images"], outcome.images):
                save_image(out / name, img)
            if pick_mask is not None:
                save_mask(out / rec["pick_mask"], pick_mask)
            if place_mask is not None:
                save_mask(out / rec["place_mask"], place_mask)
        # after the interaction: a new scene (fresh objects on the next
        # background) replaces the sweep when both are due
        if t % lc.background_interval == 0:
            rec["reset"] = "respawn"
        elif t % lc.reset_interval == 0:
            rec["reset"] = "sweep"
        else:
            rec["reset"] = None
        loop.store.add(interaction_examples(seed, t, i_before, i_after, rec, pick_mask, place_mask, cfg))
        _append(manifest_path, rec)
        loop.step = t

        if t % lc.update_interval == 0:
            loop.params, hist = train_on_store(loop.params, loop.store, lc.steps_per_update, loop.train_rng, cfg)
            if progress and hist:
                sl, ml = np.mean(hist, axis=0)
                log.info("step %d: score loss %.4f mask loss %.4f (store %d)", t, sl, ml, len(loop.store))
        if rec["reset"] == "respawn":
            loop.state = loop._fresh_scene(t // lc.background_interval)
        elif rec["reset"] == "sweep":
            loop.state = arena.reset_sweep(loop.state, cfg.arena)
        if t % lc.checkpoint_interval == 0 or t == total_steps:
            _checkpoint(loop, manifest_path)
    return RunManifest.read(out)


def _checkpoint(loop: _Loop, manifest_path: Path) -> None:
    name = f"checkpoints/step_{loop.step:06d}"
    save_checkpoint(loop.out / f"{name}.ckpt", loop.params)
    (loop.out / f"{name}.state.json").write_text(json.dumps(loop.state_dict(), sort_keys=True))
    _append(manifest_path, {"kind": "checkpoint", "step": loop.step, "path": f"{name}.ckpt"})


def _resume(loop: _Loop, out: Path) -> None:
    """Restart from the newest checkpoint, dropping records written after it."""
    man = RunManifest.read(out)
    if not man.checkpoints:
        raise ReplayError("no checkpoint to resume from")
    k = max(man.checkpoints)
    loop.params = load_checkpoint(out / man.checkpoints[k])
    loop.load_state_dict(json.loads((out / man.checkpoints[k]).with_suffix(".state.json").read_text()))
    # rewrite the manifest up to and including checkpoint k
    lines = (out / MANIFEST).read_text().splitlines(keepends=True)
    kept = []
    for line in lines:
        rec = json.loads(line)
        if rec["kind"] == "interaction" and rec["step"] > k:
            continue
        if rec["kind"] == "checkpoint" and rec["step"] > k:
            continue
        kept.append(line)
    (out / MANIFEST).write_text("".join(kept))
    for ex in replay_dataset(out, upto=k):
        loop.store.add([ex])


# ---------------------------------------------------------------------------
# replay


def replay_dataset(run_dir: str | Path, upto: int | None = None) -> Iterator[TrainingExample]:
    """Re-materialise every training example of a run, in collection order."""
    out = Path(run_dir)
    man = RunManifest.read(out)
    cfg = man.resolved_config()
    for rec in man.records:
        step = int(rec["step"])
        if upto is not None and step > upto:
            break
        try:
            before = load_image(out / rec["images"][0])
            after = load_image(out / rec["images"][2])
            pick_mask = load_mask(out / rec["pick_mask"]) if rec["pick_mask"] else None
            place_mask = load_mask(out / rec["place_mask"]) if rec["place_mask"] else None
        except (OSError, ValueError) as exc:
            raise ReplayError(f"step {step}: cannot read interaction files ({exc})") from exc
        yield from interaction_examples(man.seed, step, before, after, rec, pick_mask, place_mask, cfg)


def store_from_run(run_dir: str | Path, upto: int | None = None) -> ReplayStore:
    man = RunManifest.read(run_dir)
    store = ReplayStore(man.resolved_config().model.patch_size)
    for ex in replay_dataset(run_dir, upto):
        store.add([ex])
    return store


def train_offline(
    store: ReplayStore, seed: int, steps: int, cfg: Config, loss_mode: str, rsl_b: float | None = None
) -> ModelParams:
    """Train on a fixed replayed dataset (CE vs RSL ablations).

    Starts from a freshly initialised network pre-trained on passive motion,
    as a collection run does; only ``loss_mode`` and ``rsl_b`` change the
    updates, the batches drawn are the same.
    """
    if rsl_b is not None:
        cfg = Config(**{**cfg.__dict__, "rsl": RSLConfig(b=rsl_b, bias_resolution=cfg.rsl.bias_resolution)})
    params = init_params(stream(seed, "offline-init"), cfg.model)
    params = passive_bootstrap(seed, params, cfg.loop.passive_steps, cfg)
    params, _ = train_on_store(params, store, steps, stream(seed, "offline-train"), cfg, loss_mode=loss_mode)
    return params
