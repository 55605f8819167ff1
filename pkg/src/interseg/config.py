"""Run configuration: nested dataclasses read from ``section.key=value`` text.

Every field below is a documented default. Unknown keys are rejected so that a
typo in a config file can never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ArenaConfig:
    width: int = 128
    height: int = 128
    min_objects: int = 4
    max_objects: int = 8
    min_object_area: int = 150
    max_placement_tries: int = 2000
    # template / background split sizes (train, val, test)
    object_splits: tuple[int, ...] = (36, 8, 15)
    background_splits: tuple[int, ...] = (24, 6, 10)
    lighting_min: float = 0.9
    lighting_max: float = 1.1
    # reset sweep
    sweeps: int = 8
    sweep_halfwidth: float = 3.0
    push_fraction_min: float = 0.3
    push_fraction_max: float = 0.8
    push_noise: float = 2.0
    # scripted passive motion
    passive_push_min: float = 8.0
    passive_push_max: float = 20.0


@dataclass
class NoiseConfig:
    grasp_radius: float = 4.0
    touch_radius: float = 3.0
    nudge_sigma: float = 1.5
    drag_margin: float = 2.0
    drag_fraction_min: float = 0.15
    drag_fraction_max: float = 0.45
    place_sigma: float = 1.0
    rotation_sigma: float = 0.15
    flicker_prob: float = 0.08
    misalign_penalty: float = 0.7
    # when true every grasp attempt on an object succeeds and nothing is
    # nudged, dragged or flickered
    noise_free: bool = False


@dataclass
class PseudoLabelConfig:
    # 240 px window on a 350 px short side
    window_fraction: float = 240.0 / 350.0
    # 1000 px on a 350x430 image
    area_fraction: float = 1000.0 / (350.0 * 430.0)
    diff_threshold: float = 0.08
    # target extent of a positive mask relative to the patch side
    fit_fraction: float = 0.375
    n_augment: int = 2
    n_hard_negatives: int = 1
    # 64 px of L1 jitter on a 192 px patch
    hard_negative_fraction: float = 64.0 / 192.0
    scale_jitter_log2: float = 0.25


@dataclass
class ModelConfig:
    patch_size: int = 48
    conv1: int = 16
    conv2: int = 32
    conv3: int = 32
    hidden: int = 128
    upsample: str = "bilinear"
    init_seed_offset: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    # pyramid levels i give scales 2**(0.25 * i - 1.25)
    pyramid_levels: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    # 16 px stride on a 192 px patch
    stride_fraction: float = 16.0 / 192.0
    score_thresh: float = 0.5
    nms_thresh: float = 0.5
    top_k: int = 100


@dataclass
class RSLConfig:
    b: float = 0.7
    # 0 = search every logit-margin breakpoint exactly
    bias_resolution: int = 0
    # weight of the slack term; unused because the solver is always feasible
    slack_weight: float = 1.0


@dataclass
class LoopConfig:
    epsilon: float = 0.2
    update_interval: int = 50
    steps_per_update: int = 100
    reset_interval: int = 25
    background_interval: int = 100
    checkpoint_interval: int = 250
    passive_pairs: int = 150
    passive_steps: int = 300
    loss_mode: str = "rsl"
    object_split: str = "train"
    background_split: str = "train"
    save_images: bool = True


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.3, 0.5)
    precision_levels: tuple[float, ...] = (0.5, 0.7, 0.9)
    recall_iou: float = 0.3
    n_scenes: int = 30
    scene_seed: int = 9001
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    top_k: int = 100


@dataclass
class RearrangeConfig:
    max_interactions: int = 10
    # 15 px on a 350 px arena
    tolerance_fraction: float = 15.0 / 350.0
    max_displaced: int = 3


@dataclass
class Config:
    arena: ArenaConfig = field(default_factory=ArenaConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rsl: RSLConfig = field(default_factory=RSLConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    rearrange: RearrangeConfig = field(default_factory=RearrangeConfig)

    def set(self, key: str, value: str) -> None:
        section_name, _, name = key.partition(".")
        if not name:
            raise KeyError(f"config key must look like section.field: {key!r}")
        section = getattr(self, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise KeyError(f"unknown config section {section_name!r}")
        hints = typing.get_type_hints(type(section))
        if name not in hints:
            raise KeyError(f"unknown config key {key!r}")
        setattr(section, name, _parse_value(hints[name], value.strip(), key))

    def items(self):
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            for g in dataclasses.fields(section):
                yield f"{f.name}.{g.name}", getattr(section, g.name)

    def dumps(self) -> str:
        return "".join(f"{k}={_format_value(v)}\n" for k, v in self.items())


def _parse_value(tp, raw: str, key: str):
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            (inner, _) = typing.get_args(tp)
            parts = [p for p in raw.split(",") if p.strip()]
            return tuple(inner(p.strip()) for p in parts)
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {raw!r}") from exc
    raise TypeError(f"unsupported config type for {key}: {tp}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg = parse_config(Path(path).read_text(), cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be key=value: {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg
