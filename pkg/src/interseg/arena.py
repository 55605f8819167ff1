"""Deterministic 2-D top-down stand-in for the robot arena.

The world is a flat textured surface holding a handful of flat, uniformly
coloured objects. A pick-and-place call reproduces the outcome distribution
of a real grasping robot (missed grasps, nudges, neighbours dragged along,
lighting changes) without any dynamics. All randomness flows through the
generator stored in :class:`ArenaState`.
"""

from __future__ import annotations

import colorsys
import copy
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .config import ArenaConfig, NoiseConfig
from .maskcore import Point2, principal_axis

TEXTURE_FAMILIES = ("noise", "stripes", "checker")
SPLITS = ("train", "val", "test")
_BACKGROUND_SEED_BASE = {"train": 0, "val": 1000, "test": 2000}
_TEMPLATE_POOL_SEED = 20180814


# ---------------------------------------------------------------------------
# shapes and state


@dataclass(frozen=True)
class ShapeTemplate:
    name: str
    kind: str  # "disc" or "poly"
    radius: float = 0.0
    vertices: tuple[tuple[float, float], ...] = ()
    color: tuple[float, float, float] = (1.0, 0.0, 0.0)
    graspability: float = 1.0


@dataclass(frozen=True)
class Background:
    family: str
    seed: int


@dataclass
class SimObject:
    id: int
    template: ShapeTemplate
    x: float
    y: float
    angle: float = 0.0

    @property
    def color(self) -> tuple[float, float, float]:
        return self.template.color

    @property
    def graspability(self) -> float:
        return self.template.graspability

    @property
    def position(self) -> Point2:
        return Point2(self.x, self.y)

    def world_vertices(self) -> np.ndarray:
        v = np.asarray(self.template.vertices, dtype=np.float64)
        c, s = np.cos(self.angle), np.sin(self.angle)
        rot = np.array([[c, -s], [s, c]])
        return v @ rot.T + np.array([self.x, self.y])

    def half_extent(self) -> tuple[float, float]:
        """Half width and half height of the axis-aligned bounding box."""
        if self.template.kind == "disc":
            return self.template.radius, self.template.radius
        v = self.world_vertices() - np.array([self.x, self.y])
        return float(np.abs(v[:, 0]).max()), float(np.abs(v[:, 1]).max())

    def bounding_radius(self) -> float:
        if self.template.kind == "disc":
            return self.template.radius
        v = np.asarray(self.template.vertices, dtype=np.float64)
        return float(np.hypot(v[:, 0], v[:, 1]).max())


@dataclass
class ArenaState:
    width: int
    height: int
    background: Background
    objects: list[SimObject]
    rng: np.random.Generator = field(repr=False)
    lighting: float = 1.0

    def copy(self) -> "ArenaState":
        return copy.deepcopy(self)

    def object_by_id(self, oid: int) -> SimObject:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise KeyError(oid)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "background": [self.background.family, self.background.seed],
            "lighting": self.lighting,
            "rng": _rng_state(self.rng),
            "objects": [_object_to_dict(o) for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArenaState":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            background=Background(d["background"][0], int(d["background"][1])),
            objects=[_object_from_dict(o) for o in d["objects"]],
            rng=_rng_from_state(d["rng"]),
            lighting=float(d["lighting"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ArenaState":
        return cls.from_dict(json.loads(text))


@dataclass
class PickPlaceAction:
    pick: Point2
    gripper_angle: float
    place: Point2


@dataclass
class InteractionOutcome:
    grasped_object: int | None
    perturbed_objects: list[int]
    images: tuple[np.ndarray, np.ndarray, np.ndarray]
    flickered: bool = False


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": {k: str(v) for k, v in st["state"].items()},
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _rng_from_state(d: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": d["bit_generator"],
        "state": {k: int(v) for k, v in d["state"].items()},
        "has_uint32": d["has_uint32"],
        "uinteger": d["uinteger"],
    }
    return np.random.Generator(bg)


def _template_to_dict(t: ShapeTemplate) -> dict:
    return {
        "name": t.name,
        "kind": t.kind,
        "radius": t.radius,
        "vertices": [list(v) for v in t.vertices],
        "color": list(t.color),
        "graspability": t.graspability,
    }


def _template_from_dict(d: dict) -> ShapeTemplate:
    return ShapeTemplate(
        name=d["name"],
        kind=d["kind"],
        radius=float(d["radius"]),
        vertices=tuple(tuple(float(c) for c in v) for v in d["vertices"]),
        color=tuple(float(c) for c in d["color"]),
        graspability=float(d["graspability"]),
    )


def _object_to_dict(o: SimObject) -> dict:
    return {"id": o.id, "x": o.x, "y": o.y, "angle": o.angle, "template": _template_to_dict(o.template)}


def _object_from_dict(d: dict) -> SimObject:
    return SimObject(int(d["id"]), _template_from_dict(d["template"]), float(d["x"]), float(d["y"]), float(d["angle"]))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# object and background pools


def _polygon_area_centroid(v: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return abs(area), np.array([cx, cy])


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.55, 1.0)
    v = rng.uniform(0.5, 1.0)
    return tuple(float(c) for c in colorsys.hsv_to_rgb(h, s, v))


_MIN_TEMPLATE_AREA = 170.0


def make_template(index: int, pool_seed: int = _TEMPLATE_POOL_SEED) -> ShapeTemplate:
    """Deterministic parametric object number ``index``."""
    rng = make_rng(pool_seed * 1000 + index)
    kinds = ("disc", "ellipse", "rect", "ngon", "lshape", "tee")
    kind = kinds[index % len(kinds)]
    color = _random_color(rng)
    grasp = float(rng.uniform(0.6, 1.0))
    name = f"obj{index:03d}_{kind}"
    if kind == "disc":
        r = float(rng.uniform(8.0, 13.0))
        return ShapeTemplate(name, "disc", radius=r, color=color, graspability=grasp)
    if kind == "ellipse":
        a, b = rng.uniform(10.0, 16.0), rng.uniform(5.5, 8.5)
        t = np.linspace(0, 2 * np.pi, 24, endpoint=False)
        v = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    elif kind == "rect":
        w, h = rng.uniform(16.0, 30.0), rng.uniform(9.0, 16.0)
        v = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    elif kind == "ngon":
        n = int(rng.integers(3, 7))
        r = rng.uniform(10.0, 15.0)
        t = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, np.pi)
        v = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    elif kind == "lshape":
        a, b, t_ = rng.uniform(18.0, 28.0), rng.uniform(16.0, 24.0), rng.uniform(7.0, 10.0)
        v = np.array([[0, 0], [a, 0], [a, t_], [t_, t_], [t_, b], [0, b]], dtype=np.float64)
    else:  # tee
        a, b, t_ = rng.uniform(20.0, 28.0), rng.uniform(16.0, 24.0), rng.uniform(7.0, 10.0)
        v = np.array(
            [[0, 0], [a, 0], [a, t_], [(a + t_) / 2, t_], [(a + t_) / 2, b], [(a - t_) / 2, b], [(a - t_) / 2, t_], [0, t_]],
            dtype=np.float64,
        )
    area, c = _polygon_area_centroid(v)
    v = v - c
    if abs(area) < _MIN_TEMPLATE_AREA:  # thin triangles
        v = v * np.sqrt(_MIN_TEMPLATE_AREA / abs(area))
    return ShapeTemplate(
        name, "poly", vertices=tuple((float(p[0]), float(p[1])) for p in v), color=color, graspability=grasp
    )


def template_split(split: str, cfg: ArenaConfig) -> list[ShapeTemplate]:
    """Disjoint object pools for the train / val / test splits."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    sizes = cfg.object_splits
    start = sum(sizes[: SPLITS.index(split)])
    return [make_template(i) for i in range(start, start + sizes[SPLITS.index(split)])]


def background_split(split: str, cfg: ArenaConfig) -> list[Background]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    n = cfg.background_splits[SPLITS.index(split)]
    base = _BACKGROUND_SEED_BASE[split]
    return [Background(TEXTURE_FAMILIES[(base + k) % 3], base + k) for k in range(n)]


@lru_cache(maxsize=64)
def _texture(family: str, seed: int, width: int, height: int) -> np.ndarray:
    rng = make_rng(7919 + seed)
    h1 = rng.uniform(0, 1)
    h2 = (h1 + rng.uniform(-0.12, 0.12)) % 1.0
    s1, s2 = rng.uniform(0.05, 0.35, size=2)
    v1 = rng.uniform(0.3, 0.75)
    v2 = float(np.clip(v1 + rng.choice([-1, 1]) * rng.uniform(0.12, 0.3), 0.1, 0.9))
    c1 = np.array(colorsys.hsv_to_rgb(h1, s1, v1))
    c2 = np.array(colorsys.hsv_to_rgb(h2, s2, v2))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    if family == "noise":
        raw = rng.standard_normal((height, width))
        sm = ndimage.gaussian_filter(raw, sigma=rng.uniform(2.0, 6.0), mode="wrap")
        t = (sm - sm.min()) / max(sm.max() - sm.min(), 1e-12)
    elif family == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(6.0, 16.0)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        t = (np.sin(2 * np.pi * proj / period) > 0).astype(np.float64)
    elif family == "checker":
        cell = rng.uniform(6.0, 14.0)
        t = ((np.floor(xx / cell) + np.floor(yy / cell)) % 2).astype(np.float64)
    else:
        raise ValueError(f"unknown texture family {family!r}")
    img = c1[None, None, :] * (1 - t[..., None]) + c2[None, None, :] * t[..., None]
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img.setflags(write=False)
    return img


def background_image(bg: Background, width: int, height: int) -> np.ndarray:
    return _texture(bg.family, bg.seed, width, height)


# ---------------------------------------------------------------------------
# rasterisation


def object_mask(obj: SimObject, width: int, height: int) -> np.ndarray:
    """Pixels whose centre lies inside the object (pixel (r, c) centre = (c, r))."""
    out = np.zeros((height, width), dtype=bool)
    hx, hy = obj.half_extent()
    x0, x1 = max(int(np.floor(obj.x - hx)), 0), min(int(np.ceil(obj.x + hx)) + 1, width)
    y0, y1 = max(int(np.floor(obj.y - hy)), 0), min(int(np.ceil(obj.y + hy)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return out
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    if obj.template.kind == "disc":
        inside = (xx - obj.x) ** 2 + (yy - obj.y) ** 2 <= obj.template.radius**2
    else:
        inside = _points_in_polygon(xx, yy, obj.world_vertices())
    out[y0:y1, x0:x1] = inside
    return out


def _points_in_polygon(xx: np.ndarray, yy: np.ndarray, v: np.ndarray) -> np.ndarray:
    inside = np.zeros(xx.shape, dtype=bool)
    n = len(v)
    for i in range(n):
        xa, ya = v[i]
        xb, yb = v[(i + 1) % n]
        if ya == yb:
            continue
        crosses = (ya > yy) != (yb > yy)
        xint = xa + (yy - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (xx < xint)
    return inside


def render(state: ArenaState, hidden: frozenset[int] = frozenset()) -> np.ndarray:
    """Rasterise background then objects in id order; values are multiples of 1/255."""
    img = np.array(background_image(state.background, state.width, state.height))
    for obj in sorted(state.objects, key=lambda o: o.id):
        if obj.id in hidden:
            continue
        m = object_mask(obj, state.width, state.height)
        img[m] = obj.color
    img = np.clip(img * state.lighting, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def true_masks(state: ArenaState, hidden: frozenset[int] = frozenset()) -> list[tuple[int, np.ndarray]]:
    """Visible per-object masks; later ids occlude earlier ones."""
    objs = [o for o in sorted(state.objects, key=lambda o: o.id) if o.id not in hidden]
    full = [object_mask(o, state.width, state.height) for o in objs]
    covered = np.zeros((state.height, state.width), dtype=bool)
    out = []
    for o, m in zip(reversed(objs), reversed(full)):
        out.append((o.id, m & ~covered))
        covered |= m
    out.reverse()
    return out


# ---------------------------------------------------------------------------
# scene construction


def clamp_inside(obj: SimObject, width: int, height: int) -> None:
    hx, hy = obj.half_extent()
    obj.x = float(np.clip(obj.x, hx, max(width - 1 - hx, hx)))
    obj.y = float(np.clip(obj.y, hy, max(height - 1 - hy, hy)))


def _fits(obj: SimObject, placed: list[SimObject], gap: float) -> bool:
    r = obj.bounding_radius()
    for other in placed:
        if np.hypot(obj.x - other.x, obj.y - other.y) < r + other.bounding_radius() + gap:
            return False
    return True


def place_randomly(
    obj: SimObject, placed: list[SimObject], width: int, height: int, rng: np.random.Generator, tries: int, gap: float = 2.0
) -> bool:
    for _ in range(tries):
        obj.angle = float(rng.uniform(0.0, 2.0 * np.pi))
        hx, hy = obj.half_extent()
        if width - 1 - 2 * hx <= 0 or height - 1 - 2 * hy <= 0:
            continue
        obj.x = float(rng.uniform(hx, width - 1 - hx))
        obj.y = float(rng.uniform(hy, height - 1 - hy))
        if _fits(obj, placed, gap):
            return True
    return False


_LAYOUT_RESTARTS = 20


def spawn_scene(
    cfg: ArenaConfig,
    background: Background,
    object_pool: list[ShapeTemplate],
    rng: np.random.Generator,
    count: int | None = None,
) -> ArenaState:
    """Sample a cluttered arena with non-overlapping objects.

    Sequential placement can paint itself into a corner, so a layout that
    jams is discarded and redrawn (same count) up to ``_LAYOUT_RESTARTS`` times.
    """
    if not object_pool:
        raise ValueError("object pool is empty")
    if count is None:
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(_LAYOUT_RESTARTS):
        objects: list[SimObject] = []
        for oid in range(count):
            tpl = object_pool[int(rng.integers(len(object_pool)))]
            obj = SimObject(oid, tpl, 0.0, 0.0)
            if not place_randomly(obj, objects, cfg.width, cfg.height, rng, cfg.max_placement_tries):
                break
            objects.append(obj)
        else:
            return ArenaState(cfg.width, cfg.height, background, objects, rng, 1.0)
    raise RuntimeError(f"could not place {count} objects in {_LAYOUT_RESTARTS} layouts")


def new_scene(cfg: ArenaConfig, object_split: str, bg_split: str, seed: int, bg_index: int | None = None) -> ArenaState:
    rng = make_rng(seed)
    bgs = background_split(bg_split, cfg)
    bg = bgs[int(rng.integers(len(bgs)))] if bg_index is None else bgs[bg_index % len(bgs)]
    return spawn_scene(cfg, bg, template_split(object_split, cfg), rng)


# ---------------------------------------------------------------------------
# interaction


def _elongation_and_axis(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    if xs.size < 2:
        return 0.0, 0.0
    cov = np.cov(np.stack([xs, ys]).astype(np.float64), bias=True)
    ev = np.linalg.eigvalsh(cov)
    elong = 0.0 if ev[1] <= 0 else 1.0 - ev[0] / ev[1]
    return float(elong), principal_axis(mask)


def grasp_probability(obj: SimObject, visible: np.ndarray, gripper_angle: float, noise: NoiseConfig) -> float:
    """Graspability times an alignment factor peaking perpendicular to the major axis."""
    if noise.noise_free:
        return 1.0
    elong, axis = _elongation_and_axis(visible)
    ideal = axis + np.pi / 2.0
    delta = (gripper_angle - ideal) % np.pi
    alignment = 1.0 - noise.misalign_penalty * elong * np.sin(delta) ** 2
    return float(obj.graspability * alignment)


def _pick_candidate(state: ArenaState, pick: Point2, noise: NoiseConfig) -> int | None:
    px, py = int(round(pick.x)), int(round(pick.y))
    if 0 <= px < state.width and 0 <= py < state.height:
        for oid, m in reversed(true_masks(state)):
            if m[py, px]:
                return oid
    best, best_d = None, noise.grasp_radius
    for obj in sorted(state.objects, key=lambda o: o.id):
        d = float(np.hypot(obj.x - pick.x, obj.y - pick.y))
        if d <= best_d:
            best, best_d = obj.id, d
    return best


def _distance_to_mask(mask: np.ndarray, p: Point2) -> float:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return float("inf")
    return float(np.sqrt(((xs - p.x) ** 2 + (ys - p.y) ** 2).min()))


def _nudge(obj: SimObject, state: ArenaState, sigma: float) -> None:
    obj.x += float(state.rng.normal(0.0, sigma))
    obj.y += float(state.rng.normal(0.0, sigma))
    obj.angle += float(state.rng.normal(0.0, 0.1))
    clamp_inside(obj, state.width, state.height)


def _maybe_flicker(state: ArenaState, cfg: ArenaConfig, noise: NoiseConfig) -> bool:
    # the draw happens even when disabled so that the rng stream does not
    # depend on the flicker setting
    u = state.rng.random()
    if noise.noise_free or u >= noise.flicker_prob:
        return False
    state.lighting = float(state.rng.uniform(cfg.lighting_min, cfg.lighting_max))
    return True


def pick_place(
    state: ArenaState, action: PickPlaceAction, noise: NoiseConfig, cfg: ArenaConfig | None = None
) -> tuple[ArenaState, InteractionOutcome]:
    cfg = cfg or ArenaConfig(width=state.width, height=state.height)
    for p in (action.pick, action.place):
        if not (0 <= p.x <= state.width - 1 and 0 <= p.y <= state.height - 1):
            raise ValueError(f"action point {p} outside the arena")
    s = state.copy()
    i_before = render(s)
    perturbed: list[int] = []
    grasped: int | None = None

    cand = _pick_candidate(s, action.pick, noise)
    if cand is None:
        if not noise.noise_free:
            for obj in sorted(s.objects, key=lambda o: o.id):
                m = object_mask(obj, s.width, s.height)
                if _distance_to_mask(m, action.pick) <= noise.touch_radius:
                    _nudge(obj, s, noise.nudge_sigma)
                    perturbed.append(obj.id)
    else:
        obj = s.object_by_id(cand)
        visible = dict(true_masks(s))[cand]
        p = grasp_probability(obj, visible, action.gripper_angle, noise)
        if s.rng.random() < p:
            grasped = cand
        elif not noise.noise_free:
            _nudge(obj, s, noise.nudge_sigma)
            perturbed.append(cand)

    flicker = _maybe_flicker(s, cfg, noise)

    if grasped is not None:
        obj = s.object_by_id(grasped)
        move = np.array([action.place.x - action.pick.x, action.place.y - action.pick.y])
        if not noise.noise_free and noise.drag_margin > 0:
            reach = obj.bounding_radius() + noise.drag_margin
            swept = np.zeros((s.height, s.width), dtype=bool)
            yy, xx = np.ogrid[0 : s.height, 0 : s.width]
            swept |= (xx - obj.x) ** 2 + (yy - obj.y) ** 2 <= reach**2
            for other in sorted(s.objects, key=lambda o: o.id):
                if other.id == grasped:
                    continue
                if np.any(object_mask(other, s.width, s.height) & swept):
                    frac = float(s.rng.uniform(noise.drag_fraction_min, noise.drag_fraction_max))
                    other.x += frac * move[0]
                    other.y += frac * move[1]
                    other.angle += float(s.rng.normal(0.0, 0.2))
                    clamp_inside(other, s.width, s.height)
                    perturbed.append(other.id)
        i_mid = render(s, hidden=frozenset([grasped]))
        obj.x += move[0]
        obj.y += move[1]
        if not noise.noise_free:
            obj.x += float(s.rng.normal(0.0, noise.place_sigma))
            obj.y += float(s.rng.normal(0.0, noise.place_sigma))
            obj.angle += float(s.rng.normal(0.0, noise.rotation_sigma))
        clamp_inside(obj, s.width, s.height)
    else:
        i_mid = render(s)

    flicker = _maybe_flicker(s, cfg, noise) or flicker
    i_after = render(s)
    return s, InteractionOutcome(grasped, perturbed, (i_before, i_mid, i_after), flicker)


def reset_sweep(state: ArenaState, cfg: ArenaConfig) -> ArenaState:
    """Sweep the gripper from boundary points to the centre, pushing objects."""
    s = state.copy()
    w, h = s.width - 1, s.height - 1
    center = np.array([w / 2.0, h / 2.0])
    perimeter = 2.0 * (w + h)
    for _ in range(cfg.sweeps):
        t = s.rng.uniform(0.0, perimeter)
        if t < w:
            start = np.array([t, 0.0])
        elif t < w + h:
            start = np.array([w, t - w])
        elif t < 2 * w + h:
            start = np.array([w - (t - w - h), h])
        else:
            start = np.array([0.0, h - (t - 2 * w - h)])
        seg = center - start
        length = float(np.hypot(*seg))
        if length == 0:
            continue
        d = seg / length
        normal = np.array([-d[1], d[0]])
        for obj in sorted(s.objects, key=lambda o: o.id):
            rel = np.array([obj.x, obj.y]) - start
            along = float(rel @ d)
            across = abs(float(rel @ normal))
            if 0.0 <= along <= length and across <= obj.bounding_radius() + cfg.sweep_halfwidth:
                remaining = length - along
                push = float(s.rng.uniform(cfg.push_fraction_min, cfg.push_fraction_max)) * remaining
                jitter = float(s.rng.normal(0.0, cfg.push_noise))
                obj.x += push * d[0] + jitter * normal[0]
                obj.y += push * d[1] + jitter * normal[1]
                obj.angle += float(s.rng.normal(0.0, 0.3))
                clamp_inside(obj, s.width, s.height)
    return s


def scripted_passive_motion(
    state: ArenaState, steps: int, cfg: ArenaConfig, noise: NoiseConfig | None = None
) -> tuple[ArenaState, list[tuple[np.ndarray, np.ndarray, int]]]:
    """Push one random object per step in a straight line; return image pairs."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    noise = noise or NoiseConfig()
    s = state.copy()
    pairs = []
    for _ in range(steps):
        before = render(s)
        if not s.objects:
            pairs.append((before, before.copy(), -1))
            continue
        obj = s.objects[int(s.rng.integers(len(s.objects)))]
        old = (obj.x, obj.y)
        for _attempt in range(10):
            theta = s.rng.uniform(0.0, 2.0 * np.pi)
            dist = s.rng.uniform(cfg.passive_push_min, cfg.passive_push_max)
            obj.x = old[0] + dist * np.cos(theta)
            obj.y = old[1] + dist * np.sin(theta)
            clamp_inside(obj, s.width, s.height)
            if np.hypot(obj.x - old[0], obj.y - old[1]) >= 1.0:
                break
        _maybe_flicker(s, cfg, noise)
        pairs.append((before, render(s), obj.id))
    return s, pairs


# ---------------------------------------------------------------------------
# scene manifests


def write_scene_manifest(path, scenes: list[ArenaState], tags: list[dict] | None = None) -> None:
    with open(path, "w") as fh:
        for i, sc in enumerate(scenes):
            rec = {"index": i, "tags": (tags[i] if tags else {}), "state": sc.to_dict()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_scene_manifest(path) -> tuple[list[ArenaState], list[dict]]:
    scenes, tags = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                scenes.append(ArenaState.from_dict(rec["state"]))
                tags.append(rec.get("tags", {}))
    return scenes, tags
