"""Deterministic synthetic crowd scenes with rich head annotations.

Heads are shaded disks whose radius grows towards the bottom of the frame
(a crude perspective cue). Weather-like degradations are stylised: a haze
lift with contrast loss and blur, additive rain streaks, and white snow
speckle. Distractor scenes carry textured clutter and no people.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .annotations import (
    LOW_MAX,
    MEDIUM_MAX,
    Blur,
    Category,
    HeadAnnotation,
    ImageRecord,
    Occlusion,
    Split,
    Weather,
    write_dataset,
)
from .errors import CapacityError

log = logging.getLogger(__name__)

MIN_CENTER_GAP = 2.0
BASE_MIN_RADIUS = 1.5
BASE_RADIUS = 4.0
HIGH_MAX = 800

CROWD_SCENES = ("marathon", "mall", "walking", "stadium", "street", "plaza")
DISTRACTOR_SCENES = ("empty_stadium", "market_stalls", "tree_canopy")

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Per-scene seed, independent of generation order or thread count."""
    return splitmix64((splitmix64(seed & _MASK64) ^ index) & _MASK64)


class Degradation(enum.Enum):
    NONE = "none"
    BRIGHTNESS_HAZE = "brightness_haze"
    ADDITIVE_STREAKS = "additive_streaks"
    WHITE_SPECKLE = "white_speckle"


WEATHER_OF = {
    Degradation.NONE: Weather.NONE,
    Degradation.BRIGHTNESS_HAZE: Weather.FOG_HAZE,
    Degradation.ADDITIVE_STREAKS: Weather.RAIN,
    Degradation.WHITE_SPECKLE: Weather.SNOW,
}


@dataclass(frozen=True)
class SceneConfig:
    width: int = 256
    height: int = 256
    target_count: int = 0
    perspective_strength: float = 1.0
    degradation: Degradation = Degradation.NONE
    clutter_level: float = 0.0
    seed: int = 0
    scene_label: str = ""
    image_id: str = "scene"
    split: Split = Split.TRAIN

    def __post_init__(self):
        if self.width % 32 or self.height % 32 or self.width <= 0 or self.height <= 0:
            raise ValueError(f"scene size {self.width}x{self.height} must be positive multiples of 32")
        if self.target_count < 0:
            raise ValueError("target_count must be >= 0")
        if self.perspective_strength < 0:
            raise ValueError("perspective_strength must be >= 0")
        if not 0 <= self.clutter_level <= 1:
            raise ValueError("clutter_level must be in [0, 1]")

    @property
    def is_distractor(self) -> bool:
        return self.target_count == 0 and self.clutter_level > 0


def head_radius(y: float, height: int, perspective_strength: float) -> float:
    return BASE_MIN_RADIUS + perspective_strength * (y / height) * BASE_RADIUS


def _background(rng, h, w) -> np.ndarray:
    gy = np.linspace(0, 1, h)[:, None]
    base = rng.uniform(0.35, 0.65, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=3)
    img = base[:, None, None] + tilt[:, None, None] * gy[None]
    coarse = rng.normal(0, 0.06, size=(3, h // 32 + 2, w // 32 + 2))
    img = img + _smooth_upsample(coarse, h, w)
    img = img + rng.normal(0, 0.015, size=(3, h, w))
    return img


def _smooth_upsample(grid, h, w):
    gy = np.linspace(0, grid.shape[1] - 1, h)
    gx = np.linspace(0, grid.shape[2] - 1, w)
    y0 = np.floor(gy).astype(int).clip(0, grid.shape[1] - 2)
    x0 = np.floor(gx).astype(int).clip(0, grid.shape[2] - 2)
    ty = (gy - y0)[:, None]
    tx = (gx - x0)[None, :]
    a = grid[:, y0][:, :, x0]
    b = grid[:, y0][:, :, x0 + 1]
    c = grid[:, y0 + 1][:, :, x0]
    d = grid[:, y0 + 1][:, :, x0 + 1]
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def _draw_clutter(img, rng, level):
    _, h, w = img.shape
    n = int(round(level * 40))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n):
        color = rng.uniform(0.1, 0.9, size=3)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        if rng.random() < 0.5:
            hw, hh = rng.uniform(3, 24), rng.uniform(3, 24)
            mask = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
            # striped texture so clutter is not flat
            stripes = 0.85 + 0.15 * (((xx + yy) // 3) % 2)
            img[:, mask] = (color[:, None] * stripes[mask][None])
        else:
            ax, ay = rng.uniform(2, 12), rng.uniform(6, 30)
            theta = rng.uniform(0, math.pi)
            dx, dy = xx - cx, yy - cy
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            mask = (u / ax) ** 2 + (v / ay) ** 2 <= 1
            img[:, mask] = color[:, None]


def _place_heads(rng, n, w, h):
    cell = MIN_CENTER_GAP
    grid: dict[tuple, list] = {}
    pts = []
    attempts = 0
    budget = 200 * n + 1000
    while len(pts) < n:
        attempts += 1
        if attempts > budget:
            raise CapacityError(f"could only place {len(pts)} of {n} heads in {w}x{h} after {budget} attempts")
        x = float(rng.uniform(0, w))
        y = float(rng.uniform(0, h))
        if x >= w or y >= h:
            continue
        cx, cy = int(x // cell), int(y // cell)
        ok = True
        for gx in (cx - 1, cx, cx + 1):
            for gy in (cy - 1, cy, cy + 1):
                for px, py in grid.get((gx, gy), ()):
                    if (px - x) ** 2 + (py - y) ** 2 < cell * cell:
                        ok = False
                        break
        if not ok:
            continue
        grid.setdefault((cx, cy), []).append((x, y))
        pts.append((x, y))
    return pts


def _render_heads(img, rng, pts, strength):
    _, h, w = img.shape
    owner = np.full((h, w), -1, dtype=np.int64)
    totals = np.zeros(len(pts), dtype=np.int64)
    radii = np.zeros(len(pts))
    order = sorted(range(len(pts)), key=lambda k: (pts[k][1], pts[k][0]))
    for k in order:
        x, y = pts[k]
        r = head_radius(y, h, strength)
        radii[k] = r
        x0, x1 = max(0, int(math.floor(x - r))), min(w, int(math.ceil(x + r)) + 1)
        y0, y1 = max(0, int(math.floor(y - r))), min(h, int(math.ceil(y + r)) + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.hypot(xx + 0.5 - x, yy + 0.5 - y)
        disk = dist <= r
        totals[k] = int(disk.sum())
        tone = rng.uniform(0.05, 0.3)
        skin = np.array([0.55, 0.4, 0.3]) * rng.uniform(0.7, 1.1)
        shade = (1.0 - dist / max(r, 1e-6)).clip(0, 1)
        # dark hair on top, lighter face below the centre
        face = (yy + 0.5 > y)
        for ch in range(3):
            val = np.where(face, skin[ch] * (0.7 + 0.3 * shade), tone * (0.8 + 0.4 * shade))
            region = img[ch, y0:y1, x0:x1]
            region[disk] = val[disk]
        owner[y0:y1, x0:x1][disk] = k
    visible = np.bincount(owner[owner >= 0].ravel(), minlength=len(pts))
    overlap = 1.0 - visible / np.maximum(totals, 1)
    return overlap, radii


def occlusion_level(overlap: float) -> Occlusion:
    if overlap < 0.10:
        return Occlusion.UNOCCLUDED
    if overlap <= 0.60:
        return Occlusion.PARTIALLY_OCCLUDED
    return Occlusion.FULLY_OCCLUDED


def size_level(radius: float) -> int:
    return max(0, int(round(radius)) - 1)


def _degrade(img, rng, kind: Degradation):
    _, h, w = img.shape
    if kind is Degradation.BRIGHTNESS_HAZE:
        img = img * 0.55 + 0.4
        img = np.stack([gaussian_filter(c, 1.0) for c in img])
    elif kind is Degradation.ADDITIVE_STREAKS:
        layer = np.zeros((h, w))
        n = int(h * w / 300)
        ys = rng.integers(0, h, n)
        xs = rng.integers(0, w, n)
        length = rng.integers(6, 14, n)
        for y, x, L in zip(ys, xs, length):
            for t in range(int(L)):
                yy, xx = y + t, x - t // 3
                if 0 <= yy < h and 0 <= xx < w:
                    layer[yy, xx] = 0.25
        img = img + layer[None]
    elif kind is Degradation.WHITE_SPECKLE:
        flakes = rng.random((h, w)) < 0.015
        flakes |= np.roll(flakes, 1, axis=0) & (rng.random((h, w)) < 0.5)
        img = np.where(flakes[None], 0.97, img)
    return img


def generate_scene(config: SceneConfig):
    """Render one scene. Returns (image float32 (3, H, W) in [0, 1], ImageRecord)."""
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    img = _background(rng, h, w)
    if config.clutter_level > 0:
        _draw_clutter(img, rng, config.clutter_level)
    pts = _place_heads(rng, config.target_count, w, h)
    overlap, radii = _render_heads(img, rng, pts, config.perspective_strength)
    img = _degrade(img, rng, config.degradation)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    blurred = config.degradation is Degradation.BRIGHTNESS_HAZE
    heads = tuple(
        HeadAnnotation(
            x=pts[k][0], y=pts[k][1],
            occlusion=occlusion_level(float(overlap[k])),
            blur=Blur.BLUR if blurred else Blur.NO_BLUR,
            size_level=size_level(float(radii[k])),
        )
        for k in range(len(pts))
    )
    label = config.scene_label or (
        DISTRACTOR_SCENES[config.seed % len(DISTRACTOR_SCENES)] if config.is_distractor
        else CROWD_SCENES[config.seed % len(CROWD_SCENES)]
    )
    record = ImageRecord(
        id=config.image_id, width=w, height=h, heads=heads, scene_label=label,
        weather=WEATHER_OF[config.degradation], is_distractor=config.is_distractor, split=config.split,
    )
    return img, record


# ---- PPM I/O ----

def write_ppm(image: np.ndarray, path) -> None:
    """Binary P6, 8 bits per channel. ``image`` is float (3, H, W) in [0, 1]."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    data = np.frombuffer(raw[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8)
    if data.size != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


# ---- corpus ----

def _count_for(category: Category, rng) -> int:
    if category is Category.LOW:
        return int(rng.integers(1, LOW_MAX + 1))
    if category is Category.MEDIUM:
        return int(rng.integers(LOW_MAX + 1, MEDIUM_MAX + 1))
    if category is Category.HIGH:
        return int(rng.integers(MEDIUM_MAX + 1, HIGH_MAX + 1))
    return 0


_WEATHER_CYCLE = (Degradation.BRIGHTNESS_HAZE, Degradation.ADDITIVE_STREAKS, Degradation.WHITE_SPECKLE)
GENERATED_CATEGORIES = (Category.LOW, Category.MEDIUM, Category.HIGH, Category.DISTRACTORS, Category.WEATHER)


def corpus_plan(counts: dict, seed: int = 0, size=(256, 256), test_fraction: float = 0.25) -> list[SceneConfig]:
    """Scene configs for a corpus with ``counts[category]`` images per category.

    Weather scenes take their head count from the Low or Medium range
    (alternating); every other category is generated without degradation.
    ``test_fraction`` of each category goes to the test split.
    """
    counts = {Category(k) if not isinstance(k, Category) else k: int(v) for k, v in counts.items()}
    for cat in counts:
        if cat not in GENERATED_CATEGORIES:
            raise ValueError(f"cannot generate category {cat.value!r}")
    w, h = size
    plans = []
    index = 0
    for cat in GENERATED_CATEGORIES:
        n = counts.get(cat, 0)
        n_test = int(math.floor(test_fraction * n + 0.5))
        for j in range(n):
            s = derive_seed(seed, index)
            rng = np.random.default_rng(s)
            degradation = Degradation.NONE
            clutter = float(rng.uniform(0.0, 0.3))
            if cat is Category.WEATHER:
                degradation = _WEATHER_CYCLE[j % 3]
                target = _count_for(Category.LOW if j % 2 == 0 else Category.MEDIUM, rng)
            elif cat is Category.DISTRACTORS:
                target = 0
                clutter = float(rng.uniform(0.6, 1.0))
            else:
                target = _count_for(cat, rng)
            plans.append(SceneConfig(
                width=w, height=h, target_count=target,
                perspective_strength=float(rng.uniform(0.3, 1.5)),
                degradation=degradation, clutter_level=clutter, seed=s,
                image_id=f"{index:05d}_{cat.value.lower()}",
                split=Split.TEST if j >= n - n_test else Split.TRAIN,
            ))
            index += 1
    return plans


def generate_corpus(counts: dict, out_dir, seed: int = 0, size=(256, 256), test_fraction: float = 0.25):
    """Write ``dataset.json`` and ``images/<id>.ppm`` under ``out_dir``.

    Returns the list of records written.
    """
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {img_dir}: {exc}") from exc
    records = []
    for cfg in corpus_plan(counts, seed, size, test_fraction):
        image, rec = generate_scene(cfg)
        path = img_dir / f"{rec.id}.ppm"
        try:
            write_ppm(image, path)
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc
        records.append(rec)
        log.debug("wrote %s (%d heads)", path, rec.count)
    ds = out / "dataset.json"
    try:
        write_dataset(records, ds)
    except OSError as exc:
        raise OSError(f"failed writing {ds}: {exc}") from exc
    return records
