"""Procedural day/night street scenes with exact labels.

Scenes are rectangles on a layered static layout (sky, buildings,
vegetation band, road). The night render of a scene keeps the static
layout pixel-aligned with the day render but re-positions every
dynamic-and-small object by a seeded offset before darkening, so the
resulting day/night pairs are only coarsely aligned where it matters.

All randomness is derived from ``numpy.random.SeedSequence`` keyed by
(master seed, stream code, item index), a splittable scheme that makes
outputs independent of generation order and parallelism.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .io import save_tensor, write_kv
from .taxonomy import default_taxonomy
from .tensor import Tensor

STREAM_SOURCE = 1
STREAM_TARGET = 2
STREAM_TARGET_NIGHT = 3
STREAM_TEST = 4
STREAM_TEST_NIGHT = 5

_PLACEMENT_ORDER = ["bus", "car", "person", "traffic_light", "sign", "pole"]

# (width, height) as fractions of the canvas, and whether the object
# stands on the road or is mounted near the horizon; widths keep every
# class representable on the quarter-resolution logit grid
_OBJECT_GEOMETRY = {
    "bus": ((0.20, 0.28), (0.09, 0.13), "ground"),
    "car": ((0.12, 0.19), (0.06, 0.09), "ground"),
    "person": ((0.05, 0.08), (0.09, 0.14), "ground"),
    "traffic_light": ((0.07, 0.10), (0.08, 0.12), "mounted"),
    "sign": ((0.07, 0.10), (0.06, 0.09), "mounted"),
    "pole": ((0.055, 0.075), (0.16, 0.25), "ground"),
}


@dataclass(frozen=True)
class NightConfig:
    gamma: float = 2.2
    scale_r: float = 0.5
    scale_g: float = 0.55
    scale_b: float = 0.8
    noise_sigma: float = 0.03
    glow_max: int = 3

    def is_identity(self):
        return (
            self.gamma == 1.0
            and self.scale_r == self.scale_g == self.scale_b == 1.0
            and self.noise_sigma == 0.0
            and self.glow_max == 0
        )


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    dynamic_prob: float = 0.75
    long_tailed_prob: float = 0.05
    misalign_max: int = 6
    # per-scene day exposure and white-balance ranges (overcast, golden
    # hour, bright noon); night renders always rasterize at exposure 1.0
    # and neutral tint before the night transform
    exposure_min: float = 0.45
    exposure_max: float = 1.0
    tint_min: float = 0.60
    shadow_prob: float = 0.6
    night: NightConfig = field(default_factory=NightConfig)

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"canvas {self.height}x{self.width} is below the 16x16 minimum")


@dataclass(frozen=True)
class PlacedObject:
    class_id: int
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class Building:
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int
    width: int
    horizon: int
    road_top: int
    buildings: tuple
    objects: tuple


@dataclass
class DomainSample:
    image: Tensor  # [3,H,W] float32 in [0,1]
    label: Tensor | None  # [H,W] uint8, 255 = ignore
    domain: str  # source_day | target_day | target_night | mixed


def _rng(*key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def item_seed(master_seed, stream, index):
    """64-bit per-item seed from the splittable master stream."""
    seq = np.random.SeedSequence((int(master_seed), int(stream), int(index)))
    return int(seq.generate_state(1, np.uint64)[0])


def generate_scene(seed, config, taxonomy=None):
    """Deterministically lay out one scene from (seed, config)."""
    tax = taxonomy or default_taxonomy()
    h, w = config.height, config.width
    rng = _rng(seed, 101)

    horizon = int(h * rng.uniform(0.30, 0.48))
    veg = max(1, int(h * rng.uniform(0.03, 0.09)))
    road_top = horizon + veg

    buildings = []
    for _ in range(int(rng.integers(1, 4))):
        bw = max(3, int(w * rng.uniform(0.12, 0.30)))
        bh = max(3, int(h * rng.uniform(0.15, 0.35)))
        bx = int(rng.integers(0, max(1, w - bw)))
        by = max(0, road_top - bh)
        buildings.append(Building(bx, by, bw, road_top - by))

    name_to_id = {c.name: c.id for c in tax.classes}
    objects = []
    for name in _PLACEMENT_ORDER:
        cls = tax[name_to_id[name]]
        p = config.long_tailed_prob if cls.long_tailed else config.dynamic_prob
        if rng.random() >= p:
            continue
        count = 1 if cls.long_tailed else int(rng.integers(1, 3))
        (wlo, whi), (hlo, hhi), anchor = _OBJECT_GEOMETRY[name]
        for _ in range(count):
            ow = max(1, int(w * rng.uniform(wlo, whi)))
            oh = max(1, int(h * rng.uniform(hlo, hhi)))
            if anchor == "ground":
                base = int(rng.integers(road_top + 1, h))
            else:
                base = int(rng.integers(horizon, max(horizon + 1, road_top + (h - road_top) // 4)))
            ox = int(np.clip(int(rng.integers(0, w)), 0, w - ow))
            oy = int(np.clip(base - oh, 0, h - oh))
            objects.append(PlacedObject(cls.id, ox, oy, ow, oh))

    return SceneSpec(int(seed), h, w, horizon, road_top, tuple(buildings), tuple(objects))


def _rasterize(spec, offsets, taxonomy, exposure_range, tint_min, shadow_prob):
    """Paint labels and the jittered-color image; later objects occlude earlier."""
    tax = taxonomy
    h, w = spec.height, spec.width
    name_to_id = {c.name: c.id for c in tax.classes}
    rng = _rng(spec.seed, 202)

    label = np.empty((h, w), dtype=np.uint8)
    image = np.empty((3, h, w), dtype=np.float64)

    # one exposure + tint draw per scene keeps the jitter stream aligned
    # between the day and night renders of the same spec; the tint is
    # luminance-normalized so it shifts hue without touching brightness
    exposure = rng.uniform(*exposure_range)
    tint = rng.uniform(tint_min, 1.0, size=3)
    tint = tint / tint.mean()

    def color_for(cid):
        base = np.asarray(tax[cid].day_color)
        jittered = np.clip(base + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        return jittered * exposure * tint

    def paint(cid, x, y, bw, bh, col):
        label[y : y + bh, x : x + bw] = cid
        image[:, y : y + bh, x : x + bw] = col[:, None, None]

    # static layers consume jitter draws first, in a fixed order
    sky, road, veg = name_to_id["sky"], name_to_id["road"], name_to_id["vegetation"]
    paint(sky, 0, 0, w, spec.horizon, color_for(sky))
    paint(veg, 0, spec.horizon, w, spec.road_top - spec.horizon, color_for(veg))
    paint(road, 0, spec.road_top, w, h - spec.road_top, color_for(road))
    bid = name_to_id["building"]
    for b in spec.buildings:
        paint(bid, b.x, b.y, b.w, b.h, color_for(bid))

    for obj, (dx, dy) in zip(spec.objects, offsets):
        x = int(np.clip(obj.x + dx, 0, w - obj.w))
        y = int(np.clip(obj.y + dy, 0, h - obj.h))
        paint(obj.class_id, x, y, obj.w, obj.h, color_for(obj.class_id))

    # cast shadow: some day scenes darken one ground band, so dim surfaces
    # are part of the training distribution; sky stays lit and the draws
    # are consumed either way to keep the stream aligned with night renders
    shadow_gate = rng.random()
    sx = int(rng.integers(0, w))
    sw = int(rng.integers(w // 4, w // 2 + 1))
    sfactor = rng.uniform(0.35, 0.65)
    if shadow_gate < shadow_prob:
        lo, hi = max(0, sx - sw // 2), min(w, sx + sw // 2)
        image[:, spec.horizon :, lo:hi] *= sfactor

    image += rng.normal(0.0, 0.01, size=image.shape)
    return np.clip(image, 0.0, 1.0), label


def render_day(spec, taxonomy=None, config=None):
    tax = taxonomy or default_taxonomy()
    cfg = config or SceneConfig(height=spec.height, width=spec.width)
    offsets = [(0, 0)] * len(spec.objects)
    image, label = _rasterize(
        spec, offsets, tax, (cfg.exposure_min, cfg.exposure_max), cfg.tint_min, cfg.shadow_prob
    )
    return DomainSample(Tensor(image.astype(np.float32)), Tensor(label), "source_day")


def night_transform(image, rng, night):
    """Darken a [3,H,W] day image: gamma, channel scaling, noise, light glows."""
    out = image.astype(np.float64) ** night.gamma
    out *= np.asarray([night.scale_r, night.scale_g, night.scale_b])[:, None, None]
    if night.noise_sigma > 0:
        out += rng.normal(0.0, night.noise_sigma, size=out.shape)
    out = np.clip(out, 0.0, 1.0)
    if night.glow_max > 0:
        _, h, w = out.shape
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(int(rng.integers(0, night.glow_max + 1))):
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            radius = rng.uniform(3.0, 8.0)
            amp = rng.uniform(0.12, 0.32)
            falloff = np.maximum(0.0, 1.0 - ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2)
            out += amp * falloff[None] * np.asarray([1.0, 0.85, 0.55])[:, None, None]
    return np.clip(out, 0.0, 1.0)


def render_night(spec, misalign_seed, config, taxonomy=None):
    """Night view of a scene: moved dynamic objects, then the night transform.

    The rasterization runs at canonical exposure 1.0 (exposure variation
    is a property of daylight), so identity-transform configs reproduce
    the day image only when the day exposure range is pinned to 1.0.
    """
    tax = taxonomy or default_taxonomy()
    mrng = _rng(misalign_seed, 303)
    m = config.misalign_max
    if m > 0:
        offsets = [tuple(mrng.integers(-m, m + 1, size=2)) for _ in spec.objects]
    else:
        offsets = [(0, 0)] * len(spec.objects)
    image, label = _rasterize(spec, offsets, tax, (1.0, 1.0), 1.0, 0.0)
    image = night_transform(image, _rng(misalign_seed, 404), config.night)
    return DomainSample(Tensor(image.astype(np.float32)), Tensor(label), "target_night")


# ---------------------------------------------------------------------------
# dataset builder


@dataclass(frozen=True)
class DatasetConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    num_source: int = 200
    num_target: int = 200
    num_test: int = 50
    master_seed: int = 0


def build_dataset(dcfg, out_dir, taxonomy=None):
    """Write source/target/test splits plus a manifest; returns the manifest.

    Target day/night pairs are written without labels: the only labels on
    disk for unlabeled domains are the sealed night-test ones used purely
    by evaluation.
    """
    if dcfg.num_source < 1:
        raise ValueError("empty source domain rejected (num_source must be >= 1)")
    tax = taxonomy or default_taxonomy()
    scfg = dcfg.scene
    for sub in ("source", "target", "test"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    for i in range(dcfg.num_source):
        spec = generate_scene(item_seed(dcfg.master_seed, STREAM_SOURCE, i), scfg, tax)
        sample = render_day(spec, tax, scfg)
        save_tensor(os.path.join(out_dir, "source", f"img_{i:05d}.dsrt"), sample.image)
        save_tensor(os.path.join(out_dir, "source", f"lbl_{i:05d}.dsrt"), sample.label)

    for i in range(dcfg.num_target):
        spec = generate_scene(item_seed(dcfg.master_seed, STREAM_TARGET, i), scfg, tax)
        day = render_day(spec, tax, scfg)
        night = render_night(spec, item_seed(dcfg.master_seed, STREAM_TARGET_NIGHT, i), scfg, tax)
        save_tensor(os.path.join(out_dir, "target", f"day_{i:05d}.dsrt"), day.image)
        save_tensor(os.path.join(out_dir, "target", f"night_{i:05d}.dsrt"), night.image)

    for i in range(dcfg.num_test):
        spec = generate_scene(item_seed(dcfg.master_seed, STREAM_TEST, i), scfg, tax)
        night = render_night(spec, item_seed(dcfg.master_seed, STREAM_TEST_NIGHT, i), scfg, tax)
        save_tensor(os.path.join(out_dir, "test", f"night_{i:05d}.dsrt"), night.image)
        save_tensor(os.path.join(out_dir, "test", f"lbl_{i:05d}.dsrt"), night.label)

    manifest = {
        "seed": dcfg.master_seed,
        "num_source": dcfg.num_source,
        "num_target": dcfg.num_target,
        "num_test": dcfg.num_test,
        "height": scfg.height,
        "width": scfg.width,
        "misalign_max": scfg.misalign_max,
    }
    write_kv(os.path.join(out_dir, "manifest.cfg"), manifest, header="nightadapt dataset manifest")
    return manifest


def scene_config_identity_night(base=None):
    """A SceneConfig whose night render is the day render (for tests)."""
    cfg = base or SceneConfig()
    return replace(
        cfg,
        misalign_max=0,
        exposure_min=1.0,
        exposure_max=1.0,
        tint_min=1.0,
        shadow_prob=0.0,
        night=NightConfig(1.0, 1.0, 1.0, 1.0, 0.0, 0),
    )
