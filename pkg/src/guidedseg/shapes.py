"""Procedural "shapes world": desk-scale densely annotated images and videos.

Images are 64x64 by default, each holding 1-4 colored shapes (circle,
square, triangle, in one of 8 hue bins) over a noisy gray background.
Label maps carry exact instance ids with occlusion resolved by id order
(higher id on top). Video sequences move the same instances with constant
per-instance velocity plus small jitter, never leaving the frame.

Everything is derived from one seeded generator, so a (config, seed) pair
reproduces the dataset byte for byte.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DatasetFormatError

SHAPE_KINDS = ("circle", "square", "triangle")
HUE_BINS = 8

# class id -> (shape, hue bin) combo; combos indexed shape-major.
# The default 10-class palette spreads over all three shapes and most hues
# so no single cue (shape alone or hue alone) separates every class.
DEFAULT_CLASS_COMBOS = (0, 2, 4, 7, 9, 12, 14, 16, 19, 21)


def combo_parts(combo: int) -> tuple[str, int]:
    if not 0 <= combo < len(SHAPE_KINDS) * HUE_BINS:
        raise ConfigError(f"shape-hue combo {combo} out of range")
    return SHAPE_KINDS[combo // HUE_BINS], combo % HUE_BINS


@dataclass(frozen=True)
class ShapesConfig:
    image_size: int = 64
    class_combos: tuple[int, ...] = DEFAULT_CLASS_COMBOS
    min_instances: int = 1
    max_instances: int = 4
    min_radius: int = 6
    max_radius: int = 12
    min_pixels: int = 20
    sequence_length: int = 8
    max_speed: float = 3.0          # per-frame translation, before jitter
    jitter: float = 0.7             # per-axis, keeps total step under 4 px

    def __post_init__(self):
        if self.max_radius * 2 + 4 > self.image_size:
            raise ConfigError(
                f"radius {self.max_radius} does not fit a {self.image_size}px image")
        if self.min_radius < 3 or self.min_radius > self.max_radius:
            raise ConfigError("need 3 <= min_radius <= max_radius")
        if not self.class_combos:
            raise ConfigError("need at least one class")
        for c in self.class_combos:
            combo_parts(c)
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")

    @property
    def num_classes(self) -> int:
        return len(self.class_combos)


@dataclass
class DenseSample:
    """One densely labelled image; video frames also carry sequence info."""
    image: np.ndarray                    # [3,H,W] float32 in [0,1]
    label_map: np.ndarray                # [H,W] uint8, 0 = background
    instance_classes: dict[int, int]     # instance id -> class id
    sequence_id: Optional[int] = None
    frame_index: Optional[int] = None

    @property
    def size(self) -> tuple[int, int]:
        return self.label_map.shape


# ---------------------------------------------------------------------------
# rendering

def _shape_mask(kind: str, size: int, cy: float, cx: float,
                radius: float, rot: float) -> np.ndarray:
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    if kind == "circle":
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=1)
    else:
        n = 4 if kind == "square" else 3
        r = radius if kind == "square" else radius * 1.2
        angles = rot + np.arange(n) * (2 * np.pi / n)
        pts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles]
        draw.polygon(pts, fill=1)
    return np.asarray(img, dtype=np.uint8)


def _combo_color(rng: np.random.Generator, combo: int) -> np.ndarray:
    _, hue_bin = combo_parts(combo)
    hue = (hue_bin + 0.5) / HUE_BINS
    sat = 0.85 + rng.uniform(-0.05, 0.05)
    val = 0.9 + rng.uniform(-0.05, 0.05)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float64)


@dataclass
class _Placement:
    kind: str
    combo: int
    class_id: int
    color: np.ndarray
    radius: float
    rot: float
    centers: list[tuple[float, float]]   # one per frame (stills: length 1)


def _sample_placement(rng, cfg: ShapesConfig, frames: int) -> Optional[_Placement]:
    idx = int(rng.integers(0, cfg.num_classes))
    combo = cfg.class_combos[idx]
    kind, _ = combo_parts(combo)
    radius = float(rng.uniform(cfg.min_radius, cfg.max_radius))
    rot = float(rng.uniform(0, 2 * np.pi))
    color = _combo_color(rng, combo)
    margin = radius * (1.2 if kind == "triangle" else 1.0) + cfg.jitter + 1.0
    lo, hi = margin, cfg.image_size - margin
    if lo >= hi:
        return None
    for _ in range(60):
        cy = float(rng.uniform(lo, hi))
        cx = float(rng.uniform(lo, hi))
        if frames == 1:
            centers = [(cy, cx)]
        else:
            # velocity inside a disc keeps the per-frame step under max_speed
            while True:
                vy, vx = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
                if vy * vy + vx * vx <= cfg.max_speed ** 2:
                    break
            ys = cy + vy * np.arange(frames)
            xs = cx + vx * np.arange(frames)
            if ys.min() < lo or ys.max() > hi or xs.min() < lo or xs.max() > hi:
                continue
            jy = rng.uniform(-cfg.jitter, cfg.jitter, size=frames)
            jx = rng.uniform(-cfg.jitter, cfg.jitter, size=frames)
            centers = list(zip(ys + jy, xs + jx))
        return _Placement(kind, combo, idx, color, radius, rot, centers)
    return None


def _compose(rng, cfg: ShapesConfig, placements: list[_Placement],
             frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one frame; returns (uint8 image [H,W,3], label map [H,W])."""
    size = cfg.image_size
    base = rng.uniform(0.25, 0.45)
    img = base + rng.uniform(-0.05, 0.05, size=(size, size, 1))
    img = np.repeat(img, 3, axis=2)
    labels = np.zeros((size, size), dtype=np.uint8)
    for inst_id, p in enumerate(placements, start=1):
        cy, cx = p.centers[frame]
        mask = _shape_mask(p.kind, size, cy, cx, p.radius, p.rot).astype(bool)
        shade = p.color + rng.uniform(-0.03, 0.03, size=(size, size, 3))
        img = np.where(mask[:, :, None], shade, img)
        labels[mask] = inst_id
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8), labels


def _visible_ok(labels_per_frame: list[np.ndarray], n: int, min_pixels: int) -> bool:
    for labels in labels_per_frame:
        counts = np.bincount(labels.reshape(-1), minlength=n + 1)
        if (counts[1:n + 1] < min_pixels).any():
            return False
    return True


def _image_from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)


def _make_scene(rng, cfg: ShapesConfig, frames: int):
    """Place instances and render; rejection keeps every instance visible."""
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    while n >= 1:
        for _ in range(80):
            placements = []
            for _ in range(n):
                p = _sample_placement(rng, cfg, frames)
                if p is None:
                    break
                placements.append(p)
            if len(placements) < n:
                continue
            rendered = [_compose(rng, cfg, placements, t) for t in range(frames)]
            if _visible_ok([lab for _, lab in rendered], n, cfg.min_pixels):
                classes = {i + 1: p.class_id for i, p in enumerate(placements)}
                return rendered, classes
        n -= 1              # crowded layout kept failing; relax it
    raise ConfigError("cannot place even one instance; config infeasible")


def generate_shapes_world(cfg: ShapesConfig, seed: int, images: int = 0,
                          video_sequences: int = 0) -> list[DenseSample]:
    """Generate still images and/or fixed-length video sequences."""
    rng = np.random.default_rng(seed)
    samples: list[DenseSample] = []
    for _ in range(images):
        rendered, classes = _make_scene(rng, cfg, frames=1)
        img_u8, labels = rendered[0]
        samples.append(DenseSample(
            image=_image_from_uint8(img_u8), label_map=labels,
            instance_classes=classes))
    for seq in range(video_sequences):
        rendered, classes = _make_scene(rng, cfg, frames=cfg.sequence_length)
        for t, (img_u8, labels) in enumerate(rendered):
            samples.append(DenseSample(
                image=_image_from_uint8(img_u8), label_map=labels,
                instance_classes=dict(classes),
                sequence_id=seq, frame_index=t))
    return samples


# ---------------------------------------------------------------------------
# directory format

def save_dataset(samples: list[DenseSample], path: str | Path) -> None:
    """Write index.json plus one RGB PNG and one label PNG per sample."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = {"version": 1, "samples": []}
    for i, s in enumerate(samples):
        img_name = f"img_{i:05d}.png"
        lab_name = f"lab_{i:05d}.png"
        rgb = (s.image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / img_name)
        Image.fromarray(s.label_map, mode="L").save(root / lab_name)
        index["samples"].append({
            "image": img_name,
            "labels": lab_name,
            "sequence": s.sequence_id,
            "frame": s.frame_index,
            "instance_classes": {str(k): v for k, v in s.instance_classes.items()},
        })
    (root / "index.json").write_text(json.dumps(index, indent=1))


def load_dataset(path: str | Path) -> list[DenseSample]:
    root = Path(path)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise DatasetFormatError(f"{index_path}: missing dataset index")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{index_path}: invalid JSON: {e}") from e
    if index.get("version") != 1:
        raise DatasetFormatError(f"{index_path}: unsupported version {index.get('version')}")
    samples = []
    for entry in index.get("samples", []):
        img_path = root / entry["image"]
        lab_path = root / entry["labels"]
        for p in (img_path, lab_path):
            if not p.is_file():
                raise DatasetFormatError(f"{p}: file listed in index is missing")
        rgb = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
        labels = np.asarray(Image.open(lab_path).convert("L"), dtype=np.uint8)
        if rgb.shape[:2] != labels.shape:
            raise DatasetFormatError(
                f"{img_path}: image {rgb.shape[:2]} and labels {labels.shape} disagree")
        classes = {int(k): int(v) for k, v in entry["instance_classes"].items()}
        present = set(np.unique(labels)) - {0}
        missing = present - set(classes)
        if missing:
            raise DatasetFormatError(
                f"{lab_path}: instances {sorted(missing)} lack class entries")
        samples.append(DenseSample(
            image=_image_from_uint8(rgb),
            label_map=labels,
            instance_classes=classes,
            sequence_id=entry.get("sequence"),
            frame_index=entry.get("frame"),
        ))
    return samples
