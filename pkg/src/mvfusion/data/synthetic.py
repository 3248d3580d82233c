"""Deterministic synthetic MV/RGB datasets for desk-scale experiments.

Every class owns an appearance signature (a palette colour for its RGB
proxy frames) and a motion signature (vertical velocity plus horizontal speed
of a moving blob).  Motion signatures only use ``dy`` and ``|dx|`` so they
survive the MV horizontal flip used as augmentation.

In XOR mode (even ``n_classes >= 4``) classes are paired twice over: class
``c`` gets appearance ``c // 2`` and motion ``((c + 1) % C) // 2``.  Each
modality alone then confuses exactly two classes, while the pair is unique.
"""

from __future__ import annotations

import colorsys
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .formats import MVClip
from .manifest import ManifestEntry, SplitManifest

_DY_LEVELS = (6, -6, 12, -12, 3, -3, 16, -16, 9, -9)
_DX_SPEEDS = (0, 5, 10)
MAX_MOTION_SIGNATURES = len(_DY_LEVELS) * len(_DX_SPEEDS)


@dataclass(frozen=True)
class ClassSignature:
    appearance: int
    motion: int


class SyntheticDataset(NamedTuple):
    manifest: SplitManifest
    clips: list[MVClip]
    rgb_frames: dict[str, np.ndarray]


def class_names_for(n_classes: int) -> list[str]:
    return [f"action_{c:02d}" for c in range(n_classes)]


def class_signatures(n_classes: int, xor: bool = False) -> list[ClassSignature]:
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if xor:
        if n_classes < 4 or n_classes % 2:
            raise ValueError("XOR mode needs an even number of classes >= 4")
        return [ClassSignature(c // 2, ((c + 1) % n_classes) // 2) for c in range(n_classes)]
    if n_classes > MAX_MOTION_SIGNATURES:
        raise ValueError(f"at most {MAX_MOTION_SIGNATURES} distinct motion signatures available")
    return [ClassSignature(c, c) for c in range(n_classes)]


def motion_signature(index: int) -> tuple[int, int]:
    """``(dy, |dx|)`` of motion signature ``index``."""
    return (_DY_LEVELS[index % len(_DY_LEVELS)],
            _DX_SPEEDS[(index // len(_DY_LEVELS)) % len(_DX_SPEEDS)])


def palette_color(index: int) -> np.ndarray:
    """RGB colour (uint8) of appearance signature ``index``."""
    hue = (index * 0.618033988749895) % 1.0
    value = 0.9 if index % 2 == 0 else 0.6
    sat = 0.85 if (index // 2) % 2 == 0 else 0.55
    rgb = colorsys.hsv_to_rgb(hue, sat, value)
    return np.round(np.array(rgb) * 255).astype(np.uint8)


def _split_rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(split.encode())]))


def _motion_frames(sig: tuple[int, int], t: int, h: int, w: int,
                   rng: np.random.Generator) -> np.ndarray:
    dy, dx_speed = sig
    dx = dx_speed * (1 if rng.random() < 0.5 else -1)
    frames = rng.integers(-1, 2, size=(t, h, w, 2)).astype(np.int16)
    bh = max(1, int(round(h * rng.uniform(0.45, 0.7))))
    bw = max(1, int(round(w * rng.uniform(0.45, 0.7))))
    y0 = rng.uniform(0, h - bh)
    x0 = rng.uniform(0, w - bw)
    # blob drifts a fraction of its velocity per frame and bounces off edges
    vy, vx = np.sign(dy) * 0.5, np.sign(dx) * 0.5
    for i in range(t):
        yi, xi = int(y0), int(x0)
        jitter = rng.integers(-1, 2, size=(bh, bw, 2))
        frames[i, yi:yi + bh, xi:xi + bw, 0] = dx + jitter[..., 0]
        frames[i, yi:yi + bh, xi:xi + bw, 1] = dy + jitter[..., 1]
        y0 += vy
        x0 += vx
        if not 0 <= y0 <= h - bh:
            vy, y0 = -vy, float(np.clip(y0, 0, h - bh))
        if not 0 <= x0 <= w - bw:
            vx, x0 = -vx, float(np.clip(x0, 0, w - bw))
    return frames


def _rgb_frames(color: np.ndarray, t: int, h: int, w: int,
                rng: np.random.Generator) -> np.ndarray:
    base = color.astype(np.float32)
    shade = np.linspace(-12.0, 12.0, w, dtype=np.float32)[None, :, None]
    drift = rng.uniform(-4, 4, size=(t, 1, 1, 1)).astype(np.float32)
    noise = rng.normal(0, 6, size=(t, h, w, 3)).astype(np.float32)
    return np.clip(np.round(base + shade + drift + noise), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(n_classes: int, n_videos_per_class: int, frames_per_video: int,
                               height: int, width: int, seed: int, xor: bool = False,
                               split: str = "train") -> SyntheticDataset:
    """Build one split of a synthetic dataset.

    The result is a pure function of the arguments.  Class signatures do not
    depend on ``seed`` or ``split``, so splits drawn with different seeds are
    mutually consistent.
    """
    for name, value in (("n_classes", n_classes), ("n_videos_per_class", n_videos_per_class),
                        ("frames_per_video", frames_per_video), ("height", height),
                        ("width", width)):
        if int(value) < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    sigs = class_signatures(n_classes, xor)
    names = class_names_for(n_classes)
    rng = _split_rng(seed, split)

    entries, clips, rgb = [], [], {}
    for c, cname in enumerate(names):
        for i in range(n_videos_per_class):
            vid = f"v_{cname}_{split}_{i:03d}"
            entries.append(ManifestEntry(vid, c, f"{cname}/{vid}"))
            mv = _motion_frames(motion_signature(sigs[c].motion), frames_per_video,
                                height, width, rng)
            clips.append(MVClip(vid, c, mv))
            rgb[vid] = _rgb_frames(palette_color(sigs[c].appearance), frames_per_video,
                                   height, width, rng)
    meta = {"mode": "xor" if xor else "distinct", "generator": "synthetic-v1", "seed": str(seed)}
    return SyntheticDataset(SplitManifest(split, names, entries, meta), clips, rgb)
