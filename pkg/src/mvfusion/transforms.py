"""Motion-vector normalization and spatial augmentation.

Frames are ``(H, W, 2)`` arrays with dx in channel 0 and dy in channel 1.
Crops and resizes return float32 frames; displacements are not rescaled
when a frame is resized.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

MV_RANGE = 20.0
MV_SCALE = 127.5 / MV_RANGE
MV_OFFSET = 128.0

MULTISCALE_SCALES = (1.0, 0.875, 0.75, 0.66)
# top-left, top-right, bottom-left, bottom-right, center
CROP_POSITIONS = ("tl", "tr", "bl", "br", "c")


def _check_frame(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[-1] != 2:
        raise ValueError(f"MV frame must have shape (H, W, 2), got {frame.shape}")
    return frame


def normalize_mv(frame) -> np.ndarray:
    """Map raw displacements to [-0.5, 0.5].

    ``y = clip(x * 127.5/20 + 128, 0, 255) / 255 - 0.5``.  Accepts any array
    shape; the clip absorbs motion beyond roughly +-20 pixels.
    """
    x = np.asarray(frame, dtype=np.float64)
    y = np.clip(x * MV_SCALE + MV_OFFSET, 0.0, 255.0) / 255.0 - 0.5
    return y.astype(np.float32)


def hflip_mv(frame) -> np.ndarray:
    """Mirror columns and negate dx; dy is only mirrored.

    Integer frames are widened to int32 so negating -32768 stays exact.
    """
    frame = _check_frame(frame)
    if np.issubdtype(frame.dtype, np.integer):
        frame = frame.astype(np.int32)
    out = frame[:, ::-1, :].copy()
    out[..., 0] = -out[..., 0]
    return out


def resize_bilinear(frame, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping, per channel."""
    frame = np.asarray(frame, dtype=np.float32)
    in_h, in_w = frame.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return frame.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, wy = axis(in_h, out_h)
    x0, x1, wx = axis(in_w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = frame[y0][:, x0] * (1 - wx) + frame[y0][:, x1] * wx
    bottom = frame[y1][:, x0] * (1 - wx) + frame[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def crop_offset(height: int, width: int, side: int, position: str) -> tuple[int, int]:
    if position == "tl":
        return 0, 0
    if position == "tr":
        return 0, width - side
    if position == "bl":
        return height - side, 0
    if position == "br":
        return height - side, width - side
    if position == "c":
        return (height - side) // 2, (width - side) // 2
    raise ValueError(f"unknown crop position {position!r}")


def multiscale_crop(frame, out_size: int, rng: np.random.Generator,
                    scales: Sequence[float] = MULTISCALE_SCALES) -> np.ndarray:
    """Square crop at a random scale and one of five fixed positions, resized.

    The crop side is ``round(min(H, W) * s)`` with ``s`` uniform over
    ``scales``; the position is uniform over the four corners and the center.
    """
    frame = _check_frame(frame)
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    h, w = frame.shape[:2]
    s = scales[int(rng.integers(len(scales)))]
    position = CROP_POSITIONS[int(rng.integers(len(CROP_POSITIONS)))]
    side = max(1, int(np.floor(min(h, w) * s + 0.5)))
    y, x = crop_offset(h, w, side, position)
    return resize_bilinear(frame[y:y + side, x:x + side], out_size, out_size)


def center_crop_resize(frame, out_size: int) -> np.ndarray:
    frame = _check_frame(frame)
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    h, w = frame.shape[:2]
    side = min(h, w)
    y, x = crop_offset(h, w, side, "c")
    return resize_bilinear(frame[y:y + side, x:x + side], out_size, out_size)
