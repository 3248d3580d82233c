"""TSN segment sampling.

A stream of ``T`` frames is cut into ``N`` segments, segment ``k`` spanning
``[floor(kT/N), floor((k+1)T/N))``.  When ``T < N`` some segments are empty;
they take the frame at their (clamped) start so exactly ``N`` non-decreasing
indices come back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRAIN_SEGMENTS = 3
TEST_SEGMENTS = 32


@dataclass(frozen=True)
class ViewProtocol:
    n_segments: int = TEST_SEGMENTS
    mode: str = "test-center"
    n_spatial_crops: int = 1
    crop_size: int = 224

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be positive")
        if self.mode not in ("train-random", "test-center"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.n_spatial_crops != 1:
            raise ValueError("only single-crop protocols are supported")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")

    @classmethod
    def train(cls, crop_size: int = 224) -> "ViewProtocol":
        return cls(TRAIN_SEGMENTS, "train-random", 1, crop_size)

    @classmethod
    def test(cls, n_segments: int = TEST_SEGMENTS, crop_size: int = 224) -> "ViewProtocol":
        return cls(n_segments, "test-center", 1, crop_size)

    @property
    def n_views(self) -> int:
        return self.n_segments * self.n_spatial_crops


def segment_bounds(num_frames: int, n_segments: int) -> list[tuple[int, int]]:
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    edges = [k * num_frames // n_segments for k in range(n_segments + 1)]
    return list(zip(edges[:-1], edges[1:]))


def sample_train_indices(num_frames: int, n_segments: int, rng: np.random.Generator) -> list[int]:
    out = []
    for start, end in segment_bounds(num_frames, n_segments):
        if end > start:
            out.append(int(rng.integers(start, end)))
        else:
            out.append(min(start, num_frames - 1))
    return out


def sample_test_indices(num_frames: int, n_segments: int) -> list[int]:
    out = []
    for start, end in segment_bounds(num_frames, n_segments):
        if end > start:
            out.append(start + (end - start) // 2)
        else:
            out.append(min(start, num_frames - 1))
    return out


def sample_indices(num_frames: int, protocol: ViewProtocol, rng=None) -> list[int]:
    if protocol.mode == "train-random":
        if rng is None:
            raise ValueError("train sampling needs an rng")
        return sample_train_indices(num_frames, protocol.n_segments, rng)
    return sample_test_indices(num_frames, protocol.n_segments)
