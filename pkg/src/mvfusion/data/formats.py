"""Binary on-disk formats for motion-vector clips and feature caches.

MVT1 (one motion-vector clip per file)::

    magic      4 bytes   b"MVT1"
    height     uint16
    width      uint16
    frames     uint32
    payload    per frame: dx plane then dy plane, int16, row-major

MCLF (feature cache, one record per video)::

    magic      4 bytes   b"MCLF"
    version    uint32    (= 1)
    dim        uint32    (512, 1280 or 1792)
    count      uint64
    records    id_len uint16 | utf-8 id | label uint16 | dim float32

Everything is little-endian.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

PathLike = Union[str, os.PathLike]

MVT_MAGIC = b"MVT1"
MCLF_MAGIC = b"MCLF"
MCLF_VERSION = 1
FEATURE_DIMS = (512, 1280, 1792)

_MVT_HEADER = struct.Struct("<4sHHI")
_MCLF_HEADER = struct.Struct("<4sIIQ")
_INT16_MIN, _INT16_MAX = -(2**15), 2**15 - 1


class FormatError(ValueError):
    """Raised when a file does not follow its declared binary layout."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


@dataclass
class MVClip:
    """Ordered motion-vector frames of one video.

    ``frames`` has shape ``(T, H, W, 2)``; channel 0 is dx, channel 1 is dy,
    both signed pixel displacements.  ``label`` is ``None`` for clips read
    from disk without a manifest.
    """

    video_id: str
    label: Optional[int]
    frames: np.ndarray = field(repr=False)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[-1] != 2:
            raise ValueError(f"frames must have shape (T, H, W, 2), got {frames.shape}")
        if frames.shape[0] == 0:
            raise ValueError("an MV clip needs at least one frame")
        if frames.shape[1] == 0 or frames.shape[2] == 0:
            raise ValueError(f"frame size must be positive, got {frames.shape[1:3]}")
        if self.label is not None and self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        self.frames = frames

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    def __eq__(self, other):
        if not isinstance(other, MVClip):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.label == other.label
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


def _atomic_write(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_mv_clip(clip: MVClip) -> bytes:
    t, h, w, _ = clip.frames.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise OverflowError(f"frame size {h}x{w} does not fit in uint16")
    frames = clip.frames
    if not np.issubdtype(frames.dtype, np.integer):
        if not np.array_equal(frames, np.round(frames)):
            raise ValueError("MVT1 stores integer displacements; round the frames first")
    if frames.size and (frames.min() < _INT16_MIN or frames.max() > _INT16_MAX):
        raise OverflowError("displacements do not fit in int16")
    planes = np.ascontiguousarray(np.transpose(frames, (0, 3, 1, 2))).astype("<i2")
    return _MVT_HEADER.pack(MVT_MAGIC, h, w, t) + planes.tobytes()


def write_mv_clip(clip: MVClip, path: PathLike) -> None:
    _atomic_write(path, encode_mv_clip(clip))


def decode_mv_clip(buf: bytes, video_id: str = "", label: Optional[int] = None) -> MVClip:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the MVT magic")
    magic = bytes(buf[:4])
    if magic != MVT_MAGIC:
        if magic[:3] == MVT_MAGIC[:3]:
            raise VersionMismatchError(f"unsupported MVT version {magic!r}")
        raise BadMagicError(f"not an MVT file (magic {magic!r})")
    if len(buf) < _MVT_HEADER.size:
        raise TruncatedFileError("header truncated")
    _, h, w, t = _MVT_HEADER.unpack_from(buf, 0)
    expected = _MVT_HEADER.size + t * 2 * h * w * 2
    if len(buf) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after the last frame")
    planes = np.frombuffer(buf, dtype="<i2", offset=_MVT_HEADER.size, count=t * 2 * h * w)
    frames = planes.reshape(t, 2, h, w).transpose(0, 2, 3, 1).astype(np.int16)
    return MVClip(video_id=video_id, label=label, frames=frames)


def read_mv_clip(path: PathLike, video_id: Optional[str] = None,
                 label: Optional[int] = None) -> MVClip:
    """Read an MVT1 file.

    The format carries no id or label; ``video_id`` defaults to the file stem
    and ``label`` is taken from the caller (normally the split manifest).
    """
    path = Path(path)
    buf = path.read_bytes()
    return decode_mv_clip(buf, video_id=path.stem if video_id is None else video_id, label=label)


@dataclass
class FeatureRecord:
    video_id: str
    label: int
    vector: np.ndarray = field(repr=False)


def _as_records(records: Iterable) -> list[FeatureRecord]:
    out = []
    for rec in records:
        if not isinstance(rec, FeatureRecord):
            rec = FeatureRecord(*rec)
        out.append(rec)
    return out


def encode_feature_cache(records: Sequence) -> bytes:
    records = _as_records(records)
    dims = {np.asarray(r.vector).shape for r in records}
    if len(dims) > 1:
        raise ValueError(f"mixed feature shapes in one cache: {sorted(dims)}")
    if not records:
        raise ValueError("cannot infer the dimension of an empty cache")
    (shape,) = dims
    if len(shape) != 1 or shape[0] not in FEATURE_DIMS:
        raise ValueError(f"feature dim must be one of {FEATURE_DIMS}, got {shape}")
    dim = shape[0]

    seen = set()
    chunks = [_MCLF_HEADER.pack(MCLF_MAGIC, MCLF_VERSION, dim, len(records))]
    for rec in records:
        if rec.video_id in seen:
            raise ValueError(f"duplicate video id {rec.video_id!r}")
        seen.add(rec.video_id)
        if not 0 <= rec.label <= 0xFFFF:
            raise OverflowError(f"label {rec.label} does not fit in uint16")
        raw_id = rec.video_id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise OverflowError(f"video id too long ({len(raw_id)} bytes)")
        chunks.append(struct.pack("<H", len(raw_id)))
        chunks.append(raw_id)
        chunks.append(struct.pack("<H", rec.label))
        chunks.append(np.asarray(rec.vector, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_feature_cache(records: Sequence, path: PathLike) -> None:
    """Write feature records atomically (temp file + rename)."""
    _atomic_write(path, encode_feature_cache(records))


def decode_feature_cache(buf: bytes) -> list[FeatureRecord]:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the MCLF magic")
    if bytes(buf[:4]) != MCLF_MAGIC:
        raise BadMagicError(f"not a feature cache (magic {bytes(buf[:4])!r})")
    if len(buf) < _MCLF_HEADER.size:
        raise TruncatedFileError("header truncated")
    _, version, dim, count = _MCLF_HEADER.unpack_from(buf, 0)
    if version != MCLF_VERSION:
        raise VersionMismatchError(f"unsupported MCLF version {version}")
    if dim not in FEATURE_DIMS:
        raise FormatError(f"invalid feature dim {dim}")

    records = []
    seen = set()
    pos = _MCLF_HEADER.size
    for _ in range(count):
        if pos + 2 > len(buf):
            raise TruncatedFileError("record header truncated")
        (id_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        end = pos + id_len + 2 + 4 * dim
        if end > len(buf):
            raise TruncatedFileError("record body truncated")
        video_id = bytes(buf[pos:pos + id_len]).decode("utf-8")
        pos += id_len
        (label,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        vector = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float32)
        pos += 4 * dim
        if video_id in seen:
            raise FormatError(f"duplicate video id {video_id!r}")
        seen.add(video_id)
        records.append(FeatureRecord(video_id, int(label), vector))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {count} records")
    return records


def read_feature_cache(path: PathLike) -> list[FeatureRecord]:
    return decode_feature_cache(Path(path).read_bytes())


def read_feature_header(path: PathLike) -> tuple[int, int]:
    """Return ``(dim, count)`` without decoding the records."""
    with open(path, "rb") as fh:
        head = fh.read(_MCLF_HEADER.size)
    if head[:4] != MCLF_MAGIC:
        raise BadMagicError(f"not a feature cache (magic {head[:4]!r})")
    if len(head) < _MCLF_HEADER.size:
        raise TruncatedFileError("header truncated")
    _, version, dim, count = _MCLF_HEADER.unpack(head)
    if version != MCLF_VERSION:
        raise VersionMismatchError(f"unsupported MCLF version {version}")
    return dim, count


def feature_table(records: Sequence[FeatureRecord]) -> dict[str, np.ndarray]:
    return {r.video_id: r.vector for r in records}
