"""Dataset tree layout and frame sources.

A dataset root looks like::

    root/
      classInd.txt                 class_id class_name
      trainlist.txt, testlist.txt  relative_path label
      mvs/<relative_path>.mvt      MVT1 clips
      frames/<relative_path>/      RGB frames, one image per file, sorted by name
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from PIL import Image

from .formats import MVClip, PathLike, read_mv_clip, write_mv_clip
from .manifest import ManifestEntry, SplitManifest, write_manifest

CLASS_INDEX_FILE = "classInd.txt"
MV_DIR = "mvs"
FRAME_DIR = "frames"
MV_SUFFIX = ".mvt"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class FrameDirectorySource:
    """Reads RGB frames from ``root/<relative_path>/*.{png,jpg}``."""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def _files(self, entry: ManifestEntry) -> list[Path]:
        d = self.root / entry.relative_path
        if not d.is_dir():
            raise FileNotFoundError(f"no frame directory for {entry.video_id}: {d}")
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"frame directory {d} holds no images")
        return files

    def num_frames(self, entry: ManifestEntry) -> int:
        return len(self._files(entry))

    def load_frame(self, entry: ManifestEntry, index: int) -> np.ndarray:
        path = self._files(entry)[index]
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))


class InMemoryFrameSource:
    def __init__(self, frames: Mapping[str, np.ndarray]):
        self.frames = frames

    def _get(self, entry: ManifestEntry) -> np.ndarray:
        try:
            return self.frames[entry.video_id]
        except KeyError:
            raise FileNotFoundError(f"no frames for {entry.video_id}") from None

    def num_frames(self, entry: ManifestEntry) -> int:
        return len(self._get(entry))

    def load_frame(self, entry: ManifestEntry, index: int) -> np.ndarray:
        return np.asarray(self._get(entry)[index])


def mv_path(root: PathLike, entry: ManifestEntry) -> Path:
    return Path(root) / MV_DIR / (entry.relative_path + MV_SUFFIX)


def load_split_clips(manifest: SplitManifest, root: PathLike) -> dict[str, MVClip]:
    """Load every MV clip of ``manifest`` with its manifest label attached."""
    clips = {}
    for e in manifest:
        path = mv_path(root, e)
        if not path.exists():
            raise FileNotFoundError(f"missing MV clip for {e.video_id}: {path}")
        clips[e.video_id] = read_mv_clip(path, video_id=e.video_id, label=e.label)
    return clips


def save_synthetic_dataset(dataset, root: PathLike, list_name: Optional[str] = None,
                           extra_meta: Optional[dict] = None) -> list[Path]:
    """Write one synthetic split under ``root`` and return the files produced."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest
    list_name = list_name or f"{manifest.split_name}list.txt"
    written = []

    write_manifest(manifest, root / list_name, root / CLASS_INDEX_FILE)
    written += [root / list_name, root / CLASS_INDEX_FILE]
    by_id = {e.video_id: e for e in manifest}
    for clip in dataset.clips:
        entry = by_id[clip.video_id]
        path = mv_path(root, entry)
        write_mv_clip(clip, path)
        written.append(path)
        frame_dir = root / FRAME_DIR / entry.relative_path
        frame_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(dataset.rgb_frames[clip.video_id]):
            p = frame_dir / f"img_{i:05d}.png"
            Image.fromarray(frame).save(p, format="PNG")
            written.append(p)

    meta_path = root / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta.setdefault("splits", {})[manifest.split_name] = {"list": list_name, **manifest.meta}
    meta.update(extra_meta or {})
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(meta_path)
    return written
