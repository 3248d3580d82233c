"""Split manifests in the UCF101 list style.

A split is two UTF-8 text files: a list file with one ``relative_path label``
pair per line and a class index file with one ``class_id class_name`` pair per
line.  Lines starting with ``#`` in the list file carry ``key: value``
metadata (for example ``# mode: xor`` on synthetic splits).

Labels are 0-based by default.  The official UCF101 files are 1-based; pass
``one_based=True`` when reading them.  List lines without a label take it from
the class directory, and video extensions such as ``.avi`` are dropped from
the stored relative path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Optional

from .formats import PathLike


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    label: int
    relative_path: str


@dataclass
class SplitManifest:
    split_name: str
    class_names: list[str]
    entries: list[ManifestEntry]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.class_names)
        seen = set()
        for e in self.entries:
            if e.video_id in seen:
                raise ValueError(f"duplicate video id {e.video_id!r} in split {self.split_name!r}")
            seen.add(e.video_id)
            if not 0 <= e.label < n:
                raise ValueError(f"label {e.label} of {e.video_id!r} outside [0, {n})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def labels(self) -> dict[str, int]:
        return {e.video_id: e.label for e in self.entries}


VIDEO_SUFFIXES = {".avi", ".mp4", ".mkv", ".webm"}


def video_id_from_path(relative_path: str) -> str:
    return PurePosixPath(relative_path).stem


def write_class_index(class_names: list[str], path: PathLike, one_based: bool = False) -> None:
    base = 1 if one_based else 0
    lines = [f"{i + base} {name}" for i, name in enumerate(class_names)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_class_index(path: PathLike, one_based: bool = False) -> list[str]:
    base = 1 if one_based else 0
    names: dict[int, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'class_id class_name'")
        idx = int(parts[0]) - base
        if idx in names:
            raise ValueError(f"{path}:{lineno}: class id {parts[0]} listed twice")
        names[idx] = parts[1].strip()
    if sorted(names) != list(range(len(names))):
        raise ValueError(f"{path}: class ids are not contiguous from {base}")
    return [names[i] for i in range(len(names))]


def write_manifest(manifest: SplitManifest, list_path: PathLike,
                   class_index_path: Optional[PathLike] = None, one_based: bool = False) -> None:
    base = 1 if one_based else 0
    lines = [f"# {k}: {v}" for k, v in manifest.meta.items()]
    lines += [f"{e.relative_path} {e.label + base}" for e in manifest.entries]
    Path(list_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if class_index_path is not None:
        write_class_index(manifest.class_names, class_index_path, one_based=one_based)


def read_manifest(list_path: PathLike, class_index_path: PathLike,
                  split_name: Optional[str] = None, one_based: bool = False) -> SplitManifest:
    base = 1 if one_based else 0
    class_names = read_class_index(class_index_path, one_based=one_based)
    entries = []
    meta = {}
    for lineno, line in enumerate(Path(list_path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition(":")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        parts = line.split()
        if len(parts) == 1:
            # unlabelled lists (the UCF101 test lists) name the class by directory
            rel, cls = parts[0], PurePosixPath(parts[0]).parent.name
            if cls not in class_names:
                raise ValueError(f"{list_path}:{lineno}: no label and unknown class directory {cls!r}")
            label = class_names.index(cls)
        elif len(parts) == 2:
            rel, label = parts[0], int(parts[1]) - base
        else:
            raise ValueError(f"{list_path}:{lineno}: expected 'relative_path [label]'")
        if PurePosixPath(rel).suffix.lower() in VIDEO_SUFFIXES:
            rel = str(PurePosixPath(rel).with_suffix(""))
        entries.append(ManifestEntry(video_id_from_path(rel), label, rel))
    name = split_name if split_name is not None else Path(list_path).stem
    return SplitManifest(name, class_names, entries, meta)
