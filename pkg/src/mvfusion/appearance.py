"""Appearance pathway: frozen image-text encoder, prompt ensembles, zero-shot.

The appearance feature of a video is the image embedding of one
representative RGB frame (the middle one).  Features are computed once and
stored in an MCLF cache; nothing downstream ever runs the image encoder
again.
"""

from __future__ import annotations

import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .data.formats import FeatureRecord, PathLike, write_feature_cache
from .data.manifest import SplitManifest

APPEARANCE_DIM = 512
IMAGE_SIZE = 224
# standard normalization constants of the CLIP image encoders
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
PLACEHOLDER = "{}"
DEFAULT_CLIP_MODEL = "openai/clip-vit-base-patch32"


class EncoderClient(Protocol):
    dim: int
    frozen: bool

    def encode_image(self, pixels: np.ndarray) -> np.ndarray:
        """Embed one preprocessed ``(3, 224, 224)`` image."""

    def encode_text(self, text: str) -> np.ndarray:
        """Embed one prompt."""


def preprocess_image(frame) -> np.ndarray:
    """Resize shorter side to 224 (bicubic), center-crop 224, normalize.

    ``frame`` is an ``(H, W, 3)`` uint8 array or a PIL image; returns a
    float32 ``(3, 224, 224)`` array.
    """
    img = frame if isinstance(frame, Image.Image) else Image.fromarray(np.asarray(frame, np.uint8))
    img = img.convert("RGB")
    w, h = img.size
    # the long side is truncated, as torchvision's Resize does
    if w <= h:
        new_w, new_h = IMAGE_SIZE, int(IMAGE_SIZE * h / w)
    else:
        new_w, new_h = int(IMAGE_SIZE * w / h), IMAGE_SIZE
    img = img.resize((new_w, new_h), Image.BICUBIC)
    left, top = (new_w - IMAGE_SIZE) // 2, (new_h - IMAGE_SIZE) // 2
    img = img.crop((left, top, left + IMAGE_SIZE, top + IMAGE_SIZE))
    x = np.asarray(img, dtype=np.float32) / 255.0
    x = (x - np.array(CLIP_MEAN, np.float32)) / np.array(CLIP_STD, np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def _unit_hash_vector(text: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(text.encode("utf-8")))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


class OrthonormalMockEncoder:
    """Deterministic stand-in for an image-text encoder.

    Images are mapped to the basis vector of the nearest palette colour
    (after undoing the preprocessing normalization); prompts are mapped to
    the basis vector assigned to the longest class name they contain.  Text
    that names no known class gets a hash-seeded unit vector.
    """

    frozen = True

    def __init__(self, palette: Sequence, class_to_basis: dict[str, int],
                 dim: int = APPEARANCE_DIM):
        self.palette = np.asarray(palette, dtype=np.float32).reshape(-1, 3)
        self.class_to_basis = dict(class_to_basis)
        self.dim = dim
        if len(self.palette) > dim or any(not 0 <= i < dim for i in self.class_to_basis.values()):
            raise ValueError("basis indices must lie below the embedding dim")

    @classmethod
    def for_synthetic(cls, class_names: Sequence[str], signatures) -> "OrthonormalMockEncoder":
        from .data.synthetic import palette_color

        n_app = max(s.appearance for s in signatures) + 1
        palette = [palette_color(a) for a in range(n_app)]
        mapping = {name: sig.appearance for name, sig in zip(class_names, signatures)}
        return cls(palette, mapping)

    def _basis(self, index: int) -> np.ndarray:
        v = np.zeros(self.dim, np.float32)
        v[index] = 1.0
        return v

    def encode_image(self, pixels) -> np.ndarray:
        x = np.asarray(pixels, dtype=np.float64)
        mean = x.reshape(3, -1).mean(axis=1)
        rgb = (mean * np.array(CLIP_STD) + np.array(CLIP_MEAN)) * 255.0
        k = int(np.argmin(((self.palette - rgb) ** 2).sum(axis=1)))
        return self._basis(k)

    def encode_text(self, text: str) -> np.ndarray:
        hits = [name for name in self.class_to_basis if name in text]
        if not hits:
            return _unit_hash_vector(text, self.dim)
        return self._basis(self.class_to_basis[max(hits, key=len)])


class ClipEncoder:
    """Frozen CLIP image/text towers loaded through ``transformers``."""

    frozen = True

    def __init__(self, model_name: str = DEFAULT_CLIP_MODEL, device: str = "cpu",
                 model=None, tokenizer=None):
        import torch

        if model is None:
            try:
                from transformers import CLIPModel
            except ImportError as exc:  # pragma: no cover - optional dependency
                raise RuntimeError("the pretrained encoder needs `transformers`") from exc
            model = CLIPModel.from_pretrained(model_name)
        self.model = model.to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._tokenizer = tokenizer
        self.model_name = model_name
        self.device = device
        self.dim = int(self.model.config.projection_dim)
        self._torch = torch

    @property
    def tokenizer(self):
        if self._tokenizer is None:
            from transformers import CLIPTokenizer

            self._tokenizer = CLIPTokenizer.from_pretrained(self.model_name)
        return self._tokenizer

    @staticmethod
    def _features(out):
        return out if hasattr(out, "shape") else out.pooler_output

    def encode_image(self, pixels) -> np.ndarray:
        torch = self._torch
        x = torch.as_tensor(np.asarray(pixels, np.float32))[None].to(self.device)
        with torch.no_grad():
            f = self._features(self.model.get_image_features(pixel_values=x))
        return f[0].float().cpu().numpy()

    def encode_text(self, text: str) -> np.ndarray:
        torch = self._torch
        tokens = self.tokenizer([text], padding=True, return_tensors="pt").to(self.device)
        with torch.no_grad():
            f = self._features(self.model.get_text_features(**tokens))
        return f[0].float().cpu().numpy()


@dataclass
class ClassTextLibrary:
    class_names: list[str]
    templates: list[str]
    embeddings: np.ndarray  # (C, dim), unit rows

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def humanize_class_name(name: str) -> str:
    """``"ApplyEyeMakeup"`` -> ``"Apply Eye Makeup"``; underscores become spaces."""
    name = name.replace("_", " ")
    name = re.sub(r"(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])", " ", name)
    return " ".join(name.split())


def default_templates() -> list[str]:
    text = resources.files("mvfusion").joinpath("resources/ucf101_templates.txt").read_text("utf-8")
    return parse_templates(text)


def parse_templates(text: str) -> list[str]:
    return [line.rstrip("\n") for line in text.splitlines() if line.strip()]


def load_templates(path: PathLike) -> list[str]:
    return parse_templates(Path(path).read_text(encoding="utf-8"))


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def build_text_library(class_names: Sequence[str], templates: Sequence[str],
                       encoder: EncoderClient) -> ClassTextLibrary:
    """Prompt-ensembled class embeddings.

    Each prompt embedding is L2-normalized, the K normalized embeddings of a
    class are averaged, and the mean is normalized again.
    """
    if not class_names:
        raise ValueError("empty class list")
    if not templates:
        raise ValueError("at least one template is required")
    for t in templates:
        if t.count(PLACEHOLDER) != 1:
            raise ValueError(f"template must contain exactly one '{{}}': {t!r}")
    rows = []
    for name in class_names:
        embs = np.stack([_unit(encoder.encode_text(t.replace(PLACEHOLDER, name))) for t in templates])
        rows.append(_unit(embs.mean(axis=0)))
    return ClassTextLibrary(list(class_names), list(templates), np.stack(rows).astype(np.float32))


def select_representative_frame(num_frames: int) -> int:
    if num_frames < 1:
        raise ValueError("video has no frames")
    return num_frames // 2


def encode_appearance(frame, encoder: EncoderClient) -> np.ndarray:
    f = np.asarray(encoder.encode_image(preprocess_image(frame)), dtype=np.float32)
    if f.shape != (APPEARANCE_DIM,):
        raise ValueError(f"encoder returned shape {f.shape}, expected ({APPEARANCE_DIM},)")
    if not np.all(np.isfinite(f)):
        raise ValueError("encoder returned non-finite values")
    return f


def zero_shot_scores(f_app, library: ClassTextLibrary) -> np.ndarray:
    """Cosine similarity of ``f_app`` against every library row."""
    f = np.asarray(f_app, dtype=np.float64)
    if f.shape[-1] != library.embeddings.shape[1]:
        raise ValueError(f"feature dim {f.shape[-1]} != library dim {library.embeddings.shape[1]}")
    rows = library.embeddings.astype(np.float64)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return rows @ _unit(f)


def zero_shot_classify(f_app, library: ClassTextLibrary) -> tuple[int, np.ndarray]:
    scores = zero_shot_scores(f_app, library)
    return int(np.argmax(scores)), scores


def precompute_cache(manifest: SplitManifest, video_source, encoder: EncoderClient,
                     out_path: Optional[PathLike] = None, workers: int = 1) -> list[FeatureRecord]:
    """Encode the representative frame of every video and write an MCLF cache.

    All features are computed before anything is written, so a missing video
    or encoder failure leaves no file behind.  Records follow manifest order.
    """
    def one(entry):
        idx = select_representative_frame(video_source.num_frames(entry))
        return FeatureRecord(entry.video_id, entry.label,
                             encode_appearance(video_source.load_frame(entry, idx), encoder))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, manifest.entries))
    else:
        records = [one(e) for e in manifest.entries]
    if out_path is not None:
        write_feature_cache(records, out_path)
    return records
