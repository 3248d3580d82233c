"""Late fusion: concatenate appearance and motion features, classify with an MLP.

Only the head is trained.  The motion backbone runs in eval mode with
gradients disabled, and its checksum (parameters and BN buffers) is compared
before and after training; any difference is a hard failure.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .appearance import APPEARANCE_DIM
from .data.formats import FeatureRecord, PathLike, feature_table, read_feature_cache, write_feature_cache
from .data.manifest import SplitManifest
from .motion import (
    CHECKPOINT_VERSION,
    MOTION_DIM,
    MotionBackbone,
    MVClassifier,
    TrainConfig,
    TrainingDivergedError,
    batch_views,
    eval_views,
    file_sha256,
    load_mv_checkpoint,
    make_optimizer,
    ordered_clips,
    read_checkpoint,
    state_checksum,
)

LOG = logging.getLogger(__name__)

FUSED_DIM = APPEARANCE_DIM + MOTION_DIM
HIDDEN_DIM = 512
DROPOUT = 0.5
CONCAT_ORDER = ("appearance", "motion")


class FrozenParameterError(RuntimeError):
    """A component that must stay frozen changed during training."""


def fuse(f_app, f_motion):
    """``[f_app ; f_motion]`` along the last axis; numpy or torch in, same out."""
    if f_app.shape[-1] != APPEARANCE_DIM:
        raise ValueError(f"appearance feature must be {APPEARANCE_DIM}-d, got {f_app.shape[-1]}")
    if f_motion.shape[-1] != MOTION_DIM:
        raise ValueError(f"motion feature must be {MOTION_DIM}-d, got {f_motion.shape[-1]}")
    if isinstance(f_app, torch.Tensor):
        return torch.cat([f_app, f_motion], dim=-1)
    return np.concatenate([np.asarray(f_app), np.asarray(f_motion)], axis=-1)


def split_fused(f):
    return f[..., :APPEARANCE_DIM], f[..., APPEARANCE_DIM:]


class FusionHead(nn.Module):
    """Linear 1792->512, ReLU, Dropout(0.5), Linear 512->C."""

    def __init__(self, num_classes: int = 101, in_dim: int = FUSED_DIM,
                 hidden: int = HIDDEN_DIM, dropout: float = DROPOUT):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = nn.ReLU()
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, num_classes)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(self.act(self.fc1(x))))


def head_forward(f, head: FusionHead, mode: str = "eval",
                 rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Run the head explicitly in ``train`` or ``eval`` mode.

    Train mode draws the (inverted) dropout mask from ``rng`` so the result
    does not depend on the global torch RNG.
    """
    x = torch.as_tensor(np.asarray(f, np.float32)) if not isinstance(f, torch.Tensor) else f
    if x.shape[-1] != head.fc1.in_features:
        raise ValueError(f"fused feature must be {head.fc1.in_features}-d, got {x.shape[-1]}")
    if mode == "eval":
        with torch.no_grad():
            return head.fc2(head.act(head.fc1(x)))
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = head.act(head.fc1(x))
    p = head.dropout.p
    keep = torch.rand(h.shape, generator=rng) >= p
    return head.fc2(h * keep / (1.0 - p))


class FusionClassifier(nn.Module):
    """Frozen motion backbone + trainable fusion head."""

    def __init__(self, backbone: MotionBackbone, head: FusionHead):
        super().__init__()
        self.backbone = backbone
        self.head = head
        freeze(self.backbone)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def motion_features(self, views: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.backbone(views)

    def forward(self, segments: torch.Tensor, f_app: torch.Tensor) -> torch.Tensor:
        """``segments``: ``(B, N, 2, S, S)``; ``f_app``: ``(B, 512)``."""
        b, n = segments.shape[:2]
        f_motion = self.motion_features(segments.flatten(0, 1)).view(b, n, -1).mean(dim=1)
        return self.head(fuse(f_app, f_motion))

    def view_logits(self, views: torch.Tensor, f_app=None) -> torch.Tensor:
        if f_app is None:
            raise ValueError("fusion inference needs the video's appearance feature")
        f_app = torch.as_tensor(np.asarray(f_app, np.float32))
        f_motion = self.motion_features(views)
        return self.head(fuse(f_app.expand(len(views), -1), f_motion))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def _appearance_table(cache) -> tuple[dict, Optional[str]]:
    if isinstance(cache, (str, Path)):
        return feature_table(read_feature_cache(cache)), file_sha256(cache)
    if isinstance(cache, Mapping):
        return dict(cache), None
    return feature_table(cache), None


@dataclass
class FusionTrainResult:
    model: FusionClassifier
    config: TrainConfig
    steps: int
    backbone_checksum: str
    appearance_checksum: Optional[str]
    history: list = field(default_factory=list)
    sources: dict = field(default_factory=dict)


def train_fusion_head(appearance_cache, mv_checkpoint, train_manifest: SplitManifest, clips,
                      config: TrainConfig, motion_cache: Optional[Mapping] = None
                      ) -> FusionTrainResult:
    """Train the fusion head on top of a frozen MV backbone.

    ``appearance_cache`` is an MCLF path, a list of records, or an
    id -> vector mapping.  ``mv_checkpoint`` is a checkpoint path or a trained
    :class:`MVClassifier`.  With ``motion_cache`` (id -> 1280-d vector) the
    backbone is not run at all.
    """
    if config.stage != "fusion":
        raise ValueError("train_fusion_head needs a fusion config")
    if mv_checkpoint is None:
        raise ValueError("fusion training needs a trained MV checkpoint")
    sources = {"concat_order": list(CONCAT_ORDER)}
    if isinstance(mv_checkpoint, (str, Path)):
        sources["mv_checkpoint"] = {"path": str(mv_checkpoint), "sha256": file_sha256(mv_checkpoint)}
        mv_model, _ = load_mv_checkpoint(mv_checkpoint)
    else:
        mv_model = mv_checkpoint
    backbone = copy.deepcopy(mv_model.backbone)

    app, app_sum = _appearance_table(appearance_cache)
    if app_sum is not None:
        sources["appearance_cache"] = {"path": str(appearance_cache), "sha256": app_sum}
    missing = [e.video_id for e in train_manifest if e.video_id not in app]
    if missing:
        raise KeyError(f"appearance cache misses {len(missing)} training videos, e.g. {missing[0]}")
    train = ordered_clips(train_manifest, clips) if motion_cache is None else None
    labels = torch.tensor([e.label for e in train_manifest])
    f_app_all = torch.from_numpy(np.stack([app[e.video_id] for e in train_manifest]).astype(np.float32))

    torch.manual_seed(config.seed)
    model = FusionClassifier(backbone, FusionHead(train_manifest.num_classes))
    before = state_checksum(model.backbone)
    optimizer = make_optimizer([p for p in model.head.parameters() if p.requires_grad], config)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, list(config.lr_milestones),
                                                     gamma=config.lr_gamma)

    history, steps = [], 0
    n = len(train_manifest)
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if motion_cache is None:
                logits = model(batch_views(train, config, epoch, idx), f_app_all[idx])
            else:
                f_motion = torch.from_numpy(np.stack(
                    [motion_cache[train_manifest.entries[i].video_id] for i in idx]).astype(np.float32))
                logits = model.head(fuse(f_app_all[idx], f_motion))
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {steps}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            steps += 1
        scheduler.step()
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "steps": steps})
        LOG.info("fusion epoch %d loss %.4f", epoch, history[-1]["loss"])

    after = state_checksum(model.backbone)
    if after != before:
        raise FrozenParameterError("motion backbone changed during fusion training")
    if app_sum is not None and file_sha256(appearance_cache) != app_sum:
        raise FrozenParameterError("appearance cache changed during fusion training")
    model.eval()
    return FusionTrainResult(model, config, steps, after, app_sum, history, sources)


def precompute_motion_cache(manifest: SplitManifest, clips, backbone: MotionBackbone,
                            n_segments: int = 3, out_path: Optional[PathLike] = None
                            ) -> list[FeatureRecord]:
    """Segment-averaged motion features (center sampling, center crop) per video."""
    backbone.eval()
    records = []
    for clip in ordered_clips(manifest, clips):
        views = torch.from_numpy(eval_views(clip, n_segments, backbone.input_size))
        with torch.no_grad():
            f = backbone(views).mean(dim=0).numpy()
        records.append(FeatureRecord(clip.video_id, clip.label, f))
    if out_path is not None:
        write_feature_cache(records, out_path)
    return records


def save_fusion_checkpoint(result: FusionTrainResult, path: PathLike) -> None:
    model = result.model
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "fusion",
        "num_classes": model.num_classes,
        "input_size": model.backbone.input_size,
        "head": model.head.state_dict(),
        "backbone": model.backbone.state_dict(),
        "backbone_sha256": result.backbone_checksum,
        "config": asdict(result.config),
        "sources": result.sources,
        "epoch": result.config.epochs - 1,
        "best_metric": None,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_fusion_checkpoint(path: PathLike) -> tuple[FusionClassifier, dict]:
    payload = read_checkpoint(path, "fusion")
    backbone = MotionBackbone(input_size=payload["input_size"])
    backbone.load_state_dict(payload["backbone"])
    if state_checksum(backbone) != payload["backbone_sha256"]:
        raise FrozenParameterError(f"{path}: stored backbone does not match its checksum")
    head = FusionHead(payload["num_classes"])
    head.load_state_dict(payload["head"])
    model = FusionClassifier(backbone, head)
    model.eval()
    return model, payload


def load_any_checkpoint(path: PathLike) -> Union[MVClassifier, FusionClassifier]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") == "fusion":
        return load_fusion_checkpoint(path)[0]
    return load_mv_checkpoint(path)[0]
