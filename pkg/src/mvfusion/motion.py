"""Motion pathway: EfficientNet-B0 on 2-channel motion vectors.

The ImageNet stem convolution is converted to two input channels, a
``BatchNorm2d(2)`` is prepended, and the classifier is dropped so the
backbone emits the 1280-d pooled feature.  A video's motion feature is the
mean of its segment features.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import efficientnet_b0

from .data.formats import MVClip, PathLike
from .data.manifest import SplitManifest
from .sampling import sample_test_indices, sample_train_indices
from .transforms import center_crop_resize, hflip_mv, multiscale_crop, normalize_mv

LOG = logging.getLogger(__name__)

MOTION_DIM = 1280
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


def adapt_stem(weight: torch.Tensor) -> torch.Tensor:
    """Turn a ``K x 3 x h x w`` RGB filter bank into ``K x 2 x h x w``.

    Each filter's three channel slices are averaged, scaled by 3/2 and copied
    into both new channels, so a channel-constant input yields the same
    pre-activation as before.
    """
    if weight.ndim != 4 or weight.shape[1] != 3:
        raise ValueError(f"expected a K x 3 x h x w weight, got {tuple(weight.shape)}")
    mean = weight.mean(dim=1, keepdim=True) * 1.5
    return mean.repeat(1, 2, 1, 1).contiguous()


class MotionBackbone(nn.Module):
    """2-channel EfficientNet-B0 feature extractor (``(B, 2, S, S) -> (B, 1280)``)."""

    def __init__(self, pretrained: bool = False, weights_path: Optional[PathLike] = None,
                 input_size: int = 224):
        super().__init__()
        if pretrained and weights_path is None:
            from torchvision.models import EfficientNet_B0_Weights

            net = efficientnet_b0(weights=EfficientNet_B0_Weights.IMAGENET1K_V1)
        else:
            net = efficientnet_b0(weights=None)
            if weights_path is not None:
                net.load_state_dict(torch.load(weights_path, map_location="cpu"))

        stem = net.features[0][0]
        new_stem = nn.Conv2d(2, stem.out_channels, stem.kernel_size, stem.stride,
                             stem.padding, bias=False)
        with torch.no_grad():
            new_stem.weight.copy_(adapt_stem(stem.weight))
        net.features[0][0] = new_stem

        self.input_norm = nn.BatchNorm2d(2)
        self.features = net.features
        self.avgpool = net.avgpool
        self.input_size = input_size
        self.out_dim = MOTION_DIM

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.input_norm(x)
        x = self.features(x)
        return torch.flatten(self.avgpool(x), 1)


class MVClassifier(nn.Module):
    """Backbone + single linear layer; the MV-only baseline."""

    def __init__(self, num_classes: int, backbone: Optional[MotionBackbone] = None, **backbone_kw):
        super().__init__()
        self.backbone = backbone if backbone is not None else MotionBackbone(**backbone_kw)
        self.head = nn.Linear(MOTION_DIM, num_classes)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``(B, N, 2, S, S)`` segments -> ``(B, C)`` logits of the mean feature."""
        b, n = x.shape[:2]
        feats = self.backbone(x.flatten(0, 1)).view(b, n, -1)
        return self.head(feats.mean(dim=1))

    def view_logits(self, views: torch.Tensor, f_app=None) -> torch.Tensor:
        """Per-view logits for ``(N, 2, S, S)`` views."""
        return self.head(self.backbone(views))


def extract_segment_feature(frame, backbone: MotionBackbone) -> np.ndarray:
    """1280-d feature of one normalized MV frame, in eval mode."""
    x = np.asarray(frame, dtype=np.float32)
    size = backbone.input_size
    if x.shape != (size, size, 2):
        raise ValueError(f"expected a ({size}, {size}, 2) frame, got {x.shape}")
    if x.min() < -0.5 or x.max() > 0.5:
        raise ValueError("frame is not normalized to [-0.5, 0.5]")
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            out = backbone(torch.from_numpy(x.transpose(2, 0, 1).copy())[None])
    finally:
        backbone.train(was_training)
    return out[0].numpy()


def aggregate_segments(features) -> np.ndarray:
    feats = [np.asarray(f, dtype=np.float32) for f in features]
    if not feats:
        raise ValueError("no segment features to aggregate")
    if len({f.shape for f in feats}) != 1:
        raise ValueError("segment features differ in shape")
    return np.mean(np.stack(feats), axis=0, dtype=np.float64).astype(np.float32)


def mv_only_logits(f_motion, head: nn.Linear) -> np.ndarray:
    f = torch.as_tensor(np.asarray(f_motion, np.float32))
    if f.shape[-1] != head.in_features:
        raise ValueError(f"feature dim {f.shape[-1]} != head input {head.in_features}")
    with torch.no_grad():
        return head(f).numpy()


def count_trainable_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainConfig:
    stage: str = "mv-only"
    epochs: int = 200
    optimizer: str = "adam"
    lr: float = 1e-2
    weight_decay: float = 1e-4
    lr_milestones: tuple = (80, 160)
    lr_gamma: float = 0.1
    batch_size: int = 64
    seed: int = 0
    n_segments: int = 3
    crop_size: int = 224
    hflip_p: float = 0.5
    val_views: int = 8
    max_steps: Optional[int] = None
    early_stop_top1: Optional[float] = None
    workers: int = 1
    bn_recalibration_batches: int = 50

    def __post_init__(self):
        if self.stage not in ("mv-only", "fusion"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.lr_milestones = tuple(self.lr_milestones)

    @classmethod
    def mv_only(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def fusion(cls, **overrides) -> "TrainConfig":
        base = dict(stage="fusion", epochs=50, optimizer="adamw", lr=1e-4, weight_decay=1e-2,
                    lr_milestones=(), lr_gamma=1.0)
        base.update(overrides)
        return cls(**base)


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    return cls(params, lr=config.lr, weight_decay=config.weight_decay)


def item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-example generator, independent of batch layout and worker count."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def train_views(clip: MVClip, n_segments: int, crop_size: int, hflip_p: float,
                rng: np.random.Generator) -> np.ndarray:
    """TSN random segments -> multi-scale crop -> random MV flip -> normalize."""
    out = []
    for t in sample_train_indices(clip.num_frames, n_segments, rng):
        f = multiscale_crop(clip.frames[t], crop_size, rng)
        if rng.random() < hflip_p:
            f = hflip_mv(f)
        out.append(normalize_mv(f).transpose(2, 0, 1))
    return np.stack(out)


def eval_views(clip: MVClip, n_segments: int, crop_size: int) -> np.ndarray:
    """Center-sampled segments, center crop, normalized: ``(N, 2, S, S)``."""
    idx = sample_test_indices(clip.num_frames, n_segments)
    return np.stack([normalize_mv(center_crop_resize(clip.frames[t], crop_size)).transpose(2, 0, 1)
                     for t in idx])


def batch_views(clips: Sequence[MVClip], config: TrainConfig, epoch: int,
                indices: Sequence[int]) -> torch.Tensor:
    def one(i):
        return train_views(clips[i], config.n_segments, config.crop_size, config.hflip_p,
                           item_rng(config.seed, epoch, i))

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            views = list(pool.map(one, indices))
    else:
        views = [one(i) for i in indices]
    return torch.from_numpy(np.stack(views))


def recalibrate_batchnorm(module: nn.Module, batches) -> int:
    """Re-estimate BatchNorm running statistics; returns the number of batches used.

    BN layers run in train mode with cumulative averaging while everything
    else (stochastic depth in particular) stays in eval mode, so the
    statistics match inference.  Running averages taken during training lag
    behind fast-moving weights on short schedules.
    """
    bns = [m for m in module.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    was_training = module.training
    module.eval()
    momenta = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
        m.train()
    n = 0
    try:
        with torch.no_grad():
            for x in batches:
                module(x)
                n += 1
    finally:
        for m, momentum in zip(bns, momenta):
            m.momentum = momentum
        module.train(was_training)
    return n


def ordered_clips(manifest: SplitManifest, clips) -> list[MVClip]:
    """Clips in manifest order with manifest labels; fails on any missing id."""
    if not isinstance(clips, Mapping):
        clips = {c.video_id: c for c in clips}
    out = []
    for e in manifest:
        if e.video_id not in clips:
            raise KeyError(f"no MV clip for {e.video_id}")
        c = clips[e.video_id]
        out.append(c if c.label == e.label else MVClip(c.video_id, e.label, c.frames))
    return out


@dataclass
class TrainResult:
    model: nn.Module
    config: TrainConfig
    best_epoch: int
    best_metric: Optional[float]
    steps: int
    history: list = field(default_factory=list)


def _scheduler(optimizer, config: TrainConfig):
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, list(config.lr_milestones),
                                                gamma=config.lr_gamma)


def train_mv_classifier(train_manifest: SplitManifest, clips, config: TrainConfig,
                        val_manifest: Optional[SplitManifest] = None, val_clips=None,
                        pretrained: bool = False, weights_path: Optional[PathLike] = None
                        ) -> TrainResult:
    """Train backbone + linear head with cross-entropy.

    With a validation split the best epoch by Top-1 (``config.val_views``
    center views) is kept; otherwise the last epoch.  BatchNorm statistics
    are re-estimated (:func:`recalibrate_batchnorm`) before every evaluation
    and at the end.  Deterministic given ``config.seed``.
    """
    from .evaluation import evaluate_model

    if config.stage != "mv-only":
        raise ValueError("train_mv_classifier needs an mv-only config")
    train = ordered_clips(train_manifest, clips)
    if not train:
        raise ValueError("empty training set")
    labels = torch.tensor([c.label for c in train])
    if val_manifest is not None:
        val_clips = ordered_clips(val_manifest, val_clips if val_clips is not None else clips)

    torch.manual_seed(config.seed)
    model = MVClassifier(train_manifest.num_classes, pretrained=pretrained,
                         weights_path=weights_path, input_size=config.crop_size)
    optimizer = make_optimizer(model.parameters(), config)
    scheduler = _scheduler(optimizer, config)

    best_state, best_metric, best_epoch = None, None, -1
    history, steps = [], 0
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = batch_views(train, config, epoch, idx)
            loss = F.cross_entropy(model(x), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, step {steps}, "
                    f"lr {optimizer.param_groups[0]['lr']}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        scheduler.step()

        record = {"epoch": epoch, "loss": float(np.mean(losses)), "steps": steps}
        done = config.max_steps is not None and steps >= config.max_steps
        last = done or epoch == config.epochs - 1
        if config.bn_recalibration_batches > 0 and (val_manifest is not None or last):
            batches = (batch_views(train, config, epoch, order[i:i + config.batch_size])
                       for i in range(0, min(len(order),
                                             config.bn_recalibration_batches * config.batch_size),
                                      config.batch_size))
            recalibrate_batchnorm(model, batches)
        if val_manifest is not None:
            res = evaluate_model(val_manifest, val_clips, model,
                                 n_segments=config.val_views, crop_size=config.crop_size)
            record["val_top1"] = res.top1
            if best_metric is None or res.top1 > best_metric:
                best_metric, best_epoch = res.top1, epoch
                best_state = copy.deepcopy(model.state_dict())
        history.append(record)
        LOG.info("epoch %d %s", epoch, record)

        if (config.early_stop_top1 is not None and record.get("val_top1") is not None
                and record["val_top1"] >= config.early_stop_top1):
            done = True
        if done:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = history[-1]["epoch"]
    model.eval()
    return TrainResult(model, config, best_epoch, best_metric, steps, history)


def save_mv_checkpoint(result: TrainResult, path: PathLike) -> None:
    model = result.model
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "mv-only",
        "num_classes": model.num_classes,
        "input_size": model.backbone.input_size,
        "backbone": model.backbone.state_dict(),
        "head": model.head.state_dict(),
        "config": asdict(result.config),
        "epoch": result.best_epoch,
        "best_metric": result.best_metric,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path: PathLike, kind: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    if payload.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')!r}")
    return payload


def load_mv_checkpoint(path: PathLike) -> tuple[MVClassifier, dict]:
    payload = read_checkpoint(path, "mv-only")
    model = MVClassifier(payload["num_classes"], input_size=payload["input_size"])
    model.backbone.load_state_dict(payload["backbone"])
    model.head.load_state_dict(payload["head"])
    model.eval()
    return model, payload


def file_sha256(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

