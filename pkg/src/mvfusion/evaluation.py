"""Multi-view evaluation, accuracy bookkeeping, reports and throughput."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .appearance import ClassTextLibrary, zero_shot_scores
from .data.formats import MVClip, PathLike
from .data.manifest import SplitManifest
from .motion import eval_views, ordered_clips
from .sampling import ViewProtocol

CLIP_LOGIT_SCALE = 100.0


@dataclass
class PredictionRecord:
    video_id: str
    true_label: int
    pred_label: int
    probs: np.ndarray = field(repr=False)


@dataclass
class EvalResult:
    top1: float
    per_class: dict[int, float]
    confusion: np.ndarray
    log: list[PredictionRecord]

    @property
    def num_classes(self) -> int:
        return int(self.confusion.shape[0])


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def predict_from_views(model, views, f_app=None, average: str = "probs") -> np.ndarray:
    """Class probabilities of one video from its ``(N, 2, S, S)`` views.

    ``average="probs"`` (default) averages per-view softmax outputs;
    ``"logits"`` averages logits first and applies one softmax.
    """
    views = torch.as_tensor(np.asarray(views, dtype=np.float32))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model.view_logits(views, f_app).double().numpy()
    finally:
        model.train(was_training)
    if average == "probs":
        return softmax(logits).mean(axis=0)
    if average == "logits":
        return softmax(logits.mean(axis=0))
    raise ValueError(f"unknown averaging {average!r}")


def multiview_predict(clip: MVClip, f_app, model, protocol: ViewProtocol,
                      average: str = "probs") -> np.ndarray:
    if protocol.mode != "test-center":
        raise ValueError("multi-view prediction uses the test-center protocol")
    views = eval_views(clip, protocol.n_segments, protocol.crop_size)
    return predict_from_views(model, views, f_app, average)


def argmax_lowest(probs) -> int:
    """``np.argmax`` already returns the first maximum, i.e. the lowest class."""
    return int(np.argmax(np.asarray(probs)))


def confusion_matrix(log: Sequence[PredictionRecord], num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for r in log:
        cm[r.true_label, r.pred_label] += 1
    return cm


def top1_accuracy(log: Sequence[PredictionRecord]) -> float:
    if not log:
        raise ValueError("empty prediction log")
    return sum(r.pred_label == r.true_label for r in log) / len(log)


def per_class_accuracy(log: Sequence[PredictionRecord]) -> dict[int, float]:
    if not log:
        raise ValueError("empty prediction log")
    total: dict[int, int] = {}
    correct: dict[int, int] = {}
    for r in log:
        total[r.true_label] = total.get(r.true_label, 0) + 1
        correct[r.true_label] = correct.get(r.true_label, 0) + int(r.pred_label == r.true_label)
    return {c: correct[c] / total[c] for c in sorted(total)}


def summarize(log: list[PredictionRecord], num_classes: int) -> EvalResult:
    for r in log:
        if not (0 <= r.true_label < num_classes and 0 <= r.pred_label < num_classes):
            raise ValueError(f"class id outside [0, {num_classes}) in record {r.video_id}")
    return EvalResult(top1_accuracy(log), per_class_accuracy(log),
                      confusion_matrix(log, num_classes), log)


def evaluate_model(manifest: SplitManifest, clips, model, n_segments: int = 32,
                   crop_size: int = 224, app_features: Optional[Mapping] = None,
                   average: str = "probs") -> EvalResult:
    """Run :func:`multiview_predict` over a split (MV-only or fusion model)."""
    protocol = ViewProtocol.test(n_segments, crop_size)
    log = []
    for clip in ordered_clips(manifest, clips):
        f_app = None
        if app_features is not None:
            if clip.video_id not in app_features:
                raise KeyError(f"no appearance feature for {clip.video_id}")
            f_app = app_features[clip.video_id]
        probs = multiview_predict(clip, f_app, model, protocol, average)
        log.append(PredictionRecord(clip.video_id, clip.label, argmax_lowest(probs), probs))
    return summarize(log, manifest.num_classes)


def evaluate_zero_shot(manifest: SplitManifest, app_features: Mapping,
                       library: ClassTextLibrary, logit_scale: float = CLIP_LOGIT_SCALE
                       ) -> EvalResult:
    """Zero-shot predictions; probabilities are ``softmax(scale * cosine)``."""
    log = []
    for e in manifest:
        if e.video_id not in app_features:
            raise KeyError(f"no appearance feature for {e.video_id}")
        scores = zero_shot_scores(app_features[e.video_id], library)
        probs = softmax(logit_scale * scores)
        log.append(PredictionRecord(e.video_id, e.label, int(np.argmax(scores)), probs))
    return summarize(log, manifest.num_classes)


def write_prediction_log(log: Sequence[PredictionRecord], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in log:
            fh.write(json.dumps({"video_id": r.video_id, "true": r.true_label,
                                 "pred": r.pred_label,
                                 "probs": [float(p) for p in r.probs]}) + "\n")


def read_prediction_log(path: PathLike) -> list[PredictionRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(PredictionRecord(d["video_id"], d["true"], d["pred"], np.asarray(d["probs"])))
    return out


def per_class_rows(result: EvalResult, class_names: Sequence[str]) -> list[tuple]:
    totals = result.confusion.sum(axis=1)
    return [(c, class_names[c], int(totals[c]), result.per_class.get(c, float("nan")))
            for c in range(len(class_names))]


def write_per_class_csv(result: EvalResult, class_names: Sequence[str], path: PathLike) -> None:
    lines = ["class_id,class_name,count,accuracy"]
    for c, name, n, acc in per_class_rows(result, class_names):
        lines.append(f"{c},{name},{n},{'' if np.isnan(acc) else f'{acc:.6f}'}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


ABLATION_ROWS = (("clip-only", "CLIP-only"), ("mv-only", "MV-only"), ("fusion", "Fusion"))


@dataclass
class AblationTable:
    rows: list[dict]
    text: str
    csv: str


def _top1(value) -> float:
    return value.top1 if isinstance(value, EvalResult) else float(value)


def ablation_table(results: Mapping, params: Mapping, throughputs: Mapping,
                   percent: bool = True) -> AblationTable:
    """Three-row component comparison with the fusion gain over the best single stream.

    ``results`` values are :class:`EvalResult` or Top-1 fractions; ``params``
    holds trainable parameter counts; ``throughputs`` holds videos/sec, with
    ``None`` meaning the stream runs offline.
    """
    if not results or not all(k in results for k, _ in ABLATION_ROWS):
        raise ValueError("ablation table needs clip-only, mv-only and fusion results")
    scale = 100.0 if percent else 1.0
    rows = []
    for key, label in ABLATION_ROWS:
        tp = throughputs.get(key)
        rows.append({"component": label, "params_m": params.get(key, 0) / 1e6,
                     "throughput": tp, "top1": _top1(results[key]) * scale})
    best_single = max(rows[0]["top1"], rows[1]["top1"])
    for r in rows:
        r["delta"] = r["top1"] - best_single if r["component"] == "Fusion" else None

    def fmt_params(m):
        return "0" if m == 0 else (f"{m:.2f}" if m < 1 else f"{m:.1f}")

    header = ("Component", "Trainable Params (M)", "Throughput (videos/sec)", "Top-1 (%)", "Delta")
    body = []
    for r in rows:
        tp = "N/A (Offline)" if r["throughput"] is None else f"{r['throughput']:.2f}"
        delta = "" if r["delta"] is None else f"{r['delta']:+.1f}"
        body.append((r["component"], fmt_params(r["params_m"]), tp, f"{r['top1']:.1f}", delta))
    widths = [max(len(x[i]) for x in (header, *body)) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in (header, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    csv = ["component,params_m,throughput,top1,delta"]
    for r in rows:
        csv.append(",".join([r["component"], f"{r['params_m']:.6f}",
                             "" if r["throughput"] is None else f"{r['throughput']:.4f}",
                             f"{r['top1']:.4f}", "" if r["delta"] is None else f"{r['delta']:.4f}"]))
    return AblationTable(rows, "\n".join(lines) + "\n", "\n".join(csv) + "\n")


@dataclass
class ThroughputResult:
    mean: float
    std: float
    repetitions: list[float]

    @property
    def spread(self) -> float:
        """(max - min) / mean across repetitions."""
        return (max(self.repetitions) - min(self.repetitions)) / self.mean


def throughput_benchmark(predict: Callable, videos: Sequence, n_videos: int,
                         warmup: int = 5, repeats: int = 3) -> ThroughputResult:
    """Videos per second for ``predict(video)`` at batch size 1.

    ``warmup`` calls are made and discarded first; then ``n_videos`` calls
    (cycling over ``videos``) are timed, ``repeats`` times.
    """
    if n_videos < 1:
        raise ValueError("n_videos must be >= 1")
    if not videos:
        raise ValueError("no videos to benchmark")
    for i in range(warmup):
        predict(videos[i % len(videos)])
    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for i in range(n_videos):
            predict(videos[i % len(videos)])
        rates.append(n_videos / (time.perf_counter() - t0))
    std = statistics.stdev(rates) if len(rates) > 1 else 0.0
    return ThroughputResult(statistics.fmean(rates), std, rates)


def model_predictor(model, protocol: ViewProtocol, app_features: Optional[Mapping] = None):
    """Batch-size-1 predictor closure over MV clips for :func:`throughput_benchmark`."""
    def predict(clip):
        f_app = None if app_features is None else app_features[clip.video_id]
        return multiview_predict(clip, f_app, model, protocol)
    return predict


def _top3(probs, class_names) -> str:
    probs = np.asarray(probs)
    order = np.argsort(-probs, kind="stable")[:3]
    return ", ".join(f"{class_names[i]} {probs[i]:.2f}" for i in order)


def qualitative_report(logs: Mapping[str, Sequence[PredictionRecord]], class_names: Sequence[str],
                       k: int = 5) -> str:
    """Videos fusion gets right while both single streams get wrong.

    ``logs`` maps ``clip-only``, ``mv-only`` and ``fusion`` to prediction
    logs.  Returns an empty string when there is nothing to report.
    """
    if k <= 0:
        return ""
    by_id = {name: {r.video_id: r for r in log} for name, log in logs.items()}
    fusion = logs["fusion"]
    lines = []
    for r in fusion:
        if len(lines) // 5 >= k:
            break
        a = by_id["clip-only"].get(r.video_id)
        m = by_id["mv-only"].get(r.video_id)
        if a is None or m is None:
            continue
        if r.pred_label == r.true_label and a.pred_label != a.true_label and m.pred_label != m.true_label:
            lines.append(f"{r.video_id}  true: {class_names[r.true_label]}")
            lines.append(f"  clip-only: {_top3(a.probs, class_names)}")
            lines.append(f"  mv-only:   {_top3(m.probs, class_names)}")
            lines.append(f"  fusion:    {_top3(r.probs, class_names)}")
            lines.append("")
    return "\n".join(lines)
