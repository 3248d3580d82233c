"""Command-line entry point.

    mvfusion synth            --classes 4 --per-class 8 --seed 7 --out data/
    mvfusion precompute-clip  --root data/ --list trainlist.txt --encoder mock --out runs/app
    mvfusion train-mv         --root data/ --list trainlist.txt --out runs/mv
    mvfusion train-fusion     --root data/ --list trainlist.txt --mv-checkpoint ... --out runs/fusion
    mvfusion eval             --mode fusion --root data/ --list testlist.txt ... --out runs/eval
    mvfusion flops            [--ledger ledger.yaml] [--counted]

Every command accepts ``--config FILE`` (YAML); values there act as defaults
and command-line flags override them.  Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

ENV_ROOT = "MVFUSION_DATA_ROOT"
LOG = logging.getLogger("mvfusion")


class UsageError(Exception):
    pass


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="YAML file with default values for any flag")
    p.add_argument("--out", required=False, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive, default=1, help="data-loading threads")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--root", default=None, help=f"dataset root (falls back to ${ENV_ROOT})")
        p.add_argument("--class-index", default="classInd.txt")
        p.add_argument("--one-based", action="store_true", help="UCF101-style 1-based labels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvfusion", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic MV/RGB dataset")
    _common(p, data=False)
    p.add_argument("--classes", type=_positive, default=4)
    p.add_argument("--per-class", type=_positive, default=8)
    p.add_argument("--test-per-class", type=_positive, default=None)
    p.add_argument("--frames", type=_positive, default=12)
    p.add_argument("--size", type=_positive, default=64)
    p.add_argument("--xor", action="store_true")

    p = sub.add_parser("precompute-clip", help="cache appearance features")
    _common(p)
    p.add_argument("--list", default="trainlist.txt")
    p.add_argument("--frames-root", default=None)
    p.add_argument("--encoder", choices=("mock", "pretrained"), default="mock")
    p.add_argument("--clip-model", default=None)
    p.add_argument("--cache-name", default=None)

    for name in ("train-mv", "train-fusion"):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} training stage")
        _common(p)
        p.add_argument("--list", default="trainlist.txt")
        p.add_argument("--val-list", default=None)
        p.add_argument("--epochs", type=_positive, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--weight-decay", type=float, default=None)
        p.add_argument("--batch-size", type=_positive, default=None)
        p.add_argument("--crop-size", type=_positive, default=224)
        p.add_argument("--max-steps", type=_positive, default=None)
        if name == "train-mv":
            p.add_argument("--pretrained", action="store_true", help="ImageNet init (downloads)")
            p.add_argument("--weights", default=None, help="local ImageNet EfficientNet-B0 weights")
            p.add_argument("--val-views", type=_positive, default=8)
        else:
            p.add_argument("--mv-checkpoint", required=False)
            p.add_argument("--appearance-cache", required=False)

    p = sub.add_parser("eval", help="multi-view evaluation")
    _common(p)
    p.add_argument("--mode", choices=("clip-only", "mv-only", "fusion"), required=False)
    p.add_argument("--list", default="testlist.txt")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--appearance-cache", default=None)
    p.add_argument("--views", type=_positive, default=32)
    p.add_argument("--crop-size", type=_positive, default=None)
    p.add_argument("--average", choices=("probs", "logits"), default="probs")
    p.add_argument("--encoder", choices=("mock", "pretrained"), default="mock")
    p.add_argument("--clip-model", default=None)
    p.add_argument("--templates", default=None, help="template file, one per line with {}")

    p = sub.add_parser("flops", help="view-protocol FLOPs table")
    _common(p, data=False)
    p.add_argument("--ledger", default=None, help="YAML/JSON ledger file")
    p.add_argument("--counted", action="store_true", help="use layer-wise counted per-view costs")
    p.add_argument("--flops-per-mac", type=int, choices=(1, 2), default=1)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            parser.error(f"cannot read config: {exc}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a mapping")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = {k.replace("-", "_") for k in cfg} - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return parser, args


# ------------------------------------------------------------------ helpers

def _root(args) -> Path:
    root = args.root or os.environ.get(ENV_ROOT)
    if not root:
        raise UsageError(f"no dataset root: pass --root or set ${ENV_ROOT}")
    return Path(root)


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, list_name):
    from .data import read_manifest

    root = _root(args)
    return read_manifest(root / list_name, root / args.class_index, one_based=args.one_based)


def _finish(args, out: Path, produced: list) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "config"}
    (out / "config.resolved.yaml").write_text(yaml.safe_dump(resolved, sort_keys=True))
    files = sorted({str(Path(p)) for p in produced} | {str(out / "config.resolved.yaml")})
    (out / "outputs.json").write_text(json.dumps({"command": args.command, "files": files},
                                                 indent=2) + "\n")


def _synthetic_meta(root: Path) -> dict:
    path = root / "dataset.json"
    if not path.exists():
        raise RuntimeError("the mock encoder only works on synthetic datasets (no dataset.json)")
    return json.loads(path.read_text())


def _encoder(args, root: Path, class_names):
    from .appearance import ClipEncoder, OrthonormalMockEncoder
    from .data import class_signatures

    if args.encoder == "pretrained":
        return ClipEncoder(args.clip_model) if args.clip_model else ClipEncoder()
    meta = _synthetic_meta(root)
    xor = any(s.get("mode") == "xor" for s in meta.get("splits", {}).values())
    return OrthonormalMockEncoder.for_synthetic(class_names, class_signatures(len(class_names), xor))


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .data import generate_synthetic_dataset, save_synthetic_dataset

    out = _out(args)
    produced = []
    for split, per_class in (("train", args.per_class), ("test", args.test_per_class or args.per_class)):
        ds = generate_synthetic_dataset(args.classes, per_class, args.frames, args.size, args.size,
                                        args.seed, xor=args.xor, split=split)
        produced += save_synthetic_dataset(ds, out, f"{split}list.txt")
    _finish(args, out, produced)
    print(f"wrote {len(produced)} files to {out}")
    return 0


def cmd_precompute_clip(args) -> int:
    from .appearance import humanize_class_name, precompute_cache
    from .data import FrameDirectorySource

    root = _root(args)
    out = _out(args)
    manifest = _manifest(args, args.list)
    names = [humanize_class_name(n) for n in manifest.class_names]
    encoder = _encoder(args, root, names)
    source = FrameDirectorySource(args.frames_root or root / "frames")
    split = manifest.split_name.replace("list", "") or manifest.split_name
    path = out / (args.cache_name or f"appearance_{split}.mclf")
    records = precompute_cache(manifest, source, encoder, path, workers=args.workers)
    _finish(args, out, [path])
    print(f"cached {len(records)} appearance features -> {path}")
    return 0


def _train_config(args, stage: str):
    from .motion import TrainConfig

    overrides = {k: v for k, v in dict(epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                                       batch_size=args.batch_size, max_steps=args.max_steps).items()
                 if v is not None}
    overrides.update(seed=args.seed, crop_size=args.crop_size, workers=args.workers)
    if stage == "mv-only":
        overrides["val_views"] = args.val_views
        return TrainConfig.mv_only(**overrides)
    return TrainConfig.fusion(**overrides)


def cmd_train_mv(args) -> int:
    from .data import load_split_clips
    from .motion import count_trainable_params, save_mv_checkpoint, train_mv_classifier

    root = _root(args)
    out = _out(args)
    train = _manifest(args, args.list)
    val = _manifest(args, args.val_list) if args.val_list else None
    clips = load_split_clips(train, root)
    val_clips = load_split_clips(val, root) if val else None
    config = _train_config(args, "mv-only")
    result = train_mv_classifier(train, clips, config, val, val_clips,
                                 pretrained=args.pretrained, weights_path=args.weights)
    path = out / "mv_checkpoint.pt"
    save_mv_checkpoint(result, path)
    (out / "history.json").write_text(json.dumps(result.history, indent=2) + "\n")
    _finish(args, out, [path, out / "history.json"])
    print(f"trainable params: {count_trainable_params(result.model)}")
    print(f"best epoch {result.best_epoch}, metric {result.best_metric} -> {path}")
    return 0


def cmd_train_fusion(args) -> int:
    from .data import load_split_clips
    from .fusion import save_fusion_checkpoint, train_fusion_head
    from .motion import count_trainable_params

    if not args.mv_checkpoint:
        raise UsageError("fusion training needs --mv-checkpoint from a finished MV-only run")
    if not args.appearance_cache:
        raise UsageError("fusion training needs --appearance-cache")
    for p in (args.mv_checkpoint, args.appearance_cache):
        if not Path(p).exists():
            raise FileNotFoundError(p)
    root = _root(args)
    out = _out(args)
    train = _manifest(args, args.list)
    clips = load_split_clips(train, root)
    config = _train_config(args, "fusion")
    result = train_fusion_head(args.appearance_cache, args.mv_checkpoint, train, clips, config)
    path = out / "fusion_checkpoint.pt"
    save_fusion_checkpoint(result, path)
    (out / "history.json").write_text(json.dumps(result.history, indent=2) + "\n")
    _finish(args, out, [path, out / "history.json"])
    print(f"trainable params: {count_trainable_params(result.model)}")
    print(f"backbone sha256 {result.backbone_checksum} (unchanged) -> {path}")
    return 0


def cmd_eval(args) -> int:
    from .appearance import build_text_library, default_templates, humanize_class_name, load_templates
    from .data import feature_table, load_split_clips, read_feature_cache
    from .evaluation import (
        evaluate_model,
        evaluate_zero_shot,
        write_per_class_csv,
        write_prediction_log,
    )
    from .fusion import load_fusion_checkpoint
    from .motion import load_mv_checkpoint

    if not args.mode:
        raise UsageError("--mode is required")
    root = _root(args)
    out = _out(args)
    manifest = _manifest(args, args.list)
    app = feature_table(read_feature_cache(args.appearance_cache)) if args.appearance_cache else None

    if args.mode == "clip-only":
        if app is None:
            raise UsageError("clip-only evaluation needs --appearance-cache")
        names = [humanize_class_name(n) for n in manifest.class_names]
        templates = load_templates(args.templates) if args.templates else default_templates()
        library = build_text_library(names, templates, _encoder(args, root, names))
        result = evaluate_zero_shot(manifest, app, library)
    else:
        if not args.checkpoint:
            raise UsageError(f"{args.mode} evaluation needs --checkpoint")
        if args.mode == "fusion":
            if app is None:
                raise UsageError("fusion evaluation needs --appearance-cache")
            model, payload = load_fusion_checkpoint(args.checkpoint)
        else:
            model, payload = load_mv_checkpoint(args.checkpoint)
            app = None
        crop = args.crop_size or payload["input_size"]
        clips = load_split_clips(manifest, root)
        result = evaluate_model(manifest, clips, model, args.views, crop, app, args.average)

    files = [out / "predictions.jsonl", out / "per_class.csv", out / "summary.json",
             out / "confusion.csv"]
    write_prediction_log(result.log, files[0])
    write_per_class_csv(result, manifest.class_names, files[1])
    files[2].write_text(json.dumps({"mode": args.mode, "top1": result.top1,
                                    "videos": len(result.log), "views": args.views}, indent=2) + "\n")
    files[3].write_text("\n".join(",".join(str(int(v)) for v in row) for row in result.confusion) + "\n")
    _finish(args, out, files)
    print(f"{args.mode} top-1: {result.top1:.4f} over {len(result.log)} videos")
    return 0


def cmd_flops(args) -> int:
    from .flops import (
        builtin_ledgers,
        count_model_flops,
        counted_per_view,
        format_cost_table,
        load_ledger,
    )

    if args.ledger:
        ledger = load_ledger(args.ledger)
        ledgers = {ledger.name or Path(args.ledger).stem: ledger}
    elif args.counted:
        pv = counted_per_view(args.flops_per_mac)
        ledgers = builtin_ledgers(pv, head_gflops=pv["fusion_head"])
    else:
        ledgers = builtin_ledgers()
    table = format_cost_table(ledgers, args.flops_per_mac)
    print(table, end="")
    if not args.ledger:
        head = count_model_flops("fusion_head", None, args.flops_per_mac)
        print(f"note: the fusion head counts {head:.4f} GFLOPs layer by layer; "
              f"the built-in ledger carries a nominal 0.05 as an upper bound")
    if args.out:
        out = _out(args)
        (out / "flops.txt").write_text(table)
        _finish(args, out, [out / "flops.txt"])
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "precompute-clip": cmd_precompute_clip,
    "train-mv": cmd_train_mv,
    "train-fusion": cmd_train_fusion,
    "eval": cmd_eval,
    "flops": cmd_flops,
}


def main(argv=None) -> int:
    parser, args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mvfusion {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit 1
        LOG.debug("command failed", exc_info=True)
        print(f"mvfusion {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
