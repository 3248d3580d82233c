"""Inference cost accounting under a view protocol.

Counting policy:

* convolution and linear layers contribute multiply-accumulates (MACs);
  ``flops_per_mac`` converts them (default 1, the convention under which
  ViT-B/32 at 224x224 costs 4.4 G and EfficientNet-B0 0.39 G);
* bias adds, normalization, activations, residual adds, gating multiplies,
  positional-embedding adds and softmax each cost one op per output element;
* pooling costs one op per input element it reads;
* attention is QKV projection + ``N^2 d`` score MACs + ``N^2 d`` weighted-sum
  MACs + output projection, plus scaling and softmax over the score tensor.

Total cost of a method is per-view cost times its number of views, summed
over branches, plus the classifier head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import yaml


class UnsupportedLayerError(ValueError):
    pass


# ---------------------------------------------------------------- layer algebra
# Activations are ("chw", C, H, W) for feature maps and ("seq", N, D) for tokens;
# a plain vector is ("seq", 1, D).


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: Optional[int] = None  # None -> (kernel - 1) // 2
    groups: int = 1
    bias: bool = False
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class Linear:
    out_features: int
    bias: bool = True
    kind: str = field(default="linear", init=False)


@dataclass(frozen=True)
class Norm:
    norm: str = "batchnorm"
    kind: str = field(default="norm", init=False)


@dataclass(frozen=True)
class Activation:
    fn: str = "relu"
    kind: str = field(default="activation", init=False)


@dataclass(frozen=True)
class Pool:
    pool: str = "global_avg"  # global_avg | avg | max
    kernel: int = 1
    stride: int = 1
    kind: str = field(default="pool", init=False)


@dataclass(frozen=True)
class Dropout:
    kind: str = field(default="dropout", init=False)


@dataclass(frozen=True)
class Residual:
    body: tuple
    kind: str = field(default="residual", init=False)


@dataclass(frozen=True)
class SqueezeExcite:
    squeeze_channels: int
    kind: str = field(default="squeeze_excite", init=False)


@dataclass(frozen=True)
class PatchTokens:
    """Feature map -> token sequence, optionally adding a class token and positions."""
    cls_token: bool = True
    pos_embed: bool = True
    kind: str = field(default="patch_tokens", init=False)


@dataclass(frozen=True)
class Attention:
    heads: int
    kind: str = field(default="attention", init=False)


@dataclass(frozen=True)
class SelectToken:
    kind: str = field(default="select_token", init=False)


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


LAYER_TYPES = {cls.__dataclass_fields__["kind"].default: cls
               for cls in (Conv2d, Linear, Norm, Activation, Pool, Dropout, Residual,
                           SqueezeExcite, PatchTokens, Attention, SelectToken, Flatten)}


@dataclass
class FlopCount:
    macs: int = 0
    elementwise: int = 0
    by_kind: dict = field(default_factory=dict)

    def add(self, kind: str, macs: int = 0, elementwise: int = 0) -> None:
        self.macs += macs
        self.elementwise += elementwise
        m, e = self.by_kind.get(kind, (0, 0))
        self.by_kind[kind] = (m + macs, e + elementwise)

    def flops(self, flops_per_mac: int = 1) -> int:
        return self.macs * flops_per_mac + self.elementwise

    def gflops(self, flops_per_mac: int = 1) -> float:
        return self.flops(flops_per_mac) / 1e9


def _numel(shape) -> int:
    n = 1
    for d in shape[1:]:
        n *= d
    return n


def _walk(layers, shape, count: FlopCount):
    for layer in layers:
        kind = getattr(layer, "kind", None)
        if kind not in LAYER_TYPES:
            raise UnsupportedLayerError(f"unsupported layer kind {kind!r}")
        shape = _STEP[kind](layer, shape, count)
    return shape


def _conv(layer: Conv2d, shape, count):
    if shape[0] != "chw":
        raise ValueError("conv2d needs a feature map input")
    _, c, h, w = shape
    if c % layer.groups or layer.out_channels % layer.groups:
        raise ValueError(f"channels {c}->{layer.out_channels} not divisible by groups {layer.groups}")
    p = (layer.kernel - 1) // 2 if layer.padding is None else layer.padding
    ho = (h + 2 * p - layer.kernel) // layer.stride + 1
    wo = (w + 2 * p - layer.kernel) // layer.stride + 1
    out = layer.out_channels * ho * wo
    count.add("conv2d", macs=out * (c // layer.groups) * layer.kernel * layer.kernel,
              elementwise=out if layer.bias else 0)
    return ("chw", layer.out_channels, ho, wo)


def _linear(layer: Linear, shape, count):
    if shape[0] == "chw":
        raise ValueError("linear needs a token/vector input; flatten or pool first")
    _, n, d = shape
    count.add("linear", macs=n * d * layer.out_features,
              elementwise=n * layer.out_features if layer.bias else 0)
    return ("seq", n, layer.out_features)


def _elementwise(kind):
    def step(layer, shape, count):
        count.add(kind, elementwise=_numel(shape))
        return shape
    return step


def _pool(layer: Pool, shape, count):
    _, c, h, w = shape
    if layer.pool == "global_avg":
        count.add("pool", elementwise=c * h * w)
        return ("chw", c, 1, 1)
    if layer.pool not in ("avg", "max"):
        raise UnsupportedLayerError(f"unsupported pooling {layer.pool!r}")
    ho = (h - layer.kernel) // layer.stride + 1
    wo = (w - layer.kernel) // layer.stride + 1
    count.add("pool", elementwise=c * ho * wo * layer.kernel * layer.kernel)
    return ("chw", c, ho, wo)


def _residual(layer: Residual, shape, count):
    out = _walk(layer.body, shape, count)
    if out != shape:
        raise ValueError(f"residual body changes shape {shape} -> {out}")
    count.add("residual_add", elementwise=_numel(shape))
    return shape


def _squeeze_excite(layer: SqueezeExcite, shape, count):
    _, c, h, w = shape
    _walk((Pool("global_avg"), Conv2d(layer.squeeze_channels, 1, bias=True), Activation("silu"),
           Conv2d(c, 1, bias=True), Activation("sigmoid")), shape, count)
    count.add("gate_mul", elementwise=c * h * w)
    return shape


def _patch_tokens(layer: PatchTokens, shape, count):
    _, c, h, w = shape
    n = h * w + (1 if layer.cls_token else 0)
    if layer.pos_embed:
        count.add("pos_embed", elementwise=n * c)
    return ("seq", n, c)


def _attention(layer: Attention, shape, count):
    _, n, d = shape
    if d % layer.heads:
        raise ValueError(f"dim {d} not divisible by {layer.heads} heads")
    _linear(Linear(3 * d), shape, count)
    count.add("attention", macs=2 * n * n * d, elementwise=2 * layer.heads * n * n)
    _linear(Linear(d), shape, count)
    return shape


def _select_token(layer, shape, count):
    return ("seq", 1, shape[2])


def _flatten(layer, shape, count):
    if shape[0] == "chw":
        return ("seq", 1, _numel(shape))
    return ("seq", 1, shape[1] * shape[2])


_STEP = {
    "conv2d": _conv,
    "linear": _linear,
    "norm": _elementwise("norm"),
    "activation": _elementwise("activation"),
    "dropout": lambda layer, shape, count: shape,
    "pool": _pool,
    "residual": _residual,
    "squeeze_excite": _squeeze_excite,
    "patch_tokens": _patch_tokens,
    "attention": _attention,
    "select_token": _select_token,
    "flatten": _flatten,
}


def _as_shape(input_shape) -> tuple:
    if isinstance(input_shape, tuple) and input_shape and isinstance(input_shape[0], str):
        return input_shape
    dims = tuple(int(d) for d in input_shape)
    if len(dims) == 3:
        return ("chw",) + dims
    if len(dims) == 1:
        return ("seq", 1, dims[0])
    if len(dims) == 2:
        return ("seq",) + dims
    raise ValueError(f"cannot interpret input shape {input_shape}")


def count_layers(layers: Sequence, input_shape) -> FlopCount:
    count = FlopCount()
    _walk(parse_layers(layers), _as_shape(input_shape), count)
    return count


def count_model_flops(model, input_shape, flops_per_mac: int = 1) -> float:
    """Per-view GFLOPs of a layer description (or a built-in model name)."""
    if isinstance(model, str):
        model, default_shape = builtin_model(model)
        input_shape = input_shape or default_shape
    return count_layers(model, input_shape).gflops(flops_per_mac)


def parse_layers(spec) -> tuple:
    """Accept layer objects or dicts like ``{"kind": "conv2d", "out_channels": 32, ...}``."""
    out = []
    for item in spec:
        if not isinstance(item, dict):
            out.append(item)
            continue
        item = dict(item)
        kind = item.pop("kind", None)
        cls = LAYER_TYPES.get(kind)
        if cls is None:
            raise UnsupportedLayerError(f"unsupported layer kind {kind!r}")
        if kind == "residual":
            item["body"] = parse_layers(item.get("body", ()))
        allowed = {f.name for f in fields(cls) if f.init}
        unknown = set(item) - allowed
        if unknown:
            raise ValueError(f"unknown fields for {kind}: {sorted(unknown)}")
        out.append(cls(**item))
    return tuple(out)


# ------------------------------------------------------------ built-in models

# (expand ratio, kernel, stride, out channels, repeats)
EFFICIENTNET_B0_STAGES = (
    (1, 3, 1, 16, 1),
    (6, 3, 2, 24, 2),
    (6, 5, 2, 40, 2),
    (6, 3, 2, 80, 3),
    (6, 5, 1, 112, 3),
    (6, 5, 2, 192, 4),
    (6, 3, 1, 320, 1),
)


def _mbconv(cin: int, expand: int, kernel: int, stride: int, cout: int) -> list:
    hidden = cin * expand
    body = []
    if expand != 1:
        body += [Conv2d(hidden, 1), Norm(), Activation("silu")]
    body += [Conv2d(hidden, kernel, stride, groups=hidden), Norm(), Activation("silu"),
             SqueezeExcite(max(1, cin // 4)), Conv2d(cout, 1), Norm()]
    if stride == 1 and cin == cout:
        return [Residual(tuple(body))]
    return body


def efficientnet_b0_layers(in_channels: int = 2, input_norm: bool = True,
                           num_classes: Optional[int] = None) -> tuple:
    layers = [Norm()] if input_norm else []
    layers += [Conv2d(32, 3, 2), Norm(), Activation("silu")]
    cin = 32
    for expand, k, s, cout, repeats in EFFICIENTNET_B0_STAGES:
        for i in range(repeats):
            layers += _mbconv(cin, expand, k, s if i == 0 else 1, cout)
            cin = cout
    layers += [Conv2d(1280, 1), Norm(), Activation("silu"), Pool("global_avg"), Flatten()]
    if num_classes is not None:
        layers += [Dropout(), Linear(num_classes)]
    return tuple(layers)


def vit_layers(patch: int = 32, width: int = 768, depth: int = 12, heads: int = 12,
               mlp: int = 3072, out_dim: int = 512) -> tuple:
    """CLIP-style ViT image tower (pre-LN blocks, class-token readout, projection)."""
    block = (
        Residual((Norm("layernorm"), Attention(heads))),
        Residual((Norm("layernorm"), Linear(mlp), Activation("quick_gelu"), Linear(width))),
    )
    return (Conv2d(width, patch, patch, padding=0), PatchTokens(), Norm("layernorm"),
            *block * depth, SelectToken(), Norm("layernorm"), Linear(out_dim, bias=False))


def fusion_head_layers(num_classes: int = 101, in_dim: int = 1792, hidden: int = 512) -> tuple:
    return (Linear(hidden), Activation("relu"), Dropout(), Linear(num_classes))


def mv_head_layers(num_classes: int = 101) -> tuple:
    return (Linear(num_classes),)


BUILTIN_MODELS = {
    "efficientnet_b0_mv": (lambda: efficientnet_b0_layers(2), (2, 224, 224)),
    "efficientnet_b0_rgb": (lambda: efficientnet_b0_layers(3, input_norm=False, num_classes=1000),
                            (3, 224, 224)),
    "vit_b32": (lambda: vit_layers(), (3, 224, 224)),
    "fusion_head": (lambda: fusion_head_layers(), (1792,)),
    "mv_head": (lambda: mv_head_layers(), (1280,)),
}


def builtin_model(name: str):
    try:
        build, shape = BUILTIN_MODELS[name]
    except KeyError:
        raise UnsupportedLayerError(f"unknown model reference {name!r}") from None
    return build(), shape


# ------------------------------------------------------- torch module route

def count_module_macs(module, input_shape) -> FlopCount:
    """Count a real ``torch.nn.Module`` with forward hooks on its leaf modules.

    Only conv/linear MACs and leaf-level elementwise layers are visible this
    way (functional adds and multiplies are not), so this route is used to
    cross-check MACs of the declarative descriptions.
    """
    import torch
    from torch import nn
    from torchvision.ops import StochasticDepth

    passive = (nn.Dropout, nn.Identity, nn.Flatten, StochasticDepth)
    elementwise = (nn.BatchNorm2d, nn.LayerNorm, nn.ReLU, nn.SiLU, nn.GELU, nn.Sigmoid,
                   nn.Hardswish)
    pools = (nn.AdaptiveAvgPool2d, nn.AvgPool2d, nn.MaxPool2d)
    count = FlopCount()

    def hook(mod, inputs, out):
        if isinstance(mod, nn.Conv2d):
            k = mod.kernel_size[0] * mod.kernel_size[1] * mod.in_channels // mod.groups
            count.add("conv2d", macs=out.numel() * k,
                      elementwise=out.numel() if mod.bias is not None else 0)
        elif isinstance(mod, nn.Linear):
            count.add("linear", macs=inputs[0].numel() * mod.out_features,
                      elementwise=out.numel() if mod.bias is not None else 0)
        elif isinstance(mod, elementwise):
            count.add("elementwise", elementwise=out.numel())
        elif isinstance(mod, pools):
            count.add("pool", elementwise=inputs[0].numel())

    leaves = [m for m in module.modules() if not list(m.children())]
    for m in leaves:
        if not isinstance(m, (nn.Conv2d, nn.Linear, *passive, *elementwise, *pools)):
            raise UnsupportedLayerError(f"unsupported module {type(m).__name__}")
    handles = [m.register_forward_hook(hook) for m in leaves]
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            module(torch.zeros(1, *input_shape))
    finally:
        for h in handles:
            h.remove()
        module.train(was_training)
    return count


# ------------------------------------------------------------------- ledgers

@dataclass(frozen=True)
class BranchCost:
    name: str
    per_view_gflops: float
    n_temporal_views: int = 1
    n_spatial_crops: int = 1

    def __post_init__(self):
        if self.per_view_gflops < 0:
            raise ValueError("per-view cost must be non-negative")
        if self.n_temporal_views < 1 or self.n_spatial_crops < 1:
            raise ValueError("view counts must be >= 1")

    @property
    def total(self) -> float:
        return self.per_view_gflops * self.n_temporal_views * self.n_spatial_crops


@dataclass(frozen=True)
class FlopsLedger:
    branches: tuple
    head_gflops: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.head_gflops < 0:
            raise ValueError("head cost must be non-negative")


def flops_total(ledger: FlopsLedger) -> float:
    return sum(b.total for b in ledger.branches) + ledger.head_gflops


# Nominal (rounded) per-view costs; the counted values are checked
# against these in the test suite.
NOMINAL_PER_VIEW = {"clip": 4.4, "mv": 0.39}
NOMINAL_HEAD_GFLOPS = 0.05
MV_TEST_VIEWS = 32


def counted_per_view(flops_per_mac: int = 1) -> dict[str, float]:
    return {"clip": count_model_flops("vit_b32", None, flops_per_mac),
            "mv": count_model_flops("efficientnet_b0_mv", None, flops_per_mac),
            "fusion_head": count_model_flops("fusion_head", None, flops_per_mac)}


def builtin_ledgers(per_view: Optional[dict] = None,
                    head_gflops: float = NOMINAL_HEAD_GFLOPS) -> dict[str, FlopsLedger]:
    """Ledgers of the three in-scope methods.

    By default uses the nominal per-view and head costs; pass
    ``counted_per_view()`` and a counted head for the first-principles variant.
    """
    pv = dict(NOMINAL_PER_VIEW, **(per_view or {}))
    clip = BranchCost("clip", pv["clip"], 1, 1)
    mv = BranchCost("mv", pv["mv"], MV_TEST_VIEWS, 1)
    return {
        "clip-only": FlopsLedger((clip,), 0.0, "clip-only"),
        "mv-only": FlopsLedger((mv,), 0.0, "mv-only"),
        "fusion": FlopsLedger((mv, clip), head_gflops, "fusion"),
    }


def _branch_from_config(d: dict, flops_per_mac: int) -> BranchCost:
    name = d.get("name", "branch")
    if "per_view_gflops" in d:
        per_view = float(d["per_view_gflops"])
    elif "model" in d:
        shape = d.get("input_shape")
        per_view = count_model_flops(d["model"], tuple(shape) if shape else None, flops_per_mac)
    elif "layers" in d:
        per_view = count_layers(d["layers"], tuple(d["input_shape"])).gflops(flops_per_mac)
    else:
        raise ValueError(f"branch {name!r} needs per_view_gflops, model or layers")
    return BranchCost(name, per_view, int(d.get("temporal_views", 1)), int(d.get("spatial_crops", 1)))


def ledger_from_config(cfg: dict) -> FlopsLedger:
    fpm = int(cfg.get("flops_per_mac", 1))
    branches = tuple(_branch_from_config(b, fpm) for b in cfg.get("branches", ()))
    head = cfg.get("head_gflops", 0.0)
    if isinstance(head, dict):
        head = _branch_from_config(head, fpm).total
    return FlopsLedger(branches, float(head), cfg.get("name", ""))


def load_ledger(path: Union[str, Path]) -> FlopsLedger:
    """Read a ledger from a YAML or JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    cfg = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return ledger_from_config(cfg)


def format_cost_table(ledgers: dict[str, FlopsLedger], flops_per_mac: int = 1) -> str:
    rows = [("Method", "Branches", "Head", "Total GFLOPs")]
    for name, ledger in ledgers.items():
        parts = " + ".join(f"{b.name} {b.per_view_gflops:.4g}x{b.n_temporal_views}x{b.n_spatial_crops}"
                           for b in ledger.branches)
        rows.append((name, parts, f"{ledger.head_gflops:.4g}", f"{flops_total(ledger):.2f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    convention = "1 MAC = 1 FLOP" if flops_per_mac == 1 else f"1 MAC = {flops_per_mac} FLOPs"
    lines.append(f"({convention}; elementwise ops counted once per element)")
    return "\n".join(lines) + "\n"
