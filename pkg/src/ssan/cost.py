"""Closed-form parameter and multiply-accumulate (MAC) counts over ArchSpecs.

MACs follow the usual convention: a KxK conv costs
``Cout * Cin/groups * K * K * Hout * Wout`` per frame; bias adds, pooling,
batchnorm (foldable into the preceding conv), activations and softmax cost
nothing. Attention blocks are charged for their projections and for every
matrix product (similarity and aggregation).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .attn import NlConfig, SsaConfig
from .net import ArchError, ArchSpec, LayerSpec, attention_config

# (expansion t, output channels c, repeats n, first stride s)
MOBILENET_V2_SCHEDULE = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


@dataclass
class LayerCost:
    layer: str
    kind: str
    params: int
    macs: int
    attention_products: int = 0  # part of macs spent in attention matmuls


@dataclass
class CostReport:
    total_params: int
    total_macs: int
    breakdown: list[LayerCost] = field(default_factory=list)
    arch: str = ""
    input_shape: tuple[int, ...] = ()

    @property
    def attention_product_macs(self) -> int:
        return sum(l.attention_products for l in self.breakdown)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "attention_product_macs": self.attention_product_macs,
            "breakdown": [asdict(l) for l in self.breakdown],
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "kind", "params", "macs"])
        for l in self.breakdown:
            writer.writerow([l.layer, l.kind, l.params, l.macs])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


# -- attention blocks ----------------------------------------------------------------


def _pw(cin: int, cout: int) -> int:
    return cin * cout + cout


def ssa_params(cfg: SsaConfig) -> int:
    c, ci, k = cfg.channels, cfg.inner_dim, cfg.temporal_kernel
    p = 3 * _pw(c, ci)  # shared q/k/v for both spatial branches
    p += 2 * ci * ci * k + ci  # temporal query/key convs, query bias only
    if not cfg.shared_value:
        p += _pw(ci, ci)
    return p + _pw(ci, c)  # output transform


def ssa_cost(c: int, ci: int, t: int, h: int, w: int, cfg: SsaConfig | None = None,
             split: bool = False):
    """(params, macs) of one SSA block on a T x H x W clip with C channels.

    With ``split=True`` a third value gives the MACs of the attention
    matrix products alone.
    """
    if min(c, ci, t, h, w) <= 0:
        raise ValueError("all dimensions must be positive")
    if cfg is None:
        cfg = SsaConfig(channels=c, inner_dim=ci)
    elif (cfg.channels, cfg.inner_dim) != (c, ci):
        cfg = SsaConfig(**{**asdict(cfg), "channels": c, "inner_dim": ci})
    n = h * w
    k = cfg.temporal_kernel
    proj = 3 * c * ci * n * t + 2 * ci * ci * k * n * t + ci * c * n * t
    if not cfg.shared_value:
        proj += ci * ci * n * t
    products = 0
    if cfg.enable_position_branch:
        products += 2 * n * n * ci * t
    if cfg.enable_channel_branch:
        products += 2 * ci * ci * n * t
    products += 2 * t * t * ci * n
    macs = proj + products
    return (ssa_params(cfg), macs, products) if split else (ssa_params(cfg), macs)


def nl_params(cfg: NlConfig) -> int:
    # q, v and W_z carry biases; the key bias is dropped (softmax cancels it)
    single = 3 * _pw(cfg.channels, cfg.inner_dim) - cfg.inner_dim + _pw(cfg.inner_dim, cfg.channels)
    return 2 * single if cfg.mode == "stacked-2D+1D" else single


def nl_cost(cfg: NlConfig, t: int, h: int, w: int, split: bool = False):
    """(params, macs) of an NL block; ``split`` as in :func:`ssa_cost`."""
    c, ci, n = cfg.channels, cfg.inner_dim, h * w
    single_proj = 4 * c * ci * n * t
    pairs = {
        "spatiotemporal-3D": (t * n) ** 2,
        "spatial-2D": t * n * n,
        "temporal-1D": n * t * t,
    }
    if cfg.mode == "stacked-2D+1D":
        proj = 2 * single_proj
        products = 2 * ci * (pairs["spatial-2D"] + pairs["temporal-1D"])
    else:
        proj = single_proj
        products = 2 * ci * pairs[cfg.mode]
    out = (nl_params(cfg), proj + products)
    return (*out, products) if split else out


# -- whole architectures -------------------------------------------------------------


def _conv_out(size: int, layer: LayerSpec) -> int:
    return (size + 2 * layer.pad - layer.kernel) // layer.stride + 1


def layer_params(layer: LayerSpec) -> int:
    k = layer.kind
    if k in ("conv2d", "depthwise-conv2d", "pointwise-conv2d"):
        p = layer.out_channels * (layer.in_channels // layer.groups) * layer.kernel ** 2
        return p + (layer.out_channels if layer.bias else 0)
    if k == "linear":
        return layer.in_channels * layer.out_channels + (layer.out_channels if layer.bias else 0)
    if k == "batchnorm":
        return 2 * layer.in_channels
    if k == "attn-insert":
        cfg = attention_config(layer)
        return ssa_params(cfg) if isinstance(cfg, SsaConfig) else nl_params(cfg)
    if k in ("relu", "avgpool", "global-avgpool"):
        return 0
    raise ArchError(f"unknown layer kind {k!r}")


def cost_report(spec: ArchSpec, input_shape: Sequence[int] | None = None,
                num_classes: int | None = None) -> CostReport:
    """Per-layer params and MACs for a B x T x C x H x W input."""
    if num_classes is not None:
        spec = spec.with_classes(num_classes)
    if input_shape is None:
        input_shape = (1, 1, spec.in_channels, spec.height, spec.width)
    b, t, c, h, w = input_shape
    if c != spec.in_channels:
        raise ArchError(f"input has {c} channels, spec expects {spec.in_channels}")
    rows: list[LayerCost] = []
    for i, layer in enumerate(spec.layers):
        k = layer.kind
        params = layer_params(layer)
        macs = products = 0
        if k in ("conv2d", "depthwise-conv2d", "pointwise-conv2d"):
            h, w = _conv_out(h, layer), _conv_out(w, layer)
            if h <= 0 or w <= 0:
                raise ValueError(f"layer {i} ({k}): spatial dims become non-positive")
            per_frame = layer.out_channels * (layer.in_channels // layer.groups) * layer.kernel ** 2
            macs = per_frame * h * w * b * t
        elif k == "avgpool":
            h, w = h // layer.kernel, w // layer.kernel
            if h <= 0 or w <= 0:
                raise ValueError(f"layer {i} ({k}): spatial dims become non-positive")
        elif k == "global-avgpool":
            h = w = 1
        elif k == "linear":
            macs = layer.in_channels * layer.out_channels * b  # applied once per clip
        elif k == "attn-insert":
            cfg = attention_config(layer)
            if isinstance(cfg, SsaConfig):
                _, m, products = ssa_cost(cfg.channels, cfg.inner_dim, t, h, w, cfg, split=True)
            else:
                _, m, products = nl_cost(cfg, t, h, w, split=True)
            macs, products = m * b, products * b
        else:
            layer_params(layer)  # rejects unknown kinds
        rows.append(LayerCost(f"{i}", k, params, macs, products))
    return CostReport(sum(r.params for r in rows), sum(r.macs for r in rows), rows,
                      arch=spec.name, input_shape=tuple(input_shape))


def count_params(spec: ArchSpec, num_classes: int | None = None) -> int:
    if num_classes is not None:
        spec = spec.with_classes(num_classes)
    return sum(layer_params(l) for l in spec.layers)


def count_macs(spec: ArchSpec, input_shape: Sequence[int]) -> int:
    return cost_report(spec, input_shape).total_macs


# -- MobileNet-V2 --------------------------------------------------------------------


def make_divisible(value: float, divisor: int = 8) -> int:
    new = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if new < 0.9 * value:
        new += divisor
    return new


def mobilenet_v2(num_classes: int = 1000, width_mult: float = 1.0, size: int = 224,
                 with_ssa: bool = False, ssa_stages: Sequence[int] = (2, 3),
                 ssa_reduction: int = 8) -> ArchSpec:
    """MobileNet-V2 as a flat ArchSpec (bias-free convs, each followed by
    batchnorm). Residual additions are omitted: they add neither parameters
    nor MACs under this convention.

    With ``with_ssa`` an SSA block (inner dim = channels // ssa_reduction)
    follows the expansion 1x1 conv of every inverted-residual block in the
    schedule rows listed in ``ssa_stages`` (1-based).
    """
    layers: list[LayerSpec] = []

    def conv_bn(kind, cin, cout, kernel, stride, groups=1, act=True, stage=None, extra=None):
        layers.append(LayerSpec(kind, cin, cout, kernel=kernel, stride=stride,
                                groups=groups, bias=False, stage=stage))
        if extra is not None:
            layers.append(extra)
        layers.append(LayerSpec("batchnorm", cout, cout, stage=stage))
        if act:
            layers.append(LayerSpec("relu", stage=stage))

    cin = make_divisible(32 * width_mult)
    last = make_divisible(1280 * max(1.0, width_mult))
    conv_bn("conv2d", 3, cin, 3, 2, stage=0)
    for s, (t, c, n, stride) in enumerate(MOBILENET_V2_SCHEDULE, start=1):
        cout = make_divisible(c * width_mult)
        for i in range(n):
            hidden = int(round(cin * t))
            if t != 1:
                ssa = None
                if with_ssa and s in ssa_stages:
                    ssa = LayerSpec("attn-insert", hidden, hidden, stage=s, attention={
                        "type": "ssa", "inner_dim": max(1, hidden // ssa_reduction)})
                conv_bn("pointwise-conv2d", cin, hidden, 1, 1, stage=s, extra=ssa)
            conv_bn("depthwise-conv2d", hidden, hidden, 3, stride if i == 0 else 1,
                    groups=hidden, stage=s)
            conv_bn("pointwise-conv2d", hidden, cout, 1, 1, act=False, stage=s)
            cin = cout
    conv_bn("pointwise-conv2d", cin, last, 1, 1, stage=len(MOBILENET_V2_SCHEDULE) + 1)
    layers.append(LayerSpec("global-avgpool"))
    layers.append(LayerSpec("linear", last, num_classes))
    name = "mobilenet_v2" + ("+ssa" if with_ssa else "")
    return ArchSpec(3, size, size, layers, name=name)
