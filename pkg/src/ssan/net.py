"""TSN-style per-frame CNN with attention blocks at chosen stages.

Frames go through the 2D layers independently (the batch and time axes are
folded together); only attention blocks see the time axis. Features are
averaged over time once, right after global pooling, and then classified.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import attn
from . import tensor as tn
from .tensor import ShapeError, Tensor, no_tape

LAYER_KINDS = (
    "conv2d",
    "depthwise-conv2d",
    "pointwise-conv2d",
    "batchnorm",
    "relu",
    "avgpool",
    "global-avgpool",
    "linear",
    "attn-insert",
)
CONV_KINDS = ("conv2d", "depthwise-conv2d", "pointwise-conv2d")


class ArchError(ValueError):
    """ArchSpec is malformed or its channel chain is inconsistent."""


@dataclass
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int | None = None
    groups: int = 1
    bias: bool = True
    stage: int | None = None
    # attention: {"type": "ssa" | "nl", plus SsaConfig / NlConfig fields}
    attention: dict | None = None

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding

    def to_dict(self) -> dict:
        defaults = LayerSpec(self.kind)
        d = {"kind": self.kind}
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name != "kind" and val != getattr(defaults, f.name):
                d[f.name] = val
        return d


@dataclass
class ArchSpec:
    in_channels: int
    height: int
    width: int
    layers: list[LayerSpec] = field(default_factory=list)
    name: str = ""

    @property
    def num_classes(self) -> int:
        heads = [l for l in self.layers if l.kind == "linear"]
        if not heads:
            raise ArchError("spec has no linear head")
        return heads[-1].out_channels

    def with_classes(self, num_classes: int) -> "ArchSpec":
        layers = list(self.layers)
        for i in range(len(layers) - 1, -1, -1):
            if layers[i].kind == "linear":
                layers[i] = replace(layers[i], out_channels=num_classes)
                break
        else:
            raise ArchError("spec has no linear head")
        return replace(self, layers=layers)

    def to_dict(self) -> dict:
        return {"name": self.name, "in_channels": self.in_channels, "height": self.height,
                "width": self.width, "layers": [l.to_dict() for l in self.layers]}

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = {f.name for f in fields(LayerSpec)}
        layers = []
        for rec in d["layers"]:
            if "kind" not in rec:
                raise ArchError(f"layer record without 'kind': {rec}")
            unknown = set(rec) - known
            if unknown:
                raise ArchError(f"unknown layer fields {sorted(unknown)} in {rec}")
            layers.append(LayerSpec(**rec))
        return cls(in_channels=d["in_channels"], height=d["height"], width=d["width"],
                   layers=layers, name=d.get("name", ""))

    @classmethod
    def from_json(cls, text_or_path: str | Path) -> "ArchSpec":
        p = Path(text_or_path)
        text = p.read_text() if p.suffix == ".json" and p.exists() else str(text_or_path)
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        """Check layer kinds, the channel chain and the single fusion point."""
        ch = self.in_channels
        fused = False
        for i, l in enumerate(self.layers):
            where = f"layer {i} ({l.kind})"
            if l.kind not in LAYER_KINDS:
                raise ArchError(f"{where}: unknown layer kind")
            if l.kind in CONV_KINDS or l.kind in ("linear", "batchnorm", "attn-insert"):
                if l.in_channels != ch:
                    raise ArchError(f"{where}: expects {l.in_channels} input channels, "
                                    f"previous layer gives {ch}")
            if l.kind in CONV_KINDS:
                if fused:
                    raise ArchError(f"{where}: convolution after temporal fusion")
                if l.kind == "depthwise-conv2d" and l.groups != l.in_channels:
                    raise ArchError(f"{where}: depthwise conv needs groups == in_channels")
                if l.kind == "pointwise-conv2d" and l.kernel != 1:
                    raise ArchError(f"{where}: pointwise conv needs kernel 1")
                if l.in_channels % l.groups or l.out_channels % l.groups:
                    raise ArchError(f"{where}: channels not divisible by groups={l.groups}")
                ch = l.out_channels
            elif l.kind == "linear":
                if not fused:
                    raise ArchError(f"{where}: linear head before global-avgpool")
                ch = l.out_channels
            elif l.kind == "global-avgpool":
                if fused:
                    raise ArchError(f"{where}: second fusion point")
                fused = True
            elif l.kind == "attn-insert":
                if fused:
                    raise ArchError(f"{where}: attention after temporal fusion")
                if not l.attention or l.attention.get("type") not in ("ssa", "nl"):
                    raise ArchError(f"{where}: attention record needs type 'ssa' or 'nl'")
                attention_config(l)
        if not fused:
            raise ArchError("spec has no global-avgpool fusion point")


def attention_config(layer: LayerSpec) -> attn.SsaConfig | attn.NlConfig:
    opts = dict(layer.attention or {})
    kind = opts.pop("type", None)
    if kind == "ssa":
        return attn.SsaConfig(channels=layer.in_channels, **opts)
    if kind == "nl":
        return attn.NlConfig(channels=layer.in_channels, **opts)
    raise ArchError(f"unknown attention type {kind!r}")


def toy_arch(num_classes: int = 2, in_channels: int = 1, size: int = 32,
             widths: Sequence[int] = (8, 16, 32), attention: dict | None = None,
             stages: Iterable[int] = (2, 3), conv_bias: bool = True) -> ArchSpec:
    """Desk-scale backbone: per stage pointwise conv, 3x3 conv, relu, 2x2 pool.

    When ``attention`` is given, an attn-insert record is placed right after
    the first pointwise conv of every stage in ``stages`` (1-based).
    """
    stages = set(stages) if attention else set()
    layers: list[LayerSpec] = []
    ch = in_channels
    for s, width in enumerate(widths, start=1):
        layers.append(LayerSpec("pointwise-conv2d", ch, width, kernel=1, bias=conv_bias, stage=s))
        if s in stages:
            layers.append(LayerSpec("attn-insert", width, width, stage=s, attention=dict(attention)))
        layers.append(LayerSpec("conv2d", width, width, kernel=3, bias=conv_bias, stage=s))
        layers.append(LayerSpec("relu", stage=s))
        layers.append(LayerSpec("avgpool", kernel=2, stride=2, stage=s))
        ch = width
    layers.append(LayerSpec("global-avgpool"))
    layers.append(LayerSpec("linear", ch, num_classes))
    name = "toy" if not stages else f"toy+{attention.get('type')}@{sorted(stages)}"
    return ArchSpec(in_channels, size, size, layers, name=name)


@dataclass
class VideoBatch:
    clips: np.ndarray  # B x T x C x H x W
    labels: np.ndarray  # B

    def __post_init__(self):
        self.clips = np.asarray(self.clips, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.clips.ndim != 5 or self.labels.shape != (self.clips.shape[0],):
            raise ShapeError(f"VideoBatch: clips {self.clips.shape} vs labels {self.labels.shape}")


def _layer_rng(seed: int, group: int, index: int) -> np.random.Generator:
    # keyed per layer so inserting attention leaves other layers' weights alone
    return np.random.default_rng([seed, group, index])


# He-uniform for convs keeps activations from shrinking through the relu stack
CONV_GAIN = float(np.sqrt(6.0))


def _uniform(rng, shape, fan_in, gain: float = 1.0) -> Tensor:
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Model:
    """Instantiated ArchSpec. ``params[i]`` holds layer i's tensors by name."""

    def __init__(self, spec: ArchSpec, params: list[dict[str, Tensor]]):
        self.spec = spec
        self.params = params
        self.configs = [attention_config(l) if l.kind == "attn-insert" else None
                        for l in spec.layers]

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def insertion_stages(self) -> set[int]:
        return {l.stage for l in self.spec.layers if l.kind == "attn-insert"}

    def parameters(self) -> list[Tensor]:
        return [t for p in self.params for t in p.values()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{i}.{name}", t) for i, p in enumerate(self.params) for name, t in p.items()]

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def forward(self, clips: Tensor) -> Tensor:
        return self._run(clips, len(self.spec.layers))

    def _run(self, clips: Tensor, stop: int) -> Tensor:
        """Apply the first ``stop`` layers."""
        if clips.ndim != 5:
            raise ShapeError(f"expected B x T x C x H x W input, got {clips.shape}")
        b, t, c, h, w = clips.shape
        if (c, h, w) != (self.spec.in_channels, self.spec.height, self.spec.width):
            raise ShapeError(f"input frames {(c, h, w)} do not match spec "
                             f"{(self.spec.in_channels, self.spec.height, self.spec.width)}")
        x = tn.reshape(clips, (b * t, c, h, w))
        for layer, p, cfg in zip(self.spec.layers[:stop], self.params, self.configs):
            k = layer.kind
            if k in CONV_KINDS:
                if k == "pointwise-conv2d" and layer.stride == 1 and layer.groups == 1:
                    x = tn.conv_pointwise(x, tn.reshape(p["w"], p["w"].shape[:2]), p.get("b"))
                else:
                    x = tn.conv2d(x, p["w"], p.get("b"), stride=layer.stride,
                                  padding=layer.pad, groups=layer.groups)
            elif k == "batchnorm":
                x = tn.channel_affine(x, p["gamma"], p["beta"])
            elif k == "relu":
                x = tn.relu(x)
            elif k == "avgpool":
                x = tn.avgpool2d(x, layer.kernel)
            elif k == "attn-insert":
                n, ch, hh, ww = x.shape
                x5 = tn.reshape(x, (b, t, ch, hh, ww))
                if isinstance(cfg, attn.SsaConfig):
                    x5 = attn.ssa_forward(x5, cfg, p)
                else:
                    x5 = attn.nl_block(x5, cfg, p)
                x = tn.reshape(x5, (n, ch, hh, ww))
            elif k == "global-avgpool":
                feats = tn.mean(x, (2, 3))  # (B*T) x C
                x = tn.mean(tn.reshape(feats, (b, t, feats.shape[1])), 1)  # temporal fusion
            elif k == "linear":
                x = tn.linear(x, p["w"], p.get("b"))
        return x


def build_backbone(spec: ArchSpec, seed: int = 0) -> Model:
    """Instantiate ``spec`` with weights drawn deterministically from ``seed``.

    Convolution weights are He-uniform (bound sqrt(6/fan_in)); biases and the
    head are uniform in +-1/sqrt(fan_in); batchnorm
    starts at scale 1, shift 0; attention blocks start with a zero output
    transform.
    """
    spec.validate()
    params: list[dict[str, Tensor]] = []
    plain = attn_idx = 0
    for layer in spec.layers:
        p: dict[str, Tensor] = {}
        if layer.kind == "attn-insert":
            rng = _layer_rng(seed, 1, attn_idx)
            attn_idx += 1
            cfg = attention_config(layer)
            p = attn.init_ssa(cfg, rng) if isinstance(cfg, attn.SsaConfig) else attn.init_nl(cfg, rng)
        else:
            rng = _layer_rng(seed, 0, plain)
            plain += 1
            if layer.kind in CONV_KINDS:
                cg = layer.in_channels // layer.groups
                fan_in = cg * layer.kernel * layer.kernel
                p["w"] = _uniform(rng, (layer.out_channels, cg, layer.kernel, layer.kernel), fan_in,
                                  CONV_GAIN)
                if layer.bias:
                    p["b"] = _uniform(rng, (layer.out_channels,), fan_in)
            elif layer.kind == "linear":
                p["w"] = _uniform(rng, (layer.out_channels, layer.in_channels), layer.in_channels)
                if layer.bias:
                    p["b"] = _uniform(rng, (layer.out_channels,), layer.in_channels)
            elif layer.kind == "batchnorm":
                p["gamma"] = Tensor(np.ones(layer.in_channels), requires_grad=True)
                p["beta"] = Tensor(np.zeros(layer.in_channels), requires_grad=True)
        params.append(p)
    return Model(spec, params)


def rescale_to_unit_rms(m: Model, clips: np.ndarray) -> list[float]:
    """Data-dependent init: scale each conv, first to last, so its output has
    unit RMS on ``clips``. Returns the applied factors.

    The network function class is unchanged; only the starting scale of the
    features (and with it the temperature of unscaled attention logits)
    stops depending on the init seed. Attention blocks are the identity at
    this point, so models with and without them get identical factors.
    """
    x = Tensor._wrap(np.asarray(clips, dtype=np.float64))
    factors = []
    with no_tape():
        for i, layer in enumerate(m.spec.layers):
            if layer.kind not in CONV_KINDS:
                continue
            rms = float(np.sqrt(np.mean(m._run(x, i + 1).data ** 2)))
            f = 1.0 / rms if rms > 0 else 1.0
            for t in m.params[i].values():
                t.data = t.data * f
            factors.append(f)
    return factors


def forward_classify(m: Model, batch: VideoBatch | np.ndarray | Tensor) -> Tensor:
    """Logits B x K for a batch of clips."""
    if isinstance(batch, VideoBatch):
        clips = Tensor._wrap(batch.clips)
    elif isinstance(batch, Tensor):
        clips = batch
    else:
        clips = Tensor(batch)
    return m.forward(clips)


def sample_segments(clip_length: int, num_segments: int, mode: str = "center",
                    seed: int | np.random.Generator | None = None) -> list[int]:
    """One frame index per uniform segment of the clip.

    ``center`` picks ``start + (segment length) // 2``; ``random`` draws
    uniformly inside each segment.
    """
    if num_segments < 1 or clip_length < num_segments:
        raise ValueError(f"need clip_length >= num_segments >= 1, got "
                         f"{clip_length} and {num_segments}")
    bounds = [(i * clip_length) // num_segments for i in range(num_segments + 1)]
    if mode == "center":
        return [lo + (hi - lo) // 2 for lo, hi in zip(bounds, bounds[1:])]
    if mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return [int(rng.integers(lo, hi)) for lo, hi in zip(bounds, bounds[1:])]
    raise ValueError(f"unknown sampling mode {mode!r}")


def load_arch(obj: Any) -> ArchSpec:
    if isinstance(obj, ArchSpec):
        return obj
    if isinstance(obj, dict):
        return ArchSpec.from_dict(obj)
    return ArchSpec.from_json(obj)


__all__ = [
    "ArchError", "ArchSpec", "LayerSpec", "Model", "VideoBatch", "attention_config",
    "build_backbone", "forward_classify", "sample_segments", "toy_arch", "load_arch",
]
