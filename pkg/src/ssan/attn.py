"""Non-local blocks and the separable self-attention (SSA) block.

All blocks take and return clips laid out B x T x C x H x W and add their
output back onto the input through a zero-initialised output transform, so a
freshly built block is the identity map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

AttnWeights = Dict[str, Tensor]

NL_MODES = ("temporal-1D", "spatial-2D", "spatiotemporal-3D", "stacked-2D+1D")


@dataclass(frozen=True)
class NlConfig:
    channels: int
    inner_dim: int | None = None
    mode: str = "spatiotemporal-3D"
    scaled: bool = False  # divide similarities by sqrt(contraction length)

    def __post_init__(self):
        if self.inner_dim is None:
            object.__setattr__(self, "inner_dim", max(1, self.channels // 2))
        if not 1 <= self.inner_dim <= self.channels:
            raise ValueError(f"inner_dim must be in [1, {self.channels}], got {self.inner_dim}")
        if self.mode not in NL_MODES:
            raise ValueError(f"unknown NL mode {self.mode!r}; expected one of {NL_MODES}")


@dataclass(frozen=True)
class SsaConfig:
    channels: int
    inner_dim: int | None = None
    temporal_kernel: int = 3
    enable_position_branch: bool = True
    enable_channel_branch: bool = True
    shared_value: bool = True
    softmax_spatial: bool = True
    softmax_temporal: bool = True
    scaled: bool = False

    def __post_init__(self):
        if self.inner_dim is None:
            object.__setattr__(self, "inner_dim", max(1, self.channels // 2))
        if not 1 <= self.inner_dim <= self.channels:
            raise ValueError(f"inner_dim must be in [1, {self.channels}], got {self.inner_dim}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError(f"temporal_kernel must be odd, got {self.temporal_kernel}")
        if not (self.enable_position_branch or self.enable_channel_branch):
            raise ValueError("at least one spatial branch must be enabled")


# -- parameter construction ----------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int, requires_grad: bool) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)


def _pointwise_params(rng, prefix: str, cin: int, cout: int, requires_grad: bool,
                      zero: bool = False) -> AttnWeights:
    if zero:
        return {f"{prefix}_w": Tensor(np.zeros((cout, cin)), requires_grad),
                f"{prefix}_b": Tensor(np.zeros(cout), requires_grad)}
    return {f"{prefix}_w": _uniform(rng, (cout, cin), cin, requires_grad),
            f"{prefix}_b": _uniform(rng, (cout,), cin, requires_grad)}


def _nl_single_params(rng, c: int, ci: int, requires_grad: bool, zero_wz: bool) -> AttnWeights:
    w: AttnWeights = {}
    for name in ("q", "k", "v"):
        w.update(_pointwise_params(rng, name, c, ci, requires_grad))
    # a key bias adds a per-row constant to q.k, which softmax cancels
    del w["k_b"]
    w.update(_pointwise_params(rng, "z", ci, c, requires_grad, zero=zero_wz))
    return w


def init_nl(cfg: NlConfig, rng: np.random.Generator, requires_grad: bool = True,
            zero_wz: bool = True) -> AttnWeights:
    """Weights for an NL block; stacked-2D+1D gets two independent sets
    prefixed ``spatial.`` and ``temporal.``."""
    c, ci = cfg.channels, cfg.inner_dim
    if cfg.mode != "stacked-2D+1D":
        return _nl_single_params(rng, c, ci, requires_grad, zero_wz)
    w: AttnWeights = {}
    for part in ("spatial", "temporal"):
        for k, v in _nl_single_params(rng, c, ci, requires_grad, zero_wz).items():
            w[f"{part}.{k}"] = v
    return w


def init_ssa(cfg: SsaConfig, rng: np.random.Generator, requires_grad: bool = True,
             zero_wz: bool = True) -> AttnWeights:
    c, ci, k = cfg.channels, cfg.inner_dim, cfg.temporal_kernel
    w: AttnWeights = {}
    for name in ("q", "k", "v"):
        w.update(_pointwise_params(rng, name, c, ci, requires_grad))
    for name in ("tq", "tk"):
        w[f"{name}_w"] = _uniform(rng, (ci, ci, k), ci * k, requires_grad)
    # temporal key bias would cancel in the row softmax over frames
    w["tq_b"] = _uniform(rng, (ci,), ci * k, requires_grad)
    if not cfg.shared_value:
        w.update(_pointwise_params(rng, "tv", ci, ci, requires_grad))
    w.update(_pointwise_params(rng, "z", ci, c, requires_grad, zero=zero_wz))
    return w


# -- helpers -------------------------------------------------------------------------


def _check_clip(x: Tensor, channels: int) -> tuple[int, int, int, int, int]:
    if x.ndim != 5 or x.shape[2] != channels:
        raise ShapeError(f"expected B x T x {channels} x H x W clip, got {x.shape}")
    return x.shape


def pointwise_clip(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """1x1 convolution applied frame by frame to a B x T x C x H x W clip."""
    bs, t, c, h, wi = x.shape
    y = tn.conv_pointwise(tn.reshape(x, (bs * t, c, h, wi)), w, b)
    return tn.reshape(y, (bs, t, w.shape[0], h, wi))


def _similarity(a: Tensor, b: Tensor, scaled: bool) -> Tensor:
    """a @ b, divided by sqrt of the summed-over length when ``scaled``.

    Unscaled products over thousands of entries saturate the softmax at init.
    """
    m = tn.matmul(a, b)
    return tn.scale(m, 1.0 / np.sqrt(a.shape[-1])) if scaled else m


def _maybe_softmax(m: Tensor, on: bool) -> Tensor:
    return tn.softmax_rows(m) if on else m


def _attend(q: Tensor, k: Tensor, v: Tensor, scaled: bool) -> Tensor:
    """q: G x P x D, k: G x D x P, v: G x P x D -> G x P x D."""
    return tn.matmul(tn.softmax_rows(_similarity(q, k, scaled)), v)


# -- non-local blocks ----------------------------------------------------------------


def _nl_attention(x: Tensor, w: AttnWeights, mode: str, prefix: str = "",
                  scaled: bool = False) -> Tensor:
    bs, t, c, h, wi = x.shape
    q = pointwise_clip(x, w[prefix + "q_w"], w[prefix + "q_b"])
    k = pointwise_clip(x, w[prefix + "k_w"], w.get(prefix + "k_b"))
    v = pointwise_clip(x, w[prefix + "v_w"], w[prefix + "v_b"])
    ci = q.shape[2]
    n = h * wi
    if mode == "spatiotemporal-3D":
        # positions ordered (t, h, w)
        rows = lambda e: tn.reshape(tn.transpose(e, (0, 1, 3, 4, 2)), (bs, t * n, ci))
        cols = tn.reshape(tn.transpose(k, (0, 2, 1, 3, 4)), (bs, ci, t * n))
        y = _attend(rows(q), cols, rows(v), scaled)
        y = tn.transpose(tn.reshape(y, (bs, t, h, wi, ci)), (0, 1, 4, 2, 3))
    elif mode == "spatial-2D":
        rows = lambda e: tn.transpose(tn.reshape(e, (bs * t, ci, n)), (0, 2, 1))
        cols = tn.reshape(k, (bs * t, ci, n))
        y = _attend(rows(q), cols, rows(v), scaled)
        y = tn.reshape(tn.transpose(y, (0, 2, 1)), (bs, t, ci, h, wi))
    elif mode == "temporal-1D":
        # one length-T sequence per spatial location
        rows = lambda e: tn.reshape(tn.transpose(e, (0, 3, 4, 1, 2)), (bs * n, t, ci))
        cols = tn.reshape(tn.transpose(k, (0, 3, 4, 2, 1)), (bs * n, ci, t))
        y = _attend(rows(q), cols, rows(v), scaled)
        y = tn.transpose(tn.reshape(y, (bs, h, wi, t, ci)), (0, 3, 4, 1, 2))
    else:
        raise ValueError(f"unknown NL mode {mode!r}")
    z = pointwise_clip(y, w[prefix + "z_w"], w[prefix + "z_b"])
    return tn.add(z, x)


def nl_block(x: Tensor, cfg: NlConfig, w: AttnWeights) -> Tensor:
    """Non-local block ``W_z(softmax(q k) v) + x`` in the configured mode."""
    _check_clip(x, cfg.channels)
    if cfg.mode == "stacked-2D+1D":
        x = _nl_attention(x, w, "spatial-2D", "spatial.", cfg.scaled)
        return _nl_attention(x, w, "temporal-1D", "temporal.", cfg.scaled)
    return _nl_attention(x, w, cfg.mode, scaled=cfg.scaled)


# -- separable self-attention --------------------------------------------------------


def spatial_embeddings(x: Tensor, w: AttnWeights) -> tuple[Tensor, Tensor, Tensor]:
    return (pointwise_clip(x, w["q_w"], w["q_b"]),
            pointwise_clip(x, w["k_w"], w["k_b"]),
            pointwise_clip(x, w["v_w"], w["v_b"]))


def _spatial_maps(x: Tensor, cfg: SsaConfig, w: AttnWeights):
    bs, t, c, h, wi = _check_clip(x, cfg.channels)
    q, k, v = spatial_embeddings(x, w)
    frames, n = bs * t, h * wi
    q_cn = tn.reshape(q, (frames, cfg.inner_dim, n))
    k_cn = tn.reshape(k, (frames, cfg.inner_dim, n))
    m_s = m_c = None
    if cfg.enable_position_branch:
        m_s = _maybe_softmax(_similarity(tn.transpose(q_cn, (0, 2, 1)), k_cn, cfg.scaled),
                             cfg.softmax_spatial)  # F x N x N
    if cfg.enable_channel_branch:
        m_c = _maybe_softmax(_similarity(q_cn, tn.transpose(k_cn, (0, 2, 1)), cfg.scaled),
                             cfg.softmax_spatial)  # F x Ci x Ci
    return m_s, m_c, tn.reshape(v, (frames, cfg.inner_dim, n))


def spatial_maps(x: Tensor, cfg: SsaConfig, w: AttnWeights) -> tuple[Tensor | None, Tensor | None]:
    """Per-frame position (N x N) and channel (Ci x Ci) attention matrices;
    None for a disabled branch."""
    m_s, m_c, _ = _spatial_maps(x, cfg, w)
    return m_s, m_c


def spatial_attention(x: Tensor, cfg: SsaConfig, w: AttnWeights) -> Tensor:
    """Per-frame position and channel attention, stacked back along time.

    Both branches share the query, key and value embeddings. The position
    branch mixes the H*W locations of a frame, the channel branch mixes the
    inner channels using similarities summed over locations.
    """
    bs, t, c, h, wi = _check_clip(x, cfg.channels)
    m_s, m_c, v_cn = _spatial_maps(x, cfg, w)
    out = None
    if m_s is not None:
        out = tn.transpose(tn.matmul(m_s, tn.transpose(v_cn, (0, 2, 1))), (0, 2, 1))
    if m_c is not None:
        chan = tn.matmul(m_c, v_cn)
        out = chan if out is None else tn.add(out, chan)
    return tn.reshape(out, (bs, t, cfg.inner_dim, h, wi))


def temporal_attention(xh: Tensor, cfg: SsaConfig, w: AttnWeights) -> Tensor:
    """Attention over frames of the spatial attention maps.

    Queries and keys come from temporal convolutions, so neighbouring frames
    feed each similarity. The value is the maps themselves when the value
    embedding is shared, else a further 1x1 projection.
    """
    bs, t, ci, h, wi = _check_clip(xh, cfg.inner_dim)
    d = ci * h * wi
    q = tn.reshape(tn.conv_temporal(xh, w["tq_w"], w["tq_b"]), (bs, t, d))
    k = tn.reshape(tn.conv_temporal(xh, w["tk_w"], w.get("tk_b")), (bs, t, d))
    m_t = _maybe_softmax(_similarity(q, tn.transpose(k, (0, 2, 1)), cfg.scaled),
                         cfg.softmax_temporal)
    if cfg.shared_value:
        v = tn.reshape(xh, (bs, t, d))
    else:
        v = tn.reshape(pointwise_clip(xh, w["tv_w"], w["tv_b"]), (bs, t, d))
    return tn.reshape(tn.matmul(m_t, v), (bs, t, ci, h, wi))


def ssa_forward(x: Tensor, cfg: SsaConfig, w: AttnWeights) -> Tensor:
    """Spatial then temporal attention, projected back to C channels, plus x."""
    _check_clip(x, cfg.channels)
    y = temporal_attention(spatial_attention(x, cfg, w), cfg, w)
    return tn.add(pointwise_clip(y, w["z_w"], w["z_b"]), x)


def param_count(w: AttnWeights) -> int:
    return sum(p.size for p in w.values())
