"""Separable self-attention for video clips, with non-local baselines, a
small autodiff engine, a closed-form cost model and a toy temporal-order
benchmark."""
from . import attn, bench, cost, net, synth, tensor

__all__ = ["attn", "bench", "cost", "net", "synth", "tensor"]
__version__ = "0.1.0"
