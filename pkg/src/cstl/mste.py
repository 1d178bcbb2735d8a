"""Multi-scale temporal extraction: frame-level, short-term and long-term features.

All tensors at this boundary are ``[B, N, C, K]`` (batch, frame, channel, part).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .backbone import uniform_init
from .numkernel import ParamSet, Var

SCALES = ("frame", "short", "long")


@dataclass
class MultiScaleFeatures:
    frame: Var | None
    short: Var | None
    long: Var | None

    def enabled(self):
        """Enabled scales in fixed (frame, short, long) order."""
        return [t for t in (self.frame, self.short, self.long) if t is not None]


def short_term(P: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
    """Two serial kernel-3 temporal convs; the outputs of both are summed."""
    if P.shape[1] < 1:
        raise ValueError("short_term: sequence has no frames")
    x = nk.transpose(P, (0, 3, 2, 1))  # B,K,C,N
    c1 = nk.conv1d_temporal(x, w1, b1)
    c2 = nk.conv1d_temporal(c1, w2, b2)
    return nk.transpose(c1 + c2, (0, 3, 2, 1))


def long_term(P: Var, fc1_w: Var, fc1_b: Var, fc2_w: Var, fc2_b: Var) -> Var:
    """Sigmoid-gated weighted mean over all frames, broadcast back along N."""
    B, N, C, K = P.shape
    x = nk.transpose(P, (0, 1, 3, 2))  # B,N,K,C
    s = nk.sigmoid(nk.linear(nk.relu(nk.linear(x, fc1_w, fc1_b)), fc2_w, fc2_b))
    s = nk.transpose(s, (0, 1, 3, 2))  # B,N,C,K
    num = nk.sum(s * P, axis=1, keepdims=True)
    den = nk.sum(s, axis=1, keepdims=True)
    return nk.broadcast_to(num / den, P.shape)


def hidden_width(channels: int, ratio: int = 16) -> int:
    return max(1, channels // ratio)


class MSTE:
    def __init__(self, params: ParamSet, rng, channels: int, scales=SCALES,
                 prefix="mste", dtype=np.float32):
        unknown = set(scales) - set(SCALES)
        if unknown or not scales:
            raise ValueError(f"invalid scale selection {scales!r}")
        self.scales = tuple(s for s in SCALES if s in scales)
        self.params = params
        self.prefix = prefix
        C = channels
        if "short" in self.scales:
            for i in (1, 2):
                params.add(f"{prefix}.short.conv{i}.w", uniform_init(rng, (C, C, 3), C * 3, dtype))
                params.add(f"{prefix}.short.conv{i}.b", np.zeros(C, dtype))
        if "long" in self.scales:
            h = hidden_width(C)
            params.add(f"{prefix}.long.fc1.w", uniform_init(rng, (C, h), C, dtype))
            params.add(f"{prefix}.long.fc1.b", np.zeros(h, dtype))
            params.add(f"{prefix}.long.fc2.w", uniform_init(rng, (h, C), h, dtype))
            params.add(f"{prefix}.long.fc2.b", np.zeros(C, dtype))

    def __call__(self, P: Var) -> MultiScaleFeatures:
        p, pre = self.params, self.prefix
        T_s = T_l = None
        if "short" in self.scales:
            T_s = short_term(P, p[f"{pre}.short.conv1.w"], p[f"{pre}.short.conv1.b"],
                             p[f"{pre}.short.conv2.w"], p[f"{pre}.short.conv2.b"])
        if "long" in self.scales:
            T_l = long_term(P, p[f"{pre}.long.fc1.w"], p[f"{pre}.long.fc1.b"],
                            p[f"{pre}.long.fc2.w"], p[f"{pre}.long.fc2.b"])
        return MultiScaleFeatures(P if "frame" in self.scales else None, T_s, T_l)
