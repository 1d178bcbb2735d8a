"""Frame-level CNN and horizontal part pooling."""
from __future__ import annotations

import numpy as np

from . import numkernel as nk
from .numkernel import ParamSet, Var

# Channel widths of the four 3x3 conv layers; max-pool follows the second.
PROFILES = {
    "full": (32, 64, 128, 128),
    "toy": (8, 16, 32, 32),
    "large": (64, 128, 256, 256),
}
SUPPORTED_RESOLUTIONS = {(64, 44), (128, 88)}


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Backbone:
    """Four conv layers (pad 1, leaky ReLU) with a 2x2 max-pool after the second.

    Parameters are registered in ``params`` under ``prefix``.  ``channels`` is
    either a profile name or an explicit 4-tuple of widths.
    """

    def __init__(self, params: ParamSet, rng, channels="toy", in_channels=1,
                 prefix="backbone", dtype=np.float32, strict_resolution=True):
        widths = PROFILES[channels] if isinstance(channels, str) else tuple(channels)
        if len(widths) != 4:
            raise ValueError(f"backbone needs 4 channel widths, got {widths}")
        self.widths = widths
        self.prefix = prefix
        self.strict_resolution = strict_resolution
        self.params = params
        cin = in_channels
        for i, cout in enumerate(widths, start=1):
            params.add(f"{prefix}.conv{i}.w", uniform_init(rng, (cout, cin, 3, 3), cin * 9, dtype))
            params.add(f"{prefix}.conv{i}.b", np.zeros(cout, dtype))
            cin = cout

    @property
    def out_channels(self):
        return self.widths[-1]

    def __call__(self, G: Var) -> Var:
        return backbone_forward(G, self.params, self.prefix, self.strict_resolution)


def backbone_forward(G: Var, params: ParamSet, prefix="backbone", strict_resolution=True) -> Var:
    """``G`` is ``[B, N, 1, H, W]``; returns ``[B, N, C, H/2, W/2]``.

    Frames are folded into the batch axis, so there is no temporal mixing.
    """
    if G.ndim != 5:
        raise ValueError(f"backbone expects [B,N,1,H,W], got shape {G.shape}")
    B, N, cin, H, W = G.shape
    if strict_resolution and (H, W) not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"unsupported resolution {H}x{W}; expected 64x44 or 128x88")
    x = nk.reshape(G, (B * N, cin, H, W))
    for i in range(1, 5):
        x = nk.leaky_relu(nk.conv2d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], pad=1))
        if i == 2:
            x = nk.max_pool2d(x, 2, 2)
    _, C, Hp, Wp = x.shape
    return nk.reshape(x, (B, N, C, Hp, Wp))


def part_pool(F: Var, K: int) -> Var:
    """Split the height axis into ``K`` strips; max + mean over each strip.

    ``F`` is ``[B, N, C, H, W]``; the result is ``[B, N, C, K]``.
    """
    B, N, C, H, W = F.shape
    if K < 1 or H % K:
        raise ValueError(f"part count {K} does not divide feature height {H}")
    strips = nk.reshape(F, (B, N, C, K, (H // K) * W))
    return nk.reduce_max(strips, axis=-1) + nk.mean(strips, axis=-1)
