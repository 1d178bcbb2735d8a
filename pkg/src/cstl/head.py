"""Per-part output mapping to the final ranking embedding."""
from __future__ import annotations

import numpy as np

from . import numkernel as nk
from .backbone import uniform_init
from .numkernel import ParamSet, Var


def output_forward(F_T: Var, F_S: Var | None, w: Var, b: Var) -> Var:
    """Concatenate ``F_T`` [B,K,C] and ``F_S`` [B,K,2C], then one FC per part.

    ``w`` is [K, Cin, C_e] and ``b`` is [K, C_e]; parts never share weights.
    """
    feats = [F_T] if F_S is None else [F_T, F_S]
    if F_S is not None and F_S.shape[1] != F_T.shape[1]:
        raise ValueError(f"part count mismatch: F_T has {F_T.shape[1]}, F_S has {F_S.shape[1]}")
    x = nk.concat(feats, axis=-1) if len(feats) > 1 else feats[0]
    if w.shape[0] != x.shape[1] or w.shape[1] != x.shape[2]:
        raise ValueError(f"head weight {w.shape} does not fit input {x.shape}")
    return nk.einsum("bkc,kce->bke", x, w) + b


class OutputHead:
    def __init__(self, params: ParamSet, rng, parts: int, in_channels: int, embed_dim: int = 256,
                 prefix="head", dtype=np.float32):
        self.params, self.prefix = params, prefix
        params.add(f"{prefix}.w", uniform_init(rng, (parts, in_channels, embed_dim), in_channels, dtype))
        params.add(f"{prefix}.b", np.zeros((parts, embed_dim), dtype))

    def __call__(self, F_T: Var, F_S: Var | None) -> Var:
        return output_forward(F_T, F_S, self.params[f"{self.prefix}.w"], self.params[f"{self.prefix}.b"])
