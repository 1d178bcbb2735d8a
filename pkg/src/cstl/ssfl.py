"""Salient spatial feature learning.

Unnormalised multi-head attention scores rank the frames for every part; the
top frame's part feature is hard-copied per head (recombination) and fused
with the score-weighted feature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .ata import init_attention_weights, split_heads
from .backbone import uniform_init
from .numkernel import ParamSet, Var


@dataclass
class PartScores:
    A_s: Var              # [B, H, K, N, N] raw attention
    scores: Var           # [B, H, K, N]
    index: np.ndarray     # [B, H, K] int, argmax over frames


@dataclass
class SSFLOutput:
    F_S: Var              # [B, K, 2C]
    F_w: Var              # [B, H, K, C]
    F_r: Var              # [B, H, K, C]
    logits: Var | None    # [B, H, K, C_t]
    scores: PartScores


def fuse_scales(scales: list[Var], w: Var, b: Var) -> Var:
    """Concat [B,N,C,K] scales on channels and map back to C; returns [B,N,K,C]."""
    cat = nk.concat([nk.transpose(t, (0, 1, 3, 2)) for t in scales], axis=-1)
    return nk.linear(cat, w, b)


def part_scores(S_in: Var, wq: Var, wk: Var) -> PartScores:
    """``S_in`` is [B,N,K,C]. No scaling and no softmax on the scores.

    The squeeze sums the raw attention over its first frame axis, so
    ``scores[..., n] = sum_m A_s[..., m, n]``.
    """
    x = nk.transpose(S_in, (0, 2, 1, 3))  # B,K,N,C
    q = split_heads(x, wq)
    k = split_heads(x, wk)
    A_s = nk.einsum("bhkmd,bhknd->bhkmn", q, k)
    scores = nk.sum(A_s, axis=3)
    index = np.argmax(scores.data, axis=-1)
    return PartScores(A_s, scores, index)


def weighted_feature(T_f: Var, scores: Var) -> Var:
    """``F_w[b,h,k,c] = sum_n T_f[b,n,c,k] * scores[b,h,k,n]``."""
    return nk.einsum("bnck,bhkn->bhkc", T_f, scores)


def classify_logits(F_w: Var, w: Var, b: Var) -> Var:
    if w.shape[1] < 2:
        raise ValueError("classifier needs at least 2 training identities")
    return nk.linear(F_w, w, b)


def recombine(T_f: Var, index: np.ndarray) -> Var:
    """Hard gather ``F_r[b,h,k,:] = T_f[b, index[b,h,k], :, k]``."""
    B, N, C, K = T_f.shape
    if index.size and (index.min() < 0 or index.max() >= N):
        raise IndexError("selection index out of frame range")
    src = nk.transpose(T_f, (0, 3, 1, 2))  # B,K,N,C
    H = index.shape[1]
    src = nk.broadcast_to(nk.reshape(src, (B, 1, K, N, C)), (B, H, K, N, C))
    idx = index[:, :, :, None, None].repeat(C, axis=-1)
    return nk.reshape(nk.take_along(src, idx, axis=3), (B, H, K, C))


def fuse_salient(F_r: Var, F_w: Var) -> Var:
    """Sum each over heads, concatenate on channels: [B,K,2C]."""
    return nk.concat([nk.sum(F_r, axis=1), nk.sum(F_w, axis=1)], axis=-1)


class SSFL:
    def __init__(self, params: ParamSet, rng, channels: int, num_scales: int, num_classes: int | None,
                 heads: int = 4, prefix="ssfl", dtype=np.float32):
        self.params, self.prefix = params, prefix
        C, S = channels, num_scales
        params.add(f"{prefix}.fuse.w", uniform_init(rng, (S * C, C), S * C, dtype))
        params.add(f"{prefix}.fuse.b", np.zeros(C, dtype))
        init_attention_weights(params, rng, prefix, C, heads, dtype, names=("wq", "wk"))
        self.num_classes = num_classes
        if num_classes is not None:
            if num_classes < 2:
                raise ValueError("classifier needs at least 2 training identities")
            params.add(f"{prefix}.cls.w", uniform_init(rng, (C, num_classes), C, dtype))
            params.add(f"{prefix}.cls.b", np.zeros(num_classes, dtype))

    def __call__(self, T_f: Var, scales: list[Var]) -> SSFLOutput:
        p, pre = self.params, self.prefix
        S_in = fuse_scales(scales, p[f"{pre}.fuse.w"], p[f"{pre}.fuse.b"])
        ps = part_scores(S_in, p[f"{pre}.wq"], p[f"{pre}.wk"])
        F_w = weighted_feature(T_f, ps.scores)
        logits = None
        if self.num_classes is not None:
            logits = classify_logits(F_w, p[f"{pre}.cls.w"], p[f"{pre}.cls.b"])
        F_r = recombine(T_f, ps.index)
        return SSFLOutput(fuse_salient(F_r, F_w), F_w, F_r, logits, ps)
