"""Adaptive temporal aggregation.

Local fusion of the temporal scales per frame (max / FC / attention subnet),
a conditional position encoding, one transformer block across frames, and a
temporal max-pool down to the sequence-level feature ``[B, K, C]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .backbone import uniform_init
from .mste import MultiScaleFeatures, hidden_width
from .numkernel import ParamSet, Var

LOCAL_VARIANTS = ("max", "fc", "attention")


def _channels_last(t: Var) -> Var:
    return nk.transpose(t, (0, 1, 3, 2))  # [B,N,C,K] <-> [B,N,K,C]


def local_max(scales: list[Var]) -> Var:
    return nk.maximum_n(scales)


def local_fc(scales: list[Var], w: Var, b: Var) -> Var:
    """Concatenate scales on the channel axis, then one FC back to C."""
    cat = nk.concat([_channels_last(t) for t in scales], axis=-1)
    return _channels_last(nk.linear(cat, w, b))


@dataclass
class LocalAttention:
    T_Al: Var
    weights: Var  # [B, N, S, C, K], S = number of scales


def local_attention(scales: list[Var], fc1_w: Var, fc1_b: Var, fc2_w: Var, fc2_b: Var) -> LocalAttention:
    """Top-down cumulative flow, sigmoid gates per scale and channel, weighted sum."""
    flows = [scales[0]]
    for t in scales[1:]:
        flows.append(flows[-1] + t)
    S = len(flows)
    B, N, C, K = flows[0].shape
    cat = nk.concat([_channels_last(t) for t in flows], axis=-1)  # B,N,K,S*C
    gates = nk.sigmoid(nk.linear(nk.relu(nk.linear(cat, fc1_w, fc1_b)), fc2_w, fc2_b))
    gates = nk.transpose(nk.reshape(gates, (B, N, K, S, C)), (0, 1, 3, 4, 2))  # B,N,S,C,K
    stacked = nk.concat([nk.reshape(t, (B, N, 1, C, K)) for t in flows], axis=2)
    return LocalAttention(nk.sum(stacked * gates, axis=2), gates)


def conditional_pe(T_Al: Var, dw: Var) -> Var:
    """``T_Al`` [B,N,C,K] -> ``T_tran`` [B,K,N,C] with a depth-wise conv residual."""
    x = nk.transpose(T_Al, (0, 3, 2, 1))  # B,K,C,N
    return nk.transpose(x + nk.dwconv1d_temporal(x, dw), (0, 1, 3, 2))


@dataclass
class TransformerOutput:
    T_Ag: Var        # [B, K, N, C]
    attention: Var   # [B, H, K, N, N]


def split_heads(x: Var, w: Var) -> Var:
    """``x`` [B,K,N,C] times per-head weights ``w`` [H,C,d] -> [B,H,K,N,d]."""
    return nk.einsum("bknc,hcd->bhknd", x, w)


def transformer_block(T_tran: Var, p: dict) -> TransformerOutput:
    """One post-norm block.

    ``p`` holds ``wq, wk, wv`` ([H,C,C/H]), ``ln1_g, ln1_b, ffn1_w, ffn1_b,
    ffn2_w, ffn2_b, ln2_g, ln2_b``.  Scores are divided by sqrt(C), not by
    the per-head width.
    """
    B, K, N, C = T_tran.shape
    H = p["wq"].shape[0]
    q = split_heads(T_tran, p["wq"])
    k = split_heads(T_tran, p["wk"])
    v = split_heads(T_tran, p["wv"])
    scores = nk.einsum("bhknd,bhkmd->bhknm", q, k) * (1.0 / np.sqrt(C))
    A = nk.softmax(scores, axis=-1)
    heads = nk.einsum("bhknm,bhkmd->bhknd", A, v)
    merged = nk.reshape(nk.transpose(heads, (0, 2, 3, 1, 4)), (B, K, N, C))
    T_a = nk.layer_norm(merged + T_tran, p["ln1_g"], p["ln1_b"])
    ffn = nk.linear(nk.relu(nk.linear(T_a, p["ffn1_w"], p["ffn1_b"])), p["ffn2_w"], p["ffn2_b"])
    T_Ag = nk.layer_norm(ffn + T_a, p["ln2_g"], p["ln2_b"])
    return TransformerOutput(T_Ag, A)


def temporal_max_pool(T_Ag: Var) -> Var:
    """[B,K,N,C] -> [B,K,C]."""
    return nk.reduce_max(T_Ag, axis=2)


def init_attention_weights(params: ParamSet, rng, prefix: str, channels: int, heads: int, dtype,
                           names=("wq", "wk", "wv")):
    if heads < 1 or channels % heads:
        raise ValueError(f"head count {heads} must divide channel count {channels}")
    d = channels // heads
    for n in names:
        params.add(f"{prefix}.{n}", uniform_init(rng, (heads, channels, d), channels, dtype))


@dataclass
class ATAOutput:
    F_T: Var
    T_Al: Var
    T_tran: Var
    T_Ag: Var
    attention: Var
    local_weights: Var | None = None


class ATA:
    def __init__(self, params: ParamSet, rng, channels: int, num_scales: int, heads: int = 4,
                 local_variant="fc", use_global=True, prefix="ata", dtype=np.float32):
        if local_variant not in LOCAL_VARIANTS:
            raise ValueError(f"unknown local variant {local_variant!r}")
        self.params, self.prefix = params, prefix
        self.local_variant = local_variant
        self.use_global = use_global
        C, S = channels, num_scales
        if local_variant == "fc":
            params.add(f"{prefix}.local.w", uniform_init(rng, (S * C, C), S * C, dtype))
            params.add(f"{prefix}.local.b", np.zeros(C, dtype))
        elif local_variant == "attention":
            h = hidden_width(S * C)
            params.add(f"{prefix}.local.fc1.w", uniform_init(rng, (S * C, h), S * C, dtype))
            params.add(f"{prefix}.local.fc1.b", np.zeros(h, dtype))
            params.add(f"{prefix}.local.fc2.w", uniform_init(rng, (h, S * C), h, dtype))
            params.add(f"{prefix}.local.fc2.b", np.zeros(S * C, dtype))
        if use_global:
            params.add(f"{prefix}.pe.dw", uniform_init(rng, (C, 3), 3, dtype))
            init_attention_weights(params, rng, prefix, C, heads, dtype)
            params.add(f"{prefix}.ln1_g", np.ones(C, dtype))
            params.add(f"{prefix}.ln1_b", np.zeros(C, dtype))
            params.add(f"{prefix}.ffn1_w", uniform_init(rng, (C, 2 * C), C, dtype))
            params.add(f"{prefix}.ffn1_b", np.zeros(2 * C, dtype))
            params.add(f"{prefix}.ffn2_w", uniform_init(rng, (2 * C, C), 2 * C, dtype))
            params.add(f"{prefix}.ffn2_b", np.zeros(C, dtype))
            params.add(f"{prefix}.ln2_g", np.ones(C, dtype))
            params.add(f"{prefix}.ln2_b", np.zeros(C, dtype))

    def block_params(self) -> dict:
        keys = ("wq", "wk", "wv", "ln1_g", "ln1_b", "ffn1_w", "ffn1_b", "ffn2_w", "ffn2_b", "ln2_g", "ln2_b")
        return {k: self.params[f"{self.prefix}.{k}"] for k in keys}

    def __call__(self, msf: MultiScaleFeatures) -> ATAOutput:
        p, pre = self.params, self.prefix
        scales = msf.enabled()
        weights = None
        if self.local_variant == "max":
            T_Al = local_max(scales)
        elif self.local_variant == "fc":
            T_Al = local_fc(scales, p[f"{pre}.local.w"], p[f"{pre}.local.b"])
        else:
            la = local_attention(scales, p[f"{pre}.local.fc1.w"], p[f"{pre}.local.fc1.b"],
                                 p[f"{pre}.local.fc2.w"], p[f"{pre}.local.fc2.b"])
            T_Al, weights = la.T_Al, la.weights
        if not self.use_global:
            T_Ag = nk.transpose(T_Al, (0, 3, 1, 2))  # B,K,N,C
            return ATAOutput(temporal_max_pool(T_Ag), T_Al, T_Ag, T_Ag, None, weights)
        T_tran = conditional_pe(T_Al, p[f"{pre}.pe.dw"])
        out = transformer_block(T_tran, self.block_params())
        return ATAOutput(temporal_max_pool(out.T_Ag), T_Al, T_tran, out.T_Ag, out.attention, weights)
