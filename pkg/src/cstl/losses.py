"""Batch-all triplet loss, cross-entropy on the part logits, and their sum."""
from __future__ import annotations

import numpy as np

from .numkernel import Var, _node


def _check_batch(y):
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("triplet batch needs at least 2 classes")
    if counts.max() < 2:
        raise ValueError("triplet batch needs a class with at least 2 samples")
    return y


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    """[B,K,E] -> [K,B,B] Euclidean distances per part."""
    diff = x[:, None] - x[None, :]
    return np.sqrt((diff * diff).sum(-1)).transpose(2, 0, 1)


def triplet_mask(y) -> np.ndarray:
    """``mask[a,p,n]`` for valid (anchor, positive, negative) triples."""
    y = np.asarray(y)
    same = y[:, None] == y[None, :]
    pos = same & ~np.eye(len(y), dtype=bool)
    return pos[:, :, None] & ~same[:, None, :]


def batch_all_triplet(F_O: Var, y, margin: float = 0.2) -> Var:
    """Separate BA+ triplet loss.

    For each part: hinge ``margin + d(a,p) - d(a,n)`` over all valid triples,
    averaged over the non-zero terms; then the mean over parts.
    """
    y = _check_batch(y)
    x = F_O.data
    B, K, E = x.shape
    D = pairwise_distances(x)
    mask = triplet_mask(y)
    terms = margin + D[:, :, :, None] - D[:, :, None, :]
    hinge = np.where(mask[None] & (terms > 0), terms, 0.0)
    active = hinge > 0
    counts = active.reshape(K, -1).sum(-1)
    per_part = np.where(counts > 0, hinge.reshape(K, -1).sum(-1) / np.maximum(counts, 1), 0.0)
    out = np.asarray(per_part.mean(), dtype=x.dtype)

    def backward(g):
        w = g / (K * np.maximum(counts, 1))[:, None, None, None]
        a = active * w
        gD = a.sum(3) - a.sum(2)  # dL/dD[k, a, b]
        with np.errstate(divide="ignore", invalid="ignore"):
            Wm = np.where(D > 0, (gD + gD.transpose(0, 2, 1)) / D, 0.0)  # K,B,B
        xk = x.transpose(1, 0, 2)  # K,B,E
        gx = xk * Wm.sum(-1, keepdims=True) - Wm @ xk
        return (gx.transpose(1, 0, 2).astype(x.dtype),)

    return _node(out, (F_O,), backward)


def cross_entropy(P_w: Var, y) -> Var:
    """Softmax NLL over the last axis of ``P_w`` [B,H,K,C_t].

    Summed over heads, averaged over batch and parts, so uniform logits give
    ``H * ln(C_t)``.
    """
    y = np.asarray(y)
    B, H, K, Ct = P_w.shape
    if y.shape != (B,):
        raise ValueError(f"labels shape {y.shape} != ({B},)")
    if y.min() < 0 or y.max() >= Ct:
        raise ValueError(f"label out of range [0, {Ct})")
    z = P_w.data - P_w.data.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    onehot = np.zeros_like(logp)
    onehot[np.arange(B), :, :, y] = 1.0
    norm = B * K
    out = np.asarray(-(logp * onehot).sum() / norm, dtype=P_w.dtype)

    def backward(g):
        return ((np.exp(logp) - onehot) * (g / norm),)

    return _node(out, (P_w,), backward)


def total_loss(L_ce: Var | None, L_tri: Var) -> Var:
    """Unit-weighted sum; ``L_ce`` may be absent for models without SSFL."""
    return L_tri if L_ce is None else L_ce + L_tri
