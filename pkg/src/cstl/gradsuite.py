"""Finite-difference verification of every differentiable op and of the full pipeline.

Each case builds float64 leaves in a fresh :class:`ParamSet`, contracts the
op output with a fixed random tensor to get a scalar, and hands that to
:func:`grad_check_report`.  Cases are grouped by the module that owns the op
so the CLI can run one group at a time.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ata, backbone, head, losses, mste, ssfl
from . import numkernel as nk
from .model import CSTLNetwork, ModelConfig
from .numkernel import ParamSet

OP_TOL = 1e-5
PIPELINE_TOL = 1e-4

# toy shapes used throughout: batch, frames, parts, channels, heads, classes
B, N, K, C, H, CT = 4, 6, 4, 8, 2, 4


@dataclass
class CaseResult:
    group: str
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self):
        return self.error <= self.tol


@dataclass
class SuiteResult:
    cases: list = field(default_factory=list)

    @property
    def max_op_error(self):
        return max((c.error for c in self.cases if c.group != "pipeline"), default=0.0)

    @property
    def max_pipeline_error(self):
        return max((c.error for c in self.cases if c.group == "pipeline"), default=0.0)

    @property
    def max_error(self):
        return max((c.error for c in self.cases), default=0.0)

    @property
    def ok(self):
        return all(c.ok for c in self.cases)

    @property
    def seconds(self):
        return sum(c.seconds for c in self.cases)


def _leaves(rng, **shapes):
    ps = ParamSet()
    for name, shape in shapes.items():
        ps.add(name, rng.standard_normal(shape))
    return ps


def _case(build):
    """``build(rng) -> (ParamSet, f)``.  Non-scalar outputs are contracted with
    a random tensor (drawn once) so every output entry matters."""
    def run(seed=0, max_entries=None):
        rng = np.random.default_rng(seed)
        ps, f = build(rng)
        proj = []

        def fn():
            out = f(ps)
            if out.ndim == 0:
                return out
            if not proj:
                proj.append(nk.Var(rng.standard_normal(out.shape)))
            return nk.sum(out * proj[0])

        return nk.grad_check_report(fn, ps, max_entries=max_entries, seed=seed).max_error
    return run


CASES: dict[str, dict] = {g: {} for g in ("numkernel", "backbone", "mste", "ata", "ssfl", "head", "losses")}


def _register(group, name):
    def deco(build):
        CASES[group][name] = _case(build)
        return build
    return deco


# ----------------------------------------------------------------- numkernel

@_register("numkernel", "add")
def _(rng):
    ps = _leaves(rng, a=(3, 4), b=(4,))
    return ps, lambda p: p["a"] + p["b"]


@_register("numkernel", "mul")
def _(rng):
    ps = _leaves(rng, a=(3, 4), b=(3, 1))
    return ps, lambda p: p["a"] * p["b"]


@_register("numkernel", "div")
def _(rng):
    ps = ParamSet()
    ps.add("a", rng.standard_normal((3, 4)))
    ps.add("b", rng.uniform(0.5, 2.0, (3, 4)))
    return ps, lambda p: p["a"] / p["b"]


@_register("numkernel", "sum_mean")
def _(rng):
    ps = _leaves(rng, a=(3, 4, 2))
    return ps, lambda p: nk.concat([nk.sum(p["a"], axis=1), nk.mean(p["a"], axis=1)], axis=-1)


@_register("numkernel", "reduce_max")
def _(rng):
    ps = _leaves(rng, a=(3, 5, 2))
    return ps, lambda p: nk.reduce_max(p["a"], axis=1)


@_register("numkernel", "maximum_n")
def _(rng):
    ps = _leaves(rng, a=(3, 4), b=(3, 4), c=(3, 4))
    return ps, lambda p: nk.maximum_n([p["a"], p["b"], p["c"]])


@_register("numkernel", "reshape_transpose_broadcast")
def _(rng):
    ps = _leaves(rng, a=(2, 1, 6))
    return ps, lambda p: nk.transpose(nk.reshape(nk.broadcast_to(p["a"], (2, 3, 6)), (2, 3, 2, 3)), (3, 1, 0, 2))


@_register("numkernel", "concat")
def _(rng):
    ps = _leaves(rng, a=(2, 3), b=(2, 5))
    return ps, lambda p: nk.concat([p["a"], p["b"]], axis=1)


@_register("numkernel", "take_along")
def _(rng):
    ps = _leaves(rng, a=(2, 5, 3))
    idx = rng.integers(0, 5, (2, 4, 3))
    return ps, lambda p: nk.take_along(p["a"], idx, axis=1)


@_register("numkernel", "einsum")
def _(rng):
    ps = _leaves(rng, a=(2, 3, 4), b=(4, 5))
    return ps, lambda p: nk.einsum("bij,jk->bik", p["a"], p["b"])


@_register("numkernel", "linear")
def _(rng):
    ps = _leaves(rng, x=(2, 3, 4), w=(4, 5), b=(5,))
    return ps, lambda p: nk.linear(p["x"], p["w"], p["b"])


@_register("numkernel", "conv2d")
def _(rng):
    ps = _leaves(rng, x=(2, 2, 5, 4), w=(3, 2, 3, 3), b=(3,))
    return ps, lambda p: nk.conv2d(p["x"], p["w"], p["b"], pad=1)


@_register("numkernel", "max_pool2d")
def _(rng):
    ps = _leaves(rng, x=(2, 2, 4, 6))
    return ps, lambda p: nk.max_pool2d(p["x"])


@_register("numkernel", "conv1d_temporal")
def _(rng):
    ps = _leaves(rng, x=(2, 3, 4, 5), w=(2, 4, 3), b=(2,))
    return ps, lambda p: nk.conv1d_temporal(p["x"], p["w"], p["b"])


@_register("numkernel", "dwconv1d_temporal")
def _(rng):
    ps = _leaves(rng, x=(2, 3, 4, 5), w=(4, 3))
    return ps, lambda p: nk.dwconv1d_temporal(p["x"], p["w"])


@_register("numkernel", "softmax")
def _(rng):
    ps = _leaves(rng, x=(3, 5))
    return ps, lambda p: nk.softmax(p["x"], axis=-1)


@_register("numkernel", "layer_norm")
def _(rng):
    ps = _leaves(rng, x=(3, 6), g=(6,), b=(6,))
    return ps, lambda p: nk.layer_norm(p["x"], p["g"], p["b"])


@_register("numkernel", "activations")
def _(rng):
    ps = _leaves(rng, x=(4, 6))
    return ps, lambda p: nk.concat([nk.leaky_relu(p["x"]), nk.relu(p["x"]), nk.sigmoid(p["x"])], axis=0)


# ------------------------------------------------------------------ backbone

def _small_net_params(rng, widths=(2, 3, 4, 4)):
    ps = ParamSet()
    bb = backbone.Backbone(ps, rng, widths, dtype=np.float64, strict_resolution=False)
    return ps, bb


@_register("backbone", "backbone_forward")
def _(rng):
    ps, _ = _small_net_params(rng)
    G = nk.Var(rng.random((2, 2, 1, 8, 6)))
    return ps, lambda p: backbone.backbone_forward(G, p, strict_resolution=False)


@_register("backbone", "part_pool")
def _(rng):
    ps = _leaves(rng, F=(2, 3, 4, 8, 3))
    return ps, lambda p: backbone.part_pool(p["F"], 4)


# ---------------------------------------------------------------------- mste

@_register("mste", "short_term")
def _(rng):
    ps = _leaves(rng, P=(B, N, C, K), w1=(C, C, 3), b1=(C,), w2=(C, C, 3), b2=(C,))
    return ps, lambda p: mste.short_term(p["P"], p["w1"], p["b1"], p["w2"], p["b2"])


@_register("mste", "long_term")
def _(rng):
    h = 2
    ps = _leaves(rng, P=(B, N, C, K), w1=(C, h), b1=(h,), w2=(h, C), b2=(C,))
    return ps, lambda p: mste.long_term(p["P"], p["w1"], p["b1"], p["w2"], p["b2"])


# ----------------------------------------------------------------------- ata

def _scales(S=3):
    return {f"s{i}": (B, N, C, K) for i in range(S)}


@_register("ata", "local_max")
def _(rng):
    ps = _leaves(rng, **_scales())
    return ps, lambda p: ata.local_max([p["s0"], p["s1"], p["s2"]])


@_register("ata", "local_fc")
def _(rng):
    ps = _leaves(rng, w=(3 * C, C), b=(C,), **_scales())
    return ps, lambda p: ata.local_fc([p["s0"], p["s1"], p["s2"]], p["w"], p["b"])


@_register("ata", "local_attention")
def _(rng):
    h = 3
    ps = _leaves(rng, w1=(3 * C, h), b1=(h,), w2=(h, 3 * C), b2=(3 * C,), **_scales())
    return ps, lambda p: ata.local_attention([p["s0"], p["s1"], p["s2"]],
                                             p["w1"], p["b1"], p["w2"], p["b2"]).T_Al


@_register("ata", "conditional_pe")
def _(rng):
    ps = _leaves(rng, T=(B, N, C, K), dw=(C, 3))
    return ps, lambda p: ata.conditional_pe(p["T"], p["dw"])


def _block_leaves(rng):
    d = C // H
    shapes = dict(T=(1, 2, 3, C), wq=(H, C, d), wk=(H, C, d), wv=(H, C, d),
                  ln1_g=(C,), ln1_b=(C,), ffn1_w=(C, 2 * C), ffn1_b=(2 * C,),
                  ffn2_w=(2 * C, C), ffn2_b=(C,), ln2_g=(C,), ln2_b=(C,))
    return _leaves(rng, **shapes)


@_register("ata", "transformer_block")
def _(rng):
    ps = _block_leaves(rng)
    keys = [n for n in ps if n != "T"]
    return ps, lambda p: ata.transformer_block(p["T"], {k: p[k] for k in keys}).T_Ag


@_register("ata", "temporal_max_pool")
def _(rng):
    ps = _leaves(rng, T=(B, K, N, C))
    return ps, lambda p: ata.temporal_max_pool(p["T"])


# ---------------------------------------------------------------------- ssfl

@_register("ssfl", "fuse_scales")
def _(rng):
    ps = _leaves(rng, w=(3 * C, C), b=(C,), **_scales())
    return ps, lambda p: ssfl.fuse_scales([p["s0"], p["s1"], p["s2"]], p["w"], p["b"])


@_register("ssfl", "part_scores")
def _(rng):
    ps = _leaves(rng, S=(B, N, K, C), wq=(H, C, C // H), wk=(H, C, C // H))
    return ps, lambda p: ssfl.part_scores(p["S"], p["wq"], p["wk"]).scores


@_register("ssfl", "weighted_feature")
def _(rng):
    ps = _leaves(rng, T=(B, N, C, K), s=(B, H, K, N))
    return ps, lambda p: ssfl.weighted_feature(p["T"], p["s"])


@_register("ssfl", "classify_logits")
def _(rng):
    ps = _leaves(rng, F=(B, H, K, C), w=(C, CT), b=(CT,))
    return ps, lambda p: ssfl.classify_logits(p["F"], p["w"], p["b"])


@_register("ssfl", "recombine")
def _(rng):
    ps = _leaves(rng, T=(B, N, C, K))
    idx = rng.integers(0, N, (B, H, K))
    return ps, lambda p: ssfl.recombine(p["T"], idx)


@_register("ssfl", "fuse_salient")
def _(rng):
    ps = _leaves(rng, r=(B, H, K, C), w=(B, H, K, C))
    return ps, lambda p: ssfl.fuse_salient(p["r"], p["w"])


# ---------------------------------------------------------------------- head

@_register("head", "output_forward")
def _(rng):
    ps = _leaves(rng, FT=(B, K, C), FS=(B, K, 2 * C), w=(K, 3 * C, 5), b=(K, 5))
    return ps, lambda p: head.output_forward(p["FT"], p["FS"], p["w"], p["b"])


# -------------------------------------------------------------------- losses

@_register("losses", "batch_all_triplet")
def _(rng):
    ps = _leaves(rng, F=(B, K, 5))
    y = np.array([0, 0, 1, 1])
    return ps, lambda p: losses.batch_all_triplet(p["F"], y, margin=0.2)


@_register("losses", "cross_entropy")
def _(rng):
    ps = _leaves(rng, P=(B, H, K, CT))
    y = np.array([0, 3, 1, 1])
    return ps, lambda p: losses.cross_entropy(p["P"], y)


@_register("losses", "total_loss")
def _(rng):
    ps = _leaves(rng, F=(B, K, 5), P=(B, H, K, CT))
    y = np.array([0, 0, 1, 1])
    return ps, lambda p: losses.total_loss(losses.cross_entropy(p["P"], y),
                                           losses.batch_all_triplet(p["F"], y))


# ------------------------------------------------------------------ pipeline

def pipeline_config(local_variant="fc", **kw) -> ModelConfig:
    """Toy network whose backbone emits C=8 channels on a 16x8 frame (K=4 parts)."""
    base = dict(channels=(2, 4, C, C), parts=K, heads=H, embed_dim=6, num_classes=CT,
                local_variant=local_variant, strict_resolution=False)
    base.update(kw)
    return ModelConfig(**base)


def pipeline_case(local_variant="fc", seed=0, max_entries=20, **kw) -> float:
    net = CSTLNetwork(pipeline_config(local_variant, **kw), seed=seed + 1, dtype=np.float64)
    rng = np.random.default_rng(seed)
    G = rng.random((B, N, 16, 8))
    y = np.array([0, 0, 1, 1])

    def fn():
        return net.loss(net.forward(G), y)[0]

    return nk.grad_check_report(fn, net.params, max_entries=max_entries, seed=seed).max_error


GROUPS = tuple(CASES) + ("pipeline",)


def run_suite(groups=None, seed=0, max_entries=20) -> SuiteResult:
    groups = GROUPS if groups is None else tuple(groups)
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown gradcheck module(s): {sorted(unknown)}; choose from {list(GROUPS)}")
    res = SuiteResult()
    for g in groups:
        if g == "pipeline":
            for lv in ata.LOCAL_VARIANTS:
                t = time.perf_counter()
                err = pipeline_case(lv, seed=seed, max_entries=max_entries)
                res.cases.append(CaseResult(g, f"full[{lv}]", err, PIPELINE_TOL, time.perf_counter() - t))
            continue
        for name, run in CASES[g].items():
            t = time.perf_counter()
            err = run(seed=seed)
            res.cases.append(CaseResult(g, name, err, OP_TOL, time.perf_counter() - t))
    return res
