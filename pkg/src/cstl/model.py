"""The assembled network: backbone -> part pooling -> MSTE -> ATA / SSFL -> head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numkernel as nk
from .ata import ATA
from .backbone import PROFILES, Backbone, part_pool
from .head import OutputHead
from .losses import batch_all_triplet, cross_entropy, total_loss
from .mste import MSTE, SCALES, MultiScaleFeatures
from .numkernel import ParamSet, Var
from .ssfl import SSFL, SSFLOutput


@dataclass
class ModelConfig:
    profile: str = "toy"
    parts: int = 32
    heads: int = 4
    embed_dim: int = 256
    num_classes: int = 74
    local_variant: str = "fc"
    scales: tuple = SCALES
    use_ata: bool = True
    use_global: bool = True
    use_ssfl: bool = True
    margin: float = 0.2
    strict_resolution: bool = True
    channels: tuple | None = field(default=None)

    def widths(self):
        return tuple(self.channels) if self.channels else PROFILES[self.profile]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        if d.get("channels") is not None:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


BASELINE = dict(use_ata=False, use_ssfl=False, scales=("frame",))


@dataclass
class ForwardResult:
    embedding: Var               # [B, K, C_e]
    P: Var                       # [B, N, C, K]
    msf: MultiScaleFeatures | None
    F_T: Var
    ata_attention: Var | None
    ssfl: SSFLOutput | None


class CSTLNetwork:
    """Parameter container plus forward pass.

    The baseline (no ATA, no SSFL) uses a plain temporal max over the part
    features and the same per-part head.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params = ParamSet()
        self.backbone = Backbone(self.params, rng, config.widths(), dtype=dtype,
                                 strict_resolution=config.strict_resolution)
        C = self.backbone.out_channels
        S = len(config.scales)
        self.mste = None
        if config.use_ata or config.use_ssfl:
            self.mste = MSTE(self.params, rng, C, config.scales, dtype=dtype)
        self.ata = None
        if config.use_ata:
            self.ata = ATA(self.params, rng, C, S, config.heads, config.local_variant,
                           config.use_global, dtype=dtype)
        self.ssfl = None
        if config.use_ssfl:
            self.ssfl = SSFL(self.params, rng, C, S, config.num_classes, config.heads, dtype=dtype)
        head_in = C + (2 * C if config.use_ssfl else 0)
        self.head = OutputHead(self.params, rng, config.parts, head_in, config.embed_dim, dtype=dtype)

    def to_dtype(self, dtype) -> "CSTLNetwork":
        """Copy of the network with parameters cast to ``dtype``."""
        other = CSTLNetwork(self.config, dtype=dtype)
        other.params.load_state_dict(self.params.state_dict())
        for name, v in self.params.items():
            other.params[name].requires_grad = v.requires_grad
        return other

    def forward(self, G) -> ForwardResult:
        """``G`` is ``[B, N, H, W]`` or ``[B, N, 1, H, W]`` silhouettes."""
        G = nk.as_var(G)
        if G.ndim == 4:
            G = nk.Var(G.data[:, :, None])
        G = nk.Var(G.data.astype(self.dtype, copy=False))
        F_I = self.backbone(G)
        P = part_pool(F_I, self.config.parts)
        msf = None
        att = None
        ssfl_out = None
        if self.mste is not None:
            msf = self.mste(P)
        if self.ata is not None:
            ata_out = self.ata(msf)
            F_T, att = ata_out.F_T, ata_out.attention
        else:
            F_T = nk.reduce_max(nk.transpose(P, (0, 3, 1, 2)), axis=2)  # B,K,C
        F_S = None
        if self.ssfl is not None:
            ssfl_out = self.ssfl(P, msf.enabled())
            F_S = ssfl_out.F_S
        return ForwardResult(self.head(F_T, F_S), P, msf, F_T, att, ssfl_out)

    def loss(self, result: ForwardResult, y):
        """Returns ``(total, triplet, ce)`` graph nodes; ``ce`` is None without SSFL."""
        L_tri = batch_all_triplet(result.embedding, y, self.config.margin)
        L_ce = None
        if result.ssfl is not None and result.ssfl.logits is not None:
            L_ce = cross_entropy(result.ssfl.logits, y)
        return total_loss(L_ce, L_tri), L_tri, L_ce

    def embed(self, G) -> np.ndarray:
        return self.forward(G).embedding.data
