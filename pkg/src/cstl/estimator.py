"""scikit-learn style wrapper: ``fit`` trains on labelled clips, ``transform`` embeds."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_clips, check_labels, check_positive_int
from .data import GaitSequence
from .mste import SCALES
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train


class CSTLGait(TransformerMixin, BaseEstimator):
    """Gait embedding network trained with batch-all triplet + part cross-entropy.

    ``X`` is a list of clips, each ``[N, H, W]`` (lengths may vary); ``y``
    holds one subject label per clip.  ``transform`` returns ``[n, K, C_e]``.
    """

    def __init__(self, profile="toy", parts=16, heads=4, embed_dim=64, local_variant="fc",
                 scales=SCALES, use_ata=True, use_global=True, use_ssfl=True, p=8, k=2,
                 frames=30, lr=1e-4, iterations=2000, margin=0.2, random_state=0):
        self.profile = profile
        self.parts = parts
        self.heads = heads
        self.embed_dim = embed_dim
        self.local_variant = local_variant
        self.scales = scales
        self.use_ata = use_ata
        self.use_global = use_global
        self.use_ssfl = use_ssfl
        self.p = p
        self.k = k
        self.frames = frames
        self.lr = lr
        self.iterations = iterations
        self.margin = margin
        self.random_state = random_state

    def _train_config(self, n_subjects):
        check_positive_int(self.iterations, "iterations", 0)
        return TrainConfig(p=min(self.p, n_subjects), k=self.k, frames=self.frames, lr=self.lr,
                           iterations=self.iterations, margin=self.margin, heads=self.heads,
                           parts=self.parts, embed_dim=self.embed_dim, profile=self.profile,
                           local_variant=self.local_variant, scales=tuple(self.scales),
                           use_ata=self.use_ata, use_global=self.use_global,
                           use_ssfl=self.use_ssfl, seed=int(self.random_state), log_every=0)

    def fit(self, X, y, callback=None):
        clips = check_clips(X)
        y = check_labels(y, len(clips))
        seqs = [GaitSequence(c, str(lab), "NM", 0, sequence_id=f"{i:02d}")
                for i, (c, lab) in enumerate(zip(clips, y))]
        subjects = sorted({s.subject_id for s in seqs})
        if len(subjects) < 2:
            raise ValueError("fit needs at least 2 distinct labels")
        cfg = self._train_config(len(subjects))
        result = train(cfg, seqs, callback=callback)
        self.network_ = result.network
        self.optimizer_state_ = result.state
        self.history_ = np.asarray(result.history, dtype=float).reshape(-1, 4)
        self.classes_ = np.asarray(sorted(set(y.tolist())))
        self.n_features_out_ = self.parts * self.embed_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        clips = check_clips(X)
        return np.stack([self.network_.embed(c[None])[0] for c in clips])

    def save(self, path):
        check_is_fitted(self, "network_")
        save_checkpoint(path, self.network_, self.optimizer_state_, self._train_config(max(2, self.p)))

    @classmethod
    def load(cls, path):
        net, state = load_checkpoint(path)
        mc = net.config
        est = cls(profile=mc.profile, parts=mc.parts, heads=mc.heads, embed_dim=mc.embed_dim,
                  local_variant=mc.local_variant, scales=tuple(mc.scales), use_ata=mc.use_ata,
                  use_global=mc.use_global, use_ssfl=mc.use_ssfl, margin=mc.margin)
        est.network_ = net
        est.optimizer_state_ = state
        est.n_features_out_ = mc.parts * mc.embed_dim
        return est
