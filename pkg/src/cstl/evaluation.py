"""Embedding extraction and gallery/probe rank-k protocols."""
from __future__ import annotations

import io
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GaitSequence

EMB_MAGIC = b"CSTLEMB1"


@dataclass
class EmbeddingRecord:
    subject_id: str
    condition: str
    view: object          # int for single-view sequences, (a, b) for mixed probes
    embedding: np.ndarray  # [K, C_e]
    sequence_id: str = "01"

    @property
    def seq_key(self):
        return f"{self.condition}-{self.sequence_id}"

    @property
    def views(self) -> tuple:
        return tuple(self.view) if isinstance(self.view, tuple) else (self.view,)


def embed_sequence(seq: GaitSequence, model, max_frames: int | None = None) -> EmbeddingRecord:
    """Test-mode embedding: all frames of the sequence in one forward pass."""
    if len(seq) == 0:
        raise ValueError("cannot embed an empty sequence")
    frames = seq.frames if max_frames is None else seq.frames[:max_frames]
    emb = model.embed(frames[None])[0]
    return EmbeddingRecord(seq.subject_id, seq.condition, seq.view, emb, seq.sequence_id)


def embed_sequences(seqs, model) -> list[EmbeddingRecord]:
    return [embed_sequence(s, model) for s in seqs]


def part_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over parts of per-part Euclidean distances.

    ``a`` [P, K, C], ``b`` [G, K, C] -> [P, G].  Evaluated in float64.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    diff = a[:, None] - b[None]
    return np.sqrt((diff * diff).sum(-1)).sum(-1)


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

@dataclass
class RankReport:
    ks: tuple
    # accuracy[(condition, probe_view, gallery_view)][k] in percent (NaN if undefined)
    cells: dict = field(default_factory=dict)
    leaked_pairs: int = 0
    compared_pairs: int = 0

    def probe_views(self, condition):
        return sorted({pv for (c, pv, _) in self.cells if c == condition}, key=_view_key)

    def conditions(self):
        return sorted({c for (c, _, _) in self.cells})

    def per_view(self, condition, k) -> dict:
        """Probe view -> accuracy averaged over the defined gallery-view cells."""
        out = {}
        for pv in self.probe_views(condition):
            vals = [acc[k] for (c, p, _), acc in self.cells.items()
                    if c == condition and p == pv and not np.isnan(acc[k])]
            out[pv] = float(np.mean(vals)) if vals else float("nan")
        return out

    def mean(self, condition, k) -> float:
        vals = [v for v in self.per_view(condition, k).values() if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def std(self, condition, k) -> float:
        vals = [v for v in self.per_view(condition, k).values() if not np.isnan(v)]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")

    def overall(self, k=1) -> float:
        vals = [self.mean(c, k) for c in self.conditions()]
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        """Rows per (condition, k); columns per probe view, plus mean and std."""
        views = sorted({pv for (_, pv, _) in self.cells}, key=_view_key)
        buf = io.StringIO()
        buf.write("condition,rank," + ",".join(_view_name(v) for v in views) + ",mean,std\n")
        for c in self.conditions():
            for k in self.ks:
                pv = self.per_view(c, k)
                vals = [pv.get(v, float("nan")) for v in views]
                cols = [_fmt(x) for x in vals] + [_fmt(self.mean(c, k)), _fmt(self.std(c, k))]
                buf.write(f"{c},{k}," + ",".join(cols) + "\n")
        return buf.getvalue()


def _view_key(v):
    return v if isinstance(v, tuple) else (v,)


def _view_name(v):
    return "&".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def _fmt(x):
    return "nan" if np.isnan(x) else f"{x:.4f}"


def rank_k_eval(gallery: list[EmbeddingRecord], probe: list[EmbeddingRecord], ks=(1, 5, 10, 20),
                exclude_identical_view: bool = True) -> RankReport:
    """Per (probe condition, probe view, gallery view) rank-k accuracy.

    A probe is a hit at rank k when one of the k nearest gallery items in that
    gallery view has the same subject.  Ties keep gallery order.  With
    exclusion, a gallery view equal to (any of) the probe's views is skipped.
    """
    ks = tuple(sorted(ks))
    report = RankReport(ks)
    g_views = sorted({g.view for g in gallery})
    g_by_view = {v: [i for i, g in enumerate(gallery) if g.view == v] for v in g_views}
    groups = defaultdict(list)
    for i, p in enumerate(probe):
        groups[(p.condition, p.view)].append(i)
    g_emb = np.stack([g.embedding for g in gallery]) if gallery else None
    for (cond, pv), pidx in sorted(groups.items(), key=lambda kv: (kv[0][0], _view_key(kv[0][1]))):
        pviews = probe[pidx[0]].views
        considered = False
        for gv in g_views:
            if exclude_identical_view and gv in pviews:
                continue
            considered = True
            gidx = g_by_view[gv]
            for i in pidx:
                report.compared_pairs += len(gidx)
                if exclude_identical_view:
                    report.leaked_pairs += sum(gallery[j].view in probe[i].views for j in gidx)
            d = part_distance(np.stack([probe[i].embedding for i in pidx]), g_emb[gidx])
            order = np.argsort(d, axis=1, kind="stable")
            g_subj = np.array([gallery[j].subject_id for j in gidx])
            p_subj = np.array([probe[i].subject_id for i in pidx])
            match = g_subj[order] == p_subj[:, None]
            report.cells[(cond, pv, gv)] = {
                k: float(100.0 * match[:, :k].any(axis=1).mean()) for k in ks
            }
        if not considered:
            report.cells[(cond, pv, None)] = {k: float("nan") for k in ks}
    return report


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def protocol_split(records, gallery_condition="NM", gallery_count=4):
    """Gallery: the first ``gallery_count`` sequences of ``gallery_condition`` per
    subject (sorted by sequence id).  Probe: everything else."""
    per_subject = defaultdict(set)
    for r in records:
        if r.condition == gallery_condition:
            per_subject[r.subject_id].add(r.sequence_id)
    chosen = {s: set(sorted(ids)[:gallery_count]) for s, ids in per_subject.items()}
    gallery, probe = [], []
    for r in records:
        if r.condition == gallery_condition and r.sequence_id in chosen.get(r.subject_id, ()):
            gallery.append(r)
        else:
            probe.append(r)
    return gallery, probe


def view_pairs(views, delta: int) -> list[tuple]:
    """All (v, v + delta) pairs on the view grid, ascending."""
    views = sorted(set(views))
    if delta == 0:
        return [(v, v) for v in views]
    pairs = [(v, v + delta) for v in views if v + delta in views]
    if not pairs:
        raise ValueError(f"view difference {delta} not representable by views {views}")
    return pairs


def mix_views(a: GaitSequence, b: GaitSequence) -> GaitSequence:
    """First half of ``a`` followed by the second half of ``b``.

    Mixing a sequence with itself gives the sequence back unchanged.
    """
    fa = a.frames[: len(a) // 2]
    fb = b.frames[len(b) // 2:]
    seq = GaitSequence(np.concatenate([fa, fb]), a.subject_id, a.condition, a.view, a.sequence_id)
    return seq


def mixed_probe_records(probe_seqs: list[GaitSequence], model, delta: int) -> list[EmbeddingRecord]:
    """Embeds half-and-half probes for every view pair at distance ``delta``."""
    by_key = defaultdict(dict)
    for s in probe_seqs:
        by_key[(s.subject_id, s.seq_key)][s.view] = s
    pairs = view_pairs({s.view for s in probe_seqs}, delta)
    out = []
    for (_, _), views in sorted(by_key.items()):
        for va, vb in pairs:
            if va in views and vb in views:
                rec = embed_sequence(mix_views(views[va], views[vb]), model)
                rec.view = va if delta == 0 else (va, vb)
                out.append(rec)
    return out


@dataclass
class ScenarioReport:
    scenario: str
    report: RankReport
    unseen_views: tuple = ()
    pairs: tuple = ()


def scenario_eval(sequences: list[GaitSequence], model, scenario: str, *, train_views=None,
                  test_views=None, delta: int = 0, gallery_condition="NM", gallery_count=4,
                  ks=(1, 5, 10, 20), exclude_identical_view=True) -> ScenarioReport:
    """``unseen_views``: standard protocol restricted to ``test_views``.
    ``mixed_views``: probes assembled from view pairs ``delta`` apart, gallery single-view."""
    if scenario == "unseen_views":
        if test_views is None:
            raise ValueError("unseen_views needs test_views")
        seqs = [s for s in sequences if s.view in set(test_views)]
        recs = embed_sequences(seqs, model)
        gallery, probe = protocol_split(recs, gallery_condition, gallery_count)
        unseen = tuple(sorted(set(test_views) - set(train_views or ())))
        return ScenarioReport(scenario, rank_k_eval(gallery, probe, ks, exclude_identical_view), unseen)
    if scenario == "mixed_views":
        pairs = view_pairs({s.view for s in sequences}, delta)
        recs = embed_sequences(sequences, model)
        gallery, _ = protocol_split(recs, gallery_condition, gallery_count)
        g_keys = {(r.subject_id, r.seq_key) for r in gallery}
        probe_seqs = [s for s in sequences if (s.subject_id, s.seq_key) not in g_keys]
        probe = mixed_probe_records(probe_seqs, model, delta)
        return ScenarioReport(scenario, rank_k_eval(gallery, probe, ks, exclude_identical_view),
                              pairs=tuple(pairs))
    raise ValueError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------

def _put_str(fh, s: str):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _get_str(buf, off):
    (n,) = struct.unpack_from("<I", buf, off)
    return buf[off + 4:off + 4 + n].decode("utf-8"), off + 4 + n


def write_embeddings(path, records: list[EmbeddingRecord]):
    """``CSTLEMB1``, count, K, C_e, then per record subject / condition-seq /
    view strings and float32 data, all little-endian."""
    K, E = records[0].embedding.shape if records else (0, 0)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<III", len(records), K, E))
        for r in records:
            if r.embedding.shape != (K, E):
                raise ValueError("all embeddings must share one shape")
            _put_str(fh, r.subject_id)
            _put_str(fh, r.seq_key)
            _put_str(fh, _view_name(r.view))
            fh.write(np.ascontiguousarray(r.embedding, dtype="<f4").tobytes())


def read_embeddings(path) -> list[EmbeddingRecord]:
    buf = Path(path).read_bytes()
    if not buf.startswith(EMB_MAGIC):
        raise ValueError(f"{path}: not an embedding file (bad magic)")
    count, K, E = struct.unpack_from("<III", buf, len(EMB_MAGIC))
    off = len(EMB_MAGIC) + 12
    out = []
    for _ in range(count):
        subject, off = _get_str(buf, off)
        seq_key, off = _get_str(buf, off)
        view_s, off = _get_str(buf, off)
        emb = np.frombuffer(buf, dtype="<f4", count=K * E, offset=off).reshape(K, E).astype(np.float32)
        off += 4 * K * E
        cond, _, seq = seq_key.partition("-")
        view = tuple(int(x) for x in view_s.split("&")) if "&" in view_s else int(view_s)
        out.append(EmbeddingRecord(subject, cond, view, emb, seq or "01"))
    return out
