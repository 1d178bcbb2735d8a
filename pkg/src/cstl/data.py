"""Silhouette dataset I/O, a procedural walker generator, and clip sampling.

On-disk layout::

    root/<subject>/<condition>-<seq>/<view>/<frame>.pgm

Frames are binary 8-bit PGM (P5).  ``manifest.tsv`` at the root lists one
sequence per line.
"""
from __future__ import annotations

import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRAME_SIZES = {(64, 44), (128, 88)}
CONDITIONS = ("NM", "BG", "CL")
MANIFEST_NAME = "manifest.tsv"
MANIFEST_HEADER = "subject\tcondition-seq\tview\tframes\trelpath"
_SEQ_DIR = re.compile(r"^([A-Za-z]+)-(\d+)$")


class DatasetError(Exception):
    """Raised with the full list of per-file problems found while indexing."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__(f"{len(self.errors)} dataset error(s):\n" + "\n".join(self.errors))


@dataclass
class GaitSequence:
    frames: np.ndarray        # [N, H, W] float32 in {0, 1}
    subject_id: str
    condition: str
    view: int
    sequence_id: str = "01"

    def __post_init__(self):
        if self.frames.ndim != 3 or len(self.frames) < 1:
            raise ValueError(f"sequence needs frames of shape [N>=1, H, W], got {self.frames.shape}")

    @property
    def seq_key(self):
        return f"{self.condition}-{self.sequence_id}"

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class IndexEntry:
    subject_id: str
    condition: str
    sequence_id: str
    view: int
    path: str
    frame_count: int

    @property
    def seq_key(self):
        return f"{self.condition}-{self.sequence_id}"


@dataclass
class DatasetIndex:
    root: str
    entries: list[IndexEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def subjects(self):
        return sorted({e.subject_id for e in self.entries})

    def views(self):
        return sorted({e.view for e in self.entries})

    def filter(self, subjects=None, views=None, conditions=None, seq_keys=None, first_n_seqs=None):
        """Subset of entries.  ``first_n_seqs`` keeps the first n condition-seq
        keys (in sorted order) of every subject."""
        keep = []
        allowed_keys = {}
        if first_n_seqs is not None:
            for s in self.subjects():
                keys = sorted({e.seq_key for e in self.entries if e.subject_id == s})
                allowed_keys[s] = set(keys[:first_n_seqs])
        for e in self.entries:
            if subjects is not None and e.subject_id not in subjects:
                continue
            if views is not None and e.view not in views:
                continue
            if conditions is not None and e.condition not in conditions:
                continue
            if seq_keys is not None and e.seq_key not in seq_keys:
                continue
            if first_n_seqs is not None and e.seq_key not in allowed_keys[e.subject_id]:
                continue
            keep.append(e)
        return DatasetIndex(self.root, keep)


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int):
    """First ``count`` header tokens and the offset of the raster."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PGM header")
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte before the raster


def read_pgm(path) -> np.ndarray:
    """Binary PGM -> uint8 array [H, W]."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"wrong magic {buf[:2]!r}, expected b'P5'")
    (_, w, h, maxval), off = _pgm_tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise ValueError(f"unsupported maxval {maxval}")
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off) if len(buf) >= off + w * h else None
    if raster is None:
        raise ValueError("truncated PGM raster")
    img = raster.reshape(h, w)
    if maxval != 255:
        img = (img.astype(np.uint16) * 255 // maxval).astype(np.uint8)
    return img


def pgm_size(path) -> tuple[int, int]:
    """(H, W) from the header only."""
    with open(path, "rb") as fh:
        head = fh.read(64)
    if head[:2] != b"P5":
        raise ValueError(f"wrong magic {head[:2]!r}, expected b'P5'")
    (_, w, h, _), _ = _pgm_tokens(head, 4)
    return int(h), int(w)


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def binarize(img: np.ndarray) -> np.ndarray:
    return (img.astype(np.float32) / 255.0 >= 0.5).astype(np.float32)


# ---------------------------------------------------------------------------
# indexing / loading
# ---------------------------------------------------------------------------

def load_dataset(root) -> DatasetIndex:
    """Walk the tree in lexicographic order and validate every frame header."""
    root = Path(root)
    index = DatasetIndex(str(root))
    if not root.exists():
        raise DatasetError([f"{root}: no such directory"])
    errors = []
    for subj in sorted(p for p in root.iterdir() if p.is_dir()):
        for seq_dir in sorted(p for p in subj.iterdir() if p.is_dir()):
            m = _SEQ_DIR.match(seq_dir.name)
            if not m:
                errors.append(f"{seq_dir}: directory name is not <condition>-<seq>")
                continue
            for view_dir in sorted(p for p in seq_dir.iterdir() if p.is_dir()):
                try:
                    view = int(view_dir.name)
                except ValueError:
                    errors.append(f"{view_dir}: view directory is not an integer")
                    continue
                frames = sorted(f for f in view_dir.iterdir() if f.suffix == ".pgm")
                if not frames:
                    warnings.warn(f"{view_dir}: empty sequence skipped")
                    continue
                sizes = set()
                bad = False
                for f in frames:
                    try:
                        size = pgm_size(f)
                    except (OSError, ValueError) as exc:
                        errors.append(f"{f}: {exc}")
                        bad = True
                        continue
                    if size not in FRAME_SIZES:
                        errors.append(f"{f}: unsupported dimensions {size[0]}x{size[1]}")
                        bad = True
                    sizes.add(size)
                if len(sizes) > 1:
                    errors.append(f"{view_dir}: mixed frame sizes {sorted(sizes)}")
                    bad = True
                if not bad:
                    index.entries.append(IndexEntry(subj.name, m.group(1), m.group(2), view,
                                                    str(view_dir), len(frames)))
    if errors:
        raise DatasetError(errors)
    return index


def load_sequence(entry: IndexEntry) -> GaitSequence:
    names = sorted(f for f in os.listdir(entry.path) if f.endswith(".pgm"))
    frames = np.stack([binarize(read_pgm(os.path.join(entry.path, n))) for n in names])
    return GaitSequence(frames, entry.subject_id, entry.condition, entry.view, entry.sequence_id)


def load_sequences(index: DatasetIndex) -> list[GaitSequence]:
    return [load_sequence(e) for e in index]


def save_sequence(root, seq: GaitSequence) -> str:
    d = Path(root) / seq.subject_id / seq.seq_key / f"{seq.view:03d}"
    d.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(seq.frames):
        write_pgm(d / f"{i:03d}.pgm", fr)
    return str(d)


def write_manifest(root, index: DatasetIndex):
    root = Path(root)
    lines = [MANIFEST_HEADER]
    for e in index:
        rel = Path(e.path).relative_to(root).as_posix()
        lines.append(f"{e.subject_id}\t{e.seq_key}\t{e.view}\t{e.frame_count}\t{rel}")
    (root / MANIFEST_NAME).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(root) -> list[tuple]:
    text = (Path(root) / MANIFEST_NAME).read_text(encoding="utf-8")
    rows = []
    for line in text.splitlines()[1:]:
        subject, seq_key, view, frames, rel = line.split("\t")
        rows.append((subject, seq_key, int(view), int(frames), rel))
    return rows


# ---------------------------------------------------------------------------
# synthetic walkers
# ---------------------------------------------------------------------------

# (low, high) for each identity parameter, in pixels / radians / frames.
IDENTITY_RANGES = {
    "torso_width": (6.0, 11.0),
    "head_size": (3.0, 5.5),
    "leg_length": (19.0, 27.0),
    "stride_amplitude": (0.2, 0.6),
    "gait_period": (8.0, 16.0),
    "phase_offset": (0.0, 2 * np.pi),
}
_MIN_PARAM_GAP = 0.1  # fraction of the range that counts as "different"


@dataclass
class SyntheticSpec:
    num_ids: int = 20
    seqs_per_id: int = 8
    frames: int = 30
    views: tuple = (0, 90)
    conditions: tuple = ("NM",)
    seed: int = 0
    height: int = 64
    width: int = 44
    # Per-condition sequence counts override seqs_per_id, e.g. {"NM": 6, "BG": 2}.
    seqs_per_condition: dict | None = None
    identity_params: list | None = None


def draw_identities(num_ids: int, seed: int) -> list[dict]:
    """Identity parameter sets; every pair differs in at least two parameters
    by at least 10% of that parameter's range."""
    if num_ids < 2:
        raise ValueError("need at least 2 identities")
    rng = np.random.default_rng([seed, 0x1D])
    names = list(IDENTITY_RANGES)
    lo = np.array([IDENTITY_RANGES[n][0] for n in names])
    hi = np.array([IDENTITY_RANGES[n][1] for n in names])
    chosen = []
    while len(chosen) < num_ids:
        cand = rng.uniform(lo, hi)
        if all((np.abs(cand - c) >= _MIN_PARAM_GAP * (hi - lo)).sum() >= 2 for c in chosen):
            chosen.append(cand)
    return [dict(zip(names, map(float, c))) for c in chosen]


def _segment_dist(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy + 1e-12), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render_frame(ident: dict, t: float, view: int, condition: str, height=64, width=44,
                 jitter=(0.0, 0.0, 1.0)) -> np.ndarray:
    """One binary silhouette.

    The walker is drawn in a canonical side view, then the horizontal axis is
    scaled and sheared as a function of ``view`` (degrees).  ``jitter`` is a
    per-sequence (dx, phase, scale) nuisance.
    """
    dx, dphase, scale = jitter
    s = height / 64.0 * scale
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    cx, ground = width / 2.0 + dx, height - 4.0 * s
    theta = np.deg2rad(view)
    sx = 0.55 + 0.45 * abs(np.sin(theta))
    shear = 0.12 * np.cos(theta)
    cy = height / 2.0
    # inverse map: output pixel -> canonical coordinates
    u = cx + (xs - cx - shear * (ys - cy)) / sx
    v = ys

    leg = ident["leg_length"] * s
    torso_w = ident["torso_width"] * s * (1.5 if condition == "CL" else 1.0)
    head_r = ident["head_size"] * s
    hip_y = ground - leg
    shoulder_y = hip_y - 0.7 * leg
    phase = 2 * np.pi * t / ident["gait_period"] + ident["phase_offset"] + dphase
    swing = ident["stride_amplitude"] * np.sin(phase)

    mask = np.zeros((height, width), dtype=bool)
    torso_bottom = hip_y + (0.25 * leg if condition == "CL" else 0.0)
    mask |= (np.abs(u - cx) <= torso_w / 2) & (v >= shoulder_y) & (v <= torso_bottom)
    head_y = shoulder_y - head_r - 0.5 * s
    mask |= (u - cx) ** 2 + (v - head_y) ** 2 <= head_r ** 2
    for sign in (1.0, -1.0):
        a = sign * swing
        knee_x, knee_y = cx + 0.5 * leg * np.sin(a), hip_y + 0.5 * leg * np.cos(a)
        bend = a - 0.5 * abs(ident["stride_amplitude"] * np.cos(phase))
        foot_x, foot_y = knee_x + 0.5 * leg * np.sin(bend), knee_y + 0.5 * leg * np.cos(bend)
        mask |= _segment_dist(u, v, cx, hip_y, knee_x, knee_y) <= 2.0 * s
        mask |= _segment_dist(u, v, knee_x, knee_y, foot_x, foot_y) <= 1.6 * s
        arm = -0.8 * a
        hand_x, hand_y = cx + 0.6 * leg * np.sin(arm), shoulder_y + 0.6 * leg * np.cos(arm)
        mask |= _segment_dist(u, v, cx, shoulder_y + 1.0, hand_x, hand_y) <= 1.2 * s
    if condition == "BG":
        bx, by = cx + torso_w / 2 + 3.0 * s, hip_y - 3.0 * s
        mask |= ((u - bx) / (4.0 * s)) ** 2 + ((v - by) / (6.0 * s)) ** 2 <= 1.0
    return mask.astype(np.float32)


def synthesize_sequence(ident: dict, frames: int, view: int, condition: str, rng,
                        height=64, width=44) -> np.ndarray:
    # the phase nuisance stays small so that phase_offset remains an identity trait
    jitter = (rng.uniform(-1.0, 1.0), rng.uniform(-0.15, 0.15), rng.uniform(0.97, 1.03))
    speed = rng.uniform(0.98, 1.02)
    out = np.stack([render_frame(ident, i * speed, view, condition, height, width, jitter)
                    for i in range(frames)])
    # sparse boundary-free speckle imitating segmentation noise
    flips = rng.random(out.shape) < 0.004
    return np.where(flips, 1.0 - out, out).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetIndex:
    """Write a dataset tree plus manifest.  Same spec -> byte-identical files."""
    if spec.num_ids < 2:
        raise ValueError("num_ids must be at least 2")
    idents = spec.identity_params or draw_identities(spec.num_ids, spec.seed)
    if len(idents) != spec.num_ids:
        raise ValueError("identity_params length must equal num_ids")
    counts = spec.seqs_per_condition or {c: spec.seqs_per_id for c in spec.conditions}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ident in enumerate(idents):
        subject = f"{i + 1:03d}"
        for ci, cond in enumerate(CONDITIONS):
            for sq in range(counts.get(cond, 0)):
                for view in spec.views:
                    rng = np.random.default_rng([spec.seed, i, ci, sq, int(view)])
                    frames = synthesize_sequence(ident, spec.frames, int(view), cond, rng,
                                                 spec.height, spec.width)
                    seq = GaitSequence(frames, subject, cond, int(view), f"{sq + 1:02d}")
                    path = save_sequence(out_dir, seq)
                    entries.append(IndexEntry(subject, cond, seq.sequence_id, int(view), path, spec.frames))
    index = DatasetIndex(str(out_dir), sorted(entries, key=lambda e: (e.subject_id, e.seq_key, e.view)))
    write_manifest(out_dir, index)
    return index


# ---------------------------------------------------------------------------
# clip sampling
# ---------------------------------------------------------------------------

def clip_indices(length: int, n: int, mode: str, rng=None) -> np.ndarray:
    if n < 1:
        raise ValueError("clip length must be >= 1")
    if mode == "test":
        return np.arange(length)
    if mode != "train":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if length >= n:
        start = int(rng.integers(0, length - n + 1)) if length > n else 0
        return np.arange(start, start + n)
    return np.arange(n) % length


def sample_clip(seq: GaitSequence, n: int, mode: str = "train", rng=None) -> np.ndarray:
    """Train: contiguous window of ``n`` frames (looping short sequences).
    Test: every frame."""
    return seq.frames[clip_indices(len(seq), n, mode, rng)]
