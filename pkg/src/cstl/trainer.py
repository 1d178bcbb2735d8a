"""(p, k) batch sampling, Adam, checkpoints and the training loop."""
from __future__ import annotations

import csv
import logging
import os
import struct
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import GaitSequence, sample_clip
from .model import CSTLNetwork, ModelConfig
from .mste import SCALES
from .numkernel import ParamSet

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CSTLCKPT1"
METRICS_HEADER = ("iter", "total", "tri", "ce")


class NumericalError(RuntimeError):
    """Non-finite loss during training."""


@dataclass
class TrainConfig:
    p: int = 8
    k: int = 2
    frames: int = 30
    lr: float = 1e-4
    iterations: int = 2000
    margin: float = 0.2
    heads: int = 4
    parts: int = 16
    embed_dim: int = 64
    profile: str = "toy"
    local_variant: str = "fc"
    scales: tuple = SCALES
    use_ata: bool = True
    use_global: bool = True
    use_ssfl: bool = True
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 500
    log_every: int = 50
    train_views: tuple | None = None
    train_first_seqs: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.p * self.k < 4:
            raise ValueError("p*k must be at least 4")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        unknown = set(self.scales) - set(SCALES)
        if unknown or not self.scales:
            raise ValueError(f"invalid scales {self.scales!r}")

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(profile=self.profile, parts=self.parts, heads=self.heads,
                           embed_dim=self.embed_dim, num_classes=num_classes,
                           local_variant=self.local_variant, scales=tuple(self.scales),
                           use_ata=self.use_ata, use_global=self.use_global,
                           use_ssfl=self.use_ssfl, margin=self.margin)

    def replace(self, **kw) -> "TrainConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# key = value config files
# ---------------------------------------------------------------------------

def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        return tuple(int(x) if x.lstrip("-").isdigit() else x for x in items)
    if raw.lower() in ("none", ""):
        return None
    return raw


_OPTIONAL_TYPES = {"checkpoint_dir": str, "train_views": tuple, "train_first_seqs": int}


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    base = base or TrainConfig()
    values = {f.name: getattr(base, f.name) for f in fields(base)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in values:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        current = values[key]
        if current is None and key in _OPTIONAL_TYPES:
            proto = {str: "", tuple: (), int: 0}[_OPTIONAL_TYPES[key]]
            values[key] = None if raw.lower() in ("none", "") else _parse_value(raw, proto)
        else:
            values[key] = _parse_value(raw, current)
    return TrainConfig(**values)


def format_config(cfg) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def group_by_subject(sequences: list[GaitSequence]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(sequences):
        groups.setdefault(s.subject_id, []).append(i)
    return dict(sorted(groups.items()))


def sample_pk_batch(sequences: list[GaitSequence], labels: dict[str, int], p: int, k: int,
                    frames: int, rng, groups=None):
    """``p`` distinct subjects, ``k`` clips each (with replacement when a subject
    has fewer than ``k`` sequences).  Returns (clips [p*k, n, H, W], labels)."""
    groups = groups or group_by_subject(sequences)
    subjects = list(groups)
    if len(subjects) < 2:
        raise ValueError("need at least 2 subjects for a (p, k) batch")
    if len(subjects) < p:
        raise ValueError(f"only {len(subjects)} subjects for p={p}")
    chosen = rng.choice(len(subjects), size=p, replace=False)
    clips, y = [], []
    for si in chosen:
        pool = groups[subjects[si]]
        picks = rng.choice(len(pool), size=k, replace=len(pool) < k)
        for j in picks:
            seq = sequences[pool[j]]
            clips.append(sample_clip(seq, frames, "train", rng))
            y.append(labels[seq.subject_id])
    return np.stack(clips), np.asarray(y)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: ParamSet, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        if lr == 0:
            continue
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_entry(fh, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_entries(buf: bytes):
    out, off = {}, len(CKPT_MAGIC)
    while off < len(buf):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    return out


def save_checkpoint(path, net: CSTLNetwork, state: AdamState | None = None, train_cfg=None):
    """Binary parameters (+ optimizer state) with a ``.cfg`` sidecar for the architecture."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name, v in net.params.items():
            _write_entry(fh, name, v.data)
        if state is not None:
            for name in net.params:
                if name in state.m:
                    _write_entry(fh, f"adam.m/{name}", state.m[name])
                    _write_entry(fh, f"adam.v/{name}", state.v[name])
            _write_entry(fh, "adam.step", np.asarray(state.step, dtype=np.float32))
    os.replace(tmp, path)
    lines = [f"model.{k} = {_fmt(v)}" for k, v in net.config.to_dict().items()]
    if train_cfg is not None:
        lines += format_config(train_cfg).splitlines()
    Path(str(path) + ".cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _read_model_config(path) -> ModelConfig:
    text = Path(str(path) + ".cfg").read_text(encoding="utf-8")
    proto = ModelConfig()
    d = {}
    for line in text.splitlines():
        if not line.startswith("model."):
            continue
        key, raw = (s.strip() for s in line[len("model."):].split("=", 1))
        cur = getattr(proto, key)
        if key == "channels":
            d[key] = None if raw == "None" else tuple(int(x) for x in raw.split(","))
        else:
            d[key] = _parse_value(raw, cur)
    return ModelConfig.from_dict(d)


def load_checkpoint(path, net: CSTLNetwork | None = None):
    """Returns (network, AdamState).  Builds the network from the sidecar when
    ``net`` is not given."""
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    entries = _read_entries(buf)
    if net is None:
        net = CSTLNetwork(_read_model_config(path))
    net.params.load_state_dict({n: entries[n] for n in net.params})
    state = AdamState()
    if "adam.step" in entries:
        state.step = int(entries["adam.step"])
        for name in net.params:
            if f"adam.m/{name}" in entries:
                state.m[name] = entries[f"adam.m/{name}"].copy()
                state.v[name] = entries[f"adam.v/{name}"].copy()
    return net, state


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def iteration_rng(seed: int, it: int):
    """Batch randomness is a pure function of (seed, iteration) so resumed runs
    draw the same batches as uninterrupted ones."""
    return np.random.default_rng([seed, it])


@dataclass
class TrainResult:
    network: CSTLNetwork
    history: list = field(default_factory=list)   # (iter, total, tri, ce)
    labels: dict = field(default_factory=dict)
    state: AdamState | None = None
    seconds: float = 0.0


def select_training(sequences, views=None, first_seqs=None) -> list[GaitSequence]:
    """Keep only ``views`` (if given) and each subject's first ``first_seqs``
    sequence keys in sorted order (if given)."""
    seqs = list(sequences)
    if views is not None:
        keep_views = set(views)
        seqs = [s for s in seqs if s.view in keep_views]
    if first_seqs is not None:
        keys = defaultdict(set)
        for s in seqs:
            keys[s.subject_id].add(s.seq_key)
        chosen = {(subj, k) for subj, ks in keys.items() for k in sorted(ks)[:first_seqs]}
        seqs = [s for s in seqs if (s.subject_id, s.seq_key) in chosen]
    return seqs


def make_labels(sequences) -> dict[str, int]:
    return {s: i for i, s in enumerate(sorted({q.subject_id for q in sequences}))}


def train(cfg: TrainConfig, sequences: list[GaitSequence], resume: str | None = None,
          metrics_path: str | None = None, network: CSTLNetwork | None = None,
          iterations: int | None = None, callback=None) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps on (p, k) batches.

    Writes one CSV row per iteration to ``metrics_path`` and a checkpoint every
    ``cfg.checkpoint_every`` iterations (and at the end) under
    ``cfg.checkpoint_dir``.  A non-finite loss raises :class:`NumericalError`
    without touching the last written checkpoint.
    """
    if not sequences:
        raise ValueError("empty training set")
    labels = make_labels(sequences)
    groups = group_by_subject(sequences)
    if network is None:
        network = CSTLNetwork(cfg.model_config(len(labels)), seed=cfg.seed)
    state = AdamState()
    start = 0
    if resume:
        network, state = load_checkpoint(resume, network)
        start = state.step
    total_iters = cfg.iterations if iterations is None else iterations
    ckpt_path = Path(cfg.checkpoint_dir) / "checkpoint.ckpt" if cfg.checkpoint_dir else None

    metrics_fh = writer = None
    if metrics_path:
        new = start == 0 or not os.path.exists(metrics_path)
        metrics_fh = open(metrics_path, "w" if new else "a", newline="")
        writer = csv.writer(metrics_fh, lineterminator="\n")
        if new:
            writer.writerow(METRICS_HEADER)
    result = TrainResult(network, labels=labels, state=state)
    t0 = time.perf_counter()
    try:
        for it in range(start, total_iters):
            rng = iteration_rng(cfg.seed, it)
            clips, y = sample_pk_batch(sequences, labels, cfg.p, cfg.k, cfg.frames, rng, groups)
            network.params.zero_grad()
            fwd = network.forward(clips)
            L, L_tri, L_ce = network.loss(fwd, y)
            row = (it + 1, float(L.data), float(L_tri.data), float(L_ce.data) if L_ce is not None else 0.0)
            if not np.isfinite(row[1]):
                raise NumericalError(f"non-finite loss at iteration {it + 1}")
            L.backward()
            adam_step(network.params, network.params.grads(), state, cfg.lr)
            result.history.append(row)
            if writer:
                writer.writerow([row[0]] + [f"{x:.8g}" for x in row[1:]])
            if cfg.log_every and (it + 1) % cfg.log_every == 0:
                log.info("iter %d total %.4f tri %.4f ce %.4f", *row)
            if callback is not None:
                callback(it + 1, row, network)
            if ckpt_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, network, state, cfg)
        if ckpt_path:
            save_checkpoint(ckpt_path, network, state, cfg)
    finally:
        if metrics_fh:
            metrics_fh.close()
    result.seconds = time.perf_counter() - t0
    return result
