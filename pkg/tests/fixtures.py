"""On-disk dataset fixtures shared by several test modules."""
import numpy as np

from cstl.data import GaitSequence, load_dataset, save_sequence, write_manifest

CASIA_VIEWS = tuple(range(0, 181, 18))           # 11 views
CASIA_SEQS = [("NM", i) for i in range(1, 7)] + [("BG", 1), ("BG", 2), ("CL", 1), ("CL", 2)]


def blob_frames(rng, n, h=64, w=44):
    """Fabricated silhouettes: a random filled ellipse per frame."""
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros((n, h, w), np.float32)
    for i in range(n):
        cy, cx = rng.uniform(20, 44), rng.uniform(14, 30)
        ry, rx = rng.uniform(10, 20), rng.uniform(4, 10)
        out[i] = (((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1).astype(np.float32)
    return out


def make_casia_tree(root, subjects=2, frames=2, seed=0):
    rng = np.random.default_rng(seed)
    for s in range(1, subjects + 1):
        for cond, sq in CASIA_SEQS:
            for view in CASIA_VIEWS:
                seq = GaitSequence(blob_frames(rng, frames), f"{s:03d}", cond, view, f"{sq:02d}")
                save_sequence(root, seq)
    index = load_dataset(root)
    write_manifest(root, index)
    return index
