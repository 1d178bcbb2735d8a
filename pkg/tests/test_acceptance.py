"""Acceptance checks.  Each test prints one ``PASS``/``FAIL`` line for its criterion.

The learning checks (4 and 5) train nine models on a single CPU core and take
a while; they share one set of runs through a module-scoped fixture.
"""
import hashlib
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from cstl.data import SyntheticSpec, generate_synthetic, load_dataset, load_sequences
from cstl.evaluation import EmbeddingRecord, embed_sequences, protocol_split, rank_k_eval
from cstl.gradsuite import OP_TOL, PIPELINE_TOL, run_suite
from cstl.model import BASELINE, CSTLNetwork, ModelConfig
from cstl.numkernel import softmax
from cstl.ata import transformer_block
from cstl.losses import batch_all_triplet
from cstl.mste import long_term
from cstl.ssfl import part_scores, recombine
from cstl.trainer import TrainConfig, load_checkpoint, save_checkpoint, select_training, train

from conftest import ACCEPTANCE_LINES, V
from fixtures import make_casia_tree
from oracles import rank_oracle, transformer_oracle, triplet_exhaustive
from test_ata import _block_params
from test_data import tree_digest
from test_evaluation import as_tuples, five_record_fixture

SEEDS = (0, 1, 2)
BENCH = SyntheticSpec(num_ids=20, seqs_per_id=8, frames=30, views=(0, 90), seed=0)
TRAIN_SEQS = 6
LEARN = dict(iterations=400, lr=1e-4, frames=30)


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_suite():
    with threadpool_limits(1):
        t0 = time.perf_counter()
        res = run_suite()
        seconds = time.perf_counter() - t0
    ok = (res.ok and res.max_op_error <= OP_TOL and res.max_pipeline_error <= PIPELINE_TOL
          and seconds <= 60.0)
    assert verdict(1, ok, f"max op error {res.max_op_error:.2e} (<= {OP_TOL:.0e}), pipeline "
                          f"{res.max_pipeline_error:.2e} (<= {PIPELINE_TOL:.0e}), {len(res.cases)} cases, "
                          f"{seconds:.1f}s (<= 60s)")


# ---------------------------------------------------------------- 2

def test_criterion_2_structural_invariants():
    rng = np.random.default_rng(0)
    checks = {}

    x = rng.standard_normal((5, 7, 9)) * 10
    checks["softmax rows"] = np.max(np.abs(softmax(V(x), axis=-1).data.sum(-1) - 1)) <= 1e-6
    net = CSTLNetwork(ModelConfig(channels=(2, 4, 8, 8), parts=4, heads=2, embed_dim=6, num_classes=4,
                                  strict_resolution=False), seed=0, dtype=np.float64)
    res = net.forward(rng.random((4, 6, 16, 8)))
    A = res.ata_attention.data
    checks["attention rows"] = np.max(np.abs(A.sum(-1) - 1)) <= 1e-6
    checks["A_T shape"] = A.shape == (4, 2, 4, 6, 6)

    C = 8
    P = rng.standard_normal((2, 6, C, 4))
    prm = [V(rng.standard_normal(s)) for s in ((C, 1), (1,), (1, C), (C,))]
    perm = rng.permutation(6)
    checks["T_l permutation"] = np.max(np.abs(long_term(V(P), *prm).data
                                              - long_term(V(P[:, perm]), *prm).data)) <= 1e-6

    exact = True
    copies = True
    for i in range(100):
        r = np.random.default_rng(1000 + i)
        S = r.standard_normal((2, 5, 3, 8))
        wq, wk = V(r.standard_normal((2, 8, 4))), V(r.standard_normal((2, 8, 4)))
        ps = part_scores(V(S), wq, wk)
        s = ps.scores.data
        brute = np.array([[[max(range(5), key=lambda n: (s[b, h, k, n], -n)) for k in range(3)]
                           for h in range(2)] for b in range(2)])
        exact &= np.array_equal(ps.index, brute)
        T_f = r.standard_normal((2, 5, 8, 3))
        F_r = recombine(V(T_f), ps.index).data
        copies &= all(F_r[b, h, k].tobytes() == T_f[b, ps.index[b, h, k], :, k].tobytes()
                      for b in range(2) for h in range(2) for k in range(3))
    checks["SSFL argmax (100)"] = exact
    checks["F_r copies"] = copies

    ok = all(checks.values())
    assert verdict(2, ok, "; ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))


# ---------------------------------------------------------------- 3

def test_criterion_3_oracles():
    rng = np.random.default_rng(3)
    T = rng.standard_normal((1, 2, 3, 8))
    p = _block_params(rng)
    got = transformer_block(V(T), {k: V(v) for k, v in p.items()}).T_Ag.data
    ref, _ = transformer_oracle(T, p)
    e_tr = float(np.max(np.abs(got - ref)))

    y = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    F = rng.standard_normal((8, 4, 6)) * 0.3
    e_tri = abs(float(batch_all_triplet(V(F), y).data) - triplet_exhaustive(F, y))

    gallery, probe = five_record_fixture()
    rank_equal = rank_k_eval(gallery, probe, (1, 2, 3)).cells == rank_oracle(
        as_tuples(gallery), as_tuples(probe), (1, 2, 3))

    ok = e_tr <= 1e-5 and e_tri <= 1e-6 and rank_equal
    assert verdict(3, ok, f"transformer {e_tr:.1e} (<= 1e-5), triplet {e_tri:.1e} (<= 1e-6), "
                          f"rank-k exact {rank_equal}")


# ---------------------------------------------------------------- 4 and 5

@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    generate_synthetic(BENCH, root)
    return load_sequences(load_dataset(root))


def held_out_rank1(sequences, cfg):
    """Train on the first six sequences of every identity, then rank the two
    held-out sequences against them across views."""
    with threadpool_limits(1):
        net = train(cfg, select_training(sequences, first_seqs=TRAIN_SEQS)).network
        recs = embed_sequences(sequences, net)
    gallery, probe = protocol_split(recs, "NM", TRAIN_SEQS)
    return rank_k_eval(gallery, probe, ks=(1,), exclude_identical_view=True).overall(1)


VARIANTS = {"full": {}, "frame-only": dict(scales=("frame",)), "baseline": BASELINE}


@pytest.fixture(scope="module")
def learning_runs(benchmark):
    out = {}
    for name, kw in VARIANTS.items():
        out[name] = []
        for seed in SEEDS:
            cfg = TrainConfig(seed=seed, log_every=0, **LEARN, **kw)
            out[name].append(held_out_rank1(benchmark, cfg))
    return out


@pytest.mark.slow
def test_criterion_4_end_to_end_learning(learning_runs):
    accs = learning_runs["full"]
    med = float(np.median(accs))
    ok = med >= 80.0 and LEARN["iterations"] <= 3000
    assert verdict(4, ok, f"held-out rank-1 median {med:.2f}% over seeds {SEEDS} "
                          f"({', '.join(f'{a:.2f}' for a in accs)}), {LEARN['iterations']} iterations; "
                          "need >= 80%")


@pytest.mark.slow
def test_criterion_5_ablation_trend(learning_runs):
    med = {k: float(np.median(v)) for k, v in learning_runs.items()}
    ok = med["full"] >= med["baseline"] - 1.0 and med["full"] > med["frame-only"]
    assert verdict(5, ok, f"median rank-1 full {med['full']:.2f}, baseline {med['baseline']:.2f}, "
                          f"frame-only {med['frame-only']:.2f}; need full >= baseline - 1 and "
                          "full > frame-only")


# ---------------------------------------------------------------- 6

def test_criterion_6_protocol_fidelity(tmp_path):
    index = make_casia_tree(tmp_path, subjects=3, frames=1)
    recs = [EmbeddingRecord(e.subject_id, e.condition, e.view,
                            np.full((1, 1), int(e.subject_id), np.float32), e.sequence_id)
            for e in index]
    gallery, probe = protocol_split(recs, "NM", 4)
    per_subject = len(index) // 3
    g_keys = {g.seq_key for g in gallery}
    p_keys = {p.seq_key for p in probe}
    report = rank_k_eval(gallery, probe, ks=(1,), exclude_identical_view=True)
    ok = (per_subject == 110 and g_keys == {"NM-01", "NM-02", "NM-03", "NM-04"}
          and p_keys == {"NM-05", "NM-06", "BG-01", "BG-02", "CL-01", "CL-02"}
          and len(gallery) == 3 * 44 and len(probe) == 3 * 66 and report.leaked_pairs == 0
          and report.compared_pairs > 0)
    assert verdict(6, ok, f"{per_subject} sequences per subject, gallery {sorted(g_keys)}, "
                          f"probe {sorted(p_keys)}, leaked pairs {report.leaked_pairs} of "
                          f"{report.compared_pairs}")


# ---------------------------------------------------------------- 7

def test_criterion_7_determinism(tmp_path):
    spec = SyntheticSpec(num_ids=8, seqs_per_id=3, frames=12, views=(90,), seed=5)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    same_tree = tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    seqs = load_sequences(load_dataset(tmp_path / "a"))
    cfg = TrainConfig(p=4, k=2, frames=6, iterations=50, parts=8, heads=2, embed_dim=16, seed=11,
                      log_every=0)
    with threadpool_limits(1):
        r1 = train(cfg, seqs)
        r2 = train(cfg, seqs)
    same_hist = r1.history == r2.history
    same_params = all(np.array_equal(a.data, r2.network.params[n].data)
                      for n, a in r1.network.params.items())

    save_checkpoint(tmp_path / "m.ckpt", r1.network, r1.state, cfg)
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    clip = seqs[0].frames[None]
    same_emb = hashlib.sha256(loaded.embed(clip).tobytes()).digest() == \
        hashlib.sha256(r1.network.embed(clip).tobytes()).digest()

    ok = same_tree and same_hist and same_params and same_emb
    assert verdict(7, ok, f"generator byte-identical {same_tree}, 50-iteration train bitwise "
                          f"{same_hist and same_params}, checkpoint embeddings bitwise {same_emb}")
