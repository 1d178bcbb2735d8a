import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cstl.data import GaitSequence, load_sequences
from cstl.evaluation import (EMB_MAGIC, EmbeddingRecord, embed_sequence, embed_sequences,
                             mix_views, mixed_probe_records, part_distance, protocol_split,
                             rank_k_eval, read_embeddings, scenario_eval, view_pairs,
                             write_embeddings)
from cstl.model import CSTLNetwork, ModelConfig

from fixtures import CASIA_VIEWS, make_casia_tree
from oracles import part_distance_oracle, rank_oracle


def rec(subject, cond, view, emb, seq="01"):
    return EmbeddingRecord(subject, cond, view, np.asarray(emb, np.float32), seq)


def as_tuples(records):
    return [(r.subject_id, r.condition, r.view, r.embedding.astype(np.float64)) for r in records]


@pytest.fixture(scope="module")
def tiny_model():
    cfg = ModelConfig(channels=(2, 4, 4, 4), parts=2, heads=2, embed_dim=4, num_classes=3,
                      strict_resolution=False)
    return CSTLNetwork(cfg, seed=0)


def small_seq(rng, subject="001", cond="NM", view=0, seq="01", n=6):
    return GaitSequence((rng.random((n, 8, 6)) > 0.5).astype(np.float32), subject, cond, view, seq)


# ---------------------------------------------------------------- distance

def test_distance_matches_oracle(rng):
    a = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=(2, 4, 5))
    d = part_distance(a, b)
    for i in range(3):
        for j in range(2):
            assert math.isclose(d[i, j], part_distance_oracle(a[i], b[j]), rel_tol=1e-12)


@given(arrays(np.float64, (3, 2, 4), elements=st.floats(-10, 10)))
def test_distance_symmetry_and_zero(x):
    d = part_distance(x, x)
    np.testing.assert_allclose(d, d.T, rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.diag(d), 0.0, atol=0)


# ---------------------------------------------------------------- ranking

def test_exact_probe_ranks_first():
    gallery = [rec("a", "NM", 0, [[0.0, 0.0]]), rec("b", "NM", 0, [[1.0, 0.0]]),
               rec("c", "NM", 0, [[0.0, 1.0]])]
    probe = [rec("b", "NM", 90, [[1.0, 0.0]])]
    r = rank_k_eval(gallery, probe, ks=(1,))
    assert r.cells[("NM", 90, 0)][1] == 100.0


def five_record_fixture():
    """Hand-built gallery of 3 and probe of 2 with a near-tie and a miss."""
    gallery = [rec("a", "NM", 0, [[0.0, 0.0], [0.0, 0.0]]),
               rec("b", "NM", 0, [[1.0, 0.0], [0.0, 1.0]]),
               rec("c", "NM", 0, [[3.0, 0.0], [3.0, 0.0]])]
    probe = [rec("b", "BG", 90, [[0.9, 0.0], [0.0, 1.0]]),      # nearest is b
             rec("c", "BG", 90, [[0.2, 0.0], [0.0, 0.1]])]      # nearest is a, c last
    return gallery, probe


def test_rank_matches_sort_oracle_on_five_records():
    gallery, probe = five_record_fixture()
    ks = (1, 2, 3)
    got = rank_k_eval(gallery, probe, ks).cells
    want = rank_oracle(as_tuples(gallery), as_tuples(probe), ks)
    assert got == want
    assert got[("BG", 90, 0)] == {1: 50.0, 2: 50.0, 3: 100.0}


def random_records(rng, n_subj, views, per, K=2, C=3, cond="NM"):
    out = []
    for s in range(n_subj):
        for v in views:
            for q in range(per):
                out.append(rec(f"{s:02d}", cond, v, rng.normal(size=(K, C)), f"{q + 1:02d}"))
    return out


@given(st.integers(0, 10_000), st.booleans())
def test_rank_matches_oracle_random(seed, exclude):
    rng = np.random.default_rng(seed)
    gallery = random_records(rng, 4, (0, 90), 1)
    probe = random_records(rng, 4, (0, 90), 1, cond="BG")
    ks = (1, 2, 5)
    got = rank_k_eval(gallery, probe, ks, exclude).cells
    assert got == rank_oracle(as_tuples(gallery), as_tuples(probe), ks, exclude)


@given(st.integers(0, 10_000))
def test_rank_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    r = rank_k_eval(random_records(rng, 6, (0, 90), 1), random_records(rng, 6, (0, 90), 1, cond="CL"),
                    ks=(1, 2, 3, 5, 10))
    for acc in r.cells.values():
        vals = [acc[k] for k in r.ks]
        assert vals == sorted(vals)


@given(st.integers(0, 10_000), st.integers(0, 5))
def test_duplicate_match_never_hurts(seed, which):
    rng = np.random.default_rng(seed)
    gallery = random_records(rng, 6, (0,), 1)
    probe = random_records(rng, 6, (90,), 1, cond="BG")
    before = rank_k_eval(gallery, probe, ks=(1,)).cells[("BG", 90, 0)][1]
    subj = probe[which].subject_id
    dup = [g for g in gallery if g.subject_id == subj][0]
    after = rank_k_eval(gallery + [dup], probe, ks=(1,)).cells[("BG", 90, 0)][1]
    assert after >= before


def test_ties_keep_gallery_order():
    gallery = [rec("x", "NM", 0, [[1.0]]), rec("y", "NM", 0, [[1.0]])]
    r = rank_k_eval(gallery, [rec("y", "NM", 90, [[1.0]])], ks=(1, 2))
    assert r.cells[("NM", 90, 0)] == {1: 0.0, 2: 100.0}


def test_exclusion_with_same_view_gallery_is_undefined():
    gallery = [rec("a", "NM", 0, [[0.0]]), rec("b", "NM", 0, [[1.0]])]
    probe = [rec("a", "BG", 0, [[0.0]])]
    r = rank_k_eval(gallery, probe, ks=(1,), exclude_identical_view=True)
    assert math.isnan(r.per_view("BG", 1)[0])
    assert math.isnan(r.mean("BG", 1))
    assert "nan" in r.to_csv()
    r2 = rank_k_eval(gallery, probe, ks=(1,), exclude_identical_view=False)
    assert r2.cells[("BG", 0, 0)][1] == 100.0


def test_leak_counter_and_pair_count(rng):
    gallery = random_records(rng, 3, (0, 90, 180), 1)
    probe = random_records(rng, 3, (0, 90, 180), 1, cond="BG")
    r = rank_k_eval(gallery, probe, ks=(1,))
    assert r.leaked_pairs == 0
    # each probe sees the 3 subjects of each of the 2 other views
    assert r.compared_pairs == len(probe) * 2 * 3


def test_mean_and_std_aggregation():
    # probe view 0 scores 100 against gallery view 90 and 0 against 180
    g = [rec("a", "NM", 90, [[0.0]]), rec("b", "NM", 90, [[5.0]]),
         rec("a", "NM", 180, [[5.0]]), rec("b", "NM", 180, [[0.0]]),
         rec("a", "NM", 0, [[0.0]]), rec("b", "NM", 0, [[5.0]])]
    p = [rec("a", "CL", 0, [[0.0]]), rec("a", "CL", 90, [[0.0]])]
    r = rank_k_eval(g, p, ks=(1,))
    pv = r.per_view("CL", 1)
    assert pv == {0: 50.0, 90: 50.0}
    assert r.mean("CL", 1) == 50.0
    assert r.std("CL", 1) == 0.0
    lines = r.to_csv().splitlines()
    assert lines[0] == "condition,rank,0,90,mean,std"
    assert lines[1] == "CL,1,50.0000,50.0000,50.0000,0.0000"


# ---------------------------------------------------------------- protocols

def test_casia_protocol_split(tmp_path):
    index = make_casia_tree(tmp_path, subjects=2, frames=1)
    records = [EmbeddingRecord(e.subject_id, e.condition, e.view, np.zeros((1, 1), np.float32),
                               e.sequence_id) for e in index]
    gallery, probe = protocol_split(records, "NM", 4)
    assert len(gallery) == 2 * 4 * 11 and len(probe) == 2 * 6 * 11
    assert {g.seq_key for g in gallery} == {"NM-01", "NM-02", "NM-03", "NM-04"}
    assert {p.seq_key for p in probe} == {"NM-05", "NM-06", "BG-01", "BG-02", "CL-01", "CL-02"}
    r = rank_k_eval(gallery, probe, ks=(1,))
    assert r.leaked_pairs == 0
    assert set(r.conditions()) == {"NM", "BG", "CL"}
    assert r.probe_views("NM") == list(CASIA_VIEWS)


def test_view_pairs_enumeration():
    assert view_pairs((0, 90), 90) == [(0, 90)]
    assert view_pairs(CASIA_VIEWS, 36) == [(v, v + 36) for v in CASIA_VIEWS if v + 36 <= 180]
    assert view_pairs((0, 90), 0) == [(0, 0), (90, 90)]
    with pytest.raises(ValueError):
        view_pairs((0, 90), 45)


def test_mix_views_halves(rng):
    a = small_seq(rng, view=0, n=6)
    b = small_seq(rng, view=90, n=6)
    m = mix_views(a, b)
    np.testing.assert_array_equal(m.frames, np.concatenate([a.frames[:3], b.frames[3:]]))
    np.testing.assert_array_equal(mix_views(a, a).frames, a.frames)


def two_view_set(rng):
    seqs = []
    for s in ("001", "002", "003"):
        for q in range(1, 4):
            for v in (0, 90):
                seqs.append(small_seq(rng, s, "NM", v, f"{q:02d}"))
    return seqs


def test_mixed_delta_zero_equals_standard(rng, tiny_model):
    seqs = two_view_set(rng)
    mixed = scenario_eval(seqs, tiny_model, "mixed_views", delta=0, gallery_count=2, ks=(1, 2))
    recs = embed_sequences(seqs, tiny_model)
    g, p = protocol_split(recs, "NM", 2)
    assert mixed.report.cells == rank_k_eval(g, p, (1, 2)).cells


def test_mixed_delta_90_pairs(rng, tiny_model):
    seqs = two_view_set(rng)
    out = scenario_eval(seqs, tiny_model, "mixed_views", delta=90, gallery_count=2, ks=(1,))
    assert out.pairs == ((0, 90),)
    # probe views (0, 90) exclude both gallery views -> undefined cell
    assert out.report.probe_views("NM") == [(0, 90)]
    assert out.report.leaked_pairs == 0
    probes = mixed_probe_records([s for s in seqs if s.sequence_id == "03"], tiny_model, 90)
    assert len(probes) == 3 and all(p.view == (0, 90) for p in probes)
    with pytest.raises(ValueError):
        scenario_eval(seqs, tiny_model, "mixed_views", delta=45)


def test_unseen_subset_equals_standard(rng, tiny_model):
    seqs = two_view_set(rng)
    out = scenario_eval(seqs, tiny_model, "unseen_views", train_views=(0, 90), test_views=(0,),
                        gallery_count=2, ks=(1,), exclude_identical_view=False)
    recs = embed_sequences([s for s in seqs if s.view == 0], tiny_model)
    g, p = protocol_split(recs, "NM", 2)
    assert out.report.cells == rank_k_eval(g, p, (1,), False).cells
    assert out.unseen_views == ()


# ---------------------------------------------------------------- embeddings

def test_embed_deterministic_and_length_sensitive(rng, tiny_model):
    seq = small_seq(rng, n=12)
    a = embed_sequence(seq, tiny_model)
    b = embed_sequence(seq, tiny_model)
    assert np.array_equal(a.embedding, b.embedding)
    assert a.embedding.shape == (2, 4)
    short = embed_sequence(seq, tiny_model, max_frames=5)
    assert not np.array_equal(a.embedding, short.embedding)


def test_embedding_file_round_trip(tmp_path, rng):
    recs = [rec("001", "NM", 18, rng.normal(size=(2, 3)), "04"),
            rec("002", "CL", (0, 90), rng.normal(size=(2, 3)), "02")]
    path = tmp_path / "e.bin"
    write_embeddings(path, recs)
    buf = path.read_bytes()
    assert buf.startswith(EMB_MAGIC)
    assert int.from_bytes(buf[8:12], "little") == 2
    back = read_embeddings(path)
    for x, y in zip(recs, back):
        assert (x.subject_id, x.condition, x.view, x.sequence_id) == (y.subject_id, y.condition, y.view, y.sequence_id)
        assert np.array_equal(x.embedding, y.embedding)


def test_embedding_file_rejects_mixed_shapes(tmp_path, rng):
    recs = [rec("1", "NM", 0, np.zeros((2, 3))), rec("2", "NM", 0, np.zeros((2, 4)))]
    with pytest.raises(ValueError):
        write_embeddings(tmp_path / "e.bin", recs)
