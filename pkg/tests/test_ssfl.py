import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cstl.numkernel import ParamSet
from cstl.ssfl import (SSFL, classify_logits, fuse_salient, fuse_scales, part_scores, recombine,
                       weighted_feature)

from conftest import V

B, N, C, K, H = 2, 5, 8, 3, 2


def _qk(rng, C=C, H=H):
    d = C // H
    return V(rng.standard_normal((H, C, d))), V(rng.standard_normal((H, C, d)))


def test_fuse_scales_cases(rng):
    s = [V(rng.standard_normal((B, N, C, K))) for _ in range(3)]
    sel = np.vstack([np.eye(C), np.zeros((2 * C, C))])
    out = fuse_scales(s, V(sel), V(np.zeros(C))).data  # B,N,K,C
    assert np.array_equal(out, s[0].data.transpose(0, 1, 3, 2))
    zero = [V(np.zeros((B, N, C, K)))] * 3
    assert np.all(fuse_scales(zero, V(rng.standard_normal((3 * C, C))), V(np.zeros(C))).data == 0)
    w, b = rng.standard_normal((3 * C, C)), rng.standard_normal(C)
    cat = np.concatenate([t.data.transpose(0, 1, 3, 2) for t in s], axis=-1)
    assert np.allclose(fuse_scales(s, V(w), V(b)).data, cat @ w + b)


def test_part_scores_single_frame(rng):
    ps = part_scores(V(rng.standard_normal((B, 1, K, C))), *_qk(rng))
    assert ps.scores.shape == (B, H, K, 1)
    assert np.all(ps.index == 0)


def test_part_scores_all_ones_attention():
    # q = k = ones/sqrt(d): each dot product is 1
    d = C // H
    w = np.zeros((H, C, d))
    w[:, 0, :] = 1 / np.sqrt(d)
    S = np.zeros((B, N, K, C))
    S[..., 0] = 1.0
    ps = part_scores(V(S), V(w), V(w))
    assert np.allclose(ps.A_s.data, 1.0)
    assert np.allclose(ps.scores.data, N)
    assert np.all(ps.index == 0)


def test_part_scores_ones_vector_oracle(rng):
    S = rng.standard_normal((B, N, K, C))
    wq, wk = _qk(rng)
    ps = part_scores(V(S), wq, wk)
    one = np.ones(N)
    for b in range(B):
        for h in range(H):
            for k in range(K):
                q = S[b, :, k] @ wq.data[h]
                kk = S[b, :, k] @ wk.data[h]
                A = q @ kk.T  # no scaling, no softmax
                assert np.allclose(ps.A_s.data[b, h, k], A)
                assert np.allclose(ps.scores.data[b, h, k], one @ A)
    assert ps.A_s.shape == (B, H, K, N, N)


@given(st.integers(0, 2**31 - 1))
def test_selection_equals_brute_argmax(seed):
    r = np.random.default_rng(seed)
    ps = part_scores(V(r.standard_normal((B, N, K, C))), *_qk(r))
    s = ps.scores.data
    for b in range(B):
        for h in range(H):
            for k in range(K):
                row = list(s[b, h, k])
                best = max(range(N), key=lambda n: (row[n], -n))
                assert ps.index[b, h, k] == best
                assert all(row[ps.index[b, h, k]] >= v for v in row)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_selection_scale_covariance(seed, lam):
    r = np.random.default_rng(seed)
    S = r.standard_normal((B, N, K, C))
    wq, wk = _qk(r)
    a = part_scores(V(S), wq, wk)
    b = part_scores(V(lam * S), wq, wk)
    assert np.allclose(b.scores.data, lam ** 2 * a.scores.data, rtol=1e-9, atol=1e-9)
    gap = np.sort(a.scores.data, -1)
    if np.all(gap[..., -1] - gap[..., -2] > 1e-9 * np.abs(gap[..., -1]).max()):
        assert np.array_equal(a.index, b.index)


def test_weighted_feature_cases(rng):
    T = rng.standard_normal((B, N, C, K))
    onehot = np.zeros((B, H, K, N))
    onehot[..., 3] = 1
    out = weighted_feature(V(T), V(onehot)).data
    assert np.allclose(out, np.broadcast_to(T[:, 3].transpose(0, 2, 1)[:, None], out.shape))
    assert np.all(weighted_feature(V(T), V(np.zeros((B, H, K, N)))).data == 0)
    s = rng.standard_normal((B, H, K, N))
    ref = np.zeros((B, H, K, C))
    for b in range(B):
        for h in range(H):
            for k in range(K):
                for n in range(N):
                    ref[b, h, k] += T[b, n, :, k] * s[b, h, k, n]
    assert np.max(np.abs(weighted_feature(V(T), V(s)).data - ref)) <= 1e-6


def test_classify_logits_cases(rng):
    Ct = 5
    out = classify_logits(V(np.zeros((2, 4, 8, C))), V(rng.standard_normal((C, Ct))), V(np.zeros(Ct)))
    assert out.shape == (2, 4, 8, Ct) and np.all(out.data == 0)
    F, w, b = rng.standard_normal((2, 4, 8, C)), rng.standard_normal((C, Ct)), rng.standard_normal(Ct)
    assert np.allclose(classify_logits(V(F), V(w), V(b)).data, F @ w + b)
    with pytest.raises(ValueError):
        classify_logits(V(F), V(np.zeros((C, 1))), V(np.zeros(1)))
    with pytest.raises(ValueError):
        SSFL(ParamSet(), rng, C, 3, num_classes=1, heads=H)


def test_recombine_cases(rng):
    T1 = rng.standard_normal((B, 1, C, K))
    out = recombine(V(T1), np.zeros((B, H, K), int)).data
    assert np.array_equal(out, np.broadcast_to(T1[:, 0].transpose(0, 2, 1)[:, None], out.shape))
    T = rng.standard_normal((B, N, C, K))
    out = recombine(V(T), np.full((B, H, K), 2)).data
    assert np.array_equal(out[:, 0], T[:, 2].transpose(0, 2, 1))
    idx = rng.integers(0, N, (B, H, K))
    out = recombine(V(T), idx).data
    for b in range(B):
        for h in range(H):
            for k in range(K):
                assert out[b, h, k].tobytes() == T[b, idx[b, h, k], :, k].tobytes()
    with pytest.raises(IndexError):
        recombine(V(T), np.full((B, H, K), N))


def test_recombine_gradient_only_at_selected(rng):
    T = V(rng.standard_normal((B, N, C, K)), grad=True)
    idx = rng.integers(0, N, (B, H, K))
    g = rng.standard_normal((B, H, K, C))
    recombine(T, idx).backward(g)
    ref = np.zeros_like(T.data)
    for b in range(B):
        for h in range(H):
            for k in range(K):
                ref[b, idx[b, h, k], :, k] += g[b, h, k]
    assert np.allclose(T.grad, ref)


def test_fuse_salient_cases(rng):
    Fr, Fw = rng.standard_normal((B, 1, K, C)), rng.standard_normal((B, 1, K, C))
    assert np.array_equal(fuse_salient(V(Fr), V(Fw)).data, np.concatenate([Fr[:, 0], Fw[:, 0]], -1))
    Fr = rng.standard_normal((B, H, K, C))
    out = fuse_salient(V(Fr), V(np.zeros((B, H, K, C)))).data
    assert out.shape == (B, K, 2 * C) and np.all(out[..., C:] == 0)
    Fw = rng.standard_normal((B, H, K, C))
    assert np.allclose(fuse_salient(V(Fr), V(Fw)).data, np.concatenate([Fr.sum(1), Fw.sum(1)], -1))


def test_ssfl_module_contract(rng):
    ps = ParamSet()
    m = SSFL(ps, rng, C, 3, num_classes=4, heads=H, dtype=np.float64)
    T = V(rng.standard_normal((B, N, C, K)))
    scales = [T] + [V(rng.standard_normal((B, N, C, K))) for _ in range(2)]
    out = m(T, scales)
    assert out.F_S.shape == (B, K, 2 * C)
    assert out.logits.shape == (B, H, K, 4)
    rows = {T.data[b, n, :, k].tobytes() for b in range(B) for n in range(N) for k in range(K)}
    assert all(out.F_r.data[b, h, k].tobytes() in rows for b in range(B) for h in range(H) for k in range(K))
    distinct = {(b, int(out.scores.index[b, h, k]), k) for b in range(B) for h in range(H) for k in range(K)}
    assert len(distinct) <= B * H * K
    assert "ssfl.wq" in ps and "ata.wq" not in ps
