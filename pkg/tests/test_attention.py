import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dehazekit import oracles
from dehazekit.attention import (
    KVCache,
    adaptive_layer_norm,
    align_kv,
    cached_window_attention,
    compute_window_size,
    relative_position_bias,
    retention_ratio,
    unit_normalize,
    update_cache,
    window_geometry,
    window_merge,
    window_partition,
)
from dehazekit.numerics import ShapeError, bilinear_resize, layer_norm


class TestAdaptiveNorm:
    def test_uniform_r_matches_plain_ln(self, rng):
        x = rng.standard_normal((1, 6, 3, 3))
        g, b = rng.random(6), rng.random(6)
        # a small eps: the guard otherwise weighs in after N(r) shrinks the variance
        out = adaptive_layer_norm(x, np.full(6, 0.7), np.zeros(6), g, b, eps=1e-9)
        assert np.abs(out - layer_norm(x, g, b, eps=1e-9)).max() < 1e-5

    def test_constant_location_is_zero(self, rng):
        x = np.broadcast_to(rng.random((1, 1, 2, 2)), (1, 5, 2, 2))
        out = adaptive_layer_norm(x, np.ones(5), np.zeros(5), np.ones(5), np.zeros(5))
        assert np.abs(out).max() < 1e-12

    def test_composition_oracle(self, rng):
        x = rng.standard_normal((1, 4, 2, 2))
        r, b = np.array([1.0, 2, 3, 4]), np.array([0.5, 0, -0.5, 0])
        nr, nb = r / (math.sqrt(30) + 1e-6), b / (math.sqrt(0.5) + 1e-6)
        y = x * nr[None, :, None, None] + nb[None, :, None, None]
        mu, var = y.mean(axis=1, keepdims=True), y.var(axis=1, keepdims=True)
        want = (y - mu) / np.sqrt(var + 1e-5)
        np.testing.assert_allclose(adaptive_layer_norm(x, r, b, np.ones(4), np.zeros(4)), want, atol=1e-12)

    def test_per_image_vectors(self, rng):
        x = rng.standard_normal((2, 3, 2, 2))
        r, b = rng.random((2, 3)) + 0.1, rng.random((2, 3))
        out = adaptive_layer_norm(x, r, b, np.ones(3), np.zeros(3))
        for i in range(2):
            np.testing.assert_allclose(out[i:i + 1], adaptive_layer_norm(x[i:i + 1], r[i], b[i], np.ones(3), np.zeros(3)))

    @settings(max_examples=100, deadline=None)
    @given(c=st.integers(2, 32), s=st.floats(1.0, 100.0), seed=st.integers(0, 9999))
    def test_scale_invariance(self, c, s, seed):
        # the 1e-6 guard in N limits invariance to ~1e-6/|r|; sample |r| >= 1
        r = np.random.default_rng(seed).uniform(0.1, 2, c)
        r *= max(1.0, 1 / np.linalg.norm(r))
        assert np.abs(unit_normalize(r) - unit_normalize(r * s)).max() < 1e-6
        x = np.random.default_rng(seed + 1).standard_normal((1, c, 2, 2))
        b = np.random.default_rng(seed + 2).uniform(-1, 1, c)
        a1 = adaptive_layer_norm(x, r, b, np.ones(c), np.zeros(c)).argmax(axis=1)
        a2 = adaptive_layer_norm(x, r * s, b, np.ones(c), np.zeros(c)).argmax(axis=1)
        assert np.array_equal(a1, a2)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            adaptive_layer_norm(np.zeros((1, 3, 2, 2)), np.ones(4), np.zeros(3), np.ones(3), np.zeros(3))


class TestWindowSize:
    @pytest.mark.parametrize("h,w,want", [(512, 512, 64), (1024, 1024, 128), (1025, 1025, 132),
                                          (2048, 4096, 260), (8, 8, 1), (7, 100, 1), (1, 1, 1)])
    def test_table(self, h, w, want):
        assert compute_window_size(h, w) == want

    @settings(max_examples=200)
    @given(h=st.integers(1, 10_000), w=st.integers(1, 10_000))
    def test_formula(self, h, w):
        m = min(h, w)
        assert compute_window_size(h, w) == max(m // 8 + (4 if m > 1024 else 0), 1)

    def test_adapt_clamps_to_extent(self):
        g = window_geometry(3, 40, 5)
        assert g.w_adapt == 3 and g.pad_h == 0 and g.pad_w == 2


class TestPartition:
    def test_single_window_row_major(self, rng):
        x = rng.random((1, 2, 4, 4))
        win, geo = window_partition(x, 4)
        assert win.shape == (1, 16, 2) and geo.num_windows == 1
        np.testing.assert_array_equal(win[0, :, 0], x[0, 0].ravel())

    def test_two_by_two(self, rng):
        x = rng.random((1, 1, 6, 6))
        win, geo = window_partition(x, 3)
        assert geo.grid == (2, 2)
        np.testing.assert_array_equal(win[1, :, 0], x[0, 0, :3, 3:].ravel())
        np.testing.assert_array_equal(win[2, :, 0], x[0, 0, 3:, :3].ravel())

    def test_padded_roundtrip(self, rng):
        x = rng.random((1, 3, 5, 7))
        win, geo = window_partition(x, 4)
        assert (geo.pad_h, geo.pad_w, geo.num_windows) == (3, 1, 4)
        assert np.array_equal(window_merge(win, geo), x)
        assert np.all(win[1, 3::4, :] == 0)  # padded column of the top-right window

    def test_exhaustive_small_domain(self):
        base = np.arange(64 * 64, dtype=np.float32).reshape(1, 1, 64, 64)
        for h in range(1, 65):
            for w_ in range(1, 65):
                x = base[:, :, :h, :w_]
                for w in range(1, 17):
                    win, geo = window_partition(x, w)
                    if not np.array_equal(window_merge(win, geo), x):
                        pytest.fail(f"merge(partition) != id for {h}x{w_}, w={w}")

    def test_merge_shape_check(self, rng):
        win, geo = window_partition(rng.random((1, 1, 4, 4)), 2)
        with pytest.raises(ShapeError):
            window_merge(win[:3], geo)


class TestRelativeBias:
    def test_offsets(self, rng):
        table = rng.random((2, 15, 15))
        b = relative_position_bias(table, 3)
        assert b.shape == (2, 9, 9)
        for i in range(9):
            for j in range(9):
                dy, dx = i // 3 - j // 3, i % 3 - j % 3
                assert b[1, i, j] == table[1, dy + 7, dx + 7]

    def test_clipped_beyond_range(self, rng):
        table = rng.random((1, 3, 3))
        b = relative_position_bias(table, 4)
        assert b[0, 0, 15] == table[0, 0, 0]   # offset (-3, -3) clipped to (-1, -1)


class TestRetentionAndAlign:
    @pytest.mark.parametrize("c_a,eta,length,gamma,keep", [(0, 0.5, 8, 1.0, 8), (1, 0.5, 8, 0.5, 4),
                                                           (0.5, 0.5, 8, 0.75, 6)])
    def test_retention(self, c_a, eta, length, gamma, keep):
        assert retention_ratio(c_a, eta, length) == (gamma, keep)

    def test_align(self, rng):
        s = rng.random((4, 3))
        assert np.array_equal(align_kv(s, 4), s)
        np.testing.assert_allclose(align_kv(np.array([[1.0], [3.0]]), 3)[:, 0], [1, 2, 3])
        s5 = rng.random((5, 2))
        got = align_kv(s5, 8)
        for dim in range(2):
            want = bilinear_resize(s5[:, dim].reshape(1, 1, 1, 5), 1, 8, align_corners=True)[0, 0, 0]
            np.testing.assert_allclose(got[:, dim], want)
            for i in range(8):
                assert got[i, dim] == pytest.approx(
                    oracles.bilinear_sample(s5[:, dim][None], 0, i * 4 / 7), abs=1e-12)


class TestCacheUpdate:
    def test_empty_cache(self, rng):
        k = rng.random((4, 3)).astype(np.float32)
        c = update_cache(KVCache(3), k, k, 0.9)
        assert len(c) == 4 and np.array_equal(c.keys, k)

    def test_keep_prefix(self):
        c = KVCache(1, eta=0.5)
        old = np.arange(8, dtype=np.float32)[:, None]
        c.update(old, old, 0.0)
        new = np.arange(100, 104, dtype=np.float32)[:, None]
        rec = c.update(new, new, 1.0)
        assert c.keys[:, 0].tolist() == [0, 1, 2, 3, 100, 101, 102, 103]
        assert (rec.gamma, rec.n_keep, rec.evicted, rec.length) == (0.5, 4, 4, 8)

    def test_recurrence(self):
        c = KVCache(2, eta=0.5)
        lengths = []
        for _ in range(20):
            c.update(np.zeros((64, 2)), np.zeros((64, 2)), 1.0)
            lengths.append(len(c))
        assert lengths == oracles.cache_length_recurrence(20, 64, 0.5)
        assert lengths[-1] <= 128

    @settings(max_examples=300, deadline=None)
    @given(n_old=st.integers(0, 150), n_new=st.integers(1, 60), c_a=st.floats(0, 1),
           eta=st.floats(0, 1), cap=st.one_of(st.none(), st.integers(1, 300)))
    def test_matches_reference(self, n_old, n_new, c_a, eta, cap):
        c = KVCache(1, cap, eta)
        if n_old:
            ids = np.arange(n_old, dtype=np.float64)[:, None]
            c.update(ids, ids, 0.0)
        old = list(range(n_old))
        if cap is not None:
            old = old[max(len(old) - cap, 0):]
        new = list(range(1000, 1000 + n_new))
        c.update(np.array(new, float)[:, None], np.array(new, float)[:, None], c_a)
        assert c.keys[:, 0].tolist() == oracles.alg1_reference(old, new, c_a, eta, cap)

    def test_segment_alignment(self, rng):
        c = KVCache(2, segment_len=4)
        c.update(rng.random((4, 2)), rng.random((4, 2)), 0.0)
        rec = c.update(rng.random((9, 2)), rng.random((9, 2)), 0.0)
        assert rec.aligned and len(c) == 8
        first = KVCache(2, segment_len=4)
        assert not first.update(rng.random((9, 2)), rng.random((9, 2)), 0.0).aligned

    def test_reset_and_bytes(self, rng):
        c = KVCache(5)
        c.update(rng.random((3, 5)), rng.random((3, 5)), 0.0)
        assert c.nbytes == 3 * 5 * 4 * 2
        c.reset()
        assert len(c) == 0 and c.history == [] and c.segment_len is None

    def test_errors(self):
        with pytest.raises(ShapeError):
            KVCache(2).update(np.zeros((3, 2)), np.zeros((4, 2)), 0)
        with pytest.raises(ShapeError):
            KVCache(2).update(np.zeros((3, 3)), np.zeros((3, 3)), 0)
        with pytest.raises(ValueError):
            KVCache(2, eta=1.5)
        with pytest.raises(ValueError):
            KVCache(2, max_len=0)


class TestCachedAttention:
    def test_empty_cache_matches_naive(self, rng):
        for w, d in ((1, 4), (2, 8), (3, 4)):
            q, k, v = (rng.standard_normal((3, w * w, d)) for _ in range(3))
            bias = rng.standard_normal((w * w, w * w))
            got = cached_window_attention(q, k, v, KVCache(d), bias)
            assert np.abs(got - oracles.naive_window_attention(q, k, v, bias=bias)).max() < 1e-6
            assert np.array_equal(got, cached_window_attention(q, k, v, None, bias))

    def test_identical_keys_average_values(self, rng):
        c = KVCache(3)
        c.update(np.ones((5, 3)), rng.random((5, 3)), 0.0)
        q = rng.random((1, 1, 3))
        out = cached_window_attention(q, np.ones((1, 1, 3)), np.asarray(c.values[:1])[None], c)
        vals = np.concatenate([c.values, c.values[:1]])
        np.testing.assert_allclose(out[0, 0], vals.mean(axis=0), atol=1e-12)

    def test_hand_rolled_4x6(self, rng):
        d = 3
        q, k, v = (rng.standard_normal((1, 4, d)) for _ in range(3))
        kc, vc = rng.standard_normal((2, d)), rng.standard_normal((2, d))
        bias = rng.standard_normal((4, 4))
        c = KVCache(d)
        c.update(kc, vc, 0.0)
        keys = np.concatenate([kc, k[0]])
        vals = np.concatenate([vc, v[0]])
        logits = q[0] @ keys.T / math.sqrt(d)
        logits[:, 2:] += bias
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(cached_window_attention(q, k, v, c, bias)[0], p @ vals, atol=1e-12)
        np.testing.assert_allclose(cached_window_attention(q, k, v, c, bias),
                                   oracles.naive_window_attention(q, k, v, kc, vc, bias), atol=1e-12)

    def test_multi_head(self, rng):
        q, k, v = (rng.standard_normal((2, 4, 6)) for _ in range(3))
        out = cached_window_attention(q, k, v, None, None, heads=2)
        for h in range(2):
            sl = slice(3 * h, 3 * h + 3)
            want = oracles.naive_window_attention(q[..., sl], k[..., sl], v[..., sl])
            np.testing.assert_allclose(out[..., sl], want, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 9999), lc=st.integers(0, 6))
    def test_convexity(self, seed, lc):
        r = np.random.default_rng(seed)
        q, k, v = (r.standard_normal((2, 4, 3)) for _ in range(3))
        c = KVCache(3)
        if lc:
            c.update(r.standard_normal((lc, 3)), r.standard_normal((lc, 3)), 0.0)
        out = cached_window_attention(q, k, v, c)
        for wi in range(2):
            allv = np.concatenate([c.values, v[wi]])
            assert np.all(out[wi] >= allv.min(axis=0) - 1e-12)
            assert np.all(out[wi] <= allv.max(axis=0) + 1e-12)

    def test_errors(self, rng):
        q = rng.random((1, 4, 4))
        with pytest.raises(ShapeError):
            cached_window_attention(q, q, q[:, :3])
        with pytest.raises(ShapeError):
            cached_window_attention(q, q, q, KVCache(5))
        with pytest.raises(ShapeError):
            cached_window_attention(q, q, q, None, np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            cached_window_attention(q, q, q, heads=3)


def test_window_chunking_is_bitwise_neutral(rng, monkeypatch):
    from dehazekit import attention
    q, k, v = (rng.standard_normal((7, 9, 4)) for _ in range(3))
    c = KVCache(4)
    c.update(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), 0.0)
    bias = rng.standard_normal((9, 9))
    whole = cached_window_attention(q, k, v, c, bias)
    monkeypatch.setattr(attention, "ATTN_CHUNK_ELEMS", 1)
    assert np.array_equal(cached_window_attention(q, k, v, c, bias), whole)
