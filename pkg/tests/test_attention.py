import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvshield import linalg
from kvshield.attention import (
    AttentionWeights,
    KVCache,
    ModelConfig,
    append_kv,
    decode_step_plain,
    load_weights,
    plain_decode,
    qkv_project,
    random_weights,
    recompute_uncached,
    save_weights,
    scaled_dot_attention,
)
from kvshield.errors import InvalidDimensionError, ShapeError, WorldMismatchError
from kvshield.experiments import TOLERANCE, cache_trial


def literal_attention(q, K, V, num_heads):
    """Straight-line multi-head softmax(q K^T / sqrt(d_k)) V with Python floats."""
    n, d = K.shape
    hd = d // num_heads
    out = [0.0] * d
    for h in range(num_heads):
        lo = h * hd
        scores = []
        for i in range(n):
            s = 0.0
            for t in range(hd):
                s += float(q[0, lo + t]) * float(K[i, lo + t])
            scores.append(s / math.sqrt(hd))
        mx = max(scores)
        ex = [math.exp(s - mx) for s in scores]
        z = sum(ex)
        for t in range(hd):
            out[lo + t] = sum(ex[i] / z * float(V[i, lo + t]) for i in range(n))
    return np.array([out])


def test_model_config_validation():
    cfg = ModelConfig(8, 2)
    assert cfg.head_dim == 4 and cfg.num_kv_heads == 2 and cfg.scalar_bytes == 8
    assert ModelConfig.from_dict({"num_heads": 4, "head_dim": 3}).d_model == 12
    with pytest.raises(InvalidDimensionError):
        ModelConfig(10, 3)
    with pytest.raises(InvalidDimensionError):
        ModelConfig(0, 1)


def test_weights_must_be_square():
    with pytest.raises(ShapeError):
        AttentionWeights(np.eye(3), np.eye(3), np.ones((3, 2)))


def test_qkv_identity_and_zero():
    w = AttentionWeights(np.eye(4), np.eye(4), np.eye(4))
    x = np.array([[1.0, -2.0, 3.0, 0.5]])
    assert all(np.array_equal(p, x) for p in qkv_project(x, w))
    assert all(not p.any() for p in qkv_project(np.zeros((1, 4)), w))
    with pytest.raises(ShapeError):
        qkv_project(np.ones((1, 3)), w)


def test_qkv_matches_matmul():
    cfg = ModelConfig(6, 2)
    w = random_weights(cfg, 0)[0]
    x = np.random.default_rng(1).standard_normal((1, 6))
    q, k, v = qkv_project(x, w)
    assert np.array_equal(q, linalg.matmul(x, w.w_q)) and np.array_equal(v, linalg.matmul(x, w.w_v))


def test_cache_appends_in_order():
    c = KVCache(2, 3)
    k1, v1 = np.ones((1, 3)), np.full((1, 3), 2.0)
    append_kv(c, 0, k1, v1)
    assert c.seq_len(0) == 1 and np.array_equal(c.keys(0), k1)
    k2 = np.full((1, 3), 3.0)
    append_kv(c, 0, k2, v1)
    assert c.keys(0).tolist() == [[1.0] * 3, [3.0] * 3]
    assert c.seq_len(1) == 0
    with pytest.raises(ShapeError):
        c.append(0, np.ones((2, 3)), v1)
    with pytest.raises(IndexError):
        c.append(5, k1, v1)


def test_128_appends_equal_batch_projection():
    cfg = ModelConfig(8, 2)
    w = random_weights(cfg, 3)[0]
    xs = np.random.default_rng(4).standard_normal((128, 8))
    cache = KVCache(1, 8)
    for t in range(128):
        _, k, v = qkv_project(xs[t:t + 1], w)
        cache.append(0, k, v)
    assert cache.seq_len() == 128
    assert np.array_equal(cache.keys(0), linalg.matmul(xs, w.w_k))
    assert np.array_equal(cache.values(0), linalg.matmul(xs, w.w_v))


def test_attention_single_row_returns_v():
    rng = np.random.default_rng(0)
    q, K, V = rng.standard_normal((1, 8)), rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    assert np.array_equal(scaled_dot_attention(q, K, V, 2), V)


def test_attention_zero_query_is_head_mean():
    rng = np.random.default_rng(1)
    K, V = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
    out = scaled_dot_attention(np.zeros((1, 8)), K, V, 2)
    np.testing.assert_allclose(out[0], V.mean(axis=0), rtol=1e-14)


def test_attention_matches_literal_oracle():
    rng = np.random.default_rng(2)
    q, K, V = rng.standard_normal((1, 8)), rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    np.testing.assert_allclose(scaled_dot_attention(q, K, V, 2), literal_attention(q, K, V, 2), rtol=0, atol=1e-13)


def test_attention_errors():
    with pytest.raises(InvalidDimensionError):
        scaled_dot_attention(np.ones((1, 4)), np.ones((2, 4)), np.ones((2, 4)), 0)
    with pytest.raises(ShapeError):
        scaled_dot_attention(np.ones((1, 4)), np.ones((2, 4)), np.ones((3, 4)), 1)
    with pytest.raises(ShapeError):
        scaled_dot_attention(np.ones((1, 6)), np.ones((2, 6)), np.ones((2, 6)), 4)


def test_first_step_is_v_times_wo():
    cfg = ModelConfig(4, 2)
    w = random_weights(cfg, 9)[0]
    x = np.random.default_rng(0).standard_normal((1, 4))
    out = decode_step_plain(x, w, KVCache(1, 4), 0, num_heads=2)
    _, _, v = qkv_project(x, w)
    assert np.array_equal(out, linalg.matmul(v, w.w_o))


def test_identity_weights_trace_by_hand():
    w = AttentionWeights(np.eye(3), np.eye(3), np.eye(3))
    e1 = np.array([[0.0, 1.0, 0.0]])
    assert np.array_equal(decode_step_plain(e1, w, KVCache(1, 3), 0), e1)


def test_plain_path_rejects_permuted_inputs():
    w = AttentionWeights(np.eye(2), np.eye(2), np.eye(2), permuted=True)
    with pytest.raises(WorldMismatchError):
        decode_step_plain(np.ones((1, 2)), w, KVCache(1, 2), 0)
    w.permuted = False
    with pytest.raises(WorldMismatchError):
        decode_step_plain(np.ones((1, 2)), w, KVCache(1, 2, permuted=True), 0)


@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_cached_equals_uncached_16_tokens(precision):
    cfg = ModelConfig(8, 2, num_layers=2, precision=precision)
    r = cache_trial(cfg, 16, 0)
    assert r.max_abs_diff <= TOLERANCE[precision]


def test_plain_decode_dtype_and_trace():
    cfg = ModelConfig(8, 4, num_layers=3, precision="f32")
    xs = np.random.default_rng(0).standard_normal((5, 8))
    trace, cache = plain_decode(xs, random_weights(cfg, 1), cfg)
    assert len(trace.outputs) == 5 and trace.outputs[0].dtype == np.float32
    assert [cache.seq_len(l) for l in range(3)] == [5, 5, 5]
    assert len(trace.queries[2]) == 5


def test_weight_file_round_trip(tmp_path):
    cfg = ModelConfig(8, 2, num_layers=2, precision="f32")
    ws = random_weights(cfg, 0)
    ws[1].w_o = None
    save_weights(tmp_path / "w.npz", cfg, ws)
    cfg2, ws2 = load_weights(tmp_path / "w.npz")
    assert cfg2 == cfg
    assert np.array_equal(ws2[0].w_q, ws[0].w_q) and ws2[1].w_o is None
    assert ws2[0].w_q.dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.sampled_from([1, 2, 4]), st.integers(0, 2**32 - 1))
def test_head_output_in_convex_hull_of_v(n, heads, seed):
    rng = np.random.default_rng(seed)
    d = 8
    q, K, V = rng.standard_normal((1, d)), rng.standard_normal((n, d)), rng.standard_normal((n, d))
    out = scaled_dot_attention(q, K, V, heads)
    hd = d // heads
    for h in range(heads):
        cols = slice(h * hd, (h + 1) * hd)
        scores = (q[:, cols] @ K[:, cols].T) / math.sqrt(hd)
        p = np.exp(scores - scores.max())
        p /= p.sum()
        assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0)
        np.testing.assert_allclose(out[:, cols], p @ V[:, cols], atol=1e-12)
        assert np.all(out[0, cols] <= V[:, cols].max(axis=0) + 1e-12)
        assert np.all(out[0, cols] >= V[:, cols].min(axis=0) - 1e-12)
