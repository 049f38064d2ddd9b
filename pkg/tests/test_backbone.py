import numpy as np
import pytest

from sundial import tensor as T
from sundial.backbone import (
    CacheError,
    KVCache,
    apply_rope,
    attention,
    attention_weights,
    causal_allowed,
    rope_scores,
)
from sundial.config import PRESETS, ConfigError, model_config
from sundial.model import InputError, SundialModel, count_parameters, forward, forward_incremental
from sundial.tensor import Tensor
from sundial.tokenizer import SeriesSample


def test_rope_identity_on_diagonal(rng):
    q = rng.standard_normal((2, 4, 6))
    k = rng.standard_normal((2, 4, 6))
    s = rope_scores(q, k, np.arange(4) + 3)
    np.testing.assert_allclose(np.diagonal(s, axis1=1, axis2=2), np.einsum("hnd,hnd->hn", q, k), atol=1e-10)


def test_rope_shift_by_seven(rng):
    q, k = rng.standard_normal((2, 5, 8)), rng.standard_normal((2, 5, 8))
    pos = np.arange(5)
    assert np.max(np.abs(rope_scores(q, k, pos) - rope_scores(q, k, pos + 7))) < 1e-5


def test_rope_matches_explicit_rotation_blocks(rng):
    q, k = rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 3, 4))
    pos = np.array([0, 1, 2])
    # R(i)q . R(j)k = q . R(j - i) k  ==  q^T R(i - j)^T k
    expected = np.zeros((1, 3, 3))
    for i in range(3):
        for j in range(3):
            tot = 0.0
            for p in range(2):
                th = (pos[j] - pos[i]) * 10000.0 ** (-2 * p / 4)
                rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
                tot += q[0, i, 2 * p:2 * p + 2] @ rot @ k[0, j, 2 * p:2 * p + 2]
            expected[0, i, j] = tot
    assert np.max(np.abs(rope_scores(q, k, pos) - expected)) < 1e-5


def test_rope_rejects_odd_width(rng):
    with pytest.raises(ConfigError):
        rope_scores(rng.standard_normal((1, 2, 3)), rng.standard_normal((1, 2, 3)), [0, 1])


def test_rope_backward_is_inverse_rotation(rng):
    x0 = rng.standard_normal((2, 3, 4))
    w = rng.standard_normal((2, 3, 4))
    x = Tensor(x0, requires_grad=True, dtype=np.float64)
    (apply_rope(x, np.arange(3)) * w).sum().backward()
    # rotation is orthogonal: d/dx <w, Rx> = R^T w
    eps = 1e-6
    fd = np.zeros_like(x0)
    for idx in np.ndindex(*x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fp = (apply_rope(Tensor(xp, dtype=np.float64), np.arange(3)).data * w).sum()
        fm = (apply_rope(Tensor(xm, dtype=np.float64), np.arange(3)).data * w).sum()
        fd[idx] = (fp - fm) / (2 * eps)
    np.testing.assert_allclose(x.grad, fd, atol=1e-6)


def test_single_token_attention_returns_value(rng):
    q, k, v = (Tensor(rng.standard_normal((1, 1, 1, 4))) for _ in range(3))
    out = attention(q, k, v, causal_allowed(1, 1))
    np.testing.assert_allclose(out.data, v.data, rtol=1e-6)


def test_equal_queries_keys_give_uniform_causal_weights():
    q = np.ones((1, 5, 4))
    w = attention_weights(q, q, causal_allowed(5, 5))
    for i in range(5):
        np.testing.assert_allclose(w[0, i, :i + 1], 1 / (i + 1))
        assert np.all(w[0, i, i + 1:] == 0)


@pytest.mark.parametrize("block", [1, 2, 3, 7])
def test_blocked_attention_matches_naive(block, rng):
    q, k, v = (Tensor(rng.standard_normal((2, 3, 9, 4)), requires_grad=True) for _ in range(3))
    allowed = causal_allowed(9, 9, rng.random((2, 9)) > 0.2)
    naive = attention(q, k, v, allowed).data
    blocked = attention(q, k, v, allowed, block=block).data
    assert np.max(np.abs(naive - blocked)) < 1e-5


def test_attention_gradient_matches_fd(rng):
    shape = (1, 2, 4, 4)
    arrs = [rng.standard_normal(shape) for _ in range(3)]
    w = rng.standard_normal(shape)
    allowed = causal_allowed(4, 4)
    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrs]
    (attention(*ts, allowed) * w).sum().backward()

    def f(i, a):
        args = [Tensor(x, dtype=np.float64) for x in arrs]
        args[i] = Tensor(a, dtype=np.float64)
        return float((attention(*args, allowed).data * w).sum())

    for i in range(3):
        fd = np.zeros(shape)
        for idx in np.ndindex(*shape):
            ap, am = arrs[i].copy(), arrs[i].copy()
            ap[idx] += 1e-6
            am[idx] -= 1e-6
            fd[idx] = (f(i, ap) - f(i, am)) / 2e-6
        np.testing.assert_allclose(ts[i].grad, fd, atol=1e-6)


# -- whole backbone ---------------------------------------------------------------

@pytest.fixture(scope="module")
def model():
    return SundialModel(model_config("tiny").replace(n_layers=2, d_model=16, d_ff=32, n_heads=2))


def _tokens(rng, n, p=4):
    return rng.standard_normal((n, p)), np.ones((n, p))


def test_zero_residual_init_reduces_to_embedding(model, rng):
    m = SundialModel(model.cfg)
    for blk in m.backbone.blocks:
        blk.attn.out.weight.data[:] = 0
        blk.attn.out.bias.data[:] = 0
        blk.ffn.fc2.weight.data[:] = 0
        blk.ffn.fc2.bias.data[:] = 0
    patches, mask = _tokens(rng, 5)
    with T.no_grad():
        h = m.encode(patches, mask).data
        e = m.embed(patches, mask)
        expected = m.backbone.final_norm(e).data
    np.testing.assert_allclose(h, expected, atol=1e-6)


def test_last_token_depends_on_first(model, rng):
    patches, mask = _tokens(rng, 6)
    with T.no_grad():
        a = model.encode(patches, mask).data[-1]
        patches[0] += 1.0
        b = model.encode(patches, mask).data[-1]
    assert np.max(np.abs(a - b)) > 0


def test_causality_exact(model, rng):
    patches, mask = _tokens(rng, 7)
    with T.no_grad():
        ref = model.encode(patches, mask).data
        for j in range(1, 7):
            p2 = patches.copy()
            p2[j:] = 0.0
            out = model.encode(p2, mask).data
            np.testing.assert_array_equal(out[:j], ref[:j])


@pytest.mark.parametrize("n", [1, 6, 10])
def test_incremental_matches_full(model, rng, n):
    patches, mask = _tokens(rng, n)
    with T.no_grad():
        full = model.encode(patches, mask).data
        cache = model.new_cache()
        for i in range(n):
            h, cache = forward_incremental(patches[i], cache, model)
            assert np.max(np.abs(h.data - full[i])) < 1e-4
    assert cache.n_cached == n


def test_cache_grows_one_per_layer(model, rng):
    cache = model.new_cache()
    patches, _ = _tokens(rng, 3)
    with T.no_grad():
        for i in range(3):
            forward_incremental(patches[i], cache, model)
            assert all(k.shape[-2] == i + 1 for k in cache.keys)


def test_cache_layer_mismatch_raises(model, rng):
    bad = KVCache(model.cfg.n_layers + 1, model.cfg.max_tokens)
    with pytest.raises(CacheError):
        forward_incremental(np.zeros(4), bad, model)


def test_sliding_window_eviction(rng):
    m = SundialModel(model_config("tiny").replace(max_context=12))   # 3 tokens
    patches, mask = _tokens(rng, 6)
    cache = m.new_cache()
    with T.no_grad():
        for i in range(6):
            forward_incremental(patches[i], cache, m)
    assert cache.n_cached == 3 and cache.n_seen == 6


def test_forward_rejects_overlong_context(model):
    s = SeriesSample.from_raw(np.arange(model.cfg.max_context + 1, dtype=float), model.cfg.patch_len)
    with pytest.raises(InputError):
        forward(s, model)


def test_forward_shape(model, rng):
    s = SeriesSample.from_raw(rng.standard_normal(30), model.cfg.patch_len)
    assert forward(s, model).h.shape == (8, model.cfg.d_model)


def test_rope_off_is_permutation_equivariant(rng):
    cfg = model_config("tiny").replace(rope_enabled=False)
    m = SundialModel(cfg)
    attn = m.backbone.blocks[0].attn
    x = Tensor(rng.standard_normal((1, 3, cfg.d_model)))
    perm = np.array([2, 0, 1])

    def logits(xx):
        qkv = attn.qkv(xx).data.reshape(1, 3, 3, cfg.n_heads, cfg.head_dim).transpose(2, 0, 3, 1, 4)
        return qkv[0] @ np.swapaxes(qkv[1], -1, -2)

    a = logits(x)
    b = logits(Tensor(x.data[:, perm]))
    np.testing.assert_allclose(b, a[..., perm, :][..., :, perm], atol=1e-6)
    # with rope the same permutation breaks the correspondence
    m2 = SundialModel(cfg.replace(rope_enabled=True))
    q = rng.standard_normal((1, 3, 4))
    k = rng.standard_normal((1, 3, 4))
    s = rope_scores(q, k, np.arange(3))
    s_perm = rope_scores(q[:, perm], k[:, perm], np.arange(3))
    assert np.max(np.abs(s_perm - s[:, perm][:, :, perm])) > 1e-6
    assert m2.cfg.rope_enabled


def test_post_ln_runs_and_differs(rng):
    cfg = model_config("tiny")
    patches, mask = _tokens(rng, 4)
    with T.no_grad():
        a = SundialModel(cfg).encode(patches, mask).data
        b = SundialModel(cfg.replace(pre_ln=False)).encode(patches, mask).data
    assert a.shape == b.shape and np.all(np.isfinite(b))
    assert np.max(np.abs(a - b)) > 0


def test_padding_keys_do_not_leak(model, rng):
    # a batch where row 0 is left-padded by one whole token
    patches, mask = _tokens(rng, 4)
    with T.no_grad():
        ref = model.encode(patches[1:], mask[1:]).data
        junk = patches.copy()
        junk[0] = 99.0
        valid = np.array([[False, True, True, True]])
        out = model.encode(junk[None], mask[None], key_valid=valid).data[0, 1:]
    # positions differ by one, which RoPE makes irrelevant up to rounding
    assert np.max(np.abs(out - ref)) < 1e-4


@pytest.mark.parametrize("name,target", [("small", 32e6), ("base", 128e6), ("large", 444e6)])
def test_parameter_counts(name, target):
    # counted from shapes; the large preset would need ~1.5 GB to instantiate
    cfg = PRESETS[name]
    assert abs(count_parameters(cfg) - target) / target <= 0.2


def test_count_parameters_agrees_with_instantiation():
    for name in ("tiny", "toy"):
        assert count_parameters(PRESETS[name]) == SundialModel(PRESETS[name]).num_parameters()


def test_cached_decode_faster_than_full(rng):
    from sundial.experiments import decode_costs
    m = SundialModel(model_config("toy").replace(max_context=128 * 16))
    costs = decode_costs(m, 128)
    assert costs["time_cached"] < costs["time_full"]
    assert costs["max_abs_diff"] < 1e-4
