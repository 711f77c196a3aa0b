from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import perturbed_model, random_images
from hit import tensor as T
from hit.model import (
    ConfigError,
    ForwardTrace,
    HiT,
    HiTConfig,
    TokenState,
    count_parameters,
    fold_final_layernorm,
    forward_with_ledger,
    hit_block,
    init_params,
    mha_cls,
    param_shapes,
    patch_embed,
    patchify,
    pool_tokens,
    sincos_pos_embed,
    single_query_attention,
)


def small_cfg(**kw):
    base = dict(depth=4, d_model=16, heads=2, image_size=16, patch_size=4, pool_layers=(), num_classes=3,
                attn_dropout=0.0)
    base.update(kw)
    return HiTConfig(**base)


# -- config -----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        HiTConfig(image_size=65)
    with pytest.raises(ConfigError):
        HiTConfig(d_model=10, heads=4)
    with pytest.raises(ConfigError):
        HiTConfig(pool_layers=(0,))
    with pytest.raises(ConfigError):
        HiTConfig(image_size=24, patch_size=8, pool_layers=(1,))  # 3x3 grid cannot pool
    with pytest.raises(ConfigError):
        HiTConfig(final_ln_mode="keep")


def test_layer_sides_with_pooling():
    assert HiTConfig(depth=4, pool_layers=(2,)).layer_sides() == [8, 8, 4, 4]
    assert HiTConfig(depth=4, pool_layers=()).layer_sides() == [8, 8, 8, 8]


# -- parameter counts -------------------------------------------------------

def test_count_parameters_hit_base_and_small():
    base = HiTConfig(depth=12, d_model=768, heads=12, image_size=224, patch_size=8, pool_layers=(4, 8),
                     num_classes=1000)
    small = HiTConfig(depth=12, d_model=384, heads=6, image_size=224, patch_size=8, pool_layers=(4, 8),
                      num_classes=1000)
    assert abs(count_parameters(base) / 81.8e6 - 1) <= 0.02
    assert abs(count_parameters(small) / 20.8e6 - 1) <= 0.02


def test_count_parameters_degenerate_by_hand():
    cfg = HiTConfig(depth=1, d_model=2, heads=1, image_size=8, patch_size=8, pool_layers=(), num_classes=1)
    patch_dim = 8 * 8 * 3
    by_hand = (
        2  # cls token
        + patch_dim * 2 + 2  # patch projection
        + 1 * 1 * 2  # positional embedding, one patch
        + 2 + 2  # norm1
        + 4 * (2 * 2 + 2)  # q, k, v, proj
        # the only block is the last one, so it has no MLP
        + 2 + 2  # final norm
        + 2 * 1 + 1  # head
    )
    assert count_parameters(cfg) == by_hand


def test_init_is_deterministic_and_pos_init_leaves_stream():
    a = init_params(HiTConfig(), seed=3)
    b = init_params(HiTConfig(), seed=3)
    c = init_params(HiTConfig(pos_init="random"), seed=3)
    for k in a:
        assert np.array_equal(a[k], b[k])
        if k != "pos_embed":
            assert np.array_equal(a[k], c[k])
    assert np.abs(c["pos_embed"]).max() <= 0.04
    np.testing.assert_allclose(a["pos_embed"], sincos_pos_embed(8, 64), atol=1e-7)


def test_sincos_table():
    t = sincos_pos_embed(4, 8)
    assert t.shape == (4, 4, 8)
    np.testing.assert_allclose(t[0, 0], [0, 0, 1, 1, 0, 0, 1, 1])
    # rows vary only in the first half, columns only in the second
    np.testing.assert_array_equal(t[0, :, :4], np.broadcast_to(t[0, 0, :4], (4, 4)))
    np.testing.assert_array_equal(t[:, 0, 4:], np.broadcast_to(t[0, 0, 4:], (4, 4)))
    assert sincos_pos_embed(2, 6)[..., 4:].sum() == 0  # leftover channels stay zero


def test_model_rejects_mismatched_params():
    cfg = small_cfg()
    params = init_params(cfg)
    params["head.weight"] = np.zeros((16, 5))
    with pytest.raises(ConfigError):
        HiT(cfg, params)
    params = init_params(cfg)
    del params["cls_token"]
    with pytest.raises(ConfigError):
        HiT(cfg, params)


# -- patch embedding --------------------------------------------------------

def test_patch_embed_zero_everything():
    cfg = small_cfg()
    params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    state = patch_embed(np.zeros((16, 16, 3)), params, cfg)
    assert np.array_equal(state.grid, np.zeros((4, 4, 16)))


def test_patch_embed_one_patch_changes_one_token():
    cfg = small_cfg()
    params = init_params(cfg)
    a = random_images(cfg, 1, seed=1, dtype=np.float32)[0]
    b = a.copy()
    b[4:8, 8:12] = 0.0  # patch (1, 2)
    ga = patch_embed(a, params, cfg).grid
    gb = patch_embed(b, params, cfg).grid
    diff = np.any(ga != gb, axis=-1)
    expected = np.zeros((4, 4), bool)
    expected[1, 2] = True
    assert np.array_equal(diff, expected)


def test_patch_embed_vs_per_patch_oracle():
    cfg = small_cfg()
    params = init_params(cfg, seed=2)
    img = random_images(cfg, 1, seed=3, dtype=np.float32)[0]
    grid = patch_embed(img, params, cfg).grid
    for i in range(4):
        for j in range(4):
            flat = img[4 * i : 4 * i + 4, 4 * j : 4 * j + 4].reshape(-1)  # (py, px, c) order
            tok = flat @ params["patch_embed.weight"] + params["patch_embed.bias"] + params["pos_embed"][i, j]
            assert np.abs(grid[i, j] - tok).max() <= 1e-6


def test_patchify_layout():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    p = patchify(img, 2)
    np.testing.assert_array_equal(p[0, 1], img[0:2, 2:4].reshape(-1))


# -- attention --------------------------------------------------------------

def head_params(rng, d, dk):
    return [rng.normal(size=s) for s in ((d, dk), (dk,), (d, dk), (dk,), (d, dk), (dk,))]


def test_single_query_attention_singleton():
    rng = np.random.default_rng(0)
    wq, bq, wk, bk, wv, bv = head_params(rng, 4, 2)
    v = rng.normal(size=(1, 4))
    out, w, terms = single_query_attention(rng.normal(size=4), v, wq, bq, wk, bk, wv, bv)
    np.testing.assert_allclose(w, [1.0])
    np.testing.assert_allclose(out, v[0] @ wv + bv, atol=1e-12)


def test_single_query_attention_identical_keys_uniform():
    rng = np.random.default_rng(1)
    wq, bq, wk, bk, wv, bv = head_params(rng, 4, 2)
    kv = np.tile(rng.normal(size=4), (5, 1))
    _, w, _ = single_query_attention(rng.normal(size=4), kv, wq, bq, wk, bk, wv, bv)
    np.testing.assert_allclose(w, np.full(5, 0.2), atol=1e-12)


def test_single_query_attention_vs_matrix_form():
    rng = np.random.default_rng(2)
    wq, bq, wk, bk, wv, bv = head_params(rng, 6, 3)
    x, kv = rng.normal(size=6), rng.normal(size=(3, 6))
    Q, K, V = x @ wq + bq, kv @ wk + bk, kv @ wv + bv
    s = Q @ K.T / np.sqrt(3)
    direct = np.exp(s - s.max()) / np.exp(s - s.max()).sum() @ V
    out, w, terms = single_query_attention(x, kv, wq, bq, wk, bk, wv, bv)
    assert np.abs(out - direct).max() <= 1e-6
    np.testing.assert_allclose(terms.sum(0), out, atol=1e-12)


def attn_params(rng, d, prefix="blocks.0.attn."):
    P = {}
    for proj in ("q", "k", "v", "proj"):
        P[prefix + f"{proj}.weight"] = rng.normal(size=(d, d))
        P[prefix + f"{proj}.bias"] = rng.normal(size=d)
    return P


def concat_project(x, kv, P, heads, prefix="blocks.0.attn."):
    """Standard MHA for one query: per-head attention, concatenate, project once."""
    d = x.shape[-1]
    dk = d // heads
    q = x @ P[prefix + "q.weight"] + P[prefix + "q.bias"]
    k = kv @ P[prefix + "k.weight"] + P[prefix + "k.bias"]
    v = kv @ P[prefix + "v.weight"] + P[prefix + "v.bias"]
    outs = []
    for i in range(heads):
        sl = slice(i * dk, (i + 1) * dk)
        s = k[:, sl] @ q[sl] / np.sqrt(dk)
        w = np.exp(s - s.max())
        w /= w.sum()
        outs.append(w @ v[:, sl])
    return np.concatenate(outs) @ P[prefix + "proj.weight"] + P[prefix + "proj.bias"]


def test_mha_single_head_reduces_to_attention():
    rng = np.random.default_rng(3)
    P = attn_params(rng, 4)
    x, kv = rng.normal(size=4), rng.normal(size=(5, 4))
    out, per_token, bias, _ = mha_cls(x, kv, P, "blocks.0.attn.", heads=1)
    head, _, _ = single_query_attention(x, kv, P["blocks.0.attn.q.weight"], P["blocks.0.attn.q.bias"],
                                        P["blocks.0.attn.k.weight"], P["blocks.0.attn.k.bias"],
                                        P["blocks.0.attn.v.weight"], P["blocks.0.attn.v.bias"])
    np.testing.assert_allclose(out, head @ P["blocks.0.attn.proj.weight"] + bias, atol=1e-12)


def test_mha_zero_values_gives_bias():
    rng = np.random.default_rng(4)
    P = attn_params(rng, 4)
    P["blocks.0.attn.v.weight"][:] = 0
    P["blocks.0.attn.v.bias"][:] = 0
    out, per_token, bias, _ = mha_cls(rng.normal(size=4), rng.normal(size=(3, 4)), P, "blocks.0.attn.", 2)
    np.testing.assert_array_equal(out, P["blocks.0.attn.proj.bias"])
    assert not per_token.any()


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_mha_per_head_sum_equals_concat_project(heads):
    rng = np.random.default_rng(heads)
    for _ in range(20):
        P = attn_params(rng, 8)
        x, kv = rng.normal(size=8), rng.normal(size=(6, 8))
        out, per_token, bias, _ = mha_cls(x, kv, P, "blocks.0.attn.", heads)
        assert np.abs(out - concat_project(x, kv, P, heads)).max() <= 1e-6
        np.testing.assert_allclose(per_token.sum(0) + bias, out, atol=1e-12)


# -- blocks, pooling --------------------------------------------------------

def block_state(cfg, rng, side=4):
    return TokenState(0, rng.normal(size=cfg.d_model), rng.normal(size=(side, side, cfg.d_model)))


def test_block_zero_attention_keeps_cls():
    cfg = small_cfg()
    P = dict(perturbed_model(cfg).arrays())
    for k in ("v.weight", "v.bias", "proj.weight", "proj.bias"):
        P["blocks.0.attn." + k] = np.zeros_like(P["blocks.0.attn." + k])
    state = block_state(cfg, np.random.default_rng(0))
    nxt, per_token, bias, _ = hit_block(state, P, cfg)
    np.testing.assert_array_equal(nxt.cls, state.cls)
    assert not np.array_equal(nxt.grid, state.grid)


def test_block_zero_mlp_keeps_grid():
    cfg = small_cfg()
    P = dict(perturbed_model(cfg).arrays())
    for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
        P["blocks.0.mlp." + k] = np.zeros_like(P["blocks.0.mlp." + k])
    state = block_state(cfg, np.random.default_rng(1))
    nxt, *_ = hit_block(state, P, cfg)
    np.testing.assert_array_equal(nxt.grid, state.grid)
    assert not np.array_equal(nxt.cls, state.cls)


def test_block_locality_single_token():
    cfg = small_cfg()
    P = perturbed_model(cfg).arrays()
    rng = np.random.default_rng(2)
    state = block_state(cfg, rng)
    other = TokenState(0, state.cls.copy(), state.grid.copy())
    other.grid[2, 1] += rng.normal(size=cfg.d_model)
    a, *_ = hit_block(state, P, cfg)
    b, *_ = hit_block(other, P, cfg)
    changed = np.any(a.grid != b.grid, axis=-1)
    assert changed[2, 1] and changed.sum() == 1
    assert not np.array_equal(a.cls, b.cls)


def test_pool_tokens():
    cfg = small_cfg()
    grid = np.full((4, 4, 3), 1.5)
    out = pool_tokens(TokenState(1, np.zeros(3), grid))
    assert out.grid.shape == (2, 2, 3) and np.all(out.grid == 1.5)
    a, b, c, d = (np.full(3, v) for v in (1.0, 2.0, 3.0, 6.0))
    g = np.stack([np.stack([a, b]), np.stack([c, d])])
    np.testing.assert_allclose(pool_tokens(TokenState(0, np.zeros(3), g)).grid[0, 0], (a + b + c + d) / 4)
    rng = np.random.default_rng(3)
    g = rng.normal(size=(6, 6, 2))
    manual = np.array([[g[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean((0, 1)) for j in range(3)] for i in range(3)])
    assert np.abs(pool_tokens(TokenState(0, np.zeros(2), g)).grid - manual).max() <= 1e-6
    with pytest.raises(ConfigError):
        pool_tokens(TokenState(0, np.zeros(2), np.zeros((3, 3, 2))))


# -- ledger -----------------------------------------------------------------

def test_ledger_zero_attention_gives_initial_cls():
    cfg = small_cfg()
    P = dict(perturbed_model(cfg).arrays())
    for layer in range(cfg.depth):
        for k in ("v.weight", "v.bias", "proj.weight", "proj.bias"):
            name = f"blocks.{layer}.attn.{k}"
            P[name] = np.zeros_like(P[name])
    res = forward_with_ledger(random_images(cfg, 1)[0], P, cfg)
    np.testing.assert_allclose(res.final_cls, P["cls_token"], atol=1e-12)
    np.testing.assert_allclose(res.ledger.total(), P["cls_token"], atol=1e-12)


@pytest.mark.parametrize("pool", [(), (2,)])
def test_ledger_sum_matches_final_cls(pool):
    cfg = small_cfg(pool_layers=pool)
    model = perturbed_model(cfg, dtype=np.float32)
    res = forward_with_ledger(random_images(cfg, 3, dtype=np.float32), model.arrays(), cfg)
    assert np.abs(res.ledger.total() - res.final_cls).max() <= 1e-5
    sides = [z.shape[-2] for z in res.ledger.layers]
    assert sides == ([4, 4, 2, 2] if pool else [4, 4, 4, 4])


def test_ledger_route_matches_tensor_route():
    cfg = small_cfg(pool_layers=(2,))
    model = perturbed_model(cfg)
    x = random_images(cfg, 4)
    trace = ForwardTrace()
    with T.no_grad():
        logits = model.forward(x, trace=trace).data
    res = forward_with_ledger(x, model.arrays(), cfg)
    np.testing.assert_allclose(res.logits, logits, atol=1e-10)
    np.testing.assert_allclose(res.final_cls, trace.final_cls.data, atol=1e-10)
    for a, b in zip(res.attention, trace.attention):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_fold_identity_case():
    cfg = small_cfg()
    P = dict(perturbed_model(cfg).arrays())
    P["norm.weight"] = np.ones(16)
    P["norm.bias"] = np.zeros(16)
    res = forward_with_ledger(random_images(cfg, 1)[0], P, cfg)
    x = res.final_cls
    # rescale entries so the final CLS is already normalized: mu 0, sigma 1
    mu, sigma = x.mean(), np.sqrt(x.var() + cfg.ln_eps)
    entries = [(z - mu / res.ledger.num_entries) / sigma for z in res.ledger.layers]
    ledger = type(res.ledger)(entries, [], [], [])
    final = (x - mu) / sigma
    folded = fold_final_layernorm(final, ledger, P, cfg)
    bias_share = P["head.bias"] / ledger.num_entries
    for z, e in zip(folded.layers, entries):
        np.testing.assert_allclose(z, e @ P["head.weight"] + bias_share, atol=1e-6)


def test_fold_disable_mode():
    cfg = small_cfg(final_ln_mode="disable")
    assert "norm.weight" not in param_shapes(cfg)
    model = perturbed_model(cfg)
    res = forward_with_ledger(random_images(cfg, 2), model.arrays(), cfg)
    np.testing.assert_allclose(res.logits, res.final_cls @ model.arrays()["head.weight"] + model.arrays()["head.bias"])
    total = sum(z.sum(axis=(-3, -2)) for z in res.folded.layers)
    np.testing.assert_allclose(total, res.logits, atol=1e-10)


def test_folded_entries_sum_to_logits_float32():
    cfg = small_cfg(pool_layers=(2,))
    model = perturbed_model(cfg, dtype=np.float32)
    res = forward_with_ledger(random_images(cfg, 5, dtype=np.float32), model.arrays(), cfg)
    total = sum(z.sum(axis=(-3, -2)) for z in res.folded.layers)
    assert np.abs(total - res.logits).max() <= 1e-4


def test_per_layer_initial_cls_share_is_equal():
    cfg = small_cfg(pool_layers=(2,))
    res = forward_with_ledger(random_images(cfg, 1)[0], perturbed_model(cfg).arrays(), cfg)
    shares = [s * z.shape[-2] * z.shape[-3] for s, z in zip(res.ledger.cls_shares, res.ledger.layers)]
    for s in shares:
        np.testing.assert_allclose(s, res.states[0].cls / cfg.depth, atol=1e-12)


@given(
    heads=st.sampled_from([1, 2, 4]),
    depth=st.sampled_from([1, 2, 4]),
    pool=st.booleans(),
    seed=st.integers(0, 10_000),
)
def test_ledger_exact_in_float64(heads, depth, pool, seed):
    cfg = HiTConfig(depth=depth, d_model=8, heads=heads, image_size=16, patch_size=4,
                    pool_layers=(1,) if pool and depth > 1 else (), num_classes=3, attn_dropout=0.0)
    model = perturbed_model(cfg, seed=seed)
    res = forward_with_ledger(random_images(cfg, 2, seed=seed), model.arrays(), cfg)
    total = sum(z.sum(axis=(-3, -2)) for z in res.folded.layers)
    assert np.abs(total - res.logits).max() <= 1e-10
    assert np.abs(res.ledger.total() - res.final_cls).max() <= 1e-10


def test_locality_through_the_network():
    cfg = small_cfg()
    model = perturbed_model(cfg)
    a = random_images(cfg, 1, seed=5)[0]
    b = a.copy()
    b[8:12, 0:4] += 0.5  # patch (2, 0)
    ra = forward_with_ledger(a, model.arrays(), cfg)
    rb = forward_with_ledger(b, model.arrays(), cfg)
    for sa, sb in zip(ra.states, rb.states):
        changed = np.any(sa.grid != sb.grid, axis=-1)
        assert changed[2, 0] and changed.sum() == 1


def test_training_dropout_needs_rng_and_changes_output():
    cfg = small_cfg(attn_dropout=0.5)
    model = perturbed_model(cfg)
    x = random_images(cfg, 2)
    with pytest.raises(ValueError):
        model.forward(x, training=True)
    a = model.forward(x, training=True, rng=np.random.default_rng(0)).data
    b = model.forward(x, training=False).data
    assert not np.allclose(a, b)


def test_drop_layers_matches_ledger_route():
    cfg = small_cfg()
    model = perturbed_model(cfg)
    x = random_images(cfg, 2)
    res = forward_with_ledger(x, model.arrays(), cfg, drop_layers=(1, 3))
    np.testing.assert_allclose(model.predict_logits(x, drop_layers=(1, 3)), res.logits, atol=1e-10)


def test_model_copy_is_independent():
    model = HiT(small_cfg())
    clone = model.copy()
    clone.params["head.bias"].data[:] = 5.0
    assert not np.any(model.params["head.bias"].data == 5.0)
    assert isinstance(model.arrays(), OrderedDict)
