import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gasvit import tensor_core as tc, vit_ops as vo
from gasvit.errors import ConfigurationError
from gasvit.gradcheck import numerical_grad, rel_error

from oracles import dense_attention, smooth_block_input, unit_of_token

H = 1e-3
TOL = 1e-4


def params_for(cfg, seed, dtype=np.float32, std=None):
    rng = np.random.default_rng(seed)
    p = vo.init_block_params(cfg, rng, dtype)
    if std is not None:
        # larger weights than the init so every path carries signal in gradient checks
        for name, arr in p.arrays().items():
            arr[...] = rng.uniform(-std, std, arr.shape)
    return p


# mask units ------------------------------------------------------------------------

def test_full_grid_unit_is_row_major():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    units = vo.mask_unit_partition(x, 4, 4)
    assert units.shape == (1, 16, 1)
    np.testing.assert_array_equal(units[0, :, 0], np.arange(16))


def test_partition_index_arithmetic_for_every_token():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    units = vo.mask_unit_partition(x, 2, 2)
    for r in range(4):
        for c in range(4):
            u, pos = unit_of_token(r, c, 4, 4, 2, 2)
            assert units[u, pos, 0] == r * 4 + c
    assert unit_of_token(2, 3, 4, 4, 2, 2) == (3, 1)
    # token (0, 3) sits in the top-right unit at position (0, 1)
    assert unit_of_token(0, 3, 4, 4, 2, 2) == (1, 1)
    assert units[1, 1, 0] == 3


@settings(max_examples=30, deadline=None)
@given(b=st.integers(1, 3), nh=st.integers(1, 3), nw=st.integers(1, 3), uh=st.integers(1, 3), uw=st.integers(1, 3))
def test_partition_round_trip_bitwise(b, nh, nw, uh, uw):
    x = np.random.default_rng(0).standard_normal((b, nh * uh, nw * uw, 3)).astype(np.float32)
    back = vo.mask_unit_unpartition(vo.mask_unit_partition(x, uh, uw), b, nh * uh, nw * uw, uh, uw)
    assert back.tobytes() == x.tobytes()


def test_partition_indivisible():
    with pytest.raises(ConfigurationError):
        vo.mask_unit_partition(np.zeros((1, 14, 14, 2)), 3, 3)


# attention ---------------------------------------------------------------------------

def test_single_token_attention_is_value_projection():
    cfg = vo.AttentionConfig(dim=8, heads=2)
    p = params_for(cfg, 0, np.float64, std=0.5)
    x = np.random.default_rng(1).standard_normal((3, 1, 8))
    v = x @ p.qkv_w[:, 16:] + p.qkv_b[16:]
    np.testing.assert_allclose(vo.attention(x, cfg, p), v @ p.proj_w + p.proj_b, atol=1e-12)


@pytest.mark.parametrize("heads,q_pool,grid", [(1, None, (4, 4)), (2, (2, 2), (4, 4)), (4, (2, 1), (2, 4))])
def test_attention_matches_dense_reference(heads, q_pool, grid):
    cfg = vo.AttentionConfig(dim=8, heads=heads, q_pool=q_pool)
    p = params_for(cfg, 2, np.float64, std=0.5)
    T = grid[0] * grid[1]
    x = np.random.default_rng(3).standard_normal((2, T, 8))
    out = vo.attention(x, cfg, p, grid)
    expected_T = T // (q_pool[0] * q_pool[1]) if q_pool else T
    assert out.shape == (2, expected_T, 8)
    for n in range(2):
        ref = dense_attention(x[n], grid, 8, heads, p.qkv_w, p.qkv_b, p.proj_w, p.proj_b, q_pool)
        np.testing.assert_allclose(out[n], ref, atol=1e-10)


def test_qpool_on_4x4_unit_gives_four_tokens():
    cfg = vo.AttentionConfig(dim=4, heads=1, kind=vo.MASK_UNIT, unit=(4, 4), q_pool=(2, 2))
    p = params_for(cfg, 4, np.float64, std=0.5)
    x = np.random.default_rng(5).standard_normal((1, 16, 4))
    out = vo.attention(x, cfg, p, (4, 4))
    assert out.shape == (1, 4, 4)
    ref = dense_attention(x[0], (4, 4), 4, 1, p.qkv_w, p.qkv_b, p.proj_w, p.proj_b, (2, 2))
    np.testing.assert_allclose(out[0], ref, atol=1e-10)


@pytest.mark.parametrize("q_pool", [None, (2, 2)])
def test_mua_full_grid_equals_global(q_pool):
    rng = np.random.default_rng(6)
    ga = vo.AttentionConfig(dim=16, heads=4, q_pool=q_pool)
    mua = vo.AttentionConfig(dim=16, heads=4, kind=vo.MASK_UNIT, unit=(4, 4), q_pool=q_pool)
    p = params_for(ga, 7)
    x = rng.standard_normal((2, 4, 4, 16)).astype(np.float32)
    assert np.abs(vo.vit_block(x, ga, p) - vo.vit_block(x, mua, p)).max() < 1e-5


def test_mua_locality_bitwise():
    cfg = vo.AttentionConfig(dim=8, heads=2, kind=vo.MASK_UNIT, unit=(2, 2))
    p = params_for(cfg, 8)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 4, 4, 8)).astype(np.float32)
    y = vo.vit_block(x, cfg, p)
    x2 = x.copy()
    x2[:, 2:, :, :] += rng.standard_normal((1, 2, 4, 8)).astype(np.float32)
    y2 = vo.vit_block(x2, cfg, p)
    assert y[:, :2].tobytes() == y2[:, :2].tobytes()
    assert not np.array_equal(y[:, 2:], y2[:, 2:])


def test_global_attention_permutation_equivariance():
    cfg = vo.AttentionConfig(dim=8, heads=2)
    p = params_for(cfg, 10, np.float64, std=0.5)
    x = np.random.default_rng(11).standard_normal((1, 9, 8))
    perm = np.random.default_rng(12).permutation(9)
    np.testing.assert_allclose(vo.attention(x, cfg, p)[:, perm], vo.attention(x[:, perm], cfg, p), atol=1e-12)


def test_config_rejects_bad_heads_and_units():
    with pytest.raises(ConfigurationError):
        vo.AttentionConfig(dim=10, heads=3)
    with pytest.raises(ConfigurationError):
        vo.AttentionConfig(dim=8, heads=2, kind=vo.MASK_UNIT, unit=(3, 3), q_pool=(2, 2))
    with pytest.raises(ConfigurationError):
        vo.AttentionConfig(dim=8, heads=2, kind=vo.MASK_UNIT)


# ViT block ------------------------------------------------------------------------------

def zero_branch_outputs(p):
    for a in (p.proj_w, p.proj_b, p.fc2_w, p.fc2_b):
        a[...] = 0


def test_zero_branches_make_identity():
    cfg = vo.AttentionConfig(dim=8, heads=2)
    p = params_for(cfg, 13)
    zero_branch_outputs(p)
    x = np.random.default_rng(14).standard_normal((2, 4, 4, 8)).astype(np.float32)
    np.testing.assert_array_equal(vo.vit_block(x, cfg, p), x)


def test_zero_branches_with_pool_make_pooled_identity():
    cfg = vo.AttentionConfig(dim=8, heads=2, kind=vo.MASK_UNIT, unit=(4, 4), q_pool=(2, 2))
    p = params_for(cfg, 15)
    zero_branch_outputs(p)
    x = np.random.default_rng(16).standard_normal((1, 8, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(vo.vit_block(x, cfg, p), tc.max_pool_tokens(x, 2, 2))


def test_block_pool_shape_law():
    cfg = vo.AttentionConfig(dim=8, heads=2, q_pool=(2, 2))
    y = vo.vit_block(np.zeros((1, 14, 14, 8), np.float32), cfg, params_for(cfg, 0))
    assert y.shape == (1, 7, 7, 8)


def test_block_width_change():
    cfg = vo.AttentionConfig(dim=12, heads=3, dim_in=8, kind=vo.MASK_UNIT, unit=(2, 2), q_pool=(2, 2))
    y = vo.vit_block(np.ones((2, 4, 4, 8), np.float32), cfg, params_for(cfg, 0))
    assert y.shape == (2, 2, 2, 12)


BLOCK_CASES = [
    vo.AttentionConfig(dim=4, heads=2, kind=vo.MASK_UNIT, unit=(2, 2)),
    vo.AttentionConfig(dim=4, heads=1, kind=vo.MASK_UNIT, unit=(2, 2), q_pool=(2, 2)),
    vo.AttentionConfig(dim=6, heads=2, dim_in=4, q_pool=(2, 2), mlp_ratio=2),
    vo.AttentionConfig(dim=4, heads=2),
]


@pytest.mark.parametrize("cfg", BLOCK_CASES, ids=["mua", "mua-pool", "ga-pool-proj", "ga"])
def test_block_gradient(cfg):
    p = params_for(cfg, 17, np.float64, std=0.5)
    x = smooth_block_input(cfg, p)
    rng = np.random.default_rng(18)
    y, cache = vo.vit_block_forward(x, cfg, p)
    up = rng.uniform(-2, 2, y.shape)
    gx, grads = vo.vit_block_backward(up, cfg, p, cache)
    f = lambda: float((vo.vit_block(x, cfg, p) * up).sum())
    assert rel_error(gx, numerical_grad(f, x, H)) < TOL
    arrays = p.arrays()
    assert set(grads) == set(arrays)
    for name, arr in arrays.items():
        assert rel_error(grads[name], numerical_grad(f, arr, H)) < TOL, name


# patch embedding -----------------------------------------------------------------------

def stem(seed, specs, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return [
        vo.ConvParams(rng.standard_normal((o, c, k, k)).astype(dtype) * 0.3,
                      rng.standard_normal(o).astype(dtype), s, pad)
        for c, o, k, s, pad in specs
    ]


def test_canonical_stem_stride_gives_56_grid():
    layers = stem(0, [(3, 4, 7, 4, 3)])
    out = vo.patch_embed(np.zeros((1, 3, 224, 224), np.float32), layers, np.zeros((56, 56, 4), np.float32))
    assert out.shape == (1, 56, 56, 4)


def test_zero_image_gives_bias():
    layers = stem(1, [(3, 5, 4, 4, 0)])
    out = vo.patch_embed(np.zeros((2, 3, 16, 16), np.float32), layers, np.zeros((4, 4, 5), np.float32))
    np.testing.assert_array_equal(out, np.broadcast_to(layers[0].b, out.shape))


def test_pos_embed_mismatch():
    with pytest.raises(ConfigurationError):
        vo.patch_embed(np.zeros((1, 3, 16, 16)), stem(2, [(3, 2, 4, 4, 0)]), np.zeros((3, 3, 2)))


def test_stem_gradient_two_convs():
    layers = stem(3, [(3, 4, 3, 2, 1), (4, 5, 2, 2, 0)], np.float64)
    rng = np.random.default_rng(4)
    img = rng.uniform(-2, 2, (2, 3, 8, 8))
    pos = rng.uniform(-1, 1, (2, 2, 5))
    tokens, cache = vo.patch_embed_forward(img, layers, pos)
    up = rng.uniform(-2, 2, tokens.shape)
    gimg, conv_grads, gpos = vo.patch_embed_backward(up, layers, cache)
    f = lambda: float((vo.patch_embed(img, layers, pos) * up).sum())
    assert rel_error(gimg, numerical_grad(f, img, H)) < TOL
    assert rel_error(gpos, numerical_grad(f, pos, H)) < TOL
    for layer, (gw, gb) in zip(layers, conv_grads):
        assert rel_error(gw, numerical_grad(f, layer.w, H)) < TOL
        assert rel_error(gb, numerical_grad(f, layer.b, H)) < TOL
