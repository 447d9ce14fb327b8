import numpy as np
import pytest

from drivebench import nn
from drivebench.errors import DimMismatch, TooFewStyles
from drivebench.perception import (
    AdapterConfig,
    AdapterParams,
    BrittleExtractor,
    ConstantEyeExtractor,
    FeatureGrid,
    PerceptionConfig,
    adapt,
    adapt_op,
    dispersion_ratio,
    pca_maps,
    pca_variance_ratios,
    rasterize_scene,
    token_dispersion,
)
from drivebench.scenario import generate_scenario

from conftest import make_straight_scenario, parked_agent


# ---------------------------------------------------------------------------
# constant-eye invariance
# ---------------------------------------------------------------------------

def test_constant_eye_bitwise_style_invariant(registry, gen_config):
    ex = ConstantEyeExtractor()
    for seed in (1, 5, 9):
        grids = [
            ex(generate_scenario(seed, style, gen_config)).grid for style in registry
        ]
        for g in grids[1:]:
            assert np.array_equal(g, grids[0])


def test_empty_road_has_zero_agent_channels():
    s = make_straight_scenario(agents=[])
    grid = rasterize_scene(s, PerceptionConfig())
    assert np.all(grid[:, :, 4:8] == 0.0)


def test_agent_occupancy_matches_fine_raster_oracle():
    cfg = PerceptionConfig()
    agent = parked_agent(20.0, y=0.0)
    s = make_straight_scenario(agents=[agent])
    grid = rasterize_scene(s, cfg)
    occ = grid[:, :, 4].reshape(cfg.grid_h, cfg.grid_w) > 0

    # oracle: rasterize box membership at 10x resolution, then max-pool.
    # Ego frame equals world frame here (ego starts at the origin, heading 0).
    xs = np.linspace(cfg.x_range[0], cfg.x_range[1], cfg.grid_h * 10 + 1)
    ys = np.linspace(cfg.y_range[0], cfg.y_range[1], cfg.grid_w * 10 + 1)
    gx, gy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]), indexing="ij")

    def pooled_membership(grow):
        inside = (np.abs(gx - 20.0) <= 2.3 + grow) & (np.abs(gy) <= 1.0 + grow)
        return inside.reshape(cfg.grid_h, 10, cfg.grid_w, 10).max(axis=(1, 3))

    pooled = pooled_membership(0.0)
    # the cell holding the agent's center is occupied in both maps
    cx = 0.5 * (np.linspace(cfg.x_range[0], cfg.x_range[1], cfg.grid_h + 1)[:-1]
                + np.linspace(cfg.x_range[0], cfg.x_range[1], cfg.grid_h + 1)[1:])
    ci = int(np.argmin(np.abs(cx - 20.0)))
    cj = cfg.grid_w // 2
    assert occ[ci, cj] and pooled[ci, cj]
    # full agreement outside the oracle's half-sample margin (+- 0.3 m)
    decisive = pooled_membership(0.3) == pooled_membership(-0.3)
    assert np.array_equal(occ[decisive], pooled[decisive])


# ---------------------------------------------------------------------------
# brittle extractor
# ---------------------------------------------------------------------------

def test_brittle_origin_is_identity(registry, gen_config):
    brittle = BrittleExtractor()
    eye = ConstantEyeExtractor()
    s = generate_scenario(4, registry.origin, gen_config)
    assert np.array_equal(brittle(s).grid, eye(s).grid)


def test_brittle_styles_differ_by_minimum_delta(registry, gen_config):
    cfg = PerceptionConfig()
    brittle = BrittleExtractor(cfg)
    for seed in (2, 8):
        grids = {
            style.id: brittle(generate_scenario(seed, style, gen_config)).grid
            for style in registry
        }
        for a in range(1, len(registry)):
            for b in range(a + 1, len(registry)):
                linf = np.max(np.abs(grids[a] - grids[b]))
                assert linf >= cfg.style_bias_delta - 1e-12


def test_brittle_corruption_table_roundtrip(registry):
    cfg = PerceptionConfig()
    a = BrittleExtractor(cfg)
    b = BrittleExtractor(PerceptionConfig())  # rebuilt from the same config
    for style in registry:
        ta, tb = a.corruption_table(style.id), b.corruption_table(style.id)
        assert np.array_equal(ta.gain, tb.gain)
        assert np.array_equal(ta.offset, tb.offset)
        assert np.array_equal(ta.perm, tb.perm)
        assert np.array_equal(ta.smooth_field, tb.smooth_field)
        assert ta.channel0_bias == tb.channel0_bias
    assert a.checksum() == b.checksum()


def test_brittle_deterministic_per_seed_style(registry, gen_config):
    brittle = BrittleExtractor()
    s1 = generate_scenario(3, registry.by_id(2), gen_config)
    s2 = generate_scenario(3, registry.by_id(2), gen_config)
    assert np.array_equal(brittle(s1).grid, brittle(s2).grid)


# ---------------------------------------------------------------------------
# adapter
# ---------------------------------------------------------------------------

def test_identity_adapter_flattens_input():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(6, 6, 8))
    params = AdapterParams.identity(8)
    out = adapt(FeatureGrid(grid, "constant_eye", 0), params)
    assert np.allclose(out.tokens, grid.reshape(36, 8), atol=1e-12)


def test_zero_weight_mlp_gives_bias_tokens():
    cfg = AdapterConfig(in_channels=8, dim=8, depth=1, with_aggregator=True)
    ps = nn.ParamSet(seed=0)
    from drivebench.perception import init_adapter

    init_adapter(ps, "adapter.", cfg)
    ps.set("adapter.mlp0.w", np.zeros((8, 8)))
    ps.set("adapter.mlp0.b", np.full(8, 0.7))
    ps.set("adapter.up.k", nn.identity_kernel(8))
    ps.set("adapter.down.k", nn.identity_kernel(8))
    params = AdapterParams(cfg=cfg, ps=ps)
    grid = np.random.default_rng(1).normal(size=(4, 4, 8))
    out = adapt(FeatureGrid(grid, "constant_eye", 0), params)
    assert np.allclose(out.tokens, 0.7, atol=1e-12)


def test_adapter_matches_op_composition_oracle():
    # random adapter on a 4x4x8 grid vs an independent numpy composition
    cfg = AdapterConfig(in_channels=8, dim=4, depth=3, with_aggregator=True)
    params = AdapterParams.create(cfg, seed=5)
    rng = np.random.default_rng(2)
    grid = rng.normal(size=(4, 4, 8))
    got = adapt(FeatureGrid(grid, "constant_eye", 0), params).tokens

    def naive_conv3x3(x, k):
        b, h, w, cin = x.shape
        cout = k.shape[3]
        out = np.zeros((b, h, w, cout))
        for bi in range(b):
            for i in range(h):
                for j in range(w):
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < h and 0 <= jj < w:
                                out[bi, i, j] += x[bi, ii, jj] @ k[di, dj]
        return out

    ps = params.ps
    x = grid.reshape(-1, 8)
    for i in range(3):
        x = x @ ps[f"adapter.mlp{i}.w"].data + ps[f"adapter.mlp{i}.b"].data
        if i < 2:
            x = np.maximum(x, 0.0)
    x = x.reshape(1, 4, 4, 4)
    x = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    x = naive_conv3x3(x, ps["adapter.up.k"].data)
    x = naive_conv3x3(x, ps["adapter.down.k"].data)[:, ::2, ::2, :]
    expected = x.reshape(16, 4)
    assert np.allclose(got, expected, atol=1e-10)


def test_adapter_shape_contract(registry, gen_config):
    s = generate_scenario(0, registry.origin, gen_config)
    ex = ConstantEyeExtractor()
    params = AdapterParams.create(AdapterConfig(), seed=1)
    out = adapt(ex(s), params)
    assert out.tokens.shape == (16 * 16, 16)


def test_adapter_rejects_wrong_channels():
    params = AdapterParams.create(AdapterConfig(), seed=0)
    with pytest.raises(DimMismatch):
        adapt_op(params.ps, params.prefix, params.cfg, np.zeros((1, 16, 16, 7)))


def test_adapter_compression_contract():
    with pytest.raises(DimMismatch):
        AdapterConfig(in_channels=16, dim=16, depth=4)


# ---------------------------------------------------------------------------
# dispersion
# ---------------------------------------------------------------------------

def test_dispersion_constant_eye_is_zero(registry, gen_config):
    params = AdapterParams.create(AdapterConfig(), seed=2)
    styles = list(registry)
    val = token_dispersion(3, styles, ConstantEyeExtractor(), params, gen_config)
    assert val == 0.0


def test_dispersion_brittle_positive(registry, gen_config):
    params = AdapterParams.create(AdapterConfig(), seed=2)
    styles = list(registry)
    val = token_dispersion(3, styles, BrittleExtractor(), params, gen_config)
    assert val > 0.0


def test_dispersion_hand_computed_toy():
    a = np.array([[0.0], [2.0]])
    b = np.array([[1.0], [3.0]])
    assert abs(dispersion_ratio([a, b]) - 0.25) < 1e-12


def test_dispersion_needs_two_styles(registry, gen_config):
    params = AdapterParams.create(AdapterConfig(), seed=2)
    with pytest.raises(TooFewStyles):
        token_dispersion(0, [registry.origin], ConstantEyeExtractor(), params, gen_config)


# ---------------------------------------------------------------------------
# pca
# ---------------------------------------------------------------------------

def test_pca_rank_one_grid():
    u = np.outer(np.linspace(-1, 1, 16), np.ones(16)).reshape(-1)
    direction = np.array([1.0, 2.0, -1.0, 0.5])
    grid = (u[:, None] * direction[None, :]).reshape(16, 16, 4)
    f = FeatureGrid(grid, "constant_eye", 0)
    ratios = pca_variance_ratios(f, k=2)
    assert abs(ratios[0] - 1.0) < 1e-9
    assert ratios[1] < 1e-9


def test_pca_two_orthogonal_patterns_variance_split():
    n = 16 * 16
    rng = np.random.default_rng(3)
    t = np.linspace(0, 4 * np.pi, n)
    a = np.sin(t)
    b = np.cos(t)
    d1 = np.array([1.0, 0.0, 0.0])
    d2 = np.array([0.0, 1.0, 0.0])
    grid = (3.0 * a[:, None] * d1 + 1.0 * b[:, None] * d2).reshape(16, 16, 3)
    ratios = pca_variance_ratios(FeatureGrid(grid, "constant_eye", 0), k=2)
    var1 = np.sum((3.0 * a - (3.0 * a).mean()) ** 2)
    var2 = np.sum((1.0 * b - (1.0 * b).mean()) ** 2)
    assert abs(ratios[0] - var1 / (var1 + var2)) < 1e-9
    assert abs(ratios[1] - var2 / (var1 + var2)) < 1e-9


def test_pca_sign_convention_deterministic():
    rng = np.random.default_rng(4)
    grid = rng.normal(size=(8, 8, 5))
    f = FeatureGrid(grid, "constant_eye", 0)
    m1 = pca_maps(f, k=3)
    m2 = pca_maps(FeatureGrid(grid.copy(), "constant_eye", 0), k=3)
    assert np.array_equal(m1, m2)


def test_pca_k_exceeds_channels():
    with pytest.raises(DimMismatch):
        pca_maps(FeatureGrid(np.zeros((4, 4, 3)), "constant_eye", 0), k=4)
