import numpy as np
import pytest
import torch
from scipy.ndimage import median_filter

from patchmatte import cpc
from patchmatte.data import SceneConfig, synth_scene
from patchmatte.metrics import MetricReport
from patchmatte.network import NetConfig, build_model, network_input
from patchmatte.pipeline import (
    CSV_HEADER,
    BudgetError,
    FeatureCache,
    InferenceConfig,
    TiledMatter,
    TrainConfig,
    TrainingError,
    candidate_pool,
    evaluate,
    format_summary,
    matte_image,
    reports_csv,
    tensor_bytes,
    train,
    visualize_attention,
)
from patchmatte.trimap import B, F, U

SMALL = NetConfig(widths=(4, 8, 8, 8))


def small_cfg(**kw):
    base = dict(patch_side=32, margin=8, k=2, pool_limit=6)
    base.update(kw)
    return InferenceConfig(**base)


@pytest.fixture(scope="module")
def scene():
    return synth_scene(3, 96)


def test_inference_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(k=0)
    with pytest.raises(ValueError):
        InferenceConfig(k=5, pool_limit=4)
    with pytest.raises(ValueError):
        InferenceConfig(margin=320)
    cfg = InferenceConfig.from_mapping({"patch-side": "64", "margin": "16", "clamp_known": "false"})
    assert cfg.patch_side == 64 and cfg.clamp_known is False
    with pytest.raises(ValueError):
        InferenceConfig.from_mapping({"bogus": 1})


def test_candidate_pool():
    assert candidate_pool(5, 30) == [0, 1, 2, 3, 4]
    pool = candidate_pool(100, 30)
    assert len(pool) == 30 and pool[0] == 0 and pool[-1] == 99
    assert pool == sorted(set(pool))


def test_feature_cache_lru_and_budget():
    calls = []

    def compute(key):
        calls.append(key)
        return np.zeros(10, np.float64)

    cache = FeatureCache(250, compute)
    for key in (0, 1, 0, 2, 1):
        cache.get(key)
    # 3 entries of 80 bytes fit; nothing evicted yet
    assert calls == [0, 1, 2] and cache.hits == 2
    cache.get(3)
    assert cache.evictions == 1 and 0 not in cache and len(cache) == 3
    cache.get(0)
    assert calls[-1] == 0
    assert cache.peak_bytes <= 250 and cache.bytes == 240
    with pytest.raises(BudgetError):
        FeatureCache(50, compute).get(0)


def test_tensor_bytes():
    assert tensor_bytes(torch.zeros(3, 4)) == 48
    assert tensor_bytes([np.zeros(2), (torch.zeros(2, dtype=torch.float64),)]) == 32


def test_all_foreground_bypasses_network():
    model = build_model(SMALL)
    img = np.random.default_rng(0).random((70, 50, 3)).astype(np.float32)
    tri = np.full((70, 50), F, np.uint8)
    matter = TiledMatter(img, tri, model, small_cfg())
    out = matter.run()
    assert (out == 1).all() and matter.network_calls == 0


def test_size_mismatch_and_stride_errors():
    model = build_model(SMALL)
    with pytest.raises(ValueError):
        matte_image(np.zeros((10, 10, 3)), np.zeros((10, 11), np.uint8), model, small_cfg())
    with pytest.raises(ValueError):
        matte_image(np.zeros((10, 10, 3)), np.zeros((10, 10), np.uint8), model, small_cfg(patch_side=30, margin=6))
    with pytest.raises(ValueError):
        matte_image(np.zeros((10, 10, 3)), np.zeros((10, 10), np.uint8), model, small_cfg(encoder_stride=8))


def test_budget_too_small_for_one_patch(scene):
    with pytest.raises(BudgetError):
        matte_image(scene.image, scene.trimap, build_model(SMALL), small_cfg(memory_budget_bytes=1000))


@pytest.mark.parametrize("mode", ["tgnl", "none"])
def test_single_patch_matches_untiled(mode):
    s = synth_scene(1, 64)
    model = build_model(NetConfig(widths=(4, 8, 8, 8), context_mode=mode), seed=2)
    cfg = InferenceConfig(patch_side=64, margin=16, k=3, pool_limit=30, clamp_known=False)
    tiled = matte_image(s.image, s.trimap, model, cfg)
    with torch.no_grad():
        x = network_input(s.image, s.trimap)[None]
        direct = model(x, [s.trimap])[0, 0].double().numpy()
    np.testing.assert_allclose(tiled, direct, atol=1e-6)


def test_known_regions_exact_with_clamp(scene):
    model = build_model(SMALL)
    out = matte_image(scene.image, scene.trimap, model, small_cfg())
    assert (out[scene.trimap == F] == 1).all()
    assert (out[scene.trimap == B] == 0).all()
    assert out.min() >= 0 and out.max() <= 1


def test_pool_excludes_query_and_topk_consistent(scene):
    model = build_model(SMALL)
    matter = TiledMatter(scene.image, scene.trimap, model, small_cfg(pool_limit=4))
    matter.run()
    assert matter.selections
    for index, sel in matter.selections.items():
        assert index not in sel.candidates
        assert abs(sel.scores.sum() - 1) < 1e-6
        assert sel.chosen == [sel.candidates[i] for i in cpc.select_topk(list(sel.scores), 2)]


def test_pool_permutation_invariant(scene):
    model = build_model(SMALL)
    a = TiledMatter(scene.image, scene.trimap, model, small_cfg())
    out_a = a.run()
    b = TiledMatter(scene.image, scene.trimap, model, small_cfg())
    b.pool = b.pool[::-1]
    np.testing.assert_allclose(b.run(), out_a, atol=1e-6)


def test_cache_recompute_gives_same_result(scene):
    model = build_model(SMALL)
    big = TiledMatter(scene.image, scene.trimap, model, small_cfg())
    out = big.run()
    # room for roughly two encoded patches forces evictions and recomputes
    one = tensor_bytes(big.encoded(0))
    tight = TiledMatter(scene.image, scene.trimap, model, small_cfg(memory_budget_bytes=2 * one + 1))
    np.testing.assert_array_equal(tight.run(), out)
    assert tight.cache.evictions > 0 and tight.cache.peak_bytes <= 2 * one + 1


def test_deterministic_inference(scene):
    model = build_model(SMALL, seed=4)
    a = matte_image(scene.image, scene.trimap, model, small_cfg())
    b = matte_image(scene.image, scene.trimap, build_model(SMALL, seed=4), small_cfg())
    assert np.array_equal(a, b)


def test_train_zero_steps_unchanged():
    ds = [synth_scene(i, 64) for i in range(2)]
    model = build_model(SMALL, seed=1)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    res = train(ds, model, TrainConfig(steps=0, patch_side=32, scales=(32,)))
    assert res.losses == []
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, before[k])


def test_train_deterministic_and_log():
    ds = [synth_scene(i, 64) for i in range(3)]
    cfg = TrainConfig(steps=4, batch=2, patch_side=32, scales=(32, 48), k=2)
    a = train(ds, build_model(SMALL, seed=0), cfg)
    b = train(ds, build_model(SMALL, seed=0), cfg)
    assert [l.l_overall for l in a.losses] == [l.l_overall for l in b.losses]
    log = a.loss_log().splitlines()
    assert log[0] == "step,l_overall,l_alpha,l_composite,lr" and len(log) == 5
    for l in a.losses:
        assert l.l_overall == pytest.approx(0.5 * l.l_alpha + 0.5 * l.l_composite, abs=1e-6)
    assert a.lrs[0] == pytest.approx(5e-4)


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train([], build_model(SMALL))
    s = synth_scene(0, 64)
    s.fg = None
    with pytest.raises(ValueError):
        train([s], build_model(SMALL))


def test_train_nan_reports_step():
    ds = [synth_scene(0, 64)]
    model = build_model(SMALL)
    with torch.no_grad():
        model.dec_out.bias.fill_(float("nan"))
    with pytest.raises(TrainingError) as exc:
        train(ds, model, TrainConfig(steps=3, batch=2, patch_side=32, scales=(32,)))
    assert exc.value.step == 0


@pytest.mark.slow
def test_train_loss_trend_decreases():
    ds = [synth_scene(i, 128) for i in range(8)]
    res = train(ds, build_model(NetConfig(context_mode="none"), seed=0), TrainConfig(steps=200, batch=8, scales=(64, 96, 128)))
    smooth = median_filter(np.array([l.l_overall for l in res.losses]), size=21, mode="nearest")
    assert smooth[-20:].mean() < smooth[:20].mean()


def test_evaluate_ground_truth_stub():
    ds = [synth_scene(i, 64) for i in range(2)]
    lookup = {id(s.image): s.alpha for s in ds}
    reports = evaluate(ds, lambda img, tri: lookup[id(img)])
    for r in reports:
        assert r.metrics.values() == (0.0, 0.0, 0.0, 0.0)
    csv = reports_csv(reports).splitlines()
    assert csv[0] == CSV_HEADER and csv[0].split(",")[1:5] == list(MetricReport.COLUMNS)
    assert csv[-1].startswith("mean,")
    assert "SAD" in format_summary(reports)
    s = synth_scene(0, 64)
    s.alpha = None
    with pytest.raises(ValueError):
        evaluate([s], lambda i, t: None)


def test_evaluate_deterministic():
    ds = [synth_scene(5, 96)]
    model = build_model(SMALL)
    a = evaluate(ds, model, small_cfg())
    b = evaluate(ds, model, small_cfg())
    assert a[0].metrics == b[0].metrics
    assert a[0].patch_count == 16 and a[0].peak_bytes > 0


def _viz_scene():
    cfg = SceneConfig(canvas_side=96, unknown_windows=1, window_side=48, u_bounds=(0.05, 0.9))
    return synth_scene(2, config=cfg)


def test_visualize_attention_consistency():
    s = _viz_scene()
    model = build_model(SMALL)
    cfg = small_cfg(k=3)
    matter = TiledMatter(s.image, s.trimap, model, cfg)
    q, pixel = next(
        (i, (int(r), int(c)))
        for i in range(len(matter.plan))
        for r, c in np.argwhere(matter.patch_trimap(i) == U)
        if matter.feature_trimap(i)[r // 4, c // 4] == U
    )
    viz = visualize_attention(s.image, s.trimap, model, q, pixel, cfg)
    query = matter.keyed(q, "query")
    assert viz.context_indices == matter.select_contexts(q, query).chosen
    for region in cpc.REGION_ORDER:
        total = sum(w[region].sum() for w in viz.weights)
        assert total == pytest.approx(1.0, abs=1e-6) or total == 0
        peak = max(h[region].max() for h in viz.heatmaps)
        assert peak == pytest.approx(1.0) or peak == 0
    assert viz.heatmaps[0][U].shape == (32, 32)


def test_visualize_attention_errors(scene):
    model = build_model(SMALL)
    tri = scene.trimap.copy()
    tri[:32, :32] = F
    tri[0, 0] = F
    with pytest.raises(ValueError):
        visualize_attention(scene.image, tri, model, 0, (0, 0), small_cfg())
    with pytest.raises(IndexError):
        visualize_attention(scene.image, scene.trimap, model, 99, (0, 0), small_cfg())
    with pytest.raises(ValueError):
        visualize_attention(scene.image, scene.trimap, build_model(NetConfig(context_mode="none")), 0, (0, 0), small_cfg())


def test_single_context_position_heatmap():
    q = cpc.KeyedPatch(torch.randn(2, 2, 2), torch.randn(3, 2, 2), np.full((2, 2), U, np.uint8))
    tri = np.full((3, 3), B, np.uint8)
    tri[2, 1] = F
    c = cpc.KeyedPatch(torch.randn(2, 3, 3), torch.randn(3, 3, 3), tri)
    maps = cpc.attention_maps(q, [c], (0, 1))
    assert maps[0][F][2, 1] == 1.0 and maps[0][F].sum() == 1.0
