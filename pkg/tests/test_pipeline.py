import numpy as np
import pytest

from structaug.gradsource import AdvGradient, save_gradient
from structaug.geoflow import FlowParams, geometric_augment
from structaug.photometric import RecolorParams, photometric_augment
from structaug.pipeline import (
    AugmentConfig,
    Augmenter,
    CacheVersionError,
    ClassifierSource,
    ConfigError,
    FileSource,
    OperatorCache,
    ZeroSource,
    augment_batch,
    iterate_augment,
    precompute,
    should_augment,
    with_overrides,
)
from structaug.tensor_core import Image
from structaug.testkit import synthetic_bars

from conftest import random_image


def bars_items(count, seed=4):
    X, y = synthetic_bars(count, 8, seed=seed)
    return [(Image(x), int(t)) for x, t in zip(X, y)]


@pytest.fixture
def mlp_source(trained_mlp):
    return ClassifierSource(trained_mlp)


# --- configuration -------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw", [dict(transform="blur"), dict(probability=1.5), dict(probability=-0.1),
           dict(iterations=0), dict(mode="both")],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        AugmentConfig(**kw)


def test_with_overrides_routes_nested_fields():
    cfg = with_overrides(AugmentConfig(), flow_gamma=2.0, recolor_k=5, probability=1.0)
    assert cfg.flow.gamma == 2.0 and cfg.recolor.k == 5 and cfg.probability == 1.0
    assert cfg.flow.alpha == FlowParams().alpha


def test_decisions_are_per_image_and_seeded():
    cfg = AugmentConfig(probability=0.5, seed=3)
    first = [should_augment(cfg, i) for i in range(200)]
    assert first == [should_augment(cfg, i) for i in range(200)]
    assert 60 < sum(first) < 140
    other = [should_augment(with_overrides(cfg, seed=4), i) for i in range(200)]
    assert first != other


# --- policy ----------------------------------------------------------------------------


@pytest.mark.parametrize("transform", ["flow", "recolor"])
def test_probability_zero_returns_inputs(transform, mlp_source):
    items = bars_items(12)
    out = augment_batch(items, mlp_source, AugmentConfig(transform=transform, probability=0.0))
    assert out.modified_count == 0
    assert all(a is img for a, (img, _) in zip(out.images, items))


@pytest.mark.parametrize("transform", ["flow", "recolor"])
def test_zero_gradient_is_identity(transform):
    items = bars_items(6)
    out = augment_batch(items, ZeroSource(), AugmentConfig(transform=transform, probability=1.0))
    assert all(out.applied)
    for a, (img, _) in zip(out.images, items):
        assert a == img


def test_single_iteration_equals_direct_call(trained_mlp, mlp_source):
    img, label = bars_items(1)[0]
    cfg = AugmentConfig(transform="flow", probability=1.0, flow=FlowParams(alpha=1e-2))
    batch = augment_batch([(img, label)], mlp_source, cfg)
    g = mlp_source(img, label)
    direct, _ = geometric_augment(img, g, cfg.flow)
    assert batch.images[0].data.tobytes() == direct.data.tobytes()
    traj = iterate_augment(img, label, mlp_source, cfg)
    assert len(traj.images) == 2 and traj.images[-1] == direct

    rcfg = AugmentConfig(transform="recolor", probability=1.0, recolor=RecolorParams(budget=0.05))
    batch = augment_batch([(img, label)], mlp_source, rcfg)
    assert batch.images[0] == photometric_augment(img, g, rcfg.recolor)


def test_zero_source_trajectory_is_constant():
    img, label = bars_items(1)[0]
    cfg = AugmentConfig(probability=1.0, iterations=4)
    traj = iterate_augment(img, label, ZeroSource(), cfg)
    assert len(traj.images) == 5 and all(x == img for x in traj.images)
    assert traj.losses == []


def test_trajectory_records_loss_and_confidence(mlp_source):
    img, label = bars_items(3)[1]
    cfg = AugmentConfig(probability=1.0, iterations=3, flow=FlowParams(alpha=1e-2, cap=1.0))
    traj = iterate_augment(img, label, mlp_source, cfg)
    assert len(traj.losses) == len(traj.confidences) == 4
    assert len(traj.flows) == len(traj.gradients) == 3
    assert traj.losses[-1] > traj.losses[0]
    assert traj.confidences[-1] < traj.confidences[0]


def test_batch_with_iterations_ends_where_trajectory_ends(mlp_source):
    items = bars_items(4)
    cfg = AugmentConfig(probability=1.0, iterations=3, flow=FlowParams(alpha=1e-2))
    batch = augment_batch(items, mlp_source, cfg)
    for (img, label), out in zip(items, batch.images):
        assert out == iterate_augment(img, label, mlp_source, cfg).images[-1]


def test_flow_batch_rejects_mixed_sizes(rng):
    items = [(random_image(rng, 4, 4), 0), (random_image(rng, 4, 5), 0)]
    with pytest.raises(ConfigError):
        augment_batch(items, ZeroSource(), AugmentConfig(probability=1.0))
    # recolor works per image and accepts mixed sizes
    out = augment_batch(items, ZeroSource(), AugmentConfig(transform="recolor", probability=1.0))
    assert out.modified_count == 2


def test_file_source_reuses_gradient(tmp_path, rng):
    img = random_image(rng, 4, 4)
    g = AdvGradient(rng.standard_normal(48), "untargeted", 0)
    save_gradient(g, tmp_path / "a.saug", (4, 4))
    src = FileSource({"a": tmp_path / "a.saug"})
    cfg = AugmentConfig(probability=1.0, iterations=2, flow=FlowParams(alpha=1.0))
    traj = iterate_augment(img, 0, src, cfg, key="a")
    np.testing.assert_array_equal(traj.gradients[0].data, traj.gradients[1].data)
    with pytest.raises(KeyError):
        src(img, 0, "b")


def test_cg_iterations_stable_across_batch(mlp_source):
    # the 8x8, gamma=1 system is fixed; its CG iteration count is a property of the right-hand sides
    cfg = AugmentConfig(probability=1.0, flow=FlowParams(alpha=1e-2, gamma=1.0))
    out = augment_batch(bars_items(100, seed=8), mlp_source, cfg)
    counts = [max(r.flow.cg_iterations) for r in out.results]
    assert max(counts) <= 64
    assert max(counts) - min(counts) <= 3


# --- cache ---------------------------------------------------------------------------------


@pytest.mark.parametrize("transform", ["flow", "recolor"])
def test_cached_and_uncached_are_bit_identical(tmp_path, mlp_source, transform):
    items = bars_items(10)
    cfg = AugmentConfig(transform=transform, probability=1.0, flow=FlowParams(alpha=1e-2))
    plain = augment_batch(items, mlp_source, cfg)
    cache = OperatorCache(tmp_path / "cache")
    cached = augment_batch(items, mlp_source, cfg, cache=cache)
    warm = augment_batch(items, mlp_source, cfg, cache=OperatorCache(tmp_path / "cache"), workers=4)
    for a, b, c in zip(plain.images, cached.images, warm.images):
        assert a.data.tobytes() == b.data.tobytes() == c.data.tobytes()


def test_geo_cache_hits_and_misses(tmp_path):
    cache = OperatorCache(tmp_path)
    a = cache.geo_ops(4, 4, 1.0)
    cache.geo_ops(4, 4, 1.0)
    cache.geo_ops(4, 5, 1.0)
    assert (cache.hits, cache.misses) == (1, 2)
    fresh = OperatorCache(tmp_path)
    b = fresh.geo_ops(4, 4, 1.0)
    assert (fresh.hits, fresh.misses) == (1, 0)
    assert (a.P != b.P).nnz == 0


def test_recolor_cache_key_tracks_parameters(tmp_path, rng):
    img = random_image(rng, 4, 4)
    cache = OperatorCache(tmp_path)
    base = RecolorParams(k=2)
    s1 = cache.recolor_subspace(img, base)
    s2 = cache.recolor_subspace(img, base)
    cache.recolor_subspace(img, RecolorParams(k=3))
    cache.recolor_subspace(img, RecolorParams(k=2, mu=2e-2))
    assert (cache.hits, cache.misses) == (1, 3)
    np.testing.assert_array_equal(s1.vectors, s2.vectors)


def test_precompute_is_idempotent(tmp_path, rng):
    cache = OperatorCache(tmp_path)
    cfg = AugmentConfig()
    first = precompute([(4, 4), (8, 8)], cfg, cache)
    assert [created for _, created in first] == [True, True]
    files = sorted(p.name for p in tmp_path.iterdir())
    again = precompute([(4, 4), (8, 8)], cfg, OperatorCache(tmp_path))
    assert [created for _, created in again] == [False, False]
    assert sorted(p.name for p in tmp_path.iterdir()) == files

    rcfg = AugmentConfig(transform="recolor")
    img = random_image(rng, 4, 4)
    assert precompute([img], rcfg, cache)[0][1] is True
    assert precompute([img], rcfg, OperatorCache(tmp_path))[0][1] is False
    with pytest.raises(ConfigError):
        precompute([(4, 4)], rcfg, cache)


def test_cache_version_mismatch_raises(tmp_path):
    cache = OperatorCache(tmp_path)
    cache.geo_ops(3, 3, 10.0)
    path = next(tmp_path.glob("geo-*.npz"))
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    arrays["meta"] = np.asarray(str(arrays["meta"]).replace('"format": 1', '"format": 0'))
    np.savez(path, **arrays)
    with pytest.raises(CacheVersionError):
        OperatorCache(tmp_path).geo_ops(3, 3, 10.0)
    with pytest.raises(CacheVersionError):
        precompute([(3, 3)], AugmentConfig(), OperatorCache(tmp_path))


def test_memory_cache_needs_no_directory(rng):
    cache = OperatorCache()
    aug = Augmenter(AugmentConfig(transform="recolor", probability=1.0), cache)
    img = random_image(rng, 3, 3)
    g = AdvGradient(rng.standard_normal(27), "untargeted", 0)
    a = aug.apply(img, g).image
    b = aug.apply(img, g).image
    assert a == b and (cache.hits, cache.misses) == (1, 1)
