import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from decgan import datasets as ds
from decgan import evaluation as ev
from decgan.checkpoint import freeze
from decgan.networks import BackboneConfig, build_classifier, build_encoder, build_generator, generate


def random_stats(rng, d):
    a = rng.standard_normal((d, d))
    return ev.GaussianStats(rng.standard_normal(d), a @ a.T + 0.1 * np.eye(d))


# ---------------------------------------------------------------- Fréchet

def test_frechet_equal_stats_is_zero():
    s = random_stats(np.random.default_rng(0), 6)
    assert abs(ev.frechet_distance(s, s)) <= 1e-8


def test_frechet_identity_covariances_mean_shift():
    rng = np.random.default_rng(1)
    delta = rng.standard_normal(5)
    a = ev.GaussianStats(np.zeros(5), np.eye(5))
    b = ev.GaussianStats(delta, np.eye(5))
    assert ev.frechet_distance(a, b) == pytest.approx(float(delta @ delta), abs=1e-10)


def test_frechet_one_dimensional_closed_form():
    a = ev.GaussianStats(np.zeros(1), np.array([[1.0]]))
    b = ev.GaussianStats(np.zeros(1), np.array([[4.0]]))
    assert ev.frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)


def test_frechet_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = random_stats(rng, 4), random_stats(rng, 4)
        assert abs(ev.frechet_distance(a, b) - ev.frechet_distance(b, a)) <= 1e-8


def test_frechet_errors():
    with pytest.raises(ValueError):
        ev.frechet_distance(ev.GaussianStats(np.zeros(2), np.eye(2)), ev.GaussianStats(np.zeros(3), np.eye(3)))
    with pytest.raises(ValueError):
        ev.GaussianStats(np.array([np.nan]), np.eye(1))
    bad = ev.GaussianStats(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        ev.frechet_distance(ev.GaussianStats(np.zeros(2), np.eye(2)), bad)


def test_frechet_matches_scipy_style_product_root():
    """Compare with an independent route: eigenvalues of the non-symmetric product S_a S_b."""
    rng = np.random.default_rng(3)
    a, b = random_stats(rng, 5), random_stats(rng, 5)
    vals = np.linalg.eigvals(a.covariance @ b.covariance)
    tr_sqrt = np.sqrt(vals.real.clip(0)).sum()
    diff = a.mean - b.mean
    expected = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2 * tr_sqrt
    assert ev.frechet_distance(a, b) == pytest.approx(expected, rel=1e-9)


def test_gaussian_stats_brute_force():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((37, 6))
    s = ev.gaussian_stats(f)
    n, d = f.shape
    mu = [sum(f[i, j] for i in range(n)) / n for j in range(d)]
    cov = np.zeros((d, d))
    for j in range(d):
        for k in range(d):
            cov[j, k] = sum((f[i, j] - mu[j]) * (f[i, k] - mu[k]) for i in range(n)) / (n - 1)
    np.testing.assert_allclose(s.mean, mu, atol=1e-12)
    np.testing.assert_allclose(s.covariance, cov, atol=1e-10)


def test_gaussian_stats_examples():
    assert (ev.gaussian_stats(np.ones((10, 3))).covariance == 0).all()
    rng = np.random.default_rng(5)
    full = ev.gaussian_stats(rng.standard_normal((5, 4)))
    assert np.linalg.matrix_rank(full.covariance) == 4
    big = ev.gaussian_stats(rng.standard_normal((100_000, 4)))
    assert np.abs(big.mean).max() < 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_frechet_nonnegative_and_symmetric_property(d, seed):
    rng = np.random.default_rng(seed)
    a, b = random_stats(rng, d), random_stats(rng, d)
    ab, ba = ev.frechet_distance(a, b), ev.frechet_distance(b, a)
    assert ab >= 0 and abs(ab - ba) <= 1e-8 * max(1.0, ab)


# ---------------------------------------------------------------- probe

def test_probe_separable_two_class():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 600)
    x = rng.standard_normal((600, 5))
    x[:, 0] += 4 * (2 * y - 1)
    assert ev.linear_probe(x, y, split_seed=0) >= 0.99


def test_probe_shuffled_labels_is_chance():
    rng = np.random.default_rng(1)
    k = 4
    x = rng.standard_normal((2000, 8))
    y = rng.integers(0, k, 2000)
    acc = ev.linear_probe(x, y, split_seed=0, num_classes=k, epochs=20)
    assert abs(acc - 1 / k) <= 0.05


def test_probe_preconditions():
    with pytest.raises(ValueError):
        ev.linear_probe(np.zeros((50, 2)), np.zeros(50, int))
    with pytest.raises(ValueError):
        ev.linear_probe(np.zeros((15, 2)), np.arange(15) % 2)


def test_probe_deterministic():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((300, 4)), rng.integers(0, 3, 300)
    assert ev.linear_probe(x, y, 7, epochs=5) == ev.linear_probe(x, y, 7, epochs=5)


# ---------------------------------------------------------------- grids

@pytest.fixture(scope="module")
def model():
    cfg = BackboneConfig(resolution=16, latent_dim=8, base_width=4, num_attribute_classes=4)
    return SimpleNamespace(E_c=build_encoder(cfg, 1).eval(), E_a=build_encoder(cfg, 2).eval(),
                           G=freeze(build_generator(cfg, 3)), C=freeze(build_classifier(cfg, 4)),
                           checkpoint_hash="abc")


@pytest.fixture(scope="module")
def data():
    return ds.make_synthetic(120, 4, 16, 0)


def test_swap_pair_layout_and_self_swap(model, data):
    x1, x2 = data.images[0], data.images[1]
    g = ev.swap_pair(x1, x2, model.E_c, model.E_a, model.G)
    assert g.shape == (3, 2)
    np.testing.assert_array_equal(g.cells[0, 0], x1)
    same = ev.swap_pair(x1, x1, model.E_c, model.E_a, model.G)
    np.testing.assert_array_equal(same.cells[2], same.cells[1])
    with pytest.raises(ValueError):
        ev.swap_pair(np.zeros((1, 32, 32), np.float32), np.zeros((1, 32, 32), np.float32),
                     model.E_c, model.E_a, model.G)


def test_random_grids_deterministic(model, data):
    a = ev.random_content_grid(data.images[0], model.E_c, model.E_a, model.G, 5, seed=3)
    b = ev.random_content_grid(data.images[0], model.E_c, model.E_a, model.G, 5, seed=3)
    assert a.shape == (1, 5)
    np.testing.assert_array_equal(a.cells, b.cells)
    c = ev.random_attribute_grid(data.images[0], model.E_c, model.E_a, model.G, 4, seed=3)
    assert c.shape == (1, 4)
    np.testing.assert_array_equal(c.cells, ev.random_attribute_grid(data.images[0], model.E_c, model.E_a,
                                                                    model.G, 4, seed=3).cells)


def test_interpolation_endpoints_bit_identical(model, data):
    x1, x2 = data.images[:3], data.images[3:6]
    with torch.no_grad():
        t1, t2 = ev._codes(model.E_c, model.E_a, torch.from_numpy(x1)), \
            ev._codes(model.E_c, model.E_a, torch.from_numpy(x2))
        rec1 = generate(model.G, t1.z_c, t1.z_a).numpy()
        cross = generate(model.G, t2.z_c, t1.z_a).numpy()
        attr_end = generate(model.G, t1.z_c, t2.z_a).numpy()
    g = ev.interpolate_content(x1, x2, model.E_c, model.E_a, model.G, steps=5)
    assert g.shape == (3, 5)
    np.testing.assert_array_equal(g.cells[:, 0], rec1)
    np.testing.assert_array_equal(g.cells[:, -1], cross)
    h = ev.interpolate_attribute(x1, x2, model.E_c, model.E_a, model.G, steps=4)
    np.testing.assert_array_equal(h.cells[:, 0], rec1)
    np.testing.assert_array_equal(h.cells[:, -1], attr_end)
    with pytest.raises(ValueError):
        ev.interpolate_content(x1, x2, model.E_c, model.E_a, model.G, steps=1)


def test_grid_tile_separators(model, data):
    g = ev.swap_pair(data.images[0], data.images[1], model.E_c, model.E_a, model.G)
    img = g.tile(sep=2)
    assert img.shape == (3 * 16 + 4, 2 * 16 + 2, 1) and img.dtype == np.uint8
    assert (img[16:18] == 255).all() and (img[:, 16:18] == 255).all()
    assert json.loads(json.dumps(g.captions()))["shape"] == [3, 2]


def test_scored_studies_run(model, data):
    s = ev.swap_success(model, data, n_pairs=20, seed=0)
    assert 0 <= s["swap_success"] <= 1 and s["n_swaps"] == 40
    c = ev.content_interpolation_constancy(model, data, n_pairs=10, steps=4)
    assert 0 <= c["content_constancy"] <= 1
    m = ev.attribute_interpolation_monotonicity(model, data, n_pairs=10, steps=4)
    assert 0 <= m["attribute_monotone"] <= 1


def test_fid_same_set_is_zero(model, data):
    assert ev.fid(data.images[:100], data.images[:100], model.C) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        ev.fid(data.images[:0], data.images[:10], model.C)


def test_export_features(tmp_path, model, data):
    p = ev.export_features(model, data, "z_a", tmp_path / "f.csv")
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["label"] + [f"f{i}" for i in range(8)]
    assert len(rows) == len(data) + 1
    side = json.loads(p.with_suffix(".json").read_text())
    assert side["which"] == "z_a" and side["n"] == len(data) and side["checkpoint_hash"] == "abc"
    first = p.read_bytes()
    ev.export_features(model, data, "z_a", tmp_path / "f.csv")
    assert p.read_bytes() == first
    np.testing.assert_allclose(ev.extract_codes(model, data, "z"),
                               ev.extract_codes(model, data, "z_c") + ev.extract_codes(model, data, "z_a"),
                               atol=1e-6)
    with pytest.raises(ValueError):
        ev.extract_codes(model, data, "w")


def test_pca_sign_convention():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((50, 4)) * [5, 2, 1, 0.5]
    p = ev.pca_2d(f)
    np.testing.assert_allclose(p, ev.pca_2d(f))
    np.testing.assert_allclose(p.mean(0), 0, atol=1e-12)
    assert p[:, 0].var() >= p[:, 1].var()


def test_metric_doc_fields():
    d = ev.metric_doc("fid", 1.5, {"a": 1}, "h")
    assert set(d) == {"metric", "value", "config_hash", "checkpoint_hash"}
    assert len(d["config_hash"]) == 64
