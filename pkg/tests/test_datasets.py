import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetvec.datasets import (
    REFERENCE_EDGE,
    ClassWise,
    CorruptionSpec,
    LabeledDataset,
    PgdConfig,
    RandomSubset,
    corrupt,
    elastic_field,
    elastic_transform,
    et1,
    et2,
    gaussian_corrupt,
    gn1,
    gn2,
    load_csv,
    load_split,
    make_blobs,
    make_patterns,
    make_templates,
    pgd_attack,
    save_csv,
    save_split,
    split_forget_retain,
    train_test_split,
)
from forgetvec.nn import MLP, ConfigError, InputError, ShapeError, TrainConfig, init_mlp, predict, softmax_ce, forward_logits, train_classifier


# --- generators ------------------------------------------------------------


def test_blobs_sigma_zero_collapses_to_center():
    data = make_blobs(classes=3, dim=4, per_class=10, sigma=0.0, seed=1)
    for k in range(3):
        rows = data.features[data.labels == k]
        assert np.all(rows == rows[0])


def test_blobs_deterministic():
    a, b = make_blobs(seed=4), make_blobs(seed=4)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_blobs_in_unit_range():
    data = make_blobs(seed=2)
    assert data.features.min() >= 0 and data.features.max() <= 1


def test_blobs_need_two_classes():
    with pytest.raises(ConfigError):
        make_blobs(classes=1)


def nearest_center_accuracy(train, test):
    centers = np.stack([train.features[train.labels == k].mean(axis=0) for k in range(train.class_count)])
    d = ((test.features[:, None, :] - centers[None]) ** 2).sum(axis=2)
    return np.mean(d.argmin(axis=1) == test.labels)


def test_blobs_default_learnable():
    train, test = train_test_split(make_blobs(classes=5, dim=16, sigma=0.3, center_scale=3.0, seed=0), 0.2, 0)
    assert nearest_center_accuracy(train, test) >= 0.97
    model = train_classifier(train.features, train.labels, [16, 64, 5], TrainConfig(seed=0))
    assert np.mean(predict(model, test.features) == test.labels) >= 0.97


def test_blobs_as_image():
    data = make_blobs(dim=16, per_class=5, as_image=True)
    assert data.image_shape == (4, 4, 1)


def test_patterns_noise_free_classes_identical():
    data = make_patterns(classes=4, edge=6, per_class=5, noise_sigma=0.0, seed=0)
    for k in range(4):
        rows = data.features[data.labels == k]
        assert np.all(rows == rows[0])


def test_templates_hamming_separated():
    edge = 8
    t = make_templates(10, edge, seed=3)
    for i in range(len(t)):
        for j in range(i + 1, len(t)):
            assert np.count_nonzero(t[i] != t[j]) >= 0.2 * edge * edge


def test_patterns_edge_too_small():
    with pytest.raises(ConfigError):
        make_patterns(edge=3)


def test_patterns_learnable():
    train, test = train_test_split(make_patterns(classes=10, edge=16, per_class=50, noise_sigma=0.1, seed=0), 0.2, 0)
    templates = np.stack([train.features[train.labels == k].mean(axis=0) for k in range(10)])
    nearest = ((test.features[:, None] - templates[None]) ** 2).sum(axis=2).argmin(axis=1)
    assert np.mean(nearest == test.labels) >= 0.95
    model = train_classifier(train.features, train.labels, [256, 32, 10], TrainConfig(epochs=10, seed=0))
    assert np.mean(predict(model, test.features) == test.labels) >= 0.95


def test_dataset_validation():
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((3, 2)), np.zeros(2, int), 2)
    with pytest.raises(InputError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 5]), 2)
    with pytest.raises(InputError):
        LabeledDataset(np.array([[np.nan, 0.0]]), np.array([0]), 2)


def test_train_test_split_stratified():
    data = make_blobs(classes=4, per_class=50, seed=0)
    train, test = train_test_split(data, 0.2, 0)
    assert len(train) + len(test) == len(data)
    assert np.all(np.bincount(test.labels) == 10)


# --- forget / retain ---------------------------------------------------------


def test_classwise_split():
    data = make_blobs(per_class=20, seed=0)
    split = split_forget_retain(data, ClassWise(2))
    np.testing.assert_array_equal(split.forget_indices, np.flatnonzero(data.labels == 2))
    assert split.forgotten_class == 2


def test_random_split_size():
    data = make_blobs(classes=5, per_class=200, seed=0)
    split = split_forget_retain(data, RandomSubset(0.1, seed=3))
    assert len(split.forget_indices) == 100


def test_random_split_deterministic():
    data = make_blobs(seed=0)
    a = split_forget_retain(data, RandomSubset(0.1, seed=9))
    b = split_forget_retain(data, RandomSubset(0.1, seed=9))
    np.testing.assert_array_equal(a.forget_indices, b.forget_indices)


def test_random_split_restricted_classes():
    data = make_blobs(seed=0)
    split = split_forget_retain(data, RandomSubset(0.1, seed=0, classes=(1, 2)))
    assert set(data.labels[split.forget_indices]) <= {1, 2}
    assert len(split.forget_indices) == round(0.1 * np.isin(data.labels, [1, 2]).sum())


def test_split_errors():
    data = make_blobs(classes=3, per_class=5, seed=0)
    with pytest.raises(InputError):
        split_forget_retain(data.subset(np.flatnonzero(data.labels != 1)), ClassWise(1))
    for ratio in (0.0, 1.0, 1.5):
        with pytest.raises(ConfigError):
            RandomSubset(ratio)


@given(st.floats(0.01, 0.99), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_split_partitions(ratio, seed):
    data = make_blobs(classes=3, dim=2, per_class=30, seed=1)
    split = split_forget_retain(data, RandomSubset(ratio, seed))
    f, r = set(split.forget_indices), set(split.retain_indices)
    assert not f & r
    assert f | r == set(range(len(data)))
    assert len(f) == round(ratio * len(data))


def test_split_roundtrip(tmp_path):
    data = make_blobs(per_class=20, seed=0)
    split = split_forget_retain(data, RandomSubset(0.1, seed=2, classes=(0, 3)))
    save_split(tmp_path / "s.json", split)
    back = load_split(tmp_path / "s.json", len(data))
    np.testing.assert_array_equal(back.forget_indices, split.forget_indices)
    assert back.spec == split.spec


def test_csv_roundtrip(tmp_path):
    data = make_blobs(classes=3, dim=4, per_class=5, seed=0)
    save_csv(tmp_path / "d.csv", data)
    back = load_csv(tmp_path / "d.csv", 3)
    np.testing.assert_allclose(back.features, data.features, rtol=1e-12)
    np.testing.assert_array_equal(back.labels, data.labels)


# --- corruptions -------------------------------------------------------------


def test_presets():
    assert gn1().sigma == 0.08 and gn2().sigma == 0.2
    assert (et1().intensity, et1().smoothing, et1().offset) == (488.0, 170.8, 24.4)
    assert (et2().intensity, et2().smoothing, et2().offset) == (488.0, 19.52, 48.8)


def test_gaussian_sigma_zero_identity():
    x = np.random.default_rng(0).uniform(size=(5, 4))
    np.testing.assert_array_equal(gaussian_corrupt(x, CorruptionSpec("gaussian", sigma=0.0)), x)


def test_gaussian_std_monte_carlo():
    x = np.full((1000, 100), 0.5)
    out = gaussian_corrupt(x, CorruptionSpec("gaussian", sigma=0.08, seed=1))
    assert abs((out - x).std() - 0.08) <= 0.05 * 0.08


def test_gaussian_clips_images_only():
    x = np.full((200, 4), 0.99)
    spec = CorruptionSpec("gaussian", sigma=0.2, seed=0)
    assert gaussian_corrupt(x, spec).max() > 1.0
    assert gaussian_corrupt(x, spec, image_shape=(2, 2, 1)).max() <= 1.0


def test_elastic_zero_identity():
    x = np.random.default_rng(0).uniform(size=(3, 16))
    spec = CorruptionSpec("elastic", intensity=0.0, smoothing=5.0, offset=0.0)
    np.testing.assert_array_equal(elastic_transform(x, spec, (4, 4, 1)), x)


def test_elastic_needs_image():
    with pytest.raises(InputError):
        elastic_transform(np.zeros((1, 16)), et1(), None)


@pytest.mark.parametrize("edge", [8, 32, 224])
@pytest.mark.parametrize("preset", [et1, et2])
def test_elastic_displacement_bound(edge, preset):
    spec = preset(seed=edge)
    s = edge / REFERENCE_EDGE
    bound = spec.intensity * s * s + spec.offset * s * math.sqrt(2)
    rng = np.random.default_rng(edge)
    for _ in range(5):
        dy, dx = elastic_field((edge, edge), spec, rng)
        assert np.sqrt(dy**2 + dx**2).max() <= bound + 1e-12


def test_elastic_changes_images():
    x = np.random.default_rng(0).uniform(size=(4, 32 * 32))
    out = corrupt(x, et2(seed=1), (32, 32, 1))
    assert out.shape == x.shape and not np.array_equal(out, x)
    assert out.min() >= 0 and out.max() <= 1


# --- PGD -----------------------------------------------------------------------


def test_pgd_zero_epsilon():
    model = init_mlp([4, 3], seed=0)
    x = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal(pgd_attack(model, x, np.zeros(5, int), PgdConfig(epsilon=0.0)), x)


@given(st.floats(0.001, 0.5), st.integers(1, 10), st.integers(0, 100))
@settings(max_examples=20, deadline=None)
def test_pgd_stays_in_ball(eps, steps, seed):
    model = init_mlp([4, 6, 3], seed=seed)
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    adv = pgd_attack(model, x, y, PgdConfig(epsilon=eps, steps=steps))
    assert np.all(np.abs(adv - x) <= eps + 1e-12)


def test_pgd_linear_closed_form():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(2, 6))
    model = MLP((6, 2), (w,), (rng.normal(size=2),))
    x = rng.normal(size=(8, 6))
    y = rng.integers(0, 2, 8)
    cfg = PgdConfig()
    assert cfg.alpha == pytest.approx(2.5 * cfg.epsilon / cfg.steps)
    adv = pgd_attack(model, x, y, cfg)
    other = 1 - y
    worst = x + cfg.epsilon * np.sign(w[other] - w[y])
    assert softmax_ce(forward_logits(model, adv), y) == pytest.approx(softmax_ce(forward_logits(model, worst), y), abs=1e-6)
