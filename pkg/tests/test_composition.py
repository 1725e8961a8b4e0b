import numpy as np
import pytest

from _support import blob_world
from forgetvec.composition import (
    ClassVectorBank,
    CompatibilityError,
    argmin_lexicographic,
    build_bank,
    compose,
    grid_axis,
    grid_sweep_2d,
    optimize_weights,
    weight_config,
    weight_objective,
)
from forgetvec.datasets import ClassWise, RandomSubset, empty_split, split_forget_retain
from forgetvec.evaluation import evaluate
from forgetvec.forget_vector import ForgetVector
from forgetvec.nn import ConfigError, InputError, ShapeError, checksum, init_mlp


@pytest.fixture(scope="module")
def world():
    train, test, dims, cfg, model = blob_world(0)
    return train, test, model, build_bank(model, train, seed=0)


def toy_bank(model, rows):
    return ClassVectorBank(tuple(ForgetVector(np.asarray(r, float)) for r in rows), checksum(model))


def test_compose_identities():
    model = init_mlp([3, 2])
    bank = toy_bank(model, [[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]])
    np.testing.assert_array_equal(compose(bank, [1.0, 0.0]).delta, bank.vectors[0].delta)
    np.testing.assert_array_equal(compose(bank, [0.0, 0.0]).delta, 0.0)
    mean = compose(bank, [0.5, 0.5]).delta
    for i in range(3):
        assert mean[i] == pytest.approx((bank.vectors[0].delta[i] + bank.vectors[1].delta[i]) / 2)


def test_compose_checks_model():
    bank = toy_bank(init_mlp([3, 2], seed=0), [[0.0, 0.0, 0.0]])
    with pytest.raises(CompatibilityError):
        compose(bank, [1.0], init_mlp([3, 2], seed=1))
    with pytest.raises(ShapeError):
        compose(bank, [1.0, 2.0])


def test_bank_validation():
    with pytest.raises(ShapeError):
        ClassVectorBank((ForgetVector(np.zeros(2)), ForgetVector(np.zeros(3))), "x")
    with pytest.raises(InputError):
        ClassVectorBank((), "x")


def test_zero_bank_gradient_and_optimum():
    train, _, _, _, model = blob_world(0)
    bank = toy_bank(model, np.zeros((5, train.dim)))
    rng = np.random.default_rng(0)
    fb = (train.features[:8], train.labels[:8])
    rb = (train.features[8:16], train.labels[8:16])
    cfg = weight_config()
    w = rng.normal(size=5)
    _, g = weight_objective(model, bank.matrix(), w, fb, rb, cfg)
    np.testing.assert_allclose(g, 2 * cfg.lambda2 * w, atol=1e-15)
    split = split_forget_retain(train, RandomSubset(0.1, seed=0))
    w_opt, _, _ = optimize_weights(model, bank, train, split, weight_config(max_iterations=3))
    np.testing.assert_array_equal(w_opt, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_weight_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    model = init_mlp([4, 6, 3], seed=seed)
    basis = rng.normal(size=(3, 4))
    fb = (rng.normal(size=(5, 4)), rng.integers(0, 3, 5))
    rb = (rng.normal(size=(5, 4)), rng.integers(0, 3, 5))
    w = rng.normal(scale=0.3, size=3)
    cfg = weight_config()
    _, g = weight_objective(model, basis, w, fb, rb, cfg)
    fd = np.array([
        (weight_objective(model, basis, w + 1e-5 * e, fb, rb, cfg)[0] - weight_objective(model, basis, w - 1e-5 * e, fb, rb, cfg)[0]) / 2e-5
        for e in np.eye(3)
    ])
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-9)


def test_weight_defaults():
    cfg = weight_config()
    assert (cfg.lambda1, cfg.lambda2, cfg.lr0) == (1.0, 1.0, 0.01)


def test_optimize_weights_on_random_forgetting(world):
    train, test, model, bank = world
    split = split_forget_retain(train, RandomSubset(0.1, seed=0, classes=(1, 2)))
    w, fv, trace = optimize_weights(model, bank, train, split)
    assert w.shape == (5,) and fv.provenance == "composed"
    np.testing.assert_allclose(fv.delta, bank.matrix().T @ w, atol=1e-12)
    report = evaluate(model, train, test, split, fv=fv, trainable_params=len(bank))
    assert report.param_count == 5


def test_optimize_weights_empty_forget(world):
    train, _, model, bank = world
    with pytest.raises(InputError):
        optimize_weights(model, bank, train, empty_split(train))


def test_grid_axis_default():
    np.testing.assert_array_equal(grid_axis(), [-0.2, -0.15, -0.1, -0.05, 0.0, 0.05, 0.1, 0.15, 0.2])
    with pytest.raises(ConfigError):
        grid_axis(0.2, -0.2)


def test_argmin_lexicographic_ties():
    axis = np.array([-1.0, 0.0, 1.0])
    table = np.array([[3.0, 1.0, 1.0], [1.0, 2.0, 2.0], [5.0, 5.0, 5.0]])
    assert argmin_lexicographic(axis, table) == (-1.0, 0.0)


def test_grid_sweep(world):
    train, test, model, bank = world
    split = split_forget_retain(train, RandomSubset(0.1, seed=0, classes=(1, 2)))
    origin = evaluate(model, train, test, split)
    ref_ua, ref_ra = 0.0, 100.0
    sweep = grid_sweep_2d(model, bank, (1, 2), train, split, ref_ua, ref_ra)
    assert sweep.avg_gap.shape == (9, 9) and len(sweep.rows()) == 81
    i = j = 4
    assert sweep.ua_gap[i, j] == abs(origin.ua - ref_ua) and sweep.ra_gap[i, j] == abs(origin.ra - ref_ra)
    cells = [(r["avg_gap"], r["w_a"], r["w_b"]) for r in sweep.rows()]
    assert min(cells)[1:] == sweep.best


def test_grid_sweep_needs_matching_split(world):
    train, _, model, bank = world
    with pytest.raises(ConfigError):
        grid_sweep_2d(model, bank, (1, 2), train, split_forget_retain(train, ClassWise(1)), 0.0, 100.0)
    with pytest.raises(ConfigError):
        grid_sweep_2d(model, bank, (1, 2), train, split_forget_retain(train, RandomSubset(0.1, 0, (1, 2))), 0.0, 100.0, axis=[])
