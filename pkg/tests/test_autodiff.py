import math

import numpy as np
import pytest

from treatnet.autodiff import (
    Adam,
    Dataset,
    TrainConfig,
    backward,
    cross_entropy,
    evaluate,
    logit_gradient,
    loss_and_grads,
    train,
)
from treatnet.errors import ConfigError, DataError, ShapeError, StaleCacheError
from treatnet.graph import ActivationCache, build_reduced_convnet, forward


def tiny(seed=0, dtype=np.float32):
    return build_reduced_convnet(8, 2, (4, 8), dense_units=16, seed=seed, dtype=dtype)


def tiny_batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 8, 8, 3), dtype=np.float32), rng.integers(0, 3, n)


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy(np.eye(3), [0, 1, 2]) == 0.0

    def test_uniform(self):
        assert cross_entropy(np.full((2, 3), 1 / 3), [0, 2]) == pytest.approx(math.log(3))

    def test_hand_value(self):
        assert cross_entropy(np.array([[0.5, 0.25, 0.25]]), [1]) == pytest.approx(math.log(4))

    def test_clamped(self):
        assert cross_entropy(np.array([[1.0, 0.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(ConfigError):
            cross_entropy(np.full((1, 3), 1 / 3), [3])


class TestBackward:
    def test_logit_gradient_zero_at_perfect_prediction(self):
        assert np.all(logit_gradient(np.eye(3), np.array([0, 1, 2])) == 0)

    def test_logit_gradient_rows_sum_to_zero(self):
        p = np.random.default_rng(0).dirichlet(np.ones(3), size=7)
        g = logit_gradient(p, np.array([0, 1, 2, 0, 1, 2, 0]))
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-15)

    def test_finite_differences_small(self):
        """Spot-check a subset of parameters; the full sweep lives in the acceptance suite."""
        m = tiny(seed=3, dtype=np.float64).train()
        x, y = tiny_batch(3, seed=3)
        x = x.astype(np.float64)

        def loss():
            return cross_entropy(forward(m, x, rng=np.random.default_rng(11)), y)

        cache = ActivationCache()
        forward(m, x, cache=cache, rng=np.random.default_rng(11))
        grads = backward(m, cache, y, input_grad=True)
        rng = np.random.default_rng(0)
        for i, name, arr in m.trainable():
            flat = arr.reshape(-1)
            for j in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                old = flat[j]
                flat[j] = old + 1e-5
                lp = loss()
                flat[j] = old - 1e-5
                lm = loss()
                flat[j] = old
                num = (lp - lm) / 2e-5
                ana = grads.params[i][name].reshape(-1)[j]
                assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6)
        # input gradient too
        xf = x.reshape(-1)
        for j in (0, 17, 100):
            old = xf[j]
            xf[j] = old + 1e-5
            lp = loss()
            xf[j] = old - 1e-5
            lm = loss()
            xf[j] = old
            num = (lp - lm) / 2e-5
            ana = grads.input.reshape(-1)[j]
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6)

    def test_cache_consumed_once(self):
        m = tiny()
        x, y = tiny_batch()
        cache = ActivationCache()
        forward(m, x, cache=cache)
        backward(m, cache, y)
        with pytest.raises(StaleCacheError):
            backward(m, cache, y)

    def test_stale_cache_after_update(self):
        m = tiny().train()
        x, y = tiny_batch()
        cache = ActivationCache()
        forward(m, x, cache=cache)
        _, _, grads = loss_and_grads(m, x, y)
        Adam(1e-3).step_model(m, grads)
        with pytest.raises(StaleCacheError):
            backward(m, cache, y)

    def test_cache_from_other_model(self):
        x, y = tiny_batch()
        cache = ActivationCache()
        forward(tiny(), x, cache=cache)
        with pytest.raises(StaleCacheError):
            backward(tiny(), cache, y)

    def test_label_count_mismatch(self):
        m = tiny()
        x, _ = tiny_batch(4)
        cache = ActivationCache()
        forward(m, x, cache=cache)
        with pytest.raises(ShapeError):
            backward(m, cache, np.array([0, 1]))


class TestAdam:
    def test_default_lr(self):
        assert Adam().lr == 1e-4

    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        before = p["w"].copy()
        Adam().step(p, {"w": np.zeros(3)})
        np.testing.assert_array_equal(p["w"], before)

    def test_first_step_is_lr_sized_and_scale_free(self):
        g = np.array([0.5, -3.0, 1e-3, 100.0])
        p1 = {"w": np.zeros(4)}
        p2 = {"w": np.zeros(4)}
        Adam(lr=1e-4).step(p1, {"w": g})
        Adam(lr=1e-4).step(p2, {"w": 2 * g})
        np.testing.assert_allclose(p1["w"], -1e-4 * np.sign(g), rtol=1e-4)
        assert np.abs(p1["w"] - p2["w"]).max() <= 1e-6

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(5)
        p = {"w": w.copy()}
        opt = Adam(lr=0.01)
        m = v = np.zeros(5)
        ref = w.copy()
        for t in range(1, 6):
            g = rng.standard_normal(5)
            opt.step(p, {"w": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-12)
        assert np.all(opt.v["w"] >= 0) and opt.t == 5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Adam().step({"w": np.zeros(3)}, {"w": np.zeros(4)})


def test_loss_non_increasing_first_steps():
    """Full-batch Adam at lr 1e-4 on the tiny model, across seeds."""
    ok = 0
    seeds = range(20)
    for seed in seeds:
        m = tiny(seed).train()
        x, y = tiny_batch(8, seed)
        opt = Adam(1e-4)
        losses = []
        for _ in range(6):
            loss, _, grads = loss_and_grads(m, x, y, rng=np.random.default_rng(0))
            losses.append(loss)
            opt.step_model(m, grads)
        ok += all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert ok >= 0.95 * len(seeds)


def _toy_data(n, seed):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    images = rng.random((n, 8, 8, 3), dtype=np.float32) * 0.2
    for i, c in enumerate(labels):
        images[i, :, :, c] += 0.8
    return Dataset(images, labels)


def test_train_report_and_determinism():
    tr, va = _toy_data(30, 0), _toy_data(9, 1)
    cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-3, augment=False, seed=5)
    a, b = tiny(1), tiny(1)
    ra = train(a, tr, va, cfg)
    rb = train(b, tr, va, cfg)
    assert len(ra.epochs) == 3
    assert ra.to_csv() == rb.to_csv()
    assert ra.to_csv().splitlines()[0] == "epoch,train_loss,train_acc,val_loss,val_acc"
    for ga, gb in zip(a.params, b.params):
        for k in ga:
            assert ga[k].tobytes() == gb[k].tobytes()


def test_train_lr_zero_keeps_trainable_params():
    m = tiny(2)
    before = [arr.copy() for _, _, arr in m.trainable()]
    train(m, _toy_data(12, 0), _toy_data(6, 1), TrainConfig(epochs=2, batch_size=4, lr=0.0, augment=False))
    for b, (_, _, arr) in zip(before, m.trainable()):
        assert b.tobytes() == arr.tobytes()


def test_train_rejects_empty_split():
    with pytest.raises(DataError):
        train(tiny(), _toy_data(6, 0), Dataset(np.zeros((0, 8, 8, 3)), np.zeros(0, int)),
              TrainConfig(epochs=1))


def test_evaluate_confusion():
    m = tiny(0)
    data = _toy_data(21, 3)
    res = evaluate(m, data)
    assert res.confusion.sum() == 21
    np.testing.assert_array_equal(res.confusion.sum(axis=1), np.bincount(data.labels, minlength=3))
    assert res.accuracy == np.trace(res.confusion) / 21
    assert np.all(res.confusion >= 0)


def test_evaluate_tie_breaks_low():
    data = _toy_data(3, 0)
    res = evaluate(None, data, predict_fn=lambda x: np.full((len(x), 3), 1 / 3))
    np.testing.assert_array_equal(res.confusion[:, 0], [1, 1, 1])


def test_evaluate_empty():
    with pytest.raises(DataError):
        evaluate(tiny(), Dataset(np.zeros((0, 8, 8, 3)), np.zeros(0, int)))
