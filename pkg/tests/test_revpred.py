import numpy as np
import pytest
from hypothesis import given, strategies as st

from builders import T0, flat_trace, trace_from
from spottune.market import CATALOG, InsufficientHistoryError, synthetic_trace
from spottune.revpred import (
    ClassBalance,
    DatasetError,
    TrainConfig,
    UntrainableError,
    build_dataset,
    calibrate,
    confusion_metrics,
    engineer_features,
    evaluate,
    feature_matrix,
    inference_max_price,
    label_sample,
    load_model,
    predict,
    save_model,
    train,
    training_max_price,
    trimmed_delta_mean,
)
from spottune.revpred.features import HISTORY_LEN
from spottune.revpred.model import class_weights, encode_history, predict_encoded, training_loss
from spottune.revpred.nn import LogisticNet, SequenceNet, numerical_gradient, weighted_bce


class TestFeatures:
    def test_constant_hour(self):
        f = engineer_features(flat_trace(0.1), T0 + 7200)
        assert f.num_changes_1h == 0
        assert f.avg_price_1h == pytest.approx(f.current_price)

    def test_time_since_change(self):
        tr = trace_from([0.1] * 110 + [0.2] * 11)
        f = engineer_features(tr, T0 + 120 * 60)
        assert f.time_since_last_change == 600
        assert f.num_changes_1h == 1

    def test_saturday(self):
        sat = T0 + 3 * 86400 + 13 * 3600 + 1800  # Saturday 2017-04-29 13:30 UTC
        f = engineer_features(flat_trace(0.1, minutes=5 * 1440), sat)
        assert not f.is_workday and f.hour_of_day == 13

    def test_vectorized_matches_scalar(self):
        tr = synthetic_trace(CATALOG["r4.large"], T0, 6 * 3600, np.random.default_rng(5))
        fm = feature_matrix(tr)
        assert np.all(np.isnan(fm[:60]))
        for i in (60, 61, 200, len(tr) - 1):
            np.testing.assert_allclose(fm[i], engineer_features(tr, tr.times[i]).as_array(), atol=1e-12)

    def test_needs_history(self):
        with pytest.raises(InsufficientHistoryError):
            engineer_features(flat_trace(), T0 + 100)


class TestMaxPrice:
    def test_worked_example(self):
        d = [0, 0, 0.01, 0.01, 0.02, 0.02, 0.03, 0.03, 0.05, 0.10]
        assert 1.00 + trimmed_delta_mean(d) == 1.02

    def test_constant_hour(self):
        assert training_max_price(flat_trace(0.1), T0 + 7200) == 0.1

    def test_equal_deltas(self):
        assert trimmed_delta_mean([0.01] * 59) == pytest.approx(0.01, abs=1e-15)

    def test_too_few(self):
        with pytest.raises(InsufficientHistoryError):
            trimmed_delta_mean([0.1, 0.2])

    @given(st.lists(st.floats(0, 10), min_size=5, max_size=80))
    def test_trimmed_mean_bounded_by_data(self, deltas):
        m = trimmed_delta_mean(deltas)
        assert min(deltas) - 1e-12 <= m <= max(deltas) + 1e-12

    def test_inference_range(self):
        rng = np.random.default_rng(0)
        u = np.array([inference_max_price(0.1, rng) - 0.1 for _ in range(10_000)])
        assert u.min() >= 1e-5 - 1e-15 and u.max() <= 0.2
        assert abs(u.mean() - 0.100005) < 0.005


class TestLabels:
    def test_flat(self):
        assert not label_sample(flat_trace(0.1), T0 + 7200, 0.2)

    def test_spike(self):
        prices = [0.1] * 240
        prices[150] = 0.5
        assert label_sample(trace_from(prices), T0 + 120 * 60, 0.2)

    def test_touching_is_negative(self):
        prices = [0.1] * 240
        prices[150] = 0.2
        assert not label_sample(trace_from(prices), T0 + 120 * 60, 0.2)

    def test_needs_lookahead(self):
        with pytest.raises(InsufficientHistoryError):
            label_sample(flat_trace(0.1, minutes=120), T0 + 100 * 60, 0.2)


class TestDataset:
    def test_constant_untrainable(self):
        samples, bal = build_dataset(flat_trace(0.1, minutes=240))
        assert bal.phi_plus == 0 and not bal.trainable
        with pytest.raises(UntrainableError):
            train(samples, TrainConfig(architecture="logistic", epochs=1))

    def test_spike_matches_oracle(self):
        prices = [0.1] * 400
        prices[250:255] = [0.4] * 5
        tr = trace_from(prices)
        samples, _ = build_dataset(tr)
        for i, t in enumerate(samples.times):
            mp = training_max_price(tr, t)
            assert samples.max_price[i] == pytest.approx(mp, abs=1e-12)
            assert samples.label[i] == label_sample(tr, t, mp)
        assert samples.label.sum() == sum(label_sample(tr, t, training_max_price(tr, t)) for t in samples.times)

    def test_stride_halves(self):
        tr = synthetic_trace(CATALOG["r4.large"], T0, 10 * 3600, np.random.default_rng(2))
        a, _ = build_dataset(tr, 60)
        b, _ = build_dataset(tr, 120)
        assert len(b) == (len(a) + 1) // 2

    def test_history_shape_and_sample(self):
        tr = synthetic_trace(CATALOG["r4.large"], T0, 10 * 3600, np.random.default_rng(2))
        s, _ = build_dataset(tr)
        assert s.history.shape[1:] == (HISTORY_LEN, 6)
        rec = s[0]
        assert rec.max_price >= rec.present.current_price

    def test_too_short(self):
        with pytest.raises(DatasetError):
            build_dataset(flat_trace(0.1, minutes=150))


class TestCalibration:
    def test_worked(self):
        assert calibrate(0.9, ClassBalance(0.1, 0.9)) == pytest.approx(81 / 82, abs=1e-12)

    def test_identity(self):
        p = np.linspace(0, 1, 101)
        np.testing.assert_allclose(calibrate(p, ClassBalance(0.5, 0.5)), p, atol=1e-15)

    def test_fixed_points(self):
        b = ClassBalance(0.2, 0.8)
        assert calibrate(0.0, b) == 0.0 and calibrate(1.0, b) == 1.0

    @given(st.floats(0.01, 0.99))
    def test_monotone(self, phi):
        p = np.linspace(0, 1, 500)
        out = calibrate(p, ClassBalance(phi, 1 - phi))
        assert np.all(np.diff(out) >= 0)


def _toy_samples(n=400, seed=0):
    """Present-price-above-threshold labels on a random corpus."""
    from spottune.revpred.features import SampleSet

    rng = np.random.default_rng(seed)
    hist = rng.uniform(0, 1, (n, HISTORY_LEN, 6))
    present = rng.uniform(0, 1, (n, 6))
    max_price = present[:, 0] + 0.1
    label = present[:, 0] + 0.3 * present[:, 2] > 0.7
    return SampleSet("toy", 1.0, np.arange(n), hist, present, max_price, label)


class TestTraining:
    def test_separable_logistic(self):
        s = _toy_samples()
        m = train(s, TrainConfig(architecture="logistic", epochs=60, learning_rate=0.05))
        assert evaluate(m, s)["accuracy"] >= 0.95

    def test_deterministic(self):
        s = _toy_samples(120)
        cfg = TrainConfig(architecture="sequence", epochs=1, hidden=4, lstm_layers=1, dense=4, dense_layers=1)
        a, b = train(s, cfg), train(s, cfg)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_balanced_weights_are_plain_bce(self):
        y = np.array([True, False, True, False])
        w = class_weights(y, ClassBalance(0.5, 0.5))
        z = np.array([0.3, -1.0, 2.0, 0.1])
        plain = np.mean(np.logaddexp(0, z) - y * z)
        assert weighted_bce(z, y.astype(float), w)[0] == pytest.approx(plain, abs=1e-15)

    def test_save_load(self, tmp_path):
        s = _toy_samples(100)
        m = train(s, TrainConfig(architecture="sequence", epochs=1, hidden=4, lstm_layers=2, dense=4))
        save_model(m, tmp_path / "m.npz")
        m2 = load_model(tmp_path / "m.npz")
        assert training_loss(m, s) == training_loss(m2, s)

    @pytest.mark.parametrize("arch", ["sequence", "logistic"])
    def test_encoded_prediction_matches(self, arch):
        s = _toy_samples(100)
        m = train(s, TrainConfig(architecture=arch, epochs=1, hidden=4, lstm_layers=2, dense=4))
        enc = encode_history(m, s.history[3])
        direct = [predict(m, s.history[3], s.present[3], mp) for mp in (0.2, 0.5)]
        np.testing.assert_allclose(predict_encoded(m, enc, s.present[3], [0.2, 0.5]), direct, atol=1e-12)


class TestGradients:
    def _check(self, net, inputs, y, w, seed=0):
        params = net.init(np.random.default_rng(seed))
        z, cache = net.forward(params, inputs)
        _, dz = weighted_bce(z, y, w)
        analytic = net.backward(params, cache, dz)
        numeric = numerical_gradient(lambda p: weighted_bce(net.forward(p, inputs)[0], y, w)[0], params)
        for k in params:
            a, n = analytic[k], numeric[k]
            err = np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n)))
            assert err < 1e-4, k

    def test_sequence(self):
        rng = np.random.default_rng(1)
        net = SequenceNet(3, 4, hidden=3, lstm_layers=2, dense=3, dense_layers=2)
        inputs = (rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 4)))
        self._check(net, inputs, rng.integers(0, 2, 5).astype(float), rng.uniform(0.2, 1, 5))

    def test_logistic(self):
        rng = np.random.default_rng(2)
        net = LogisticNet(6)
        self._check(net, (rng.normal(size=(8, 6)),), rng.integers(0, 2, 8).astype(float), np.ones(8))


class TestMetrics:
    def test_perfect(self):
        y = np.array([1, 0, 1, 0], bool)
        m = confusion_metrics(y, y)
        assert m["accuracy"] == 1.0 and m["f1"] == 1.0

    def test_all_negative(self):
        y = np.array([True] * 10 + [False] * 90)
        m = confusion_metrics(y, np.zeros(100, bool))
        assert m["accuracy"] == pytest.approx(0.9) and m["f1"] == 0.0

    def test_random(self):
        rng = np.random.default_rng(0)
        y = np.arange(10_000) % 2 == 0
        m = confusion_metrics(y, rng.random(10_000) < 0.5)
        assert abs(m["accuracy"] - 0.5) < 0.02

    def test_empty(self):
        with pytest.raises(ValueError):
            confusion_metrics([], [])
