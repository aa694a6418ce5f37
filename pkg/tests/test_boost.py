"""Tests for block labels and the AdaBoost stump classifier."""

import math

import numpy as np
import pytest
from sklearn.base import clone

from myoseg.exceptions import DataError, TrainingError
from myoseg.services.boost import (
    OPEN_THRESHOLD,
    StrongClassifier,
    Stump,
    StumpBoostClassifier,
    TrainingSet,
    blocks_to_mask,
    derive_block_labels,
    erode_labels,
    predict_blocks,
    train_adaboost,
)
from myoseg.services.imgio import LabelMask
from myoseg.services.preproc import BlockGrid


def _brute_force_stump(X, y, w):
    """Exhaustive stump search with the same tie order as training."""
    best = None
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        thresholds = [-OPEN_THRESHOLD] + list(0.5 * (values[:-1] + values[1:])) + [OPEN_THRESHOLD]
        for thr in thresholds:
            for rank, pol in enumerate((1, -1)):
                pred = np.where(X[:, f] > thr, pol, -pol)
                err = round(float(w[pred != y].sum()), 12)
                key = (err, f, thr, rank)
                if best is None or key < best[0]:
                    best = (key, Stump(f, float(thr), pol))
    return best[1], best[0][0]


def _random_set(rng, n=40, d=54):
    y = np.where(rng.random(n) < 0.5, -1, 1)
    y[:2] = (-1, 1)
    return TrainingSet(rng.random((n, d)), y)


class TestErosion:
    """Test per-label erosion."""

    def test_radius_zero_is_identity(self, rng):
        mask = LabelMask(rng.integers(0, 4, size=(20, 20)))
        assert np.array_equal(erode_labels(mask, 0).labels, mask.labels)

    def test_square_erodes_to_center(self):
        labels = np.zeros((7, 7), dtype=np.int32)
        labels[2:5, 2:5] = 3
        eroded = erode_labels(LabelMask(labels), 1).labels
        expected = np.zeros_like(labels)
        expected[3, 3] = 3
        assert np.array_equal(eroded, expected)

    def test_labels_never_grow(self, rng):
        labels = np.kron(rng.integers(0, 4, size=(6, 6)), np.ones((5, 5), dtype=np.int64))
        mask = LabelMask(labels)
        eroded = erode_labels(mask, 2)
        for k in mask.label_ids:
            assert np.all(mask.labels[eroded.labels == k] == k)

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            erode_labels(LabelMask(np.zeros((4, 4), dtype=np.int32)), -1)


class TestBlockLabels:
    """Test majority block labels and painting."""

    @pytest.mark.parametrize("count,expected", [(256, 1), (128, -1), (200, 1), (0, -1)])
    def test_majority_rule(self, count, expected):
        labels = np.zeros(256, dtype=np.int32)
        labels[:count] = 2
        mask = LabelMask(labels.reshape(16, 16))
        assert derive_block_labels(mask, BlockGrid(1, 1)).item() == expected

    def test_all_positive_fills_mask(self):
        mask = blocks_to_mask(np.ones((16, 16)), BlockGrid(16, 16), (256, 256))
        assert mask.foreground.all()

    def test_single_block_footprint(self):
        labels = -np.ones((3, 3))
        labels[0, 0] = 1
        mask = blocks_to_mask(labels, BlockGrid(3, 3), (50, 50))
        expected = np.zeros((50, 50), dtype=bool)
        expected[:16, :16] = True
        assert np.array_equal(mask.foreground, expected)

    def test_round_trip(self, rng):
        grid = BlockGrid(4, 5)
        labels = np.where(rng.random((4, 5)) < 0.5, -1, 1)
        assert np.array_equal(derive_block_labels(blocks_to_mask(labels, grid, (85, 70)), grid), labels)


class TestTraining:
    """Test discrete AdaBoost over stumps."""

    def test_separable_data_needs_one_round(self, rng):
        X = rng.random((30, 54))
        y = np.where(np.arange(30) < 15, -1, 1)
        X[:15, 0] = -rng.random(15) - 0.1
        X[15:, 0] = 1.1 + rng.random(15)
        clf = train_adaboost(TrainingSet(X, y), 500)
        assert len(clf.rounds) == 1
        assert clf.rounds[0][0].feature_index == 0
        assert clf.history[0].train_err == 0.0
        assert np.array_equal(clf.predict(X), y)

    def test_first_round_matches_brute_force(self, rng):
        for _ in range(5):
            data = _random_set(rng)
            stump, err = _brute_force_stump(data.X, data.y, np.full(len(data), 1 / len(data)))
            clf = train_adaboost(data, 1)
            chosen = clf.rounds[0][0]
            assert (chosen.feature_index, chosen.polarity) == (stump.feature_index, stump.polarity)
            assert chosen.threshold == pytest.approx(stump.threshold, abs=1e-12)
            assert clf.history[0].eps == pytest.approx(err, abs=1e-12)

    def test_constant_stump_ignores_range(self, tmp_path):
        data = TrainingSet(np.array([[0.0], [1.0], [2.0]]), np.array([1, -1, 1]))
        clf = train_adaboost(data, 1)
        stump = clf.rounds[0][0]
        assert (stump.threshold, stump.polarity) == (-OPEN_THRESHOLD, 1)
        far = np.array([[-1e300], [-5.0], [1e300]])
        assert np.array_equal(stump.predict(far), [1.0, 1.0, 1.0])
        clf.save(tmp_path / "model.json")
        loaded = StrongClassifier.load(tmp_path / "model.json")
        assert loaded.rounds[0][0].threshold == -OPEN_THRESHOLD

    def test_round_bookkeeping(self, rng):
        data = _random_set(rng, n=120, d=10)
        clf = train_adaboost(data, 60)
        eps = np.array([r.eps for r in clf.history])
        loss = np.array([r.exp_loss for r in clf.history])
        assert np.all(eps < 0.5)
        assert np.all(np.diff(loss) <= 1e-12)
        assert all(alpha > 0 and math.isfinite(alpha) for _, alpha in clf.rounds)
        bound = np.prod(2 * np.sqrt(eps * (1 - eps)))
        assert loss[-1] <= bound * (1 + 1e-9)
        score = clf.decision_function(data.X)
        assert np.mean(np.exp(-data.y * score)) == pytest.approx(loss[-1], rel=1e-9)

    def test_weights_stay_a_distribution(self, rng):
        data = _random_set(rng, n=80, d=6)
        clf = train_adaboost(data, 25)
        score = np.zeros(len(data))
        for stump, alpha in clf.rounds:
            score += alpha * stump.predict(data.X)
            w = np.exp(-data.y * score)
            w /= w.sum()
            assert w.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(w >= 0)

    def test_flipped_labels_negate_scores(self, rng):
        data = _random_set(rng, n=60, d=8)
        flipped = TrainingSet(data.X, -data.y)
        a = train_adaboost(data, 12).decision_function(data.X)
        b = train_adaboost(flipped, 12).decision_function(data.X)
        assert np.allclose(a, -b, atol=1e-9)

    def test_deterministic(self, rng):
        data = _random_set(rng, n=50, d=12)
        first, second = train_adaboost(data, 20), train_adaboost(data, 20)
        assert first.rounds == second.rounds

    def test_single_class_rejected(self, rng):
        with pytest.raises(TrainingError):
            train_adaboost(TrainingSet(rng.random((10, 3)), np.ones(10)), 5)

    def test_empty_set_rejected(self):
        with pytest.raises(TrainingError):
            train_adaboost(TrainingSet(np.zeros((0, 54)), np.zeros(0)), 5)
        with pytest.raises(TrainingError):
            TrainingSet.concatenate([])

    def test_non_finite_features_rejected(self):
        with pytest.raises(DataError):
            TrainingSet(np.array([[np.nan], [1.0]]), np.array([1, -1]))


class TestPrediction:
    """Test scoring and model files."""

    def test_single_stump(self):
        clf = StrongClassifier(rounds=((Stump(0, 0.5, 1), 0.7),), T=1)
        x = np.zeros((1, 1, 54))
        x[0, 0, 0] = 1.0
        score, label = predict_blocks(clf, x)
        assert score[0, 0] == pytest.approx(0.7)
        assert label[0, 0] == 1

    def test_zero_score_is_negative(self):
        clf = StrongClassifier(rounds=((Stump(3, 0.5, 1), 0.4), (Stump(3, 0.5, -1), 0.4)), T=2)
        score, label = predict_blocks(clf, np.ones((2, 2, 54)))
        assert np.all(score == 0.0)
        assert np.all(label == -1)

    def test_wrong_descriptor_length(self):
        clf = StrongClassifier(rounds=((Stump(0, 0.5, 1), 0.7),), T=1)
        with pytest.raises(DataError):
            predict_blocks(clf, np.zeros((2, 2, 53)))

    def test_model_file_round_trip(self, tmp_path, rng):
        clf = train_adaboost(_random_set(rng), 8)
        clf.save(tmp_path / "model.json")
        loaded = StrongClassifier.load(tmp_path / "model.json")
        assert loaded.rounds == clf.rounds
        assert (loaded.T, loaded.n_features) == (8, 54)

    def test_missing_model_file(self, tmp_path):
        with pytest.raises(DataError):
            StrongClassifier.load(tmp_path / "absent.json")

    def test_report_columns(self, rng):
        report = train_adaboost(_random_set(rng), 5).report()
        assert list(report.columns) == ["t", "eps", "alpha", "train_err", "exp_loss"]
        assert report["t"].tolist() == list(range(1, len(report) + 1))


class TestEstimatorFacade:
    """Test the scikit-learn wrapper."""

    def test_fit_predict_score(self, rng):
        X = rng.random((40, 5))
        y = np.where(X[:, 2] > 0.5, 1, -1)
        model = StumpBoostClassifier(n_rounds=10).fit(X, y)
        assert model.score(X, y) == 1.0
        assert model.decision_function(X).shape == (40,)
        assert clone(model).get_params() == {"n_rounds": 10}
