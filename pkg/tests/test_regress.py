"""Regressor building blocks used by the verification backend."""

import numpy as np
import pytest

from fptoken.regress import NearestNeighborRegressor, RandomizedTreeEnsemble


def grid2d(n):
    side = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(side, side)
    return np.column_stack([xx.ravel(), yy.ravel()])


class TestNearestNeighbor:
    def test_training_point_with_k1_returns_its_target(self):
        x = grid2d(5)
        y = np.arange(len(x), dtype=float)
        model = NearestNeighborRegressor(k=1).fit(x, y)
        assert model.predict(x[7:8])[0] == y[7]

    def test_exact_match_shortcut_beats_neighbor_average(self):
        x = grid2d(5)
        y = np.arange(len(x), dtype=float)
        model = NearestNeighborRegressor(k=5).fit(x, y)
        # at a training point the prediction is that target, not a k-blend
        assert model.predict(x[12:13])[0] == pytest.approx(y[12])

    def test_constant_target_recovered_everywhere(self):
        x = grid2d(6)
        y = np.full(len(x), 3.25)
        model = NearestNeighborRegressor(k=5).fit(x, y)
        probe = np.random.default_rng(0).uniform(0, 1, size=(50, 2))
        assert np.allclose(model.predict(probe), 3.25)

    def test_smooth_function_interpolates(self):
        x = grid2d(25)
        y = 2.0 * x[:, 0] + 0.5 * x[:, 1]
        model = NearestNeighborRegressor(k=5).fit(x, y)
        probe = np.random.default_rng(1).uniform(0.1, 0.9, size=(200, 2))
        pred = model.predict(probe)
        truth = 2.0 * probe[:, 0] + 0.5 * probe[:, 1]
        assert np.max(np.abs(pred - truth)) < 0.1

    def test_k_larger_than_dataset_clamps(self):
        x = grid2d(2)
        y = np.arange(4, dtype=float)
        pred = NearestNeighborRegressor(k=50).fit(x, y).predict([[0.5, 0.5]])
        assert pred[0] == pytest.approx(y.mean())

    def test_rejects_empty_fit(self):
        with pytest.raises(ValueError):
            NearestNeighborRegressor(k=3).fit(np.empty((0, 2)), np.empty(0))


class TestRandomizedTrees:
    def test_constant_target(self):
        x = grid2d(8)
        y = np.full(len(x), -1.5)
        model = RandomizedTreeEnsemble(n_trees=10, seed=1).fit(x, y)
        assert np.allclose(model.predict(x), -1.5)

    def test_step_function_learned(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, size=(600, 2))
        y = np.where(x[:, 0] < 0.5, 0.0, 10.0)
        model = RandomizedTreeEnsemble(n_trees=40, min_samples_leaf=4, seed=3).fit(x, y)
        lo = model.predict(np.column_stack([np.full(50, 0.2), np.linspace(0, 1, 50)]))
        hi = model.predict(np.column_stack([np.full(50, 0.8), np.linspace(0, 1, 50)]))
        assert lo.mean() < 1.0 and hi.mean() > 9.0

    def test_seed_reproducibility(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 1, size=(300, 3))
        y = x @ np.array([1.0, -2.0, 0.5])
        probe = rng.uniform(0, 1, size=(40, 3))
        a = RandomizedTreeEnsemble(n_trees=20, seed=9).fit(x, y).predict(probe)
        b = RandomizedTreeEnsemble(n_trees=20, seed=9).fit(x, y).predict(probe)
        assert np.array_equal(a, b)

    def test_classifier_scores_bounded(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(400, 2))
        y = (x[:, 0] > 0).astype(float)
        model = RandomizedTreeEnsemble(n_trees=30, seed=6, classifier=True).fit(x, y)
        scores = model.predict(x)
        assert np.all((scores >= 0.0) & (scores <= 1.0))
        labels = model.predict_label(x)
        assert (labels == y).mean() > 0.9

    def test_rejects_empty_fit(self):
        with pytest.raises(ValueError):
            RandomizedTreeEnsemble(n_trees=5).fit(np.empty((0, 2)), np.empty(0))
