import json

import numpy as np
import pytest
from scipy import stats

from conftest import make_scene
from oracles import central_difference
from scaleguide.errors import ShapeMismatch
from scaleguide.predictor import (
    PARAM_NAMES,
    FeatureConfig,
    PatchGrid,
    PredictorParams,
    TrainConfig,
    featurize,
    forward,
    loss_and_gradient,
    sampling_weights,
    train,
)
from scaleguide.scale_math import (
    ScaleConfig,
    ScaleDistribution,
    ground_truth_distribution,
    kl_divergence,
)

CFG = ScaleConfig()


def random_params(rng, f=16, d1=12, d2=10, spread=0.5):
    p = PredictorParams.init(f, d1, d2, CFG, rng, init_range=spread)
    p.b1[:] = rng.uniform(-0.1, 0.1, d1)
    p.b2[:] = rng.uniform(-0.1, 0.1, d2)
    p.b3[:] = rng.uniform(-0.1, 0.1, CFG.n_bins)
    return p


def random_target(rng):
    support = rng.choice(CFG.n_bins, size=int(rng.integers(1, 6)), replace=False)
    probs = np.zeros(CFG.n_bins)
    probs[support] = rng.dirichlet(np.ones(len(support)))
    return ScaleDistribution(CFG, probs)


class TestFeaturize:
    def test_empty_scene(self):
        grid = featurize(make_scene([]))
        assert grid.empty
        assert grid.features.shape == (6, 6, 16)
        assert not grid.features.any()

    def test_occupancy_is_local(self):
        # square viewport, 6x6 cells of 100 px: box covers exactly cell (row 2, col 3)
        grid = featurize(make_scene([(300, 200, 100, 100)], viewport=(600, 600)))
        occ = grid.features[:, :, -1]
        assert occ[2, 3] == 1.0
        occ[2, 3] = 0
        assert not occ.any()
        assert not grid.empty

    def test_doubling_is_identical(self):
        boxes = [(13.3, 40.1, 77.7, 120.2), (200.5, 90.0, 50.25, 61.0), (400.0, 300.0, 120.0, 150.0)]
        a = featurize(make_scene(boxes, viewport=(640, 480)))
        b = featurize(make_scene([tuple(2 * v for v in bx) for bx in boxes], viewport=(1280, 960)))
        assert np.array_equal(a.features, b.features)

    def test_letterbox_pads_with_zero(self):
        # wide viewport: top and bottom canvas rows are padding
        grid = featurize(make_scene([(0, 0, 640, 160)], viewport=(640, 160)))
        assert not grid.features[0, :, -1].any()
        assert not grid.features[-1, :, -1].any()

    def test_features_track_object_size(self):
        small = featurize(make_scene([(x, y, 40, 40) for x in range(0, 640, 40) for y in range(0, 480, 40)]))
        large = featurize(make_scene([(x, y, 160, 160) for x in range(0, 640, 160) for y in range(0, 480, 160)]))
        # denser outlines put more pixels near an edge at small radii
        assert small.features[2:4, 2:4, 0].mean() > large.features[2:4, 2:4, 0].mean()

    def test_feature_count(self):
        fc = FeatureConfig(n_features=8)
        assert featurize(make_scene([(10, 10, 50, 50)]), fc).features.shape == (6, 6, 8)


class TestForward:
    def test_zero_params_uniform(self, rng):
        grid = PatchGrid(rng.random((6, 6, 16)))
        q = forward(grid, PredictorParams.zeros())
        assert np.allclose(q.probs, 1 / 65, atol=1e-15)

    def test_identical_cells(self, rng):
        params = random_params(rng)
        cell = rng.random(16)
        grid = PatchGrid(np.tile(cell, (6, 6, 1)))
        single = PatchGrid(cell.reshape(1, 1, 16))
        assert np.allclose(forward(grid, params).probs, forward(single, params).probs, atol=1e-15)

    def test_permutation_invariance_bitwise(self, rng):
        params = random_params(rng)
        feats = rng.random((6, 6, 16))
        perm = rng.permutation(36)
        shuffled = feats.reshape(36, 16)[perm].reshape(6, 6, 16)
        assert np.array_equal(forward(PatchGrid(feats), params).probs,
                              forward(PatchGrid(shuffled), params).probs)

    def test_positive_and_normalized(self, rng):
        for _ in range(20):
            params = random_params(rng, spread=2.0)
            q = forward(PatchGrid(rng.random((6, 6, 16))), params)
            assert abs(q.probs.sum() - 1) < 1e-9
            assert np.all(q.probs > 0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            forward(PatchGrid(rng.random((6, 6, 8))), PredictorParams.zeros())


class TestLoss:
    def test_zero_everything(self):
        loss, grads = loss_and_gradient(PatchGrid(np.zeros((6, 6, 16))), ScaleDistribution.uniform(CFG),
                                        PredictorParams.zeros())
        assert loss == pytest.approx(0.0, abs=1e-14)
        assert np.allclose(grads["b3"], 0.0, atol=1e-15)

    def test_target_equals_prediction(self, rng):
        params = random_params(rng)
        grid = PatchGrid(rng.random((6, 6, 16)))
        q = forward(grid, params)
        loss, grads = loss_and_gradient(grid, q, params)
        assert loss == pytest.approx(0.0, abs=1e-12)
        for k in PARAM_NAMES:
            assert np.allclose(grads[k], 0.0, atol=1e-12)

    def test_loss_is_kl(self, rng):
        params = random_params(rng)
        grid = PatchGrid(rng.random((6, 6, 16)))
        target = random_target(rng)
        loss, _ = loss_and_gradient(grid, target, params)
        assert loss == pytest.approx(kl_divergence(forward(grid, params), target), abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = random_params(rng)
        grid = PatchGrid(rng.random((4, 4, 16)))
        target = random_target(rng)
        _, grads = loss_and_gradient(grid, target, params)
        arrays = params.arrays()
        for _ in range(100):
            name = PARAM_NAMES[int(rng.integers(len(PARAM_NAMES)))]
            idx = tuple(int(rng.integers(n)) for n in arrays[name].shape)
            num = central_difference(lambda: loss_and_gradient(grid, target, params)[0], arrays[name], idx)
            ana = grads[name][idx]
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6), (name, idx, ana, num)


class TestSampling:
    def test_weights(self):
        assert np.allclose(sampling_weights([1, 9], "per_annotation"), [0.1, 0.9])
        assert np.allclose(sampling_weights([1, 9], "per_image"), [0.5, 0.5])

    @pytest.mark.parametrize("mode, expected", [("per_annotation", [0.1, 0.9]), ("per_image", [0.5, 0.5])])
    def test_draw_frequencies(self, mode, expected):
        rng = np.random.default_rng(7)
        draws = rng.choice(2, size=20000, p=sampling_weights([1, 9], mode))
        observed = np.bincount(draws, minlength=2)
        _, pval = stats.chisquare(observed, np.array(expected) * len(draws))
        assert pval > 1e-3

    def test_train_uses_weights(self, monkeypatch):
        calls = []
        import scaleguide.predictor as pred

        real = pred.loss_and_gradient

        def spy(grid, target, params):
            calls.append(grid.features[0, 0, 0])
            return real(grid, target, params)

        monkeypatch.setattr(pred, "loss_and_gradient", spy)
        one = make_scene([(0, 0, 100, 100)])
        nine = make_scene([(x * 60, 0, 50, 50) for x in range(9)])
        t1 = ground_truth_distribution([100], CFG)
        t9 = ground_truth_distribution([50] * 9, CFG)
        g1, g9 = featurize(one), featurize(nine)
        assert g1.features[0, 0, 0] != g9.features[0, 0, 0]
        train([(one, t1), (nine, t9)], TrainConfig(epochs=1000, batch_size=10, sampling_mode="per_annotation",
                                                   learning_rate=1e-6, hidden=(4, 4)))
        frac_nine = np.mean(np.array(calls) == g9.features[0, 0, 0])
        assert frac_nine == pytest.approx(0.9, abs=0.01)


class TestTrain:
    def _data(self):
        scene = make_scene([(x * 64, y * 64, 60, 60) for x in range(10) for y in range(7)])
        return [(scene, ground_truth_distribution([a.size for a in scene.annotations], CFG))]

    def test_single_example_descends(self):
        res = train(self._data(), TrainConfig(learning_rate=0.1, epochs=30, batch_size=1))
        assert res.losses[-1] < res.losses[0]

    def test_deterministic(self):
        cfg = TrainConfig(learning_rate=0.1, epochs=5, batch_size=2, rng_seed=99)
        a = train(self._data(), cfg)
        b = train(self._data(), cfg)
        assert a.losses == b.losses
        assert json.dumps(a.params.to_dict()) == json.dumps(b.params.to_dict())

    def test_loss_csv(self):
        res = train(self._data(), TrainConfig(epochs=3, batch_size=1))
        lines = res.loss_csv().splitlines()
        assert lines[0] == "epoch,mean_loss" and len(lines) == 4

    def test_empty(self):
        with pytest.raises(ValueError):
            train([], TrainConfig())


def test_params_json_round_trip(rng, tmp_path):
    p = random_params(rng)
    path = tmp_path / "params.json"
    p.save(path)
    doc = json.loads(path.read_text())
    assert doc["version"] == 1
    assert doc["tensors"]["w1"]["shape"] == [16, 12]
    q = PredictorParams.load(path)
    for k in PARAM_NAMES:
        assert np.array_equal(getattr(p, k), getattr(q, k))


def test_init_ranges():
    p = PredictorParams.init(rng=np.random.default_rng(0))
    assert p.w1.shape == (16, 64) and p.w2.shape == (64, 64) and p.w3.shape == (64, 65)
    assert np.abs(p.w1).max() <= 0.05 and not p.b1.any()
