import numpy as np
import pytest
import torch

from risamodal.features import feature_vector, partition_subregions
from risamodal.nn import load_checkpoint, save_checkpoint
from risamodal.predictor import (PredictorModel, PredictorNet, TrainingSample, build_training_set,
                                 corr_min_baseline, diverse_configs, load_training_set,
                                 optimize_configs, predict_error, save_training_set, train_predictor)
from risamodal.ris import ConfigSet


def _linear_samples(n, seed=0, noise=0.01):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, 5))
    w = np.array([0.3, -0.2, 0.1, 0.25, 0.05])
    y = 0.4 + (X - 0.5) @ w * 0.5 + noise * rng.standard_normal(n)
    return [TrainingSample(x, float(np.clip(t, 0, 1)), {"i": i}) for i, (x, t) in enumerate(zip(X, y))]


def test_training_sample_validation():
    with pytest.raises(ValueError):
        TrainingSample(np.array([np.nan]), 0.1)
    with pytest.raises(ValueError):
        TrainingSample(np.array([0.1]), 1.5)


def test_train_on_linear_labels():
    smp = _linear_samples(300)
    model, m = train_predictor(smp, epochs=300, lr=3e-3, seed=0)
    assert m["best_val_mse"] <= 2 * 0.01**2
    assert len(m["train_mse"]) == 301 and m["n_train"] + m["n_val"] == 300
    assert np.all(model.predict(np.stack([s.features for s in smp[:5]])) >= 0)
    with pytest.raises(ValueError):
        train_predictor(smp[:5])


def test_model_params_roundtrip(tmp_path):
    model = PredictorModel(PredictorNet(4, (8, 8), seed=1), np.zeros(4), np.ones(4), 0.2, 0.1)
    save_checkpoint(model.to_params(), tmp_path / "p.ckpt")
    back = PredictorModel.from_params(load_checkpoint(tmp_path / "p.ckpt"))
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(back.predict(x), model.predict(x))


def test_prediction_is_flat_outside_training_range(tmp_path):
    lo, hi = -np.ones(4), np.ones(4)
    model = PredictorModel(PredictorNet(4, (8, 8), seed=1), np.zeros(4), np.ones(4), 0.2, 0.1, lo, hi)
    x = np.array([[0.5, -0.3, 0.2, 0.9]])
    far = x.copy()
    far[0, 3] = 40.0
    edge = x.copy()
    edge[0, 3] = 1.0
    np.testing.assert_array_equal(model.predict(far), model.predict(edge))
    save_checkpoint(model.to_params(), tmp_path / "p.ckpt")
    back = PredictorModel.from_params(load_checkpoint(tmp_path / "p.ckpt"))
    np.testing.assert_array_equal(back.feat_hi, hi)
    np.testing.assert_array_equal(back.predict(far), model.predict(far))


def test_training_set_roundtrip(tmp_path):
    smp = _linear_samples(4)
    smp[0].label = np.float64(smp[0].label)
    save_training_set(smp, tmp_path / "t.csv")
    back = load_training_set(tmp_path / "t.csv")
    assert [b.meta for b in back] == [s.meta for s in smp]
    np.testing.assert_array_equal(back[2].features, smp[2].features)
    assert back[0].label == smp[0].label


def test_diverse_configs_extremes():
    cfg, p = diverse_configs(6, 10, 2, 0)
    assert cfg.is_discrete() and 0 <= p <= 1 and cfg.phases.shape == (6, 10)


class _FakePipe:
    bits = 2

    def __init__(self, H, grid_dims):
        self._H, self._dims = H, grid_dims
        self.seeds = []

    def with_setting(self, offset, m_side):
        return self

    def channel(self):
        return self._H

    def partition(self, blocks):
        return partition_subregions(self._dims, blocks)

    def evaluate(self, configs, objects, seed=None):
        self.seeds.append(seed)
        if len(self.seeds) % 4 == 0:
            raise RuntimeError("boom")
        return [0.1, 0.2]


def test_build_training_set_with_stub(rng):
    H = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
    pipe = _FakePipe(H, (2, 2, 2))
    smp = build_training_set(10, [None], pipe, [2, 3], seed=0,
                             partition_blocks=1, corrmin_fraction=0.5, corrmin_steps=3)
    assert len(smp) == 8 and len(set(pipe.seeds)) == 1
    for s in smp:
        assert s.label == pytest.approx(0.15) and len(s.features) == 2
        assert s.meta["K"] in (2, 3) and s.meta["source"].startswith(("diverse", "corrmin"))
    pipe = _FakePipe(H, (2, 2, 2))
    build_training_set(3, [None], pipe, 2, seed=0, partition_blocks=1, common_noise=False)
    assert len(set(pipe.seeds)) == 3


def _tiny_problem(rng):
    part = partition_subregions((2, 2, 4), 2)
    H = rng.standard_normal((6, 16)) + 1j * rng.standard_normal((6, 16))
    torch.manual_seed(0)
    model = PredictorModel(PredictorNet(part.L + 1, (16, 16), seed=3), np.full(part.L + 1, 0.05),
                           np.full(part.L + 1, 0.02), 0.3, 0.1)
    return part, H, model


def test_optimize_configs_trace_monotone(rng):
    part, H, model = _tiny_problem(rng)
    q, trace = optimize_configs(model, H, part, 4, 6, b=2, steps=30, seed=0)
    obj = np.array(trace["objective"])
    assert np.all(np.diff(obj) <= 1e-12)
    assert q.is_discrete() and q.phases.shape == (4, 6)
    assert trace["post_quantization"] == pytest.approx(predict_error(model, q.Q, H, part))
    with pytest.raises(ValueError):
        optimize_configs(model, H[:5], part, 4, 6)


def test_corr_min_lowers_global_correlation(rng):
    part, H, _ = _tiny_problem(rng)
    init = ConfigSet(rng.choice([0.0, np.pi], (4, 6)))
    q, trace = corr_min_baseline(H, 4, 6, 2, steps=40, seed=0, init=init.phases)
    assert trace["objective"][-1] < trace["objective"][0]
    c_cont = feature_vector(np.exp(-1j * trace["continuous_phases"]), H, part)[0]
    assert c_cont == pytest.approx(trace["objective"][-1])
