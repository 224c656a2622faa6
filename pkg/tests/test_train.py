import json
import zipfile

import numpy as np
import pytest

from rcl.data import Dataset, class_centers, gen_gaussian_mixture
from rcl.losses import LossConfig, LossVariant
from rcl.model import predict
from rcl.train import (
    CompressionConfig,
    TrainConfig,
    TrainHistory,
    TrainingDiverged,
    fit,
    initial_state,
    load_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def toy():
    centers = class_centers(3, 2, 4.0, np.random.default_rng(0))
    train_set = gen_gaussian_mixture([40, 12, 6], 2, 4.0, 0.6, seed=1, centers=centers)
    val_set = gen_gaussian_mixture([10, 10, 10], 2, 4.0, 0.6, seed=2, centers=centers)
    return train_set, val_set


def small_config(**kw):
    base = dict(epochs=6, batch_size=16, learning_rate=0.05, seed=3, hidden_dim=8,
                feat_dim=6, embed_dim=4,
                loss_config=LossConfig(contrastive=LossVariant.BCL_RCL),
                compression=CompressionConfig(enabled=True))
    base.update(kw)
    return TrainConfig(**base)


def assert_params_equal(a, b):
    for (na, va), (nb, vb) in zip(a.named(), b.named()):
        assert na == nb
        assert np.array_equal(va, vb), na


def test_zero_epochs(toy):
    cfg = small_config(epochs=0)
    params, history = train(*toy, cfg)
    assert_params_equal(params, initial_state(toy[0], cfg).params)
    assert len(history) == 0


def test_separable_toy_reaches_full_accuracy():
    x = np.array([[-2.0, 0.3], [-1.5, -0.4], [-2.5, 0.1], [-1.0, 0.9],
                  [2.0, -0.3], [1.5, 0.4], [2.5, 0.2], [1.0, -0.8]])
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    ds = Dataset(x, y, np.array([4, 4]))
    cfg = TrainConfig(epochs=50, batch_size=8, learning_rate=0.1, jitter_sigma=0.0,
                      loss_config=LossConfig(classifier=LossVariant.CE), seed=0)
    params, history = train(ds, ds, cfg)
    assert history.records[-1].val_arithmetic == 1.0
    assert np.array_equal(predict(params, x), y)


def test_same_seed_is_bit_identical(toy):
    cfg = small_config()
    p1, h1 = train(*toy, cfg)
    p2, h2 = train(*toy, cfg)
    assert_params_equal(p1, p2)
    assert h1.records[-1].total_loss == h2.records[-1].total_loss
    assert h1.to_csv() == h2.to_csv()


def test_different_seed_differs(toy):
    p1, _ = train(*toy, small_config())
    p2, _ = train(*toy, small_config(seed=4))
    assert not np.array_equal(p1.classifier_w, p2.classifier_w)


def test_compression_frozen_at_trigger(toy):
    _, history = train(*toy, small_config())
    factors = [tuple(r.factors) for r in history.records]
    assert all(f == (1.0, 1.0, 1.0) for f in factors[:3])
    assert len(set(factors[3:])) == 1
    assert set(factors[3]) <= {1.0, 0.005}


def test_resume_is_bit_identical(toy, tmp_path):
    cfg = small_config()
    full = fit(*toy, cfg)
    half = fit(*toy, cfg, stop_after=4)
    assert half.epoch == 4 and len(half.history) == 4
    save_checkpoint(half, tmp_path / "half.ckpt")
    resumed = fit(*toy, cfg, load_checkpoint(tmp_path / "half.ckpt"))
    assert_params_equal(resumed.params, full.params)
    assert_params_equal(resumed.velocity, full.velocity)
    assert resumed.history.to_csv() == full.history.to_csv()
    save_checkpoint(full, tmp_path / "a.ckpt")
    save_checkpoint(resumed, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_version_checked(toy, tmp_path):
    state = fit(*toy, small_config(epochs=1))
    path = tmp_path / "c.ckpt"
    save_checkpoint(state, path)
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(entries["meta.json"])
    meta["version"] = 99
    entries["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(path, "w") as zf:
        for n, data in entries.items():
            zf.writestr(n, data)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_history_csv_round_trip(toy):
    _, history = train(*toy, small_config(epochs=2))
    assert TrainHistory.from_csv(history.to_csv()).to_csv() == history.to_csv()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(toy):
    cfg = small_config(learning_rate=1e150, momentum=0.0, epochs=3,
                       loss_config=LossConfig(classifier=LossVariant.CE))
    with pytest.raises(TrainingDiverged):
        train(*toy, cfg)


def test_mismatched_validation_set(toy):
    other = gen_gaussian_mixture([3, 3], 2, 4.0, 0.6, seed=9)
    with pytest.raises(ValueError):
        train(toy[0], other, small_config())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        CompressionConfig(trigger_epoch_fraction=1.0)
