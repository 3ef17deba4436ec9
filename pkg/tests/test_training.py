import numpy as np
import pytest

from asymloss import losses as L
from asymloss.data import DataConfig, extract_patches, make_splits
from asymloss.errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from asymloss.experiment import PRESETS, apply_preset
from asymloss.tensor import Tensor, grad
from asymloss.training import (MLP, ModelConfig, TrainConfig, TrainedModel, batch_objective, init_model,
                               mix_batch, predict, train)


@pytest.fixture(scope="module")
def patches():
    train_images, _ = make_splits(DataConfig(n_train_cases=6, n_test_cases=2))
    return extract_patches(train_images, 9, 0.5, 100, seed=0)


def test_init_is_deterministic_and_seeded():
    cfg = ModelConfig(seed=3)
    a, b = init_model(cfg).arrays(), init_model(cfg).arrays()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    c = init_model(cfg, seed=4).arrays()
    assert not np.array_equal(a[0], c[0])


@pytest.mark.parametrize("fan_in,init,gain", [(16, "he", 2.0), (81, "he", 2.0), (50, "lecun", 1.0)])
def test_init_variance_scales_with_fan_in(fan_in, init, gain):
    cfg = ModelConfig(input_size=fan_in, hidden=(8,), init=init)
    w = np.concatenate([init_model(cfg, seed=s).params[0].data.ravel() for s in range(1000)])
    assert w.var() == pytest.approx(gain / fan_in, rel=0.02)
    assert np.all(init_model(cfg).params[1].data == 0)


def test_output_layer_is_antisymmetric():
    net = init_model(ModelConfig())
    w, b = net.params[-2].data, net.params[-1].data
    np.testing.assert_array_equal(w[:, 0], -w[:, 1])
    np.testing.assert_array_equal(b, 0)


def test_init_logits_are_order_one():
    net = init_model(ModelConfig())
    z = net(Tensor(np.random.default_rng(0).normal(size=(2000, 81)))).data
    assert 0.1 < np.abs(z).mean() < 10


def test_model_config_validation():
    for kw in ({"hidden": ()}, {"hidden": (0,)}, {"input_size": 0}, {"activation": "gelu"}, {"init": "xavier"}):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)
    with pytest.raises(ConfigError):
        MLP([Tensor(np.ones((3, 3))), Tensor(np.ones(3)), Tensor(np.ones((3, 3))), Tensor(np.ones(3))])


def test_train_config_validation():
    for kw in ({"epochs": 0}, {"batch_size": 0}, {"lr": 0}, {"lr_schedule": "step"}, {"momentum": 1.0},
               {"class_sampling_ratio": 1.0}, {"fraction": 0}, {"mixup_fraction": 1.5}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epoch": 3})
    cfg = TrainConfig(loss=L.LossConfig("focal", True), lr_schedule="cosine")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.lr_at(0) == cfg.lr and cfg.lr_at(cfg.epochs // 2) == pytest.approx(cfg.lr / 2)


def test_one_small_step_decreases_batch_loss(patches):
    net = init_model(ModelConfig())
    x, y = patches.x[:64], L.one_hot(patches.labels[:64])
    before = L.cross_entropy(net(Tensor(x)), y)
    grads = grad(before, net.params)
    for p, g in zip(net.params, grads):
        p.data -= 1e-4 * g
    after = L.cross_entropy(net(Tensor(x)), y)
    assert after.item() < before.item()


def test_training_is_deterministic(patches):
    cfg = TrainConfig(epochs=3, loss=L.LossConfig("mixup", True))
    a = train(patches, ModelConfig(), cfg)
    b = train(patches, ModelConfig(), cfg)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params, b.params))
    assert a.loss_trace == b.loss_trace
    assert a.fingerprint == b.fingerprint


def test_loss_decreases_on_default_task(default_splits):
    train_images, _ = default_splits
    ds = extract_patches(train_images, 9, 0.5, 200, seed=0)
    trained = train(ds, ModelConfig(), TrainConfig())
    assert all(np.isfinite(trained.loss_trace))
    assert trained.loss_trace[-1] < 0.5 * trained.loss_trace[0]


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_every_preset_trains_one_epoch(patches, preset):
    cfg = apply_preset(TrainConfig(epochs=1, steps_per_epoch=5), preset)
    trained = train(patches, ModelConfig(), cfg)
    assert len(trained.loss_trace) == 1 and np.isfinite(trained.loss_trace[0])
    z, _ = predict(trained, patches.x[:10])
    np.testing.assert_allclose(z[:, 0], -z[:, 1], atol=1e-12)   # antisymmetry survives training


def test_divergence_is_reported_with_epoch_and_batch(patches):
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged) as info:
        train(patches, ModelConfig(), TrainConfig(lr=1e3, epochs=3))
    assert info.value.epoch >= 1 and info.value.batch >= 1
    assert "epoch" in str(info.value) and "batch" in str(info.value)


def test_train_preconditions(patches):
    test_like = extract_patches(make_splits(DataConfig(n_train_cases=2, n_test_cases=1))[1], 9, 0.5, 10)
    with pytest.raises(ContractError):
        train(test_like, ModelConfig(), TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        train(patches, ModelConfig(input_size=25), TrainConfig(epochs=1))


def test_predict_tie_break_and_shift_invariance():
    w = np.zeros((2, 2))
    w[0] = [3.0, -1.0]
    net = MLP([Tensor(np.eye(2)), Tensor(np.zeros(2)), Tensor(w), Tensor(np.zeros(2))], "relu")
    z, labels = predict(net, np.array([[1.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(z, [[3.0, -1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(labels, [0, 0])
    shifted = MLP([Tensor(np.eye(2)), Tensor(np.zeros(2)), Tensor(w), Tensor(np.array([5.0, 5.0]))], "relu")
    np.testing.assert_array_equal(predict(shifted, np.array([[1.0, 0.0], [0.0, 0.0]]))[1], labels)
    with pytest.raises(ShapeError):
        predict(net, np.ones((2, 3)))


def test_trained_model_round_trip(tmp_path, patches):
    trained = train(patches, ModelConfig(), TrainConfig(epochs=2))
    trained.preset = "vanilla-ce"
    trained.save(tmp_path / "m.bin")
    back = TrainedModel.load(tmp_path / "m.bin")
    assert back.fingerprint == trained.fingerprint and back.preset == "vanilla-ce"
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back.params, trained.params))
    trained.write_loss_trace(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss" and len(lines) == 3
    assert float(lines[2].split(",")[1]) == trained.loss_trace[1]


def test_mix_batch_rules():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 3))
    labels = rng.integers(0, 2, 40)
    _, y_soft = mix_batch(x, labels, L.LossConfig("mixup"), np.random.default_rng(1), 0.5)
    assert np.allclose(y_soft.sum(1), 1) and np.any((y_soft > 0) & (y_soft < 1))
    _, y_hard = mix_batch(x, labels, L.LossConfig("mixup", True), np.random.default_rng(1), 0.5)
    assert set(np.unique(y_hard)) <= {0.0, 1.0}
    x0, y0 = mix_batch(x, labels, L.LossConfig("mixup"), rng, 0.0)
    assert x0 is x and np.array_equal(y0, L.one_hot(labels))


def test_combination_objective_parts():
    # with mixup off, the combination is margin/focal base loss plus the same base loss at x_adv
    rng = np.random.default_rng(2)
    net = init_model(ModelConfig(input_size=4, hidden=(5,)))
    x, labels = rng.normal(size=(8, 4)), np.array([0, 1] * 4)
    cfg = L.LossConfig(combine=("margin", "focal", "adversarial"), asymmetric=True)
    total = batch_objective(net, x, labels, cfg, np.random.default_rng(0)).item()
    y = L.one_hot(labels)
    d = L.asym_adversarial_direction(net, Tensor(x, requires_grad=True), y, cfg.epsilon)
    x_adv = L.perturb(x, d, cfg.magnitude)
    ref = L.margin_focal_loss(net(Tensor(x)), y, cfg).item() + L.margin_focal_loss(net(Tensor(x_adv)), y, cfg).item()
    assert total == pytest.approx(ref, rel=1e-13)
