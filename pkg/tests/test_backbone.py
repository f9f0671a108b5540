import numpy as np
import pytest

from tame.autodiff import Tensor, backward
from tame.backbone import (
    Backbone,
    BackboneConfig,
    BackboneTrainSettings,
    BlockSpec,
    accuracy,
    clip_grad_norm,
    default_taps,
    model_truth,
    random_shift,
    train_backbone,
)
from tame.data import SyntheticDatasetSpec, generate_in_memory
from tame.errors import ConfigError

TINY = BackboneConfig(input_size=(8, 8), blocks=(BlockSpec(1, 4), BlockSpec(1, 6)), head_width=5,
                      tap_layers=("block1.pool", "block2.pool"))


def images(n=3, seed=0, size=8):
    return np.random.default_rng(seed).normal(size=(n, 3, size, size)).astype(np.float32)


def test_default_taps():
    assert default_taps((BlockSpec(2, 4), BlockSpec(1, 8, False))) == ("block1.pool", "block2.relu1")
    assert default_taps((BlockSpec(2, 4),), "conv") == ("block1.relu2",)
    with pytest.raises(ConfigError):
        default_taps((BlockSpec(),), "fc")


def test_tap_shapes_follow_config():
    model = Backbone(TINY)
    logits, feats = model.forward_with_taps(images())
    assert logits.shape == (3, 3)
    assert feats.names == ["block1.pool", "block2.pool"]
    assert [f.shape for f in feats.tensors] == [(3, 4, 4, 4), (3, 6, 2, 2)]
    assert TINY.feature_channels() == (4, 6)


def test_taps_do_not_change_logits():
    model = Backbone(TINY, seed=3)
    x = images()
    np.testing.assert_array_equal(model.forward(x).data, model.forward_with_taps(x)[0].data)


def test_unbatched_input():
    model = Backbone(TINY)
    x = images(1)
    logits, feats = model.forward_with_taps(x[0])
    assert logits.shape == (3,)
    assert feats[0].shape == (4, 4, 4)
    np.testing.assert_allclose(logits.data, model.forward(x).data[0], atol=1e-6)


def test_arbitrary_taps():
    model = Backbone(TINY)
    _, feats = model.forward_with_taps(images(), ["block1.conv1", "fc1", "logits"])
    assert [f.shape for f in feats.tensors] == [(3, 4, 8, 8), (3, 5), (3, 3)]
    with pytest.raises(ConfigError):
        model.forward_with_taps(images(), ["block9.pool"])


@pytest.mark.parametrize("pool", ["flatten", "avg", "max"])
def test_head_pools(pool):
    cfg = BackboneConfig(input_size=(8, 8), blocks=(BlockSpec(1, 4),), head_width=0, head_pool=pool,
                         tap_layers=("block1.pool",))
    model = Backbone(cfg)
    assert model.forward(images()).shape == (3, 3)
    flat = 4 * 4 * 4 if pool == "flatten" else 4
    assert model.params["logits.weight"].shape == (3, flat)


def test_max_head_is_translation_tolerant():
    cfg = BackboneConfig(input_size=(16, 16), blocks=(BlockSpec(1, 4),), head_width=0, tap_layers=("block1.pool",))
    model = Backbone(cfg, seed=1)
    x = np.zeros((1, 3, 16, 16), np.float32)
    x[..., 2:5, 2:5] = 1.0
    y = np.roll(x, (8, 8), axis=(2, 3))
    np.testing.assert_allclose(model.forward(x).data, model.forward(y).data, atol=1e-6)


def test_config_errors():
    with pytest.raises(ConfigError):
        BackboneConfig(input_size=(6, 6), blocks=(BlockSpec(), BlockSpec()), tap_layers=("block1.pool",))
    with pytest.raises(ConfigError):
        BackboneConfig(tap_layers=("block3.pool", "block1.pool"))
    with pytest.raises(ConfigError):
        BackboneConfig(tap_layers=("nope",))
    with pytest.raises(ConfigError):
        BackboneConfig(head_pool="mean")
    with pytest.raises(ConfigError):
        Backbone(TINY).forward(images(size=16))


def test_model_truth_ties_to_lowest_index():
    assert model_truth(np.array([1.0, 3.0, 3.0])) == 1
    np.testing.assert_array_equal(model_truth(np.array([[0.0, 0.0], [0.0, 1.0]])), [0, 1])


def test_state_dict_round_trip_and_errors():
    a, b = Backbone(TINY, seed=1), Backbone(TINY, seed=2)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.forward(images()).data, b.forward(images()).data)
    state = a.state_dict()
    state.pop("logits.bias")
    with pytest.raises(ConfigError):
        b.load_state_dict(state)


def test_freeze_blocks_weight_gradients():
    model = Backbone(TINY).freeze()
    x = Tensor(images(), requires_grad=True)
    backward(model.forward(x).sum())
    assert all(p.grad is None for p in model.params.values())
    assert np.any(x.grad != 0)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])


def test_random_shift_keeps_shape_and_content():
    batch = images(4)
    rng = np.random.default_rng(0)
    out = random_shift(batch, 2, rng)
    assert out.shape == batch.shape
    np.testing.assert_array_equal(random_shift(batch, 0, rng), batch)


def small_sets():
    spec = SyntheticDatasetSpec(train=30, val=30, test=3, image_size=32, radius_range=(5.0, 9.0))
    return generate_in_memory(spec)


SMALL_CFG = BackboneConfig(input_size=(32, 32), blocks=(BlockSpec(1, 4), BlockSpec(1, 8)), head_width=8,
                           tap_layers=("block1.pool", "block2.pool"))


def test_zero_epochs_is_chance_level():
    sets = small_sets()
    accs = []
    for seed in range(5):
        model, report = train_backbone(SMALL_CFG, sets["train"], sets["val"], BackboneTrainSettings(epochs=0, seed=seed))
        assert report.val_accuracy == report.initial_val_accuracy
        accs.append(report.val_accuracy)
    assert abs(np.mean(accs) - 1 / 3) < 0.2
    assert model.frozen


def test_training_is_deterministic():
    sets = small_sets()
    settings = BackboneTrainSettings(epochs=1, batch_size=10)
    a, ra = train_backbone(SMALL_CFG, sets["train"], sets["val"], settings)
    b, rb = train_backbone(SMALL_CFG, sets["train"], sets["val"], settings)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert ra.epoch_losses == rb.epoch_losses
    assert accuracy(a, sets["val"].normalized(), sets["val"].labels) == ra.val_accuracy


@pytest.mark.parametrize("head_width", [5, 0])
def test_normalise_activations_preserves_logits(head_width):
    cfg = BackboneConfig(input_size=(8, 8), blocks=(BlockSpec(2, 4), BlockSpec(1, 6)), head_width=head_width,
                         tap_layers=("block1.pool", "block2.pool"))
    model = Backbone(cfg, seed=3, dtype=np.float64)
    for k, p in model.params.items():
        if k.endswith("bias"):
            p.data = np.random.default_rng(5).normal(size=p.shape)
        else:
            p.data *= 4.0
    x = images(10, seed=1).astype(np.float64)
    before = model.forward(x).data
    scales = model.normalise_activations(x, batch_size=4)
    assert len(scales) == 3 and all(s > 0 for s in scales)
    np.testing.assert_allclose(model.forward(x).data, before, rtol=1e-9, atol=1e-9)
    for layer in ("block1.relu1", "block1.relu2", "block2.relu1"):
        a = model.forward_with_taps(x, [layer])[1][layer].data
        assert np.sqrt((a ** 2).mean()) == pytest.approx(1.0, rel=1e-9)
