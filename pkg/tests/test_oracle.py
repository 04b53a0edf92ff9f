import logging

import pytest
import torch

from contnorm.continual.oracle import NO_BATCH_DEPENDENT_LAYERS, bn_star_recalibrate, measure_drift
from contnorm.data.io_utils import ImageDataset
from contnorm.modules.losses.cross_entropy import cross_entropy_loss
from contnorm.modules.optim import SgdConfig, sgd_step
from contnorm.modules.stack import build_backbone
from contnorm.numerics import RngStreams
from contnorm.utils import Backbone

INPUT_SHAPE = (1, 5, 5)


def small_mlp(norm="bn", hidden_dim=12, seed=0):
    return build_backbone(
        Backbone.MLP_TOY,
        input_shape=INPUT_SHAPE,
        num_classes=4,
        norm={"kind": norm, "groups": 4},
        generator=RngStreams(seed).get(RngStreams.INIT),
        dtype=torch.float64,
        hidden_dim=hidden_dim,
    )


@pytest.fixture(scope="module")
def data():
    rng = torch.Generator().manual_seed(0)
    images = torch.rand((90,) + INPUT_SHAPE, generator=rng)
    return ImageDataset(images=images, labels=torch.randint(0, 4, (90,), generator=rng))


def trained(norm, data, steps=5):
    stack = small_mlp(norm)
    for step in range(steps):
        x = data.images[10 * step : 10 * step + 10].double()
        loss, grad_logits = cross_entropy_loss(stack.forward(x), data.labels[10 * step : 10 * step + 10])
        _, grads = stack.backward(grad_logits)
        sgd_step(stack, grads, SgdConfig(learning_rate=0.1))
    return stack


@pytest.mark.parametrize("norm", ["bn", "cn", "brn"])
def test_oracle_holds_the_exact_moments(norm, data):
    stack = trained(norm, data)
    oracle = bn_star_recalibrate(stack, data, batch_size=7)

    x = data.images.double()
    for index, layer in oracle.norm_layers():
        target = layer.bn_stage_input(oracle.forward_until(x, index))
        mean = target.mean(dim=(0, 2, 3))
        var = target.var(dim=(0, 2, 3), unbiased=False)
        assert torch.allclose(layer.running.mu, mean, atol=1e-8, rtol=0)
        assert torch.allclose(layer.running.var, var, atol=1e-8, rtol=0)


def test_oracle_does_not_depend_on_the_chunk_size(data):
    stack = trained("bn", data)
    small, large = bn_star_recalibrate(stack, data, batch_size=3), bn_star_recalibrate(stack, data, batch_size=1000)
    large_buffers = dict(large.named_buffers())
    for key, value in small.named_buffers():
        assert torch.allclose(value, large_buffers[key], atol=1e-10, rtol=0)


def test_oracle_keeps_parameters_and_stack(data):
    stack = trained("bn", data)
    before = stack.snapshot()
    oracle = bn_star_recalibrate(stack, data)

    for key, value in stack.state_dict().items():
        assert torch.equal(value, before[key])
    for key, value in oracle.named_parameters():
        assert torch.equal(value, before[key])
    assert not oracle.training
    assert stack.training


def test_oracle_of_a_gn_stack_is_a_no_op(data, caplog):
    stack = trained("gn", data)
    with caplog.at_level(logging.WARNING):
        oracle = bn_star_recalibrate(stack, data)

    assert NO_BATCH_DEPENDENT_LAYERS in caplog.text
    for key, value in stack.state_dict().items():
        assert torch.equal(oracle.state_dict()[key], value)


def test_zero_drift_against_itself(data):
    oracle = bn_star_recalibrate(trained("bn", data), data)
    record = measure_drift(oracle, oracle, after_task=1)

    assert record.after_task == 1
    assert [drift.name for drift in record.layers] == ["2.bn", "5.bn"]
    assert all(drift.delta_mu == 0 and drift.delta_var == 0 for drift in record.layers)


def test_drift_is_the_l1_distance():
    stack = small_mlp(hidden_dim=100)
    shifted = stack.clone()
    _, layer = shifted.norm_layers()[0]
    layer.running.mu.add_(0.1)

    record = measure_drift(stack, shifted)
    assert record[1].delta_mu == pytest.approx(10.0, abs=1e-9)
    assert record[1].delta_var == 0
    assert record[2].delta_mu == 0


def test_drift_between_different_structures():
    with pytest.raises(ValueError):
        measure_drift(small_mlp("bn"), small_mlp("cn"))
