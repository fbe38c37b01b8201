import numpy as np
import pytest

from gbnlab import autodiff as ad
from gbnlab.autodiff import DimensionError, Tensor
from gbnlab.data import synth_blobs
from gbnlab.gbn import (ConvGate, FcGate, GatedBatchNorm, GatingMode, classification_loss,
                        domain_prediction_loss, forced, gate_predict, gbn_forward_infer)
from gbnlab.layers import LayerMode, bn_forward
from gbnlab.models import LeNet, ModelConfig

from helpers import gradcheck, randomize_branches, small_block


def test_gating_mode_parsing():
    assert GatingMode.parse("soft") == GatingMode("soft")
    assert GatingMode.parse("forced:2") == forced(2)
    assert str(forced(3)) == "forced:3"
    with pytest.raises(ValueError):
        GatingMode("forced")
    with pytest.raises(ValueError):
        GatingMode.parse("medium")


def test_gate_shapes_and_errors():
    rng = np.random.default_rng(0)
    gate = ConvGate(6, 24, 24, 4, rng=rng)
    assert gate(Tensor(np.zeros((2, 6, 24, 24)))).shape == (2, 4)
    with pytest.raises(DimensionError):
        gate(Tensor(np.zeros((2, 6, 12, 12))))
    fc = FcGate(16 * 8 * 8, 4, rng=rng)
    assert fc(Tensor(np.zeros((3, 16, 8, 8)))).shape == (3, 4)
    with pytest.raises(DimensionError):
        fc(Tensor(np.zeros((3, 10))))


def test_untrained_gate_is_uniform():
    rng = np.random.default_rng(1)
    g = gate_predict(rng.standard_normal((5, 2, 6, 6)), ConvGate(2, 6, 6, 4, rng=rng))
    np.testing.assert_allclose(g.data, 0.25)


def test_soft_output_is_gate_weighted_branch_mix():
    rng = np.random.default_rng(2)
    block = small_block(rng)
    x = Tensor(rng.standard_normal((3, 2, 6, 6)))
    out = gbn_forward_infer(x, block, GatingMode("soft")).data
    g = gate_predict(x, block.gate).data
    ref = sum(g[:, k, None, None, None] * bn_forward(x, br, LayerMode.EVAL).data
              for k, br in enumerate(block.branches))
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_hard_and_forced_select_single_branch():
    rng = np.random.default_rng(3)
    block = small_block(rng)
    x = Tensor(rng.standard_normal((4, 2, 6, 6)))
    top = gate_predict(x, block.gate).data.argmax(axis=1)
    hard = gbn_forward_infer(x, block, GatingMode("hard")).data
    for i, k in enumerate(top):
        ref = bn_forward(Tensor(x.data[i:i + 1]), block.branches[k], LayerMode.EVAL).data
        np.testing.assert_allclose(hard[i:i + 1], ref)
    for k in range(4):
        np.testing.assert_array_equal(gbn_forward_infer(x, block, forced(k)).data,
                                      bn_forward(x, block.branches[k], LayerMode.EVAL).data)
    with pytest.raises(IndexError):
        gbn_forward_infer(x, block, forced(4))


def test_training_routes_only_to_labelled_branch():
    rng = np.random.default_rng(4)
    block = small_block(rng)
    before = [br.running_mean.copy() for br in block.branches]
    block(Tensor(rng.standard_normal((4, 2, 6, 6))), LayerMode.TRAIN, domain=2)
    for k, br in enumerate(block.branches):
        changed = not np.array_equal(br.running_mean, before[k])
        assert changed == (k == 2)
        assert br.num_batches_seen == (1 if k == 2 else 0)
    with pytest.raises(IndexError):
        block(Tensor(np.zeros((4, 2, 6, 6))), LayerMode.TRAIN, domain=7)
    with pytest.raises(ValueError):
        block(Tensor(np.zeros((4, 2, 6, 6))), LayerMode.TRAIN)


def test_identical_branches_make_gating_irrelevant():
    rng = np.random.default_rng(5)
    block = small_block(rng)
    for br in block.branches[1:]:
        br.gamma.data = block.branches[0].gamma.data.copy()
        br.beta.data = block.branches[0].beta.data.copy()
        br.running_mean = block.branches[0].running_mean.copy()
        br.running_var = block.branches[0].running_var.copy()
    x = Tensor(rng.standard_normal((3, 2, 6, 6)))
    soft = gbn_forward_infer(x, block, GatingMode("soft")).data
    np.testing.assert_allclose(soft, gbn_forward_infer(x, block, forced(0)).data, rtol=1e-12)


@pytest.mark.parametrize("kind", ["conv", "fc"])
@pytest.mark.parametrize("gating", ["soft", "hard", "forced:1"])
def test_gbn_inference_gradients(kind, gating):
    for seed in range(3):
        rng = np.random.default_rng(seed)
        block = small_block(rng, kind)
        x = Tensor(rng.standard_normal((3, 2, 6, 6)), requires_grad=True)
        w = rng.standard_normal(x.shape)
        mode = GatingMode.parse(gating)
        params = [x] + block.branches[1].parameters()
        if mode.kind == "soft":
            params += block.gate.parameters()[:2]
        loss = lambda: ad.tsum(gbn_forward_infer(x, block, mode) * w)
        assert gradcheck(loss, params, rng) <= 1e-4


def test_domain_prediction_loss_values_and_gradients():
    rng = np.random.default_rng(6)
    gate = FcGate(8, 3, hidden=4, rng=rng)
    gate.fc2.weight.data = rng.normal(0, 0.5, gate.fc2.weight.shape)
    feats = [(rng.standard_normal((5, 8)), k) for k in range(3)]
    loss = domain_prediction_loss(feats, [gate])
    ref = sum(ad.softmax_cross_entropy(gate(Tensor(f)), np.full(5, k)).item() for f, k in feats)
    assert loss.item() == pytest.approx(ref, rel=1e-12)
    assert gradcheck(lambda: domain_prediction_loss(feats, [gate]), gate.parameters(), rng) <= 1e-4
    with pytest.raises(ValueError):
        domain_prediction_loss([], [gate])


def test_uniform_gate_loss_is_log_domains():
    rng = np.random.default_rng(7)
    gate = FcGate(8, 4, rng=rng)
    loss = domain_prediction_loss([(rng.standard_normal((6, 8)), k) for k in range(4)], [gate])
    assert loss.item() == pytest.approx(4 * np.log(4), rel=1e-12)


def test_classification_loss_routes_and_requires_all_domains():
    model = LeNet(ModelConfig(norm="gbn", seed=0))
    rng = np.random.default_rng(8)
    x, y = rng.random((4, 1, 28, 28)), rng.integers(0, 10, 4)
    loss = classification_loss([(x, y, k) for k in range(4)], model)
    assert np.isfinite(loss.item())
    for block in model.gated_blocks:
        assert [b.num_batches_seen for b in block.branches] == [1, 1, 1, 1]
    with pytest.raises(ValueError, match="missing"):
        classification_loss([(x, y, 0), (x, y, 1)], model)


def test_classification_loss_gradient():
    model = LeNet(ModelConfig(norm="gbn", conv1=2, conv2=3, hidden=8, conv_gate_hidden=2,
                              fc_gate_hidden=4, seed=1))
    rng = np.random.default_rng(9)
    batches = [(rng.random((3, 1, 28, 28)), rng.integers(0, 10, 3), k) for k in range(4)]
    params = [model.conv1.weight, model.fc2.weight, model.norm1.branches[2].gamma]
    assert gradcheck(lambda: classification_loss(batches, model), params, rng) <= 1e-4
    # gate parameters are untouched by the classification loss
    grads = ad.grad(classification_loss(batches, model), model.gate_parameters())
    assert all(not g.any() for g in grads)


def test_gate_learns_blob_domains():
    data = synth_blobs(4, 100, 8, 10.0, seed=0)
    rng = np.random.default_rng(0)
    gate = FcGate(8, 4, hidden=16, rng=rng)
    for step in range(200):
        idx = rng.choice(len(data), 64, replace=False)
        feats = [(data.images[idx][data.labels[idx] == k], k) for k in range(4)]
        loss = domain_prediction_loss([f for f in feats if len(f[0])], [gate])
        for p, g in zip(gate.parameters(), ad.grad(loss, gate.parameters())):
            p.data = p.data - 0.5 * g
    pred = gate_predict(data.images, gate).data.argmax(axis=1)
    assert (pred == data.labels).mean() > 0.9
