import numpy as np
import pytest
from gradcheck import check_unet

from fedseg import nn
from fedseg.errors import ConfigError, ShapeError
from fedseg.params import ParameterSet
from fedseg.tensor import Rng
from fedseg.unet import (UNet, UNetConfig, block_layout, infer_config, load_checkpoint,
                         save_checkpoint, train_step)


def test_names_independent_of_seed():
    cfg = UNetConfig(in_channels=1, depth=1, base_channels=4)
    a = UNet.build(cfg, Rng(1))
    b = UNet.build(cfg, Rng(2))
    assert a.params.names() == b.params.names()
    assert a.params != b.params


def test_divisibility_rule():
    cfg = UNetConfig(in_channels=1, depth=5, base_channels=2)
    cfg.check_input(64, 64)
    with pytest.raises(ConfigError):
        cfg.check_input(48, 48)
    m = UNet.build(cfg, Rng(0))
    with pytest.raises(ConfigError):
        m.forward(np.zeros((2, 1, 48, 48), np.float32))


def test_parameter_count_depth2_base4():
    # Hand enumeration, 3x3 convs, conv weights + biases + BN gamma/beta:
    #   enc1   1->4 at H/2:  (36+4) + 8 + (144+4) + 8       =  204
    #   enc2   4->8 at H/4:  (288+8) + 16 + (576+8) + 16    =  912
    #   bridge 8->16 at H/4: (1152+16) + 32 + (2304+16) + 32 = 3552
    #   dec1   (16+4)->4 at H/2: (720+4) + 8 + (144+4) + 8   =  888
    #   dec2   4->4 at H, no skip: (144+4) + 8 + (144+4) + 8 =  312
    #   head   1x1, 4->1: 4 + 1                              =    5
    # trainable total 5873; running mean/var add 2 * 72 = 144 more.
    m = UNet.build(UNetConfig(1, 2, 4), Rng(0))
    trainable = sum(m.params[n].size for n in m.trainable_names())
    assert trainable == 5873
    assert m.params.num_elements() == 5873 + 144
    assert block_layout(UNetConfig(1, 2, 4)) == [
        ("enc1", 1, 4), ("enc2", 4, 8), ("bridge", 8, 16), ("dec1", 20, 4), ("dec2", 4, 4)]


def test_initialization():
    m = UNet.build(UNetConfig(1, 2, 8), Rng(3))
    p = m.params
    assert np.all(p["enc1.bn1.gamma"] == 1) and np.all(p["enc1.bn1.beta"] == 0)
    assert np.all(p["enc1.conv1.bias"] == 0)
    assert np.all(p["enc1.bn1.running_var"] == 1)
    w = p["bridge.conv2.weight"]
    fan_in = w.shape[1] * 9
    assert abs(w.std() - np.sqrt(2 / fan_in)) < 0.1 * np.sqrt(2 / fan_in)


@pytest.mark.parametrize("size", [16, 32])
def test_forward_shape_and_range(size, nprng):
    m = UNet.build(UNetConfig(2, 2, 4), Rng(0))
    x = nprng.normal(size=(3, 2, size, size)).astype(np.float32)
    pred, _ = m.forward(x, "train")
    assert pred.shape == (3, 1, size, size)
    assert np.all((pred > 0) & (pred < 1))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((3, 1, size, size), np.float32))


def test_eval_forward_deterministic(nprng):
    m = UNet.build(UNetConfig(1, 2, 4), Rng(0))
    x = nprng.normal(size=(1, 1, 16, 16)).astype(np.float32)
    assert m.forward(x, "eval")[0].tobytes() == m.forward(x, "eval")[0].tobytes()


def test_checkpoint_round_trip(tmp_path, nprng):
    m = UNet.build(UNetConfig(1, 2, 4), Rng(4))
    x = nprng.normal(size=(2, 1, 16, 16)).astype(np.float32)
    _, m, _ = train_step(m, x, (x > 0).astype(np.float32), nn.AdamState())
    save_checkpoint(m, tmp_path / "m.fdlc")
    raw = (tmp_path / "m.fdlc").read_bytes()
    assert raw[:4] == b"FDLC" and raw[4:6] == b"\x01\x00"
    assert int.from_bytes(raw[6:10], "little") == len(m.params)
    back = load_checkpoint(tmp_path / "m.fdlc")
    assert back.config == m.config
    assert back.params == m.params
    assert back.forward(x, "eval")[0].tobytes() == m.forward(x, "eval")[0].tobytes()


def test_infer_config_rejects_garbage():
    with pytest.raises(ShapeError):
        infer_config(ParameterSet([("x", np.zeros(3))]))


def test_unet_gradcheck_depth2(nprng):
    m = UNet.build(UNetConfig(1, 2, 3), Rng(9), dtype=np.float64)
    x = nprng.normal(size=(3, 1, 16, 16))
    y = (nprng.random(x.shape) > 0.5).astype(float)
    pred, caches = m.forward(x)
    grads, dx = m.backward(caches, nn.bce_loss(pred, y)[1])
    worst, checked, _ = check_unet(m, x, y, grads, dx, nprng, per_layer=3)
    assert checked == 3 * (len({n.rsplit(".", 1)[0] for n in m.trainable_names()}) + 1)
    assert worst <= 1e-4


def test_train_step_updates_running_stats_and_is_deterministic(tiny_dataset):
    m = UNet.build(UNetConfig(1, 2, 4), Rng(0))
    x, y = tiny_dataset.images()[:4], tiny_dataset.masks()[:4]
    st = nn.AdamState()
    la, ma, sa = train_step(m, x, y, st)
    lb, mb, sb = train_step(m, x, y, st)
    assert la == lb and ma.params == mb.params and sa.t == sb.t == 1
    assert st.t == 0
    assert not np.array_equal(ma.params["enc1.bn1.running_mean"], m.params["enc1.bn1.running_mean"])


def test_train_step_zero_gradient_when_saturated():
    m = UNet.build(UNetConfig(1, 1, 2), Rng(0))
    params = m.params.copy()
    params["head.bias"][:] = 200.0  # sigmoid saturates to exactly 1.0 in float32
    m = m.with_params(params)
    x = np.random.default_rng(0).normal(size=(2, 1, 8, 8)).astype(np.float32)
    loss, new, st = train_step(m, x, np.ones((2, 1, 8, 8), np.float32), nn.AdamState())
    assert st.t == 1
    for name in m.trainable_names():
        assert new.params[name].tobytes() == m.params[name].tobytes(), name


def test_overfit_single_sample(tiny_dataset):
    # One sample duplicated into a batch of two (batch-norm needs two rows).
    x = np.repeat(tiny_dataset.images()[:1], 2, axis=0)
    y = np.repeat(tiny_dataset.masks()[:1], 2, axis=0)
    m = UNet.build(UNetConfig(1, 2, 8), Rng(1))
    st = nn.AdamState(lr=0.002)
    losses = []
    for _ in range(200):
        loss, m, st = train_step(m, x, y, st)
        losses.append(loss)
    assert min(losses) < 0.1
    windows = [np.mean(losses[i:i + 50]) for i in range(151)]
    assert all(windows[i + 50] < windows[i] for i in range(101))
