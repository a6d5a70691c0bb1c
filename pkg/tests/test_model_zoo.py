import numpy as np
import pytest
import torch
from torch import nn

from histo_tl.errors import CheckpointError, ConfigurationError, RegistryError, WeightLoadError
from histo_tl.model_zoo import (
    BACKBONES,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)


def small(**kw):
    base = dict(backbone="VGG19", n_classes=3, input_size=(64, 64, 3), weights="none")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def vgg_small():
    return build_model(small(), seed=0)


def _batch(n=4, size=64, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3), dtype=np.float32)


def vgg_flatten(side):
    # five 2x2 stride-2 pools, each flooring
    for _ in range(5):
        side //= 2
    return side * side * 512


def test_flatten_trace():
    assert vgg_flatten(375) == 11 * 11 * 512 == 61_952


def test_small_vgg_head_shape(vgg_small):
    assert vgg_small.flatten_length == vgg_flatten(64) == 2048
    head = vgg_small.network.head
    assert head[1].in_features == 2048 and head[1].out_features == 512
    assert head[4].out_features == 1024 and head[7].out_features == 3
    assert [type(m) for m in head] == [
        nn.Flatten, nn.Linear, nn.ReLU, nn.Dropout, nn.Linear, nn.ReLU, nn.Dropout, nn.Linear
    ]
    assert head[3].p == head[6].p == 0.5


@pytest.mark.parametrize("n", [2, 3])
def test_output_arity_and_softmax(n):
    h = build_model(small(n_classes=n), seed=1)
    p = h.predict_proba(_batch(5))
    assert p.shape == (5, n)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-5)


def test_frozen_trainable_equals_head(vgg_small):
    c = vgg_small.parameter_counts
    assert c["trainable_params"] == c["head_params"]
    assert c["head_params"] == 2048 * 512 + 512 + 512 * 1024 + 1024 + 1024 * 3 + 3
    assert not any(p.requires_grad for p in vgg_small.network.backbone.parameters())


def test_unfrozen_trains_everything():
    h = build_model(small(freeze_backbone=False, backbone="VGG16"), seed=0)
    c = h.parameter_counts
    assert c["trainable_params"] == c["head_params"] + c["backbone_params"]


def test_vgg19_kernel_audit(vgg_small):
    convs = [m for m in vgg_small.network.backbone.modules() if isinstance(m, nn.Conv2d)]
    pools = [m for m in vgg_small.network.backbone.modules() if isinstance(m, nn.MaxPool2d)]
    assert len(convs) == 16 and len(pools) == 5
    assert all(m.kernel_size == (3, 3) for m in convs)
    assert all(m.kernel_size in (2, (2, 2)) and m.stride in (2, (2, 2)) for m in pools)
    # retained up to and including the last pool
    assert isinstance(list(vgg_small.network.backbone)[-1], nn.MaxPool2d)


def test_head_step_leaves_backbone_untouched(vgg_small):
    before = vgg_small.backbone_state()
    net = vgg_small.network
    net.train()
    opt = torch.optim.Adam([p for p in net.parameters() if p.requires_grad], lr=0.01)
    head_before = net.head[1].weight.detach().clone()
    x = torch.rand(3, 3, 64, 64)
    loss = nn.functional.cross_entropy(net.logits(x), torch.tensor([0, 1, 2]))
    loss.backward()
    opt.step()
    after = vgg_small.backbone_state()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert not torch.equal(head_before, net.head[1].weight)


# InceptionV3 and NASNetLarge need larger inputs than VGG
SWAP_SIZES = {"VGG16": 64, "VGG19": 64, "ResNet50": 64, "InceptionV3": 96, "DenseNet201": 64, "NASNetLarge": 96}


@pytest.mark.parametrize("name", list(BACKBONES))
def test_backbone_swap_symmetry(name):
    if name == "NASNetLarge":
        pytest.importorskip("timm")
    size = SWAP_SIZES[name]
    h = build_model(small(backbone=name, n_classes=2, input_size=(size, size, 3), fc1_units=8, fc2_units=16), seed=0)
    p = h.predict_proba(_batch(2, size))
    assert p.shape == (2, 2)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-5)
    assert h.parameter_counts["trainable_params"] == h.parameter_counts["head_params"]


def test_registry_and_config_errors():
    with pytest.raises(RegistryError):
        small(backbone="AlexNet")
    with pytest.raises(ConfigurationError):
        small(n_classes=4)
    with pytest.raises(ConfigurationError):
        small(fc1_units=0)
    with pytest.raises(ConfigurationError):
        small(dropout_rate=1.0)


def test_missing_weight_file_is_weight_load_error(tmp_path):
    with pytest.raises(WeightLoadError):
        build_model(small(weights=str(tmp_path / "absent.pt")))


def test_backbone_weights_from_file(tmp_path, vgg_small):
    path = tmp_path / "vgg.pt"
    torch.save(vgg_small.network.backbone.state_dict(), path)
    h = build_model(small(weights=str(path)), seed=5)
    a, b = h.backbone_state(), vgg_small.backbone_state()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_checkpoint_round_trip(tmp_path, vgg_small):
    path = save_checkpoint(vgg_small, tmp_path / "ckpt" / "checkpoint.pt")
    loaded = load_checkpoint(path, expected=vgg_small.config)
    assert loaded.config == vgg_small.config
    x = _batch(3, seed=4)
    assert np.abs(loaded.predict_proba(x) - vgg_small.predict_proba(x)).max() < 1e-6


def test_checkpoint_config_mismatch(tmp_path, vgg_small):
    path = save_checkpoint(vgg_small, tmp_path / "checkpoint.pt")
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(path, expected=small(n_classes=2))


def test_corrupt_and_missing_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"\x00garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    other = tmp_path / "other.pt"
    torch.save({"hello": 1}, other)
    with pytest.raises(CheckpointError):
        load_checkpoint(other)


def test_checkpoint_version_guard(tmp_path, vgg_small):
    path = save_checkpoint(vgg_small, tmp_path / "checkpoint.pt")
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
