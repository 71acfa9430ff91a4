import pytest
import torch
from hypothesis import given, settings, strategies as st

from vesseldg.encoder import EncoderConfig, ImageEncoder, encode, trainable_parameters
from vesseldg.model import ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint


def _zero_biases(enc):
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.zero_()


def test_output_geometry_64():
    enc = ImageEncoder(EncoderConfig(channels=32))
    out = encode(torch.rand(3, 64, 64), enc)
    assert out.shape == (32, 4, 4)


@settings(max_examples=15, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6))
def test_output_is_input_over_16(h, w):
    enc = ImageEncoder(EncoderConfig(channels=8))
    out = enc(torch.rand(1, 3, 16 * h, 16 * w))
    assert out.shape == (1, 8, h, w)


def test_same_seed_is_bit_identical():
    x = torch.rand(2, 3, 64, 64)
    a = ImageEncoder(EncoderConfig(channels=16, seed=3))
    b = ImageEncoder(EncoderConfig(channels=16, seed=3))
    assert torch.equal(a(x), a(x))
    assert torch.equal(a(x), b(x))
    c = ImageEncoder(EncoderConfig(channels=16, seed=4))
    assert not torch.equal(a(x), c(x))


def test_construction_does_not_disturb_global_rng():
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    ImageEncoder(EncoderConfig(channels=8))
    assert torch.equal(torch.rand(3), expected)


def test_zero_image_equal_across_freeze_modes():
    x = torch.zeros(1, 3, 64, 64)
    outs = []
    for adapter, freeze in ((False, False), (True, False), (True, True)):
        enc = ImageEncoder(EncoderConfig(channels=32, adapter_enabled=adapter, freeze_backbone=freeze))
        _zero_biases(enc)
        outs.append(enc(x))
    for o in outs:
        assert o.shape == (1, 32, 4, 4)
        assert torch.isfinite(o).all()
        assert torch.equal(o, outs[0])


def test_adapters_are_identity_at_init_on_random_input():
    x = torch.rand(2, 3, 64, 64)
    on = ImageEncoder(EncoderConfig(channels=16, adapter_enabled=True))
    off = ImageEncoder(EncoderConfig(channels=16, adapter_enabled=False))
    off.load_state_dict(on.backbone_parameters(), strict=True)
    assert torch.equal(on(x), off(x))


def test_freeze_without_adapters_has_nothing_trainable():
    enc = ImageEncoder(EncoderConfig(channels=16, adapter_enabled=False, freeze_backbone=True))
    assert trainable_parameters(enc) == {}


def test_unfrozen_counts_every_parameter():
    enc = ImageEncoder(EncoderConfig(channels=16))
    total = sum(p.numel() for p in enc.parameters())
    assert sum(p.numel() for p in trainable_parameters(enc).values()) == total


def test_frozen_counts_match_adapter_shape_sum():
    cfg = EncoderConfig(channels=32, freeze_backbone=True, adapter_ratio=4)
    enc = ImageEncoder(cfg)
    expected = 0
    for w in cfg.stage_widths():
        hidden = max(w // 4, 1)
        expected += (w * hidden + hidden) + (hidden * w + w)  # 1x1 down and up convs
    got = trainable_parameters(enc)
    assert all(n.startswith("adapters.") for n in got)
    assert sum(p.numel() for p in got.values()) == expected


def test_frozen_step_leaves_backbone_untouched_and_adapters_get_gradients():
    enc = ImageEncoder(EncoderConfig(channels=16, freeze_backbone=True))
    before = {n: p.detach().clone() for n, p in enc.backbone_parameters().items()}
    opt = torch.optim.SGD(list(trainable_parameters(enc).values()), lr=0.1)
    loss = enc(torch.rand(2, 3, 32, 32)).pow(2).sum()
    loss.backward()
    grads = [p.grad for p in enc.adapter_parameters().values() if p.grad is not None]
    assert any(g.abs().max() > 0 for g in grads)
    opt.step()
    for n, p in enc.backbone_parameters().items():
        assert (p - before[n]).abs().max().item() == 0.0, n


@pytest.mark.parametrize("shape,msg", [
    ((1, 3, 60, 64), "divisible by 16"),
    ((1, 1, 64, 64), "shape"),
    ((3, 64, 64, 1), "shape"),
])
def test_rejects_bad_geometry(shape, msg):
    enc = ImageEncoder(EncoderConfig(channels=8))
    with pytest.raises(ValueError, match=msg):
        enc(torch.rand(*shape))


def test_rejects_non_finite_pixels():
    enc = ImageEncoder(EncoderConfig(channels=8))
    x = torch.rand(1, 3, 32, 32)
    x[0, 1, 3, 3] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        enc(x)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(channels=0)
    with pytest.raises(ValueError):
        EncoderConfig(depth=0)


def test_checkpoint_channel_mismatch_is_an_error(tmp_path):
    model = SegmentationModel(ModelConfig(encoder=EncoderConfig(channels=16), num_domains=2))
    path = save_checkpoint(tmp_path / "m.pt", model)
    loaded, _ = load_checkpoint(path, expect_channels=16)
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(loaded.encoder(x), model.encoder(x))
    with pytest.raises(ValueError, match="C=16"):
        load_checkpoint(path, expect_channels=32)
