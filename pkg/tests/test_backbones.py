import numpy as np
import pytest
import torch

from userstate.backbones import (
    BackboneSpec, BundleSpec, ModelBundle, Res2NetBlock, WideRes2Net, forward, fuse_forward,
    fusion_map_shape,
)


def test_blocks_per_group():
    assert BackboneSpec(22, 8, (30, 50, 1)).blocks_per_group == 3
    assert BackboneSpec(16, 8, (30, 50, 1)).blocks_per_group == 2
    assert WideRes2Net(BackboneSpec(22, 1, (30, 50, 1))).block_counts() == [3, 3, 3]


@pytest.mark.parametrize("depth", [17, 4, 9])
def test_invalid_depth_rejected(depth):
    with pytest.raises(ValueError, match="depth"):
        BackboneSpec(depth, 8, (30, 50, 1))


def test_channels_and_feature_dim():
    spec = BackboneSpec(22, 8, (30, 68, 3))
    assert spec.channels == (128, 256, 512)
    assert spec.feature_dim == 512


def test_fusion_width_default_bundle():
    spec = BundleSpec()
    assert fusion_map_shape(1024) == (32, 32)
    assert fusion_map_shape(128) == (8, 16)
    bundle_width = BackboneSpec(spec.modality_depth, spec.width, spec.audio_shape).feature_dim * 2
    assert bundle_width == 1024


def test_modality_rejects_wrong_input():
    bundle = ModelBundle(BundleSpec.toy(), seed=0)
    with pytest.raises(ValueError):
        bundle.audio.features(torch.zeros(2, 30, 68, 3))


def test_fuse_forward_needs_both_modalities():
    bundle = ModelBundle(BundleSpec.toy(), seed=0)
    with pytest.raises(ValueError):
        fuse_forward(bundle, torch.zeros(2, 30, 50, 1), None)


def test_outputs_are_distributions():
    bundle = ModelBundle(BundleSpec.toy(), seed=0)
    xa, xf = torch.randn(3, 30, 50, 1), torch.rand(3, 30, 68, 3)
    for net, x in ((bundle.audio, xa), (bundle.face, xf)):
        h, p = forward(net, x)
        assert h.shape == (3, 64)
        assert torch.allclose(p.sum(-1), torch.ones(3), atol=1e-6)
        assert (p >= 0).all()
    p = fuse_forward(bundle, xa, xf)
    assert p.shape == (3, 4)
    assert torch.allclose(p.sum(-1), torch.ones(3), atol=1e-6)


def test_inference_is_deterministic():
    bundle = ModelBundle(BundleSpec.toy(), seed=0)
    x = torch.randn(4, 30, 50, 1)
    a = forward(bundle.audio, x)[1]
    b = forward(bundle.audio, x.clone())[1]
    assert torch.equal(a, b)


def test_same_seed_same_weights():
    a = ModelBundle(BundleSpec.toy(), seed=5).state_dict()
    b = ModelBundle(BundleSpec.toy(), seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_scale_one_falls_back_to_plain_block():
    block = Res2NetBlock(16, 16, stride=1, scale=1)
    assert len(block.convs) == 1
    assert block(torch.randn(2, 16, 8, 8)).shape == (2, 16, 8, 8)


def test_first_split_is_identity_in_stride_one_block():
    torch.manual_seed(0)
    block = Res2NetBlock(16, 16, stride=1, scale=4).eval()
    x = torch.randn(1, 16, 6, 6)
    captured = {}
    block.conv3.register_forward_hook(lambda m, inp, out: captured.setdefault("in", inp[0]))
    block(x)
    o = torch.relu(block.bn2(block.conv1(torch.relu(block.bn1(x)))))
    assert torch.allclose(captured["in"][:, :4], o[:, :4])


def test_downsampling_block_shape():
    block = Res2NetBlock(16, 32, stride=2, scale=4)
    assert block(torch.randn(2, 16, 15, 25)).shape == (2, 32, 8, 13)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    spec = BundleSpec.toy((8, 10, 1), (8, 12, 3))
    bundle = ModelBundle(spec, seed=1).double().train()
    xa = torch.randn(4, 8, 10, 1, dtype=torch.float64)
    xf = torch.randn(4, 8, 12, 3, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 3])

    def loss():
        return torch.nn.functional.cross_entropy(bundle.fusion_logits(xa, xf), y)

    bundle.zero_grad()
    loss().backward()
    params = list(bundle.parameters())
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(25):
        p = params[rng.integers(len(params))]
        idx = tuple(rng.integers(s) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss().item()
            p[idx] = orig - eps
            down = loss().item()
            p[idx] = orig
        fd = (up - down) / (2 * eps)
        an = p.grad[idx].item()
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6) + 1e-9
