import math

import numpy as np
import pytest
import torch

from helpers import fd_relative_error

from bevloc.features import (
    MFA, Backbone, FeatureNet, FeatureNetConfig, GlobalHead, ViTEncoder, rotate_image,
)

TINY = FeatureNetConfig(rotation_count=2, image_side=32, backbone_widths=(4, 8, 8, 8), patch_size=4,
                        vit_dim=16, vit_depth=1, vit_heads=2, output_dim=16)


def central_disk(side, frac=0.7):
    yy, xx = np.mgrid[:side, :side]
    c = (side - 1) / 2
    return torch.tensor(((yy - c) ** 2 + (xx - c) ** 2) <= (frac * side / 2) ** 2)


def test_config_validation():
    with pytest.raises(ValueError):
        FeatureNetConfig(rotation_count=0)
    with pytest.raises(ValueError):
        FeatureNetConfig(image_side=120, patch_size=4)  # 30 not divisible by 4
    assert FeatureNetConfig().mfa_shape == (32, 32, 128)
    assert FeatureNetConfig().token_count == 64


def test_rotate_identity_and_half_turn():
    img = torch.rand(2, 3, 17, 17)
    assert torch.equal(rotate_image(img, 0.0), img)
    assert torch.equal(rotate_image(img, math.pi), img.flip(-1).flip(-2))
    with pytest.raises(ValueError):
        rotate_image(torch.rand(4, 5), 0.1)


def test_rotate_quarter_turn_direction():
    img = torch.zeros(5, 5)
    img[2, 4] = 1.0  # east of centre
    out = rotate_image(img, math.pi / 2)
    assert out[0, 2] == 1.0  # now north


def test_bilinear_rotation_matches_pointwise_oracle():
    img = torch.rand(9, 9, dtype=torch.float64)
    angle = 0.37
    out = rotate_image(img, angle)
    c = 4.0
    for r in range(9):
        for col in range(9):
            X, Y = col - c, c - r
            xs = math.cos(angle) * X + math.sin(angle) * Y + c
            ys = c - (-math.sin(angle) * X + math.cos(angle) * Y)
            x0, y0 = math.floor(xs), math.floor(ys)
            val = 0.0
            for dy in (0, 1):
                for dx in (0, 1):
                    xi, yi = x0 + dx, y0 + dy
                    w = (1 - abs(xs - xi)) * (1 - abs(ys - yi))
                    if 0 <= xi < 9 and 0 <= yi < 9:
                        val += w * img[yi, xi].item()
            assert out[r, col].item() == pytest.approx(val, abs=1e-12)


def test_rotate_round_trip_central_disk():
    from scipy.ndimage import gaussian_filter

    base = gaussian_filter(np.random.default_rng(0).random((64, 64)), 3)
    img = torch.tensor(base)
    back = rotate_image(rotate_image(img, math.pi / 2), -math.pi / 2)
    assert (back - img).abs()[central_disk(64)].max() < 1e-6
    back = rotate_image(rotate_image(img, 0.3), -0.3)
    assert (back - img).abs()[central_disk(64, 0.5)].max() < 5e-3


def test_mfa_single_rotation_is_backbone():
    cfg = FeatureNetConfig(**{**TINY.__dict__, "rotation_count": 1})
    mfa = MFA(cfg)
    x = torch.rand(2, 32, 32)
    assert torch.equal(mfa(x), mfa.backbone(x.unsqueeze(1)))


def test_mfa_zero_image_without_bias():
    cfg = FeatureNetConfig(**{**TINY.__dict__, "bias": False})
    out = MFA(cfg)(torch.zeros(1, 32, 32))
    assert torch.count_nonzero(out) == 0


def test_mfa_matches_branch_enumeration():
    cfg = FeatureNetConfig(**{**TINY.__dict__, "rotation_count": 4})
    torch.manual_seed(1)
    mfa = MFA(cfg).double().eval()
    img = torch.rand(1, 1, 32, 32, dtype=torch.float64)
    branches = []
    for r in range(4):
        rotated = torch.rot90(img, r, dims=(-2, -1))
        feat = mfa.backbone(rotated)
        branches.append(torch.rot90(feat, -r, dims=(-2, -1)))
    oracle = branches[0]
    for b in branches[1:]:
        oracle = torch.maximum(oracle, b)
    torch.testing.assert_close(mfa(img), oracle, rtol=0, atol=1e-12)


@pytest.mark.parametrize("turns", [1, 2, 3])
def test_mfa_exact_equivariance_for_quarter_turns(turns):
    cfg = FeatureNetConfig(**{**TINY.__dict__, "rotation_count": 8})
    torch.manual_seed(turns)
    mfa = MFA(cfg).double().eval()
    img = torch.rand(1, 32, 32, dtype=torch.float64)
    r = turns * math.pi / 2
    with torch.no_grad():
        torch.testing.assert_close(mfa(rotate_image(img, r)), rotate_image(mfa(img), r), rtol=0, atol=1e-10)


def test_mfa_output_shape_default_config():
    mfa = MFA(FeatureNetConfig(rotation_count=2))
    with torch.no_grad():
        assert mfa(torch.rand(1, 128, 128)).shape == (1, 128, 32, 32)


def test_vit_tokens_shape():
    cfg = FeatureNetConfig(vit_depth=1)
    vit = ViTEncoder(cfg)
    with torch.no_grad():
        out = vit(torch.rand(1, 128, 32, 32))
    assert out.shape == (1, 64, 256)
    with pytest.raises(ValueError):
        vit(torch.rand(1, 64, 32, 32))


def test_vit_zero_input_zero_tokens():
    cfg = FeatureNetConfig(**{**TINY.__dict__, "bias": False})
    vit = ViTEncoder(cfg)
    with torch.no_grad():
        vit.pos_embed.zero_()
        t = vit.tokens(torch.zeros(1, 8, 8, 8)) + vit.pos_embed
    assert torch.count_nonzero(t) == 0


def test_vit_stem_is_patch_local():
    vit = ViTEncoder(TINY).eval()
    f = torch.rand(1, 8, 8, 8)
    swapped = f.clone()
    # patch (0,0) <-> patch (1,1) of the 2x2 grid of 4x4 tiles
    swapped[..., 0:4, 0:4], swapped[..., 4:8, 4:8] = f[..., 4:8, 4:8], f[..., 0:4, 0:4]
    with torch.no_grad():
        a, b = vit.tokens(f), vit.tokens(swapped)
    torch.testing.assert_close(b[:, [3, 1, 2, 0]], a)


def loop_pool(tokens, w, b):
    """Token-by-token reference for the gated pooling."""
    m, d = len(tokens), len(tokens[0])
    acc = [0.0] * d
    for i in range(m):
        z = sum(tokens[i][j] * w[j] for j in range(d)) + b
        g = 1.0 / (1.0 + math.exp(-z))
        for j in range(d):
            acc[j] += tokens[i][j] + g * tokens[i][j]
    return [a / m for a in acc]


def test_global_head_gate_limits():
    head = GlobalHead(8, 4).double()
    tokens = torch.randn(2, 5, 8, dtype=torch.float64)
    with torch.no_grad():
        head.gate.weight.zero_()
        head.gate.bias.fill_(-40.0)
        torch.testing.assert_close(head.pool(tokens), tokens.mean(1), rtol=0, atol=1e-9)
        head.gate.bias.fill_(40.0)
        torch.testing.assert_close(head.pool(tokens), 2 * tokens.mean(1), rtol=0, atol=1e-9)


def test_global_head_matches_loop_oracle():
    torch.manual_seed(0)
    head = GlobalHead(6, 3).double()
    tokens = torch.randn(7, 6, dtype=torch.float64)
    w = head.gate.weight[0].tolist()
    b = head.gate.bias.item()
    expected = loop_pool(tokens.tolist(), w, b)
    with torch.no_grad():
        torch.testing.assert_close(head.pool(tokens[None])[0], torch.tensor(expected, dtype=torch.float64))
        gates = head.gates(tokens)
    assert torch.all((gates > 0) & (gates < 1))


def test_feature_net_output_contract():
    net = FeatureNet(TINY)
    with torch.no_grad():
        out = net(torch.rand(3, 32, 32))
    assert out.shape == (3, 16) and torch.isfinite(out).all()
    with pytest.raises(ValueError):
        net(torch.rand(1, 64, 64))


def test_backbone_downsamples_by_four():
    with torch.no_grad():
        assert Backbone((4, 8, 8, 8))(torch.rand(1, 1, 32, 32)).shape == (1, 8, 8, 8)


def grad_case(seed, use_mfa=True):
    cfg = FeatureNetConfig(**{**TINY.__dict__, "use_mfa": use_mfa})
    torch.manual_seed(seed)
    net = FeatureNet(cfg).double()
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 32, 32, generator=g, dtype=torch.float64)
    w = torch.randn(4, 16, generator=g, dtype=torch.float64)
    return net, lambda: (net(x) * w).sum()


@pytest.mark.parametrize("seed", range(3))
def test_feature_net_gradient_step_1e3(seed):
    net, f = grad_case(seed)
    assert fd_relative_error(net, f, 1e-3, seed) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_feature_net_gradient_small_step(seed):
    net, f = grad_case(seed)
    assert fd_relative_error(net, f, 1e-6, seed) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_backbone_path_gradient_step_1e3(seed):
    net, f = grad_case(seed, use_mfa=False)
    assert fd_relative_error(net, f, 1e-3, seed) < 1e-4
