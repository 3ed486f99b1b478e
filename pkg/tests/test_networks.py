import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from laanet.channels import ShapeError
from laanet.geometry import Intrinsics
from laanet.losses import photometric_loss
from laanet.networks import (ASPP_RATES, DenseASPP, DispEncoder, DisparityActivationConfig, LAANet,
                             LightAttenuationNet, PoseNet, beta_for_range, disparity_activation)


def test_activation_examples():
    assert disparity_activation(torch.tensor(0.0)).item() == pytest.approx(1 / 5.0125, rel=1e-6)
    assert disparity_activation(torch.tensor(-100.0)).item() == pytest.approx(80.0, rel=1e-5)  # limit, never reached
    assert disparity_activation(torch.tensor(100.0)).item() == pytest.approx(1 / 10.0125, rel=1e-6)


@pytest.mark.parametrize("m,beta", [(80, 0.0125), (40, 0.025), (50, 0.02), (60, 1 / 60)])
def test_beta_for_range(m, beta):
    assert beta_for_range(m) == pytest.approx(beta)


def test_beta_for_range_rejects_nonpositive():
    with pytest.raises(ValueError):
        beta_for_range(0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-15, 15), st.floats(1e-3, 5))
def test_activation_bounded_and_decreasing(x, dx):
    cfg = DisparityActivationConfig()
    lo, hi = cfg.depth_range
    a, b = disparity_activation(torch.tensor([x, x + dx], dtype=torch.float64), cfg)
    assert lo < a < hi and lo < b < hi
    assert b < a


def test_logit_for_depth_roundtrip():
    cfg = DisparityActivationConfig()
    for d in (0.15, 1.0, 20.0, 79.0):
        assert disparity_activation(torch.tensor(cfg.logit_for_depth(d), dtype=torch.float64)).item() == \
            pytest.approx(d, rel=1e-9)
    with pytest.raises(ValueError):
        cfg.logit_for_depth(90.0)


@pytest.mark.parametrize("h,w", [(64, 64), (192, 640)])
def test_encoder_pyramid(h, w):
    enc = DispEncoder(1, 8)
    pyr = enc(torch.rand(2, 1, h, w))
    assert [p.shape[-2:] for p in pyr] == [(h // 2**k, w // 2**k) for k in range(6)]
    assert all(p.shape[0] == 2 for p in pyr)


def test_encoder_rejects_indivisible():
    with pytest.raises(ShapeError):
        DispEncoder(1, 8)(torch.rand(1, 1, 48, 64))


def test_aspp_preserves_size_and_dense_wiring():
    aspp = DenseASPP(8)
    assert [b[1][0].dilation[0] for b in aspp.branches] == list(ASPP_RATES)
    for size in (1, 3, 7):
        assert aspp(torch.rand(1, 8, size, size)).shape == (1, 8, size, size)
    # branch i consumes input + all previous outputs
    ins = [b[0][0].in_channels for b in aspp.branches]
    assert all(b > a for a, b in zip(ins, ins[1:]))


def test_aspp_zero_weights_gives_constant_bias():
    aspp = DenseASPP(4)
    with torch.no_grad():
        for p in aspp.parameters():
            p.zero_()
        aspp.project[0].bias.fill_(0.3)
    out = aspp(torch.rand(1, 4, 9, 9))
    assert torch.allclose(out, torch.full_like(out, 0.3))


def test_aspp_receptive_field():
    """Gradient of the centre output reaches at least 2*24*(3-1)+1 = 97 pixels across."""
    aspp = DenseASPP(8)
    x = torch.rand(1, 8, 129, 129, requires_grad=True)
    aspp(x)[0, :, 64, 64].sum().backward()
    cols = (x.grad.abs().sum((0, 1, 2)) > 0).nonzero()
    extent = int(cols.max() - cols.min()) + 1
    assert extent >= 2 * 24 * 2 + 1


def _model(use_la=True):
    torch.manual_seed(0)
    return LAANet(1, 8, 8, use_la=use_la, init_depth=1.0)


def test_decoder_outputs_four_scales():
    m = _model()
    img = torch.rand(2, 1, 64, 64)
    depths, la = m.depth(img, img)
    assert [d.shape[-1] for d in depths] == [64, 32, 16, 8]
    assert depths[0].shape == (2, 1, 64, 64)
    assert la.depth_pred.shape == (2, 1, 64, 64)


def test_init_depth_sets_starting_depth():
    m = LAANet(1, 8, 8, use_la=False, init_depth=2.0)
    with torch.no_grad():
        for name, p in m.decoder.named_parameters():
            if name.startswith("preds") and name.endswith("weight"):
                p.zero_()
    depths, _ = m.depth(torch.rand(1, 1, 64, 64))
    assert torch.allclose(depths[0], torch.full_like(depths[0], 2.0), rtol=1e-5)


def test_la_skips_affect_output():
    m = _model()
    img = torch.rand(1, 1, 64, 64)
    pyr = m.encoder(img)
    pyr = pyr[:-1] + [m.aspp(pyr[-1])]
    skips = [s.detach().requires_grad_() for s in m.la(img).skip_features]
    m.decoder(pyr, skips)[0].sum().backward()
    assert all(float(s.grad.abs().sum()) > 0 for s in skips)


def test_la_skip_shapes_match_decoder_strides():
    la = LightAttenuationNet(8, 4)
    out = la(torch.rand(1, 1, 64, 64))
    assert [f.shape[-1] for f in out.skip_features] == [16, 32, 64]


def test_la_output_split_and_ranges():
    la = LightAttenuationNet(8, 4)
    out = la(torch.rand(2, 1, 32, 32) * 10 - 5)
    for t in (out.f_R, out.mu_map, out.lambda_map):
        assert t.shape == (2, 1, 32, 32)
    assert (out.mu_map > 0).all()
    assert (out.f_R >= 1e-6).all() and (out.f_R <= 1).all()
    assert la.head.out_channels == 3
    assert la.head.bias[2].item() == pytest.approx(1 / 1.3938, rel=1e-6)


def test_la_rejects_multichannel():
    with pytest.raises(ShapeError):
        LightAttenuationNet(8, 4)(torch.rand(1, 3, 32, 32))


def test_la_deterministic():
    la = LightAttenuationNet(8, 4).eval()
    x = torch.rand(1, 1, 32, 32)
    a, b = la(x), la(x)
    assert torch.equal(a.depth_pred, b.depth_pred)
    assert all(torch.equal(p, q) for p, q in zip(a.skip_features, b.skip_features))


def test_pose_arity_and_shape_check():
    net = PoseNet(3)
    t = torch.rand(2, 3, 64, 64)
    poses = net(t, [torch.rand_like(t), torch.rand_like(t)])
    assert len(poses) == 2 and all(p.shape == (2, 6) for p in poses)
    with pytest.raises(ShapeError):
        net(t, [torch.rand(2, 3, 32, 32)])


def test_zero_pose_head_gives_identity_warp():
    net = PoseNet(1)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    tgt, src = torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 32)
    (pose,) = net(tgt, [src])
    assert torch.equal(pose, torch.zeros(1, 6))
    depth = torch.rand(1, 1, 32, 32) + 1
    L = photometric_loss(tgt, [src], [depth], [pose], Intrinsics(32, 32, 15.5, 15.5))
    assert L.item() == pytest.approx((tgt - src).abs().mean().item(), rel=1e-5)


@pytest.mark.parametrize("use_la", [True, False])
def test_end_to_end_finite(use_la):
    m = _model(use_la)
    x = torch.rand(3, 1, 64, 64)
    out = m(x, [torch.rand_like(x), torch.rand_like(x)], x)
    assert all(d.shape[0] == 3 and torch.isfinite(d).all() for d in out["depths"])
    assert all(torch.isfinite(p).all() for p in out["poses"])
    assert (out["la"] is None) != use_la
    lo, hi = m.act.depth_range
    assert all(((d > lo) & (d < hi)).all() for d in out["depths"])


def test_la_needs_red():
    with pytest.raises(ValueError):
        _model().depth(torch.rand(1, 1, 64, 64))


def test_activation_million_inputs():
    for dtype in (torch.float32, torch.float64):
        x = torch.randn(10**6, dtype=dtype) * 50
        d = disparity_activation(x)
        assert float(d.min()) > 0.0998 and float(d.max()) < 80.0
        assert not math.isnan(float(d.sum()))
