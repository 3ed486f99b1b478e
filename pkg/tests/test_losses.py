import logging
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from fdcheck import max_rel_error
from laanet.geometry import Intrinsics
from laanet.losses import (
    NonFiniteLossError,
    RCAConfig,
    attenuation_variant_intensity,
    beer_lambert_intensity,
    photometric_loss,
    rca_depth,
    rca_depth_variant,
    rca_loss,
    sg_intensity,
    total_loss,
)

G = 1.3938
t64 = lambda *v: torch.tensor(v, dtype=torch.float64)


def test_sg_examples():
    assert sg_intensity(t64(1 / G), G).item() == pytest.approx(1.0, abs=1e-15)
    assert sg_intensity(t64(1.0), G).item() == pytest.approx(1.482603998221052, rel=1e-12)
    assert sg_intensity(t64(0.0), G).item() == pytest.approx(math.exp(-1), rel=1e-15)


def test_beer_lambert_examples():
    assert beer_lambert_intensity(t64(0.7), t64(0.3), t64(0.0)).item() == pytest.approx(0.7)
    assert beer_lambert_intensity(1.0, t64(0.05), t64(10.0)).item() == pytest.approx(0.6065306597126334, rel=1e-14)
    mu, d = t64(0.08), t64(7.0)
    one = beer_lambert_intensity(1.0, mu, d)
    two = beer_lambert_intensity(1.0, mu, 2 * d)
    assert two.item() == pytest.approx(one.item() ** 2, rel=1e-14)


@pytest.mark.parametrize("mu,d", [(0.0, 1.0), (-0.1, 1.0), (0.1, -1.0)])
def test_beer_lambert_domain(mu, d):
    with pytest.raises(ValueError):
        beer_lambert_intensity(1.0, t64(mu), t64(d))


def test_variant_examples():
    lin = RCAConfig(attenuation_kind="linear")
    quad = RCAConfig(attenuation_kind="quadratic")
    assert attenuation_variant_intensity(1.0, None, t64(10.0), lin).item() == pytest.approx(6.8965517241379315)
    assert attenuation_variant_intensity(2.5, None, t64(0.0), quad).item() == pytest.approx(2.5)
    # a*d + b = 1 at d = 100
    assert attenuation_variant_intensity(3.0, None, t64(100.0), lin).item() == pytest.approx(3.0, rel=1e-12)


def test_variant_zero_denominator():
    cfg = RCAConfig(attenuation_kind="linear")
    with pytest.raises(ZeroDivisionError):
        attenuation_variant_intensity(1.0, None, t64(-cfg.b / cfg.a), cfg)


def test_variant_requires_variant_kind():
    with pytest.raises(ValueError):
        attenuation_variant_intensity(1.0, None, t64(1.0), RCAConfig())


@pytest.mark.parametrize("kind", ["linear", "quadratic"])
def test_variant_inversion(kind):
    cfg = RCAConfig(attenuation_kind=kind)
    d = torch.linspace(0.5, 80, 50, dtype=torch.float64)
    lam = torch.linspace(-1, 1, 50, dtype=torch.float64)
    f = attenuation_variant_intensity(sg_intensity(lam, G), None, d, cfg)
    assert torch.allclose(rca_depth_variant(f, None, lam, cfg), d, rtol=1e-9)


def test_rca_config_validation():
    with pytest.raises(ValueError):
        RCAConfig(g=0)
    with pytest.raises(ValueError):
        RCAConfig(f_floor=1.5)
    with pytest.raises(ValueError):
        RCAConfig(attenuation_kind="cubic")
    with pytest.raises(ValueError):
        RCAConfig(attenuation_kind="quadratic", c=0.0)


def test_rca_depth_examples():
    mu, lam, d = t64(0.05), t64(1.0), t64(10.0)
    f = sg_intensity(lam, G) * torch.exp(-mu * d)
    assert rca_depth(f, mu, lam, G).item() == pytest.approx(10.0, abs=1e-12)
    assert rca_depth(t64(1.0), t64(0.3), t64(1 / G), G).item() == pytest.approx(0.0, abs=1e-15)
    a = rca_depth(t64(0.4), t64(0.2), t64(0.3), G)
    b = rca_depth(t64(0.4), t64(0.1), t64(0.3), G)
    assert b.item() == pytest.approx(2 * a.item(), rel=1e-14)


def test_rca_depth_rejects_nonpositive_f():
    with pytest.raises(ValueError):
        rca_depth(t64(0.0), t64(0.1), t64(0.0))


@given(st.floats(0.1, 80), st.floats(1e-3, 1), st.floats(-2, 2))
@settings(max_examples=200, deadline=None)
def test_physics_inversion_identity(d, mu, lam):
    f = beer_lambert_intensity(sg_intensity(t64(lam), G), t64(mu), t64(d))
    assert abs(rca_depth(f, t64(mu), t64(lam), G).item() - d) <= 1e-10 * d


@given(st.floats(1e-4, 0.99), st.floats(1.001, 1.5), st.floats(1e-3, 1), st.floats(-2, 2), st.floats(0.01, 1))
def test_rca_depth_monotonicity(f, ratio, mu, lam, dlam):
    f2 = min(f * ratio, 1.0)
    assert rca_depth(t64(f2), t64(mu), t64(lam)) < rca_depth(t64(f), t64(mu), t64(lam))
    assert rca_depth(t64(f), t64(mu), t64(lam + dlam)) > rca_depth(t64(f), t64(mu), t64(lam))


def test_rca_loss_examples():
    a = torch.rand(2, 1, 4, 4)
    assert rca_loss(a, a).item() == 0
    assert rca_loss(torch.full((1, 1, 3, 3), 2.0), torch.zeros(1, 1, 3, 3)).item() == 4
    assert rca_loss(t64(1, 3), t64(1, 1)).item() == 2


def test_rca_loss_shape_mismatch():
    from laanet.channels import ShapeError

    with pytest.raises(ShapeError):
        rca_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))


def test_rca_loss_gradients_fd():
    torch.manual_seed(0)
    shape = (1, 1, 8, 8)
    f = torch.rand(shape, dtype=torch.float64) * 0.8 + 0.1
    mu = torch.rand(shape, dtype=torch.float64) * 0.5 + 0.05
    lam = torch.rand(shape, dtype=torch.float64) * 2 - 1
    d_es = torch.rand(shape, dtype=torch.float64) * 20 + 1

    def L(f, mu, lam, d_es):
        return rca_loss(rca_depth(f, mu, lam, G), d_es)

    err, _ = max_rel_error(L, [f, mu, lam, d_es])
    assert err <= 1e-4


K8 = Intrinsics(8.0, 8.0, 3.5, 3.5)


def multi_scale(depth):
    import torch.nn.functional as F

    return [depth] + [F.interpolate(depth, scale_factor=0.5 ** s, mode="area") for s in (1, 2)]


def test_photometric_zero_for_identity():
    img = torch.rand(2, 3, 16, 16)
    depth = torch.rand(2, 1, 16, 16) * 5 + 1
    zero = torch.zeros(2, 6)
    assert photometric_loss(img, [img, img], multi_scale(depth), [zero, zero], K8).item() <= 1e-6


def test_photometric_constant_l1():
    tgt = torch.zeros(1, 1, 8, 8)
    src = torch.ones(1, 1, 8, 8)
    depth = torch.ones(1, 1, 8, 8)
    loss = photometric_loss(tgt, [src, src], [depth], [torch.zeros(1, 6)] * 2, K8)
    assert loss.item() == pytest.approx(2.0)  # one per source view


def test_photometric_all_invalid_contributes_zero(caplog):
    tgt = torch.zeros(1, 1, 8, 8)
    src = torch.ones(1, 1, 8, 8)
    depth = torch.ones(1, 1, 8, 8)
    away = torch.tensor([[0, 0, 0, 1000.0, 0, 0]])
    with caplog.at_level(logging.WARNING):
        loss = photometric_loss(tgt, [src, src], [depth], [away, torch.zeros(1, 6)], K8)
    assert loss.item() == pytest.approx(1.0)
    assert "no valid pixels" in caplog.text


def test_photometric_requires_sources():
    with pytest.raises(ValueError):
        photometric_loss(torch.zeros(1, 1, 8, 8), [], [torch.ones(1, 1, 8, 8)], [], K8)


def test_photometric_permutation_invariant():
    torch.manual_seed(2)
    tgt, s1, s2 = (torch.rand(1, 3, 16, 16, dtype=torch.float64) for _ in range(3))
    depth = multi_scale(torch.rand(1, 1, 16, 16, dtype=torch.float64) * 4 + 2)
    p1 = torch.tensor([[0.01, 0, 0.02, 0.3, 0.1, 0.0]], dtype=torch.float64)
    p2 = torch.tensor([[0, -0.01, 0, -0.2, 0.0, 0.1]], dtype=torch.float64)
    a = photometric_loss(tgt, [s1, s2], depth, [p1, p2], K8)
    b = photometric_loss(tgt, [s2, s1], depth, [p2, p1], K8)
    assert a.item() == pytest.approx(b.item(), rel=1e-14)


def test_photometric_gradients_fd():
    torch.manual_seed(4)
    tgt = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    src = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    depth = torch.rand(1, 1, 8, 8, dtype=torch.float64) + 4
    pose = torch.tensor([[0.011, -0.007, 0.013, 0.061, 0.043, 0.052]], dtype=torch.float64)

    def L(depth, pose, src):
        return photometric_loss(tgt, [src], [depth], [pose], K8)

    err, errs = max_rel_error(L, [depth, pose, src])
    assert err <= 1e-4, errs


def test_smoothness_flag_adds_term():
    img = torch.rand(1, 1, 8, 8)
    depth = torch.rand(1, 1, 8, 8) + 1
    zero = [torch.zeros(1, 6)]
    base = photometric_loss(img, [img], [depth], zero, K8)
    smooth = photometric_loss(img, [img], [depth], zero, K8, smoothness_weight=0.1)
    assert smooth > base


def test_total_loss():
    assert total_loss(0.0, 0.0).total.item() == 0
    assert total_loss(0.3, 0.2).total.item() == pytest.approx(0.5)
    small = total_loss(t64(1e-8), t64(2e-8))
    assert small.total.item() == pytest.approx(3e-8, rel=1e-12) and small.total.item() > 0
    b = total_loss(t64(0.25), t64(0.125))
    assert b.total.item() == b.L_p.item() + b.L_2.item()


@pytest.mark.parametrize("bad,name", [((float("nan"), 0.0), "L_p"), ((0.0, float("inf")), "L_2")])
def test_total_loss_nonfinite(bad, name):
    with pytest.raises(NonFiniteLossError, match=name):
        total_loss(*bad)


def test_total_loss_negative():
    with pytest.raises(ValueError):
        total_loss(-1.0, 0.0)
