"""Training objectives: attenuation physics, the red-channel attenuation (RCA)
loss, multi-scale photometric reconstruction and their sum."""
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .channels import ShapeError
from .geometry import inverse_warp, intrinsics_matrix, scale_intrinsics

log = logging.getLogger(__name__)

SG_GAIN = 1.3938
F_FLOOR = 1e-6
ATTENUATION_KINDS = ("exponential", "linear", "quadratic")


@dataclass
class RCAConfig:
    g: float = SG_GAIN
    f_floor: float = F_FLOOR
    attenuation_kind: str = "exponential"
    a: float = 0.0095
    b: float = 0.05
    c: float = 1.0

    def __post_init__(self):
        if self.g <= 0:
            raise ValueError(f"g must be positive, got {self.g}")
        if not 0 < self.f_floor < 1:
            raise ValueError(f"f_floor must lie in (0, 1), got {self.f_floor}")
        if self.attenuation_kind not in ATTENUATION_KINDS:
            raise ValueError(
                f"attenuation_kind must be one of {ATTENUATION_KINDS}, got {self.attenuation_kind!r}"
            )
        coeffs = {"linear": ("a", "b"), "quadratic": ("a", "b", "c")}.get(self.attenuation_kind, ())
        for name in coeffs:
            if getattr(self, name) <= 0:
                raise ValueError(f"coefficient {name} must be positive for {self.attenuation_kind}")


@dataclass
class LossBreakdown:
    L_p: torch.Tensor
    L_2: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("L_p", "L_2", "total")}


def _check_positive(name, x):
    if bool((torch.as_tensor(x) <= 0).any()):
        raise ValueError(f"{name} must be strictly positive")


def sg_intensity(lambda_map, g: float = SG_GAIN):
    """Spherical-Gaussian luminance ``I0 = exp(g * lambda - 1)``."""
    return torch.exp(g * torch.as_tensor(lambda_map) - 1.0)


def beer_lambert_intensity(I0, mu, depth):
    """``I = I0 * exp(-mu * d)``; ``d = 0`` is accepted as the unattenuated limit."""
    mu, depth = torch.as_tensor(mu), torch.as_tensor(depth)
    _check_positive("mu", mu)
    if bool((depth < 0).any()):
        raise ValueError("depth must be non-negative")
    return I0 * torch.exp(-mu * depth)


def attenuation_variant_intensity(I0, mu_unused, depth, cfg: RCAConfig):
    """Linear ``I0 / (a d + b)`` or quadratic ``I0 / (a d^2 + b d + c)`` attenuation."""
    depth = torch.as_tensor(depth)
    if cfg.attenuation_kind == "linear":
        denom = cfg.a * depth + cfg.b
    elif cfg.attenuation_kind == "quadratic":
        denom = cfg.a * depth**2 + cfg.b * depth + cfg.c
    else:
        raise ValueError(f"no variant law for attenuation_kind={cfg.attenuation_kind!r}")
    if bool((denom == 0).any()):
        raise ZeroDivisionError("attenuation denominator is zero")
    return I0 / denom


def rca_depth(f_R, mu, lambda_map, g: float = SG_GAIN):
    """Depth implied by attenuated red intensity: ``-(ln f)/mu + (g*lambda - 1)/mu``."""
    f_R, mu = torch.as_tensor(f_R), torch.as_tensor(mu)
    if bool((f_R <= 0).any()):
        raise ValueError("f_R must be strictly positive; clamp it before calling rca_depth")
    _check_positive("mu", mu)
    return (-torch.log(f_R) + (g * lambda_map - 1.0)) / mu


def rca_depth_variant(f_R, mu, lambda_map, cfg: RCAConfig):
    """Invert the configured attenuation law for depth.

    For the linear and quadratic laws ``f = I0 / q(d)``, so ``q(d) = I0 / f`` is
    solved for the non-negative root; ``mu`` is unused by those laws.
    """
    if cfg.attenuation_kind == "exponential":
        return rca_depth(f_R, mu, lambda_map, cfg.g)
    ratio = sg_intensity(lambda_map, cfg.g) / f_R
    if cfg.attenuation_kind == "linear":
        return (ratio - cfg.b) / cfg.a
    # a d^2 + b d + (c - ratio) = 0, larger root
    disc = (cfg.b**2 - 4 * cfg.a * (cfg.c - ratio)).clamp(min=1e-12)
    return (-cfg.b + torch.sqrt(disc)) / (2 * cfg.a)


def rca_loss(d_R: torch.Tensor, d_ES: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between attenuation depth and DispNet depth."""
    if d_R.shape != d_ES.shape:
        raise ShapeError(f"rca_loss shape mismatch: {tuple(d_R.shape)} vs {tuple(d_ES.shape)}")
    return ((d_R - d_ES) ** 2).mean()


def smoothness_loss(depth: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness on mean-normalised inverse depth."""
    disp = 1.0 / depth
    disp = disp / disp.mean(dim=(2, 3), keepdim=True)
    gx = (disp[..., :, 1:] - disp[..., :, :-1]).abs()
    gy = (disp[..., 1:, :] - disp[..., :-1, :]).abs()
    ix = (img[..., :, 1:] - img[..., :, :-1]).abs().mean(1, keepdim=True)
    iy = (img[..., 1:, :] - img[..., :-1, :]).abs().mean(1, keepdim=True)
    return (gx * torch.exp(-ix)).mean() + (gy * torch.exp(-iy)).mean()


def _resize(img, size):
    if img.shape[-2:] == tuple(size):
        return img
    return F.interpolate(img, size=size, mode="area")


def photometric_loss(target, sources, depths, poses, K, smoothness_weight: float = 0.0):
    """Multi-scale L1 view-synthesis loss.

    ``depths`` is a list of (B,1,h,w) maps (one per scale), ``sources`` a list of
    source images and ``poses`` a matching list of (B,6) target->source poses.
    Each (scale, source) term is the L1 error averaged over valid pixels; terms
    are summed with equal weight. A term whose mask is entirely empty
    contributes 0.
    """
    if len(sources) == 0:
        raise ValueError("photometric_loss needs at least one source view")
    if len(poses) != len(sources):
        raise ValueError(f"got {len(sources)} sources but {len(poses)} poses")
    if torch.is_tensor(depths):
        depths = [depths]

    b, _, H, W = target.shape
    Kfull = intrinsics_matrix(K, b, target.dtype, target.device)
    total = target.new_zeros(())
    for depth in depths:
        h, w = depth.shape[-2:]
        Ks = scale_intrinsics(Kfull, w / W, h / H)
        tgt = _resize(target, (h, w))
        for src, pose in zip(sources, poses):
            warped = inverse_warp(_resize(src, (h, w)), depth, pose, Ks)
            mask = warped.validity_mask
            n = mask.sum() * tgt.shape[1]
            if float(n) == 0:
                log.warning("photometric term at %dx%d has no valid pixels", h, w)
                continue
            total = total + ((tgt - warped.synthesized).abs() * mask).sum() / n
        if smoothness_weight:
            total = total + smoothness_weight * smoothness_loss(depth, tgt)
    return total


class NonFiniteLossError(ArithmeticError):
    pass


def total_loss(L_p, L_2) -> LossBreakdown:
    """Unweighted ``L = L_p + L_2``."""
    L_p, L_2 = torch.as_tensor(L_p), torch.as_tensor(L_2)
    for name, v in (("L_p", L_p), ("L_2", L_2)):
        val = float(v.detach())
        if not math.isfinite(val):
            raise NonFiniteLossError(f"{name} is not finite ({val})")
        if val < 0:
            raise ValueError(f"{name} must be non-negative, got {val}")
    return LossBreakdown(L_p, L_2, L_p + L_2)
