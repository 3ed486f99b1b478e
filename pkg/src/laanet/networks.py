"""DispNet depth network with DenseASPP, pose CNN and the Light Attenuation U-Net."""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .channels import ShapeError
from .losses import SG_GAIN, RCAConfig, rca_depth_variant

ASPP_RATES = (3, 6, 12, 18, 24)
POSE_SCALE = 0.01
MU_FLOOR = 1e-4
LOGIT_FLOOR = -20.0


@dataclass
class DisparityActivationConfig:
    alpha: float = 10.0
    beta: float = 0.0125

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")

    @property
    def depth_range(self):
        return 1.0 / (self.alpha + self.beta), 1.0 / self.beta

    def logit_for_depth(self, depth: float) -> float:
        """Pre-activation ``x`` with ``disparity_activation(x) == depth``."""
        lo, hi = self.depth_range
        if not lo < depth < hi:
            raise ValueError(f"depth {depth} outside the open range ({lo:.4g}, {hi:.4g})")
        s = (1.0 / depth - self.beta) / self.alpha
        return math.log(s / (1.0 - s))


def disparity_activation(x, cfg: DisparityActivationConfig = DisparityActivationConfig()):
    """Bounded positive depth ``1 / (alpha * sigmoid(x) + beta)``."""
    # below about -17 (float32) sigmoid underflows and depth rounds to exactly 1/beta
    return 1.0 / (cfg.alpha * torch.sigmoid(x.clamp(min=LOGIT_FLOOR)) + cfg.beta)


def beta_for_range(max_depth_m: float) -> float:
    if max_depth_m <= 0:
        raise ValueError(f"max depth must be positive, got {max_depth_m}")
    return 1.0 / max_depth_m


def head_conv(in_ch, out_ch, k=1):
    """Linear output layer: Xavier weights, zero bias."""
    layer = nn.Conv2d(in_ch, out_ch, k, padding=(k - 1) // 2)
    nn.init.xavier_uniform_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


def conv(in_ch, out_ch, k=3, stride=1, dilation=1, relu=True):
    layer = nn.Conv2d(in_ch, out_ch, k, stride, padding=dilation * (k - 1) // 2, dilation=dilation)
    # torch's default init shrinks activations layer by layer; deep ReLU stacks need He init
    nn.init.kaiming_normal_(layer.weight, nonlinearity="relu" if relu else "linear")
    nn.init.zeros_(layer.bias)
    layers = [layer]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


def upsample(x, size=None):
    if size is None:
        return F.interpolate(x, scale_factor=2, mode="nearest")
    return F.interpolate(x, size=size, mode="nearest")


class DispEncoder(nn.Module):
    """Feature pyramid at strides 1, 2, 4, 8, 16, 32."""

    def __init__(self, in_ch=1, width=32):
        super().__init__()
        chans = [width, width, 2 * width, 4 * width, 8 * width, 8 * width]
        self.channels = chans
        self.stem = nn.Sequential(conv(in_ch, width, 7), conv(width, width))
        self.stages = nn.ModuleList()
        prev = width
        for i, ch in enumerate(chans[1:]):
            k = 5 if i == 0 else 3
            self.stages.append(nn.Sequential(conv(prev, ch, k, stride=2), conv(ch, ch)))
            prev = ch

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input spatial size {h}x{w} must be divisible by 32")
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class DenseASPP(nn.Module):
    """Densely connected dilated branches; each branch sees the input plus all earlier branches."""

    def __init__(self, in_ch, inter_ch=None, growth=None, rates=ASPP_RATES):
        super().__init__()
        inter_ch = inter_ch or in_ch // 2
        growth = growth or in_ch // 4
        self.branches = nn.ModuleList()
        ch = in_ch
        for r in rates:
            self.branches.append(nn.Sequential(conv(ch, inter_ch, 1), conv(inter_ch, growth, 3, dilation=r)))
            ch += growth
        self.project = conv(ch, in_ch, 1)
        self.out_channels = in_ch

    def forward(self, x):
        feats = x
        for branch in self.branches:
            feats = torch.cat([feats, branch(feats)], 1)
        return self.project(feats)


class DispDecoder(nn.Module):
    """Upsampling decoder with four side predictions (strides 8, 4, 2, 1).

    Light Attenuation features are concatenated into the stages at strides 4,
    2 and 1. Outputs are returned finest first.
    """

    la_strides = (4, 2, 1)
    pred_strides = (8, 4, 2, 1)

    def __init__(self, enc_channels, la_channels=0, act=DisparityActivationConfig(), init_depth=None):
        super().__init__()
        self.act = act
        self.la_channels = la_channels
        strides = (16, 8, 4, 2, 1)
        levels = (4, 3, 2, 1, 0)
        self.upconvs, self.iconvs, self.preds = nn.ModuleDict(), nn.ModuleDict(), nn.ModuleDict()
        prev = enc_channels[-1]
        for s, lvl in zip(strides, levels):
            out = max(enc_channels[lvl], 16)
            self.upconvs[str(s)] = conv(prev, out)
            in_ch = out + enc_channels[lvl]
            if s in self.pred_strides and s != 8:
                in_ch += 1
            if la_channels and s in self.la_strides:
                in_ch += la_channels
            self.iconvs[str(s)] = conv(in_ch, out)
            if s in self.pred_strides:
                self.preds[str(s)] = head_conv(out, 1, 3)
                if init_depth is not None:
                    # start where log-depth is near-linear in the logit, well clear of the near bound
                    nn.init.constant_(self.preds[str(s)].bias, act.logit_for_depth(init_depth))
            prev = out

    def forward(self, pyramid, la_skips=None):
        if self.la_channels and la_skips is None:
            raise ValueError("decoder was built with Light Attenuation inputs but none were given")
        skips = dict(zip(self.la_strides, la_skips or ()))
        x = pyramid[-1]
        prev_disp = None
        depths = {}
        for s, lvl in zip((16, 8, 4, 2, 1), (4, 3, 2, 1, 0)):
            skip = pyramid[lvl]
            x = self.upconvs[str(s)](upsample(x, skip.shape[-2:]))
            parts = [x, skip]
            if prev_disp is not None:
                parts.append(F.interpolate(prev_disp, size=skip.shape[-2:], mode="bilinear", align_corners=False))
            if s in skips:
                la = skips[s]
                if la.shape[-2:] != skip.shape[-2:]:
                    raise ShapeError(
                        f"LA skip at stride {s} is {tuple(la.shape[-2:])}, decoder expects {tuple(skip.shape[-2:])}"
                    )
                parts.append(la)
            x = self.iconvs[str(s)](torch.cat(parts, 1))
            if s in self.pred_strides:
                raw = self.preds[str(s)](x)
                prev_disp = torch.sigmoid(raw)
                depths[s] = disparity_activation(raw, self.act)
        return [depths[s] for s in (1, 2, 4, 8)]


class PoseNet(nn.Module):
    """Relative 6-DoF pose from a channel-stacked (target, source) pair."""

    def __init__(self, in_ch=1, width=16, n_convs=2):
        super().__init__()
        layers, prev = [], 2 * in_ch
        kernels = (7, 5, 3, 3, 3, 3, 3)
        for i in range(n_convs):
            ch = width * 2 ** min(i, 4)
            layers.append(conv(prev, ch, kernels[i], stride=2))
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = head_conv(prev, 6)

    def forward(self, target, sources):
        """Returns one (B, 6) pose per source view."""
        poses = []
        for src in sources:
            if src.shape != target.shape:
                raise ShapeError(f"source {tuple(src.shape)} does not match target {tuple(target.shape)}")
            out = self.head(self.features(torch.cat([target, src], 1)))
            poses.append(POSE_SCALE * out.mean(dim=(2, 3)))
        return poses


@dataclass
class LightAttenuationOutput:
    f_R: torch.Tensor
    mu_map: torch.Tensor
    lambda_map: torch.Tensor
    skip_features: list
    depth_pred: torch.Tensor


class LightAttenuationNet(nn.Module):
    """Four-level U-Net on the red plane emitting f(R), mu and lambda.

    The outputs of its last three convolution layers (all full resolution) are
    brought down to the DispNet decoder strides 4, 2, 1 by stride-2 conv
    adapters and returned as ``skip_features``.
    """

    def __init__(self, width=32, skip_channels=16, rca: RCAConfig = None, target_strides=(4, 2, 1)):
        super().__init__()
        self.rca = rca or RCAConfig()
        w = width
        chans = [w, 2 * w, 4 * w, 8 * w, 16 * w]
        self.down = nn.ModuleList()
        prev = 1
        for i, ch in enumerate(chans):
            self.down.append(nn.Sequential(conv(prev, ch), conv(ch, ch)))
            prev = ch
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for ch in reversed(chans[:-1]):
            self.up.append(conv(prev, ch))
            self.dec.append(nn.Sequential(conv(2 * ch, ch), conv(ch, ch)))
            prev = ch
        self.last = conv(prev, prev)
        self.head = head_conv(prev, 3)
        with torch.no_grad():
            self.head.bias.copy_(torch.tensor([0.0, 0.0, 1.0 / self.rca.g]))

        self.adapters = nn.ModuleList()
        for s in target_strides:
            n_down = max(int(s).bit_length() - 1, 0)
            layers = [conv(prev, skip_channels, 3, stride=2)]
            layers += [conv(skip_channels, skip_channels, 3, stride=2) for _ in range(n_down - 1)]
            if n_down == 0:
                layers = [conv(prev, skip_channels, 3)]
            self.adapters.append(nn.Sequential(*layers))
        self.skip_channels = skip_channels

    def forward(self, red):
        if red.dim() != 4 or red.shape[1] != 1:
            raise ShapeError(f"Light Attenuation input must be single-channel (B,1,H,W), got {tuple(red.shape)}")
        skips, x = [], red
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            x = up(upsample(x, skip.shape[-2:]))
            x = dec[0](torch.cat([x, skip], 1))
            penultimate = x
            x = dec[1](x)
        last_feats = [penultimate, x]
        x = self.last(x)
        last_feats.append(x)
        out = self.head(x)

        f_R = torch.sigmoid(out[:, 0:1]).clamp(self.rca.f_floor, 1.0)
        mu = F.softplus(out[:, 1:2]) + MU_FLOOR
        lam = out[:, 2:3]
        depth = rca_depth_variant(f_R, mu, lam, self.rca)
        if depth.shape[-2:] != red.shape[-2:]:
            depth = F.interpolate(depth, size=red.shape[-2:], mode="bilinear", align_corners=False)
        adapted = [a(f) for a, f in zip(self.adapters, last_feats)]
        return LightAttenuationOutput(f_R, mu, lam, adapted, depth)


class LAANet(nn.Module):
    """DispNet + DenseASPP depth branch, pose CNN and (optionally) the Light Attenuation module.

    ``use_la=False`` gives the plain baseline used for channel ablations.
    """

    def __init__(self, in_channels=1, width=32, la_width=32, pose_width=16, pose_convs=2,
                 act=DisparityActivationConfig(), rca: RCAConfig = None, use_la=True, init_depth=None):
        super().__init__()
        self.act = act
        self.use_la = use_la
        self.encoder = DispEncoder(in_channels, width)
        self.aspp = DenseASPP(self.encoder.channels[-1])
        la_ch = max(la_width // 2, 8) if use_la else 0
        self.la = LightAttenuationNet(la_width, la_ch, rca) if use_la else None
        self.decoder = DispDecoder(self.encoder.channels, la_ch, act, init_depth)
        self.pose = PoseNet(in_channels, pose_width, pose_convs)

    def depth(self, img, red=None):
        """Multi-scale depth (finest first) and the LA output (or None)."""
        pyramid = self.encoder(img)
        pyramid = pyramid[:-1] + [self.aspp(pyramid[-1])]
        la_out = None
        if self.use_la:
            if red is None:
                raise ValueError("the Light Attenuation module needs the red plane")
            la_out = self.la(red)
        depths = self.decoder(pyramid, la_out.skip_features if la_out is not None else None)
        return depths, la_out

    def forward(self, target, sources, red=None):
        depths, la_out = self.depth(target, red)
        poses = self.pose(target, sources)
        return {"depths": depths, "poses": poses, "la": la_out}
