"""Synthetic Beer-Lambert scenes with exactly known depth.

The red plane obeys ``R = exp(g*lambda - 1) * exp(-mu * d)``; green and blue
are the red plane plus zero-mean noise whose spread grows with the Rayleigh
factor of their wavelength, so shorter wavelengths carry less usable texture.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .channels import WAVELENGTH_NM, rayleigh_scattering_ratio
from .geometry import Intrinsics, pose_to_matrix
from .losses import SG_GAIN

DEPTH_KINDS = ("plane", "slope", "boxes")
MIN_DEPTH = 0.1
MAX_RANGE = 80.0
# smallest representable red intensity the oracle still trusts
CLIP_LOW = 2.0**-53


def _shape(shape):
    h, w = shape
    if h < 8 or w < 8:
        raise ValueError(f"scene shape must be at least 8x8, got {shape}")
    return int(h), int(w)


def gen_depth(kind, shape, seed=0, depth=None, near=None, far=None, axis=None, n_boxes=None,
              depth_range=(3.0, 40.0)):
    """Procedural (H, W) float64 depth map in metres.

    ``plane``: constant ``depth``. ``slope``: linear ramp ``near -> far`` along
    ``axis`` (0 = rows, 1 = columns). ``boxes``: a background plane with
    ``n_boxes`` nearer axis-aligned rectangles. Unset parameters are drawn from
    a generator seeded by ``seed``.
    """
    h, w = _shape(shape)
    rng = np.random.default_rng(seed)
    lo, hi = depth_range
    if kind == "plane":
        d = rng.uniform(lo, hi) if depth is None else depth
        out = np.full((h, w), float(d))
    elif kind == "slope":
        axis = int(rng.integers(2)) if axis is None else axis
        if near is None or far is None:
            a, b = sorted(rng.uniform(lo, hi, size=2))
            if rng.random() < 0.5:
                a, b = b, a
            near = a if near is None else near
            far = b if far is None else far
        n = h if axis == 0 else w
        ramp = near + np.arange(n) * (far - near) / (n - 1)
        out = np.repeat(ramp[:, None], w, 1) if axis == 0 else np.repeat(ramp[None, :], h, 0)
    elif kind == "boxes":
        bg = rng.uniform(0.5 * (lo + hi), hi) if depth is None else depth
        out = np.full((h, w), float(bg))
        k = int(rng.integers(1, 4)) if n_boxes is None else n_boxes
        for _ in range(k):
            bh, bw = rng.integers(h // 5, h // 2 + 1), rng.integers(w // 5, w // 2 + 1)
            y0, x0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
            out[y0:y0 + bh, x0:x0 + bw] = rng.uniform(lo, 0.8 * bg)
    else:
        raise ValueError(f"unknown depth kind {kind!r}; expected one of {DEPTH_KINDS}")
    return out.astype(np.float64)


@dataclass
class SyntheticScene:
    depth_gt: np.ndarray
    image: np.ndarray
    mu_true: np.ndarray
    lambda_true: np.ndarray
    seed: int
    g: float = SG_GAIN
    scatter_noise: float = 0.0
    params: dict = field(default_factory=dict)

    @property
    def red(self):
        return self.image[0]


def red_plane(depth, mu, lambda_map, g=SG_GAIN):
    """Unclipped Beer-Lambert red intensity (numpy, float64)."""
    return np.exp(g * np.asarray(lambda_map) - 1.0) * np.exp(-np.asarray(mu) * np.asarray(depth))


def scatter_channels(red, scatter_noise, rng):
    """Green/blue planes: red plus Rayleigh-scaled Gaussian noise, clipped to [0, 1]."""
    planes = [red]
    for ch in ("G", "B"):
        std = scatter_noise * rayleigh_scattering_ratio(WAVELENGTH_NM[ch], WAVELENGTH_NM["R"])
        noisy = red + (rng.normal(0.0, std, red.shape) if std > 0 else 0.0)
        planes.append(np.clip(noisy, 0.0, 1.0))
    return np.stack(planes, 0)


def render_scene(depth, mu, lambda_map, g=SG_GAIN, scatter_noise=0.0, seed=0):
    depth = np.asarray(depth, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), depth.shape).copy()
    lam = np.broadcast_to(np.asarray(lambda_map, dtype=np.float64), depth.shape).copy()
    if (mu <= 0).any():
        raise ValueError("mu must be strictly positive")
    if scatter_noise < 0:
        raise ValueError("scatter_noise must be non-negative")
    red = np.clip(red_plane(depth, mu, lam, g), 0.0, 1.0)
    image = scatter_channels(red, scatter_noise, np.random.default_rng(seed))
    return SyntheticScene(depth, image, mu, lam, seed, g, scatter_noise)


def oracle_depth_from_image(scene: SyntheticScene, g=None):
    """Invert the red plane with the true mu/lambda.

    Returns ``(depth, valid)``; pixels saturated at 0 or 1 are invalid and
    hold NaN.
    """
    if scene.scatter_noise > 0:
        raise ValueError("oracle inversion requires a scene rendered with scatter_noise = 0")
    g = scene.g if g is None else g
    red = scene.red
    valid = (red > CLIP_LOW) & (red < 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (g * scene.lambda_true - 1.0 - np.log(red)) / scene.mu_true
    return np.where(valid, d, np.nan), valid


def random_pose(rng, sign=1.0, max_t=(0.35, 0.05, 0.1), max_rot=0.005, min_tx=0.15):
    """Small mostly-lateral camera motion; ``sign`` flips direction for t-1 vs t+1."""
    tx = sign * rng.uniform(min_tx, max_t[0])
    ty = rng.uniform(-max_t[1], max_t[1])
    tz = sign * rng.uniform(0.0, max_t[2])
    rot = rng.uniform(-max_rot, max_rot, size=3)
    return np.array([*rot, tx, ty, tz])


def default_intrinsics(h, w, focal_scale=1.0):
    """Pinhole camera with focal length ``focal_scale * w`` and a centred principal point."""
    f = float(focal_scale * w)
    return Intrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0)


@dataclass
class SyntheticTriplet:
    target: np.ndarray  # (3, H, W)
    sources: list  # two (3, H, W)
    depth_gt: np.ndarray  # (H, W)
    poses: np.ndarray  # (2, 6) target->source
    intrinsics: Intrinsics
    scene: SyntheticScene


def _area_down(arr, f):
    h, w = arr.shape[-2] // f, arr.shape[-1] // f
    return arr.reshape(*arr.shape[:-2], h, f, w, f).mean(axis=(-3, -1))


@dataclass
class PlanarPatch:
    """Plane ``normal . X = offset`` in the target camera frame.

    ``bounds = (x0, x1, y0, y1)`` limits a patch to a rectangle in world X, Y
    (used for the fronto-parallel boxes); ``None`` means unbounded.
    """

    normal: np.ndarray
    offset: float
    bounds: tuple = None


def scene_layout(kind, rng, K: Intrinsics, shape, depth_range=(5.0, 40.0), box_depth_frac=(0.5, 0.8)):
    """Planar patches for a ``plane``, ``slope`` or ``boxes`` scene as seen from the target camera.

    Boxes sit at ``box_depth_frac`` times the background depth.
    """
    h, w = shape
    lo, hi = depth_range
    far = PlanarPatch(np.array([0.0, 0.0, 1.0]), MAX_RANGE)  # catches rays that miss everything else
    if kind == "plane":
        return [PlanarPatch(np.array([0.0, 0.0, 1.0]), rng.uniform(lo, hi)), far]
    if kind == "slope":
        # inverse depth is linear in image coordinates on a 3-D plane
        axis = int(rng.integers(2))
        a, b = rng.uniform(lo, hi, size=2)
        n = w if axis == 1 else h
        c, f = (K.cx, K.fx) if axis == 1 else (K.cy, K.fy)
        xi0, xi1 = (-0.5 - c) / f, (n - 0.5 - c) / f
        q = (1.0 / b - 1.0 / a) / (xi1 - xi0)
        p = 1.0 / a - q * xi0
        normal = np.array([q, 0.0, p]) if axis == 1 else np.array([0.0, q, p])
        return [PlanarPatch(normal, 1.0), far]
    if kind == "boxes":
        bg = rng.uniform(0.5 * (lo + hi), hi)
        patches = []
        for _ in range(int(rng.integers(1, 4))):
            bh, bw = rng.integers(h // 5, h // 2 + 1), rng.integers(w // 5, w // 2 + 1)
            y0, x0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
            d = bg * rng.uniform(*box_depth_frac)
            bounds = ((x0 - 0.5 - K.cx) / K.fx * d, (x0 + bw - 0.5 - K.cx) / K.fx * d,
                      (y0 - 0.5 - K.cy) / K.fy * d, (y0 + bh - 0.5 - K.cy) / K.fy * d)
            patches.append(PlanarPatch(np.array([0.0, 0.0, 1.0]), d, bounds))
        return patches + [PlanarPatch(np.array([0.0, 0.0, 1.0]), bg), far]
    raise ValueError(f"unknown depth kind {kind!r}; expected one of {DEPTH_KINDS}")


def _subpixel_grid(h, w, f):
    """Sample positions of an ``f x f`` supersampling of each pixel (centres on integers)."""
    off = (np.arange(f) + 0.5) / f - 0.5
    us = (np.arange(w)[:, None] + off[None, :]).reshape(-1)
    vs = (np.arange(h)[:, None] + off[None, :]).reshape(-1)
    return np.meshgrid(us, vs)


def ray_cast(patches, K: Intrinsics, pose, u, v):
    """Nearest patch hit for pixels ``(u, v)`` of a camera at ``pose`` (target->camera).

    Returns ``(z, X)``: depth along that camera's optical axis and the world point.
    """
    T = pose_to_matrix(torch.as_tensor(np.asarray(pose, dtype=np.float64))[None])[0].numpy()
    R, t = T[:3, :3], T[:3, 3]
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1)  # camera frame, z = 1
    origin = -R.T @ t
    dirs = rays @ R  # rows are R^T ray
    best = np.full(u.shape, np.inf)
    for patch in patches:
        denom = dirs @ patch.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (patch.offset - origin @ patch.normal) / denom
        ok = np.isfinite(s) & (s > 1e-6)
        if patch.bounds is not None:
            X = origin + s[..., None] * dirs
            x0, x1, y0, y1 = patch.bounds
            ok &= (X[..., 0] >= x0) & (X[..., 0] < x1) & (X[..., 1] >= y0) & (X[..., 1] < y1)
        best = np.where(ok & (s < best), s, best)
    if not np.isfinite(best).all():
        raise RuntimeError("ray missed every patch")
    return best, origin + best[..., None] * dirs


@dataclass
class SolidTexture:
    """Zero-mean sum of plane waves over world space, unit standard deviation."""

    freqs: np.ndarray  # (K, 3) angular wave vectors
    phases: np.ndarray  # (K,)

    @classmethod
    def random(cls, rng, wavelengths, waves_per_octave=8):
        dirs = rng.standard_normal((len(wavelengths) * waves_per_octave, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        k = 2 * np.pi / np.repeat(np.asarray(wavelengths, dtype=np.float64), waves_per_octave)
        return cls(dirs * k[:, None], rng.uniform(0, 2 * np.pi, len(k)))

    def __call__(self, X):
        return np.sin(X @ self.freqs.T + self.phases).sum(-1) / np.sqrt(len(self.phases) / 2.0)


def make_triplet(seed, shape=(64, 64), kind=None, scatter_noise=0.05, g=SG_GAIN, mu_range=(0.04, 0.06),
                 depth_range=(5.0, 40.0), box_depth_frac=(0.5, 0.8), focal_scale=1.0, supersample=3,
                 texture_amplitude=0.2, texture_px=(5.0, 10.0, 20.0), parallax_px=(2.0, 5.0)):
    """Target frame plus two neighbour views of one static planar scene.

    Every frame is ray-cast from its own camera, so the views are exactly
    multi-view consistent (occlusions included) and each obeys
    ``R = exp(g*lambda - 1) * exp(-mu * z)`` with ``z`` that camera's depth.
    ``lambda`` is a solid texture fixed to the scene, with octave wavelengths
    ``texture_px`` pixels at the scene's median depth. Frames are rendered
    ``supersample`` times finer and area-averaged; ground truth is the depth
    at each pixel centre. Lateral baselines give ``parallax_px`` pixels of
    parallax at the median depth. Scatter noise is drawn independently per frame.
    """
    h, w = _shape(shape)
    f = int(supersample)
    if f < 1 or f % 2 == 0:
        raise ValueError("supersample must be a positive odd integer")
    rng = np.random.default_rng(seed)
    kind = DEPTH_KINDS[int(rng.integers(len(DEPTH_KINDS)))] if kind is None else kind
    K = default_intrinsics(h, w, focal_scale)
    patches = scene_layout(kind, rng, K, (h, w), depth_range, box_depth_frac)
    mu = rng.uniform(*mu_range)
    uc, vc = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    depth_c, X_c = ray_cast(patches, K, np.zeros(6), uc, vc)
    px = np.median(depth_c) / K.fx  # metres per pixel at the median depth
    poses = np.stack([random_pose(rng, sgn, (parallax_px[1], 0.3, 1.0), min_tx=parallax_px[0]) for sgn in (-1.0, 1.0)])
    poses[:, 3:] *= px
    texture = SolidTexture.random(rng, px * np.asarray(texture_px))
    lam_c = 1.0 / g + texture_amplitude * texture(X_c)

    u, v = _subpixel_grid(h, w, f)
    reds = []
    for pose in (np.zeros(6), *poses):
        z, X = ray_cast(patches, K, pose, u, v)
        lam = 1.0 / g + texture_amplitude * texture(X)
        reds.append(_area_down(np.clip(red_plane(z, mu, lam, g), 0.0, 1.0), f))
    frames = [scatter_channels(r, scatter_noise, rng) for r in reds]

    scene = SyntheticScene(depth_c, frames[0], np.full((h, w), mu), lam_c, seed, g, scatter_noise,
                           {"kind": kind, "supersample": f})
    return SyntheticTriplet(frames[0], frames[1:], depth_c, poses, K, scene)


def export_scene(scene: SyntheticScene, out_dir):
    """Write depth (16-bit PNG, metres * 256), image (8-bit RGB PNG) and params.json."""
    from .data import save_depth_png, save_image_png

    os.makedirs(out_dir, exist_ok=True)
    save_depth_png(os.path.join(out_dir, "depth.png"), scene.depth_gt)
    save_image_png(os.path.join(out_dir, "image.png"), scene.image)
    params = {
        "seed": scene.seed,
        "g": scene.g,
        "scatter_noise": scene.scatter_noise,
        "mu_mean": float(np.mean(scene.mu_true)),
        "lambda_mean": float(np.mean(scene.lambda_true)),
        **scene.params,
    }
    with open(os.path.join(out_dir, "params.json"), "w") as f:
        json.dump(params, f, indent=2)
    np.savez_compressed(os.path.join(out_dir, "fields.npz"), mu=scene.mu_true, lam=scene.lambda_true)
