"""Pinhole camera, Euler-angle poses and differentiable inverse warping.

Conventions used throughout the package:

* pixel centres sit on integer coordinates, origin top-left, ``x`` along width;
* a pose is a ``(B, 6)`` tensor ``[rx, ry, rz, tx, ty, tz]`` holding intrinsic
  X-Y-Z Euler angles (radians) and a translation (metres);
* a pose predicted for a (target, source) pair maps target-camera coordinates
  into the source camera.
"""
from dataclasses import dataclass

import torch

from .channels import ShapeError

MIN_PROJECTED_DEPTH = 1e-3
# slack (pixels) absorbing round-off when border pixels reproject onto themselves
BORDER_TOL = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=dtype,
            device=device,
        )

    def scaled(self, sx: float, sy: float = None) -> "Intrinsics":
        """Intrinsics after resizing the image by ``sx`` (and ``sy``).

        Pixel centres are on integer coordinates, so the principal point maps
        as ``c' = (c + 0.5) * s - 0.5``.
        """
        sy = sx if sy is None else sy
        return Intrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5
        )

    def cropped(self, dx: float, dy: float) -> "Intrinsics":
        return Intrinsics(self.fx, self.fy, self.cx - dx, self.cy - dy)

    def as_tuple(self):
        return (self.fx, self.fy, self.cx, self.cy)


def intrinsics_matrix(K, batch: int, dtype, device) -> torch.Tensor:
    """Normalise an Intrinsics / (3,3) / (B,3,3) input to a (B,3,3) tensor."""
    if isinstance(K, Intrinsics):
        K = K.matrix(dtype=dtype, device=device)
    K = torch.as_tensor(K, dtype=dtype, device=device)
    if K.dim() == 2:
        K = K.unsqueeze(0)
    if K.shape[-2:] != (3, 3):
        raise ShapeError(f"intrinsics must be 3x3, got {tuple(K.shape)}")
    return K.expand(batch, 3, 3)


def scale_intrinsics(K: torch.Tensor, sx: float, sy: float) -> torch.Tensor:
    """Tensor counterpart of :meth:`Intrinsics.scaled` for (B,3,3) matrices."""
    K = K.clone()
    K[:, 0, 0] = K[:, 0, 0] * sx
    K[:, 1, 1] = K[:, 1, 1] * sy
    K[:, 0, 2] = (K[:, 0, 2] + 0.5) * sx - 0.5
    K[:, 1, 2] = (K[:, 1, 2] + 0.5) * sy - 0.5
    return K


def euler_to_rotation(angles: torch.Tensor) -> torch.Tensor:
    """(B,3) intrinsic XYZ Euler angles -> (B,3,3) rotation ``Rx @ Ry @ Rz``."""
    a, b, c = angles.unbind(-1)
    ca, sa = torch.cos(a), torch.sin(a)
    cb, sb = torch.cos(b), torch.sin(b)
    cc, sc = torch.cos(c), torch.sin(c)
    zero, one = torch.zeros_like(a), torch.ones_like(a)

    rx = torch.stack([one, zero, zero, zero, ca, -sa, zero, sa, ca], -1).view(-1, 3, 3)
    ry = torch.stack([cb, zero, sb, zero, one, zero, -sb, zero, cb], -1).view(-1, 3, 3)
    rz = torch.stack([cc, -sc, zero, sc, cc, zero, zero, zero, one], -1).view(-1, 3, 3)
    return rx @ ry @ rz


def rotation_to_euler(R: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`euler_to_rotation` (away from gimbal lock)."""
    sb = R[:, 0, 2].clamp(-1.0, 1.0)
    b = torch.asin(sb)
    a = torch.atan2(-R[:, 1, 2], R[:, 2, 2])
    c = torch.atan2(-R[:, 0, 1], R[:, 0, 0])
    return torch.stack([a, b, c], -1)


def pose_to_matrix(pose: torch.Tensor) -> torch.Tensor:
    """(B,6) pose -> (B,4,4) homogeneous rigid transform ``[R|t; 0 0 0 1]``."""
    pose = torch.as_tensor(pose)
    if pose.dim() == 1:
        pose = pose.unsqueeze(0)
    R = euler_to_rotation(pose[:, :3])
    t = pose[:, 3:].unsqueeze(-1)
    bottom = torch.zeros(pose.shape[0], 1, 4, dtype=pose.dtype, device=pose.device)
    bottom[:, 0, 3] = 1.0
    return torch.cat([torch.cat([R, t], -1), bottom], 1)


def matrix_to_pose(T: torch.Tensor) -> torch.Tensor:
    return torch.cat([rotation_to_euler(T[:, :3, :3]), T[:, :3, 3]], -1)


def invert_pose(pose: torch.Tensor) -> torch.Tensor:
    """6-DoF pose of the inverse rigid transform."""
    return matrix_to_pose(torch.linalg.inv(pose_to_matrix(pose)))


def pixel_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(3, H, W) homogeneous pixel coordinates ``(x, y, 1)``."""
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys, torch.ones_like(xs)], 0)


def backproject(depth: torch.Tensor, K) -> torch.Tensor:
    """(B,1,H,W) depth -> (B,3,H,W) camera-frame points ``d * K^-1 (u, v, 1)``."""
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise ShapeError(f"depth must be (B,1,H,W), got {tuple(depth.shape)}")
    if bool((depth <= 0).any()):
        raise ValueError("depth must be strictly positive for backprojection")
    b, _, h, w = depth.shape
    Kb = intrinsics_matrix(K, b, depth.dtype, depth.device)
    rays = torch.linalg.inv(Kb) @ pixel_grid(h, w, depth.dtype, depth.device).view(1, 3, -1)
    return rays.view(b, 3, h, w) * depth


def project(points: torch.Tensor, K, T: torch.Tensor = None):
    """Project (B,3,H,W) points through ``K @ T``.

    Returns ``(coords, z, valid)``: (B,2,H,W) pixel coordinates ``(x, y)``,
    (B,1,H,W) depth in the destination camera, and a mask that is False where
    the point lies at or behind ``MIN_PROJECTED_DEPTH``.
    """
    b, _, h, w = points.shape
    flat = points.reshape(b, 3, -1)
    if T is not None:
        T = torch.as_tensor(T, dtype=points.dtype, device=points.device)
        if T.dim() == 2:
            T = T.unsqueeze(0)
        flat = T[:, :3, :3] @ flat + T[:, :3, 3:]
    Kb = intrinsics_matrix(K, b, points.dtype, points.device)
    cam = Kb @ flat
    z = cam[:, 2:3]
    valid = z > MIN_PROJECTED_DEPTH
    zc = z.clamp(min=MIN_PROJECTED_DEPTH)
    coords = cam[:, :2] / zc
    return coords.view(b, 2, h, w), z.view(b, 1, h, w), valid.view(b, 1, h, w)


def bilinear_sample(img: torch.Tensor, coords: torch.Tensor):
    """Sample (B,C,H,W) ``img`` at (B,2,Ho,Wo) pixel coordinates.

    Returns ``(sampled, in_bounds)``. Coordinates outside ``[0, W-1] x [0, H-1]``
    produce 0 and are False in the mask. Differentiable w.r.t. both ``img`` and
    ``coords`` (away from integer coordinates, where bilinear has kinks).
    """
    b, c, h, w = img.shape
    x, y = coords[:, 0], coords[:, 1]
    tol = BORDER_TOL
    in_bounds = (x >= -tol) & (x <= w - 1 + tol) & (y >= -tol) & (y <= h - 1 + tol)
    x, y = x.clamp(0, w - 1), y.clamp(0, h - 1)

    x0 = torch.floor(x.detach()).clamp(0, max(w - 2, 0))
    y0 = torch.floor(y.detach()).clamp(0, max(h - 2, 0))
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = torch.where(in_bounds, x - x0, torch.zeros_like(x))
    wy = torch.where(in_bounds, y - y0, torch.zeros_like(y))

    flat = img.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).long().view(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).view(b, c, *x.shape[1:])

    wx, wy = wx.unsqueeze(1), wy.unsqueeze(1)
    out = (
        gather(y0, x0) * (1 - wx) * (1 - wy)
        + gather(y0, x1) * wx * (1 - wy)
        + gather(y1, x0) * (1 - wx) * wy
        + gather(y1, x1) * wx * wy
    )
    mask = in_bounds.unsqueeze(1)
    return out * mask.to(out.dtype), mask


@dataclass
class WarpResult:
    synthesized: torch.Tensor
    validity_mask: torch.Tensor


def inverse_warp(source: torch.Tensor, target_depth: torch.Tensor, pose: torch.Tensor, K) -> WarpResult:
    """Synthesise the target view by sampling ``source`` at reprojected target pixels.

    ``pose`` is either a (B,6) target->source pose or a (B,4,4) transform.
    """
    if source.shape[0] != target_depth.shape[0] or source.shape[-2:] != target_depth.shape[-2:]:
        raise ShapeError(
            f"source {tuple(source.shape)} and depth {tuple(target_depth.shape)} are not aligned"
        )
    T = pose if pose.dim() == 3 else pose_to_matrix(pose)
    points = backproject(target_depth, K)
    coords, _, in_front = project(points, K, T.to(points.dtype))
    synthesized, in_bounds = bilinear_sample(source, coords)
    valid = in_front & in_bounds
    return WarpResult(synthesized * valid.to(synthesized.dtype), valid.to(synthesized.dtype))
