"""Pinhole camera geometry and differentiable inverse warping.

Tensors follow the (B, C, H, W) layout used by torch convolutions. Poses are
6-vectors ``(rx, ry, rz, tx, ty, tz)``: an axis-angle rotation followed by a
translation, mapping points from the target camera frame into the source
camera frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import InvalidArgument


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgument(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")

    @classmethod
    def from_file(cls, path) -> "Intrinsics":
        """Read a one-line ``fx fy cx cy width height`` calibration file."""
        fields = Path(path).read_text().split()
        if len(fields) != 6:
            raise InvalidArgument(f"{path}: expected 6 calibration values, got {len(fields)}")
        fx, fy, cx, cy = (float(v) for v in fields[:4])
        return cls(fx, fy, cx, cy, int(float(fields[4])), int(float(fields[5])))

    def to_file(self, path):
        Path(path).write_text(f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n")

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def matrix(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=dtype,
            device=device,
        )


@dataclass(frozen=True)
class PoseSE3:
    rotation: tuple[float, float, float]
    translation: tuple[float, float, float]

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (*self.rotation, *self.translation)):
            raise InvalidArgument("pose entries must be finite")

    @classmethod
    def from_vector(cls, vec) -> "PoseSE3":
        v = [float(x) for x in torch.as_tensor(vec).reshape(6)]
        return cls(tuple(v[:3]), tuple(v[3:]))

    def vector(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor([*self.rotation, *self.translation], dtype=dtype)


def _as_pose_tensor(pose) -> torch.Tensor:
    if isinstance(pose, PoseSE3):
        return pose.vector()
    return torch.as_tensor(pose)


def axis_angle_to_matrix(rotvec: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula for (..., 3) rotation vectors, smooth through zero."""
    theta2 = (rotvec * rotvec).sum(-1, keepdim=True)
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe2.sqrt()
    # Taylor branches keep the gradient finite at the identity rotation.
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / safe2)

    x, y, z = rotvec.unbind(-1)
    zero = torch.zeros_like(x)
    skew = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(*rotvec.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=rotvec.dtype, device=rotvec.device).expand_as(skew)
    return eye + a[..., None] * skew + b[..., None] * (skew @ skew)


def pose_to_transform(pose) -> torch.Tensor:
    """Map a (..., 6) pose vector to a (..., 4, 4) rigid transform."""
    vec = _as_pose_tensor(pose)
    if vec.shape[-1] != 6:
        raise InvalidArgument(f"pose must have 6 entries, got shape {tuple(vec.shape)}")
    if not torch.isfinite(vec).all():
        raise InvalidArgument("pose entries must be finite")
    if not vec.is_floating_point():
        vec = vec.to(torch.float64)
    rot = axis_angle_to_matrix(vec[..., :3])
    top = torch.cat([rot, vec[..., 3:, None]], -1)
    bottom = torch.zeros(*vec.shape[:-1], 1, 4, dtype=vec.dtype, device=vec.device)
    bottom[..., 0, 3] = 1
    return torch.cat([top, bottom], -2)


def invert_transform(T: torch.Tensor) -> torch.Tensor:
    rot_t = T[..., :3, :3].transpose(-1, -2)
    trans = -(rot_t @ T[..., :3, 3:])
    out = torch.cat([rot_t, trans], -1)
    return torch.cat([out, T[..., 3:, :]], -2)


def transform_to_pose(T: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`pose_to_transform` for a single 4x4 matrix (no autograd)."""
    from scipy.spatial.transform import Rotation

    T = torch.as_tensor(T, dtype=torch.float64)
    rotvec = Rotation.from_matrix(T[:3, :3].numpy()).as_rotvec()
    return torch.cat([torch.from_numpy(rotvec), T[:3, 3]])


def reproject_point(p_t, depth: float, K: Intrinsics, pose) -> tuple[tuple[float, float], float]:
    """Reproject one target pixel into the source view.

    Returns the continuous source pixel coordinate and the depth ``z'`` of the
    transformed point. ``z' <= 0`` means the point lies behind the source
    camera and must be excluded from the valid set.
    """
    if not depth > 0:
        raise InvalidArgument(f"depth must be positive, got {depth}")
    T = pose_to_transform(_as_pose_tensor(pose).to(torch.float64))
    u, v = float(p_t[0]), float(p_t[1])
    X = torch.tensor([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], dtype=torch.float64)
    Xs = T[:3, :3] @ X + T[:3, 3]
    z = float(Xs[2])
    if z <= 0:
        return (math.nan, math.nan), z
    return (K.fx * float(Xs[0]) / z + K.cx, K.fy * float(Xs[1]) / z + K.cy), z


@dataclass
class WarpResult:
    """Outcome of warping a source frame into the target view.

    All maps are (B, ·, H, W); ``validity`` is boolean with one channel.
    """

    reconstruction: torch.Tensor
    validity: torch.Tensor
    projected_depth: torch.Tensor
    interpolated_depth: torch.Tensor
    coords: torch.Tensor

    @property
    def num_valid(self) -> int:
        return int(self.validity.sum())


def _pixel_grid(h, w, dtype, device):
    v, u = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([u, v, torch.ones_like(u)]).reshape(3, -1)


def backproject(depth: torch.Tensor, K_inv: torch.Tensor) -> torch.Tensor:
    """(B, 1, H, W) depth -> (B, 3, H, W) camera-frame points; ``K_inv`` is (3, 3) or (B, 3, 3)."""
    b, _, h, w = depth.shape
    rays = K_inv @ _pixel_grid(h, w, depth.dtype, depth.device)
    if rays.dim() == 2:
        rays = rays.unsqueeze(0)
    return (rays * depth.reshape(b, 1, -1)).reshape(b, 3, h, w)


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` at pixel coordinates ``coords`` (B, H, W, 2) = (u, v).

    Pixel centres sit at integer coordinates, so sampling on the integer grid
    returns the image unchanged.
    """
    _, _, h, w = image.shape
    scale = torch.tensor([2 / max(w - 1, 1), 2 / max(h - 1, 1)], dtype=coords.dtype, device=coords.device)
    grid = coords * scale - 1
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def warp_frame(source, source_depth, target_depth, pose, K) -> WarpResult:
    """Reconstruct the target view by sampling ``source`` at reprojected coordinates.

    Accepts single frames ((3, H, W) image, (H, W) depths, 6-vector pose) or
    batches ((B, 3, H, W), (B, 1, H, W), (B, 6)). ``K`` is an
    :class:`Intrinsics` or a 3x3 matrix.
    """
    single = source.dim() == 3
    if single:
        source = source.unsqueeze(0)
        source_depth = source_depth.reshape(1, 1, *source_depth.shape[-2:])
        target_depth = target_depth.reshape(1, 1, *target_depth.shape[-2:])
        pose = _as_pose_tensor(pose).reshape(1, 6)
    pose = _as_pose_tensor(pose)

    b, _, h, w = source.shape
    if source_depth.shape != (b, 1, h, w) or target_depth.shape != (b, 1, h, w):
        raise InvalidArgument(
            f"shape mismatch: image {tuple(source.shape)}, source depth {tuple(source_depth.shape)}, "
            f"target depth {tuple(target_depth.shape)}"
        )
    if pose.shape != (b, 6):
        raise InvalidArgument(f"pose must be ({b}, 6), got {tuple(pose.shape)}")
    if isinstance(K, Intrinsics):
        if (K.width, K.height) != (w, h):
            raise InvalidArgument(f"intrinsics describe {K.width}x{K.height}, images are {w}x{h}")
        K = K.matrix(dtype=source.dtype, device=source.device)
    K = K.to(source.dtype)

    points = backproject(target_depth, torch.linalg.inv(K)).reshape(b, 3, -1)
    T = pose_to_transform(pose.to(source.dtype))
    moved = T[:, :3, :3] @ points + T[:, :3, 3:]
    z = moved[:, 2:3]
    in_front = z > 0
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    pix = K @ (moved / z_safe)  # K may be (3, 3) or (B, 3, 3)
    u, v = pix[:, 0], pix[:, 1]

    valid = in_front[:, 0] & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    # Invalid points are parked at a pixel centre so nothing non-finite reaches the sampler.
    u = torch.where(valid, u, torch.zeros_like(u))
    v = torch.where(valid, v, torch.zeros_like(v))
    coords = torch.stack([u, v], -1).reshape(b, h, w, 2)

    valid = valid.reshape(b, 1, h, w)
    recon = bilinear_sample(source, coords) * valid
    interp = bilinear_sample(source_depth, coords) * valid
    proj = z.reshape(b, 1, h, w)

    result = WarpResult(recon, valid, proj, interp, coords)
    if single:
        result = WarpResult(recon[0], valid[0, 0], proj[0, 0], interp[0, 0], coords[0])
    return result
