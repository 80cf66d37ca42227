"""Ray-cast renderer for textured ground-plus-boxes scenes with exact depth.

Stands in for KITTI at desk scale: each drive is one scene traversed by a
forward-moving pinhole camera, and every sample carries the analytic depth of
its frames and the exact relative pose between them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Sample
from .errors import InvalidArgument
from .geometry import Intrinsics, transform_to_pose


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 32
    samples_per_drive: tuple[int, ...] = (8,)
    texture_frequency: float = 0.6
    texture_waves: int = 6
    speed: float = 0.4
    yaw_rate: float = 0.01
    camera_height: float = 1.5
    wall_distance: float = 40.0
    boxes_per_drive: int = 4
    focal_scale: float = 0.8
    drive_prefix: str = "drive"
    # Per-surface colour multipliers (wall, ground, box); all ones gives untinted texture.
    tints: tuple = ((0.6, 0.7, 1.0), (0.8, 0.8, 0.8), (1.0, 0.55, 0.3))


@dataclass
class _Box:
    lo: np.ndarray
    hi: np.ndarray


@dataclass
class _Scene:
    directions: np.ndarray  # (3 channels, waves, 3)
    phases: np.ndarray
    wall_z: float
    boxes: list = field(default_factory=list)


def _rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _make_scene(spec: SceneSpec, rng: np.random.Generator, travel: float) -> _Scene:
    dirs = rng.standard_normal((3, spec.texture_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs *= 2 * np.pi * spec.texture_frequency
    phases = rng.uniform(0, 2 * np.pi, (3, spec.texture_waves))
    boxes = []
    for _ in range(spec.boxes_per_drive):
        size = rng.uniform([0.8, 0.8, 0.8], [2.0, 2.5, 2.0])
        side = rng.choice([-1.0, 1.0])
        x = side * rng.uniform(1.5, 4.0)
        z = rng.uniform(4.0, travel + 20.0)
        lo = np.array([x - size[0] / 2, spec.camera_height - size[1], z])
        boxes.append(_Box(lo, lo + size))
    return _Scene(dirs, phases, travel + spec.wall_distance, boxes)


def _texture(scene: _Scene, points: np.ndarray) -> np.ndarray:
    """Solid texture evaluated at (N, 3) world points -> (N, 3) colours in [0, 1]."""
    arg = np.einsum("cwk,nk->ncw", scene.directions, points) + scene.phases[None]
    return 0.5 + 0.45 * np.sin(arg).mean(-1)


def _raycast(spec: SceneSpec, scene: _Scene, K: Intrinsics, cam_to_world: np.ndarray):
    h, w = spec.height, spec.width
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1).reshape(-1, 3)
    R, o = cam_to_world[:3, :3], cam_to_world[:3, 3]
    d = rays @ R.T

    # t is the camera-frame depth because every camera ray has unit z.
    t = np.full(len(d), np.inf)
    hit_box = np.zeros(len(d), dtype=bool)
    surface = np.zeros(len(d), dtype=int)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_wall = (scene.wall_z - o[2]) / d[:, 2]
        t = np.where((d[:, 2] > 0) & (t_wall > 0), t_wall, t)
        t_ground = (spec.camera_height - o[1]) / d[:, 1]
        on_ground = (d[:, 1] > 0) & (t_ground > 0) & (t_ground < t)
        t = np.where(on_ground, t_ground, t)
        surface[on_ground] = 1
        for box in scene.boxes:
            t0 = (box.lo - o) / d
            t1 = (box.hi - o) / d
            near = np.nanmax(np.minimum(t0, t1), axis=1)
            far = np.nanmin(np.maximum(t0, t1), axis=1)
            hit = (near <= far) & (near > 0) & (near < t)
            t = np.where(hit, near, t)
            hit_box |= hit
            surface[hit] = 2
    if not np.isfinite(t).all():
        raise RuntimeError("ray escaped the scene")
    points = o + d * t[:, None]
    colours = _texture(scene, points) * np.asarray(spec.tints, dtype=np.float64)[surface]
    image = colours.reshape(h, w, 3).transpose(2, 0, 1)
    return image, t.reshape(h, w), hit_box.reshape(h, w)


def scene_intrinsics(spec: SceneSpec) -> Intrinsics:
    f = spec.focal_scale * spec.width
    return Intrinsics(f, f, (spec.width - 1) / 2, (spec.height - 1) / 2, spec.width, spec.height)


def generate_synthetic_scene(spec: SceneSpec = SceneSpec(), seed: int = 0) -> list[Sample]:
    """Render every drive in ``spec`` and return two-frame samples.

    Sample ``k`` of a drive has frame ``k`` as target and frame ``k + 1`` as
    its source; the attached pose maps target-camera points into the source
    camera.
    """
    if spec.width <= 0 or spec.height <= 0:
        raise InvalidArgument(f"resolution must be positive, got {spec.width}x{spec.height}")
    if any(n <= 0 for n in spec.samples_per_drive):
        raise InvalidArgument("every drive needs at least one sample")
    K = scene_intrinsics(spec)
    rng = np.random.default_rng(seed)
    samples = []
    for drive_index, n in enumerate(spec.samples_per_drive):
        drive_id = f"{spec.drive_prefix}_{drive_index:03d}"
        travel = spec.speed * (n + 1)
        scene = _make_scene(spec, rng, travel)
        heading0 = rng.uniform(-0.05, 0.05)
        poses = []
        for k in range(n + 1):
            T = np.eye(4)
            heading = heading0 + spec.yaw_rate * k
            T[:3, :3] = _rot_y(heading)
            T[:3, 3] = [np.sin(heading) * spec.speed * k, 0.0, np.cos(heading) * spec.speed * k]
            poses.append(T)
        frames = [_raycast(spec, scene, K, T) for T in poses]
        for k in range(n):
            img_t, depth_t, box_t = frames[k]
            img_s, depth_s, _ = frames[k + 1]
            rel = np.linalg.inv(poses[k + 1]) @ poses[k]
            samples.append(
                Sample(
                    sample_id=f"{drive_id}/{k:04d}",
                    target=torch.from_numpy(img_t).float().clamp(0, 1),
                    sources=[torch.from_numpy(img_s).float().clamp(0, 1)],
                    intrinsics=K,
                    drive_id=drive_id,
                    gt_depth=torch.from_numpy(depth_t).float(),
                    source_depths=[torch.from_numpy(depth_s).float()],
                    gt_poses=[transform_to_pose(torch.from_numpy(rel)).float()],
                    region_mask=torch.from_numpy(box_t),
                )
            )
    return samples
