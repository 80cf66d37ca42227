"""Random double-precision instances for finite-difference gradient checks.

Bilinear sampling, validity tests, hinges, absolute values and per-pixel
minima are only piecewise smooth. An instance is accepted only when every
such switch sits well away from its kink, so a central difference with step
1e-5 never straddles one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from feddepth.geometry import Intrinsics, warp_frame
from feddepth.losses import (
    confident_depth_ranking_loss,
    depth_inconsistency,
    edge_aware_relative_normal_loss,
    edge_pairs,
    geometry_consistency_loss,
    mask_weighted_photometric,
    normal_matching_loss,
    photometric_error_map,
    photometric_loss,
    sample_ranking_pairs,
    surface_normals,
)
from feddepth.training import LossSettings, self_supervised_loss

from oracles import rodrigues

H = W = 6
K = Intrinsics(4.5, 4.5, 2.5, 2.5, W, H)
COORD_MARGIN = 2e-4
VALUE_MARGIN = 1e-4
PAIRS_SEED = 7


@dataclass
class Instance:
    target: torch.Tensor  # (1, 3, H, W)
    sources: list  # two (1, 3, H, W) frames
    depth_t: torch.Tensor  # (1, 1, H, W)
    depth_s: torch.Tensor  # (2, 1, H, W), one per source
    pose: torch.Tensor  # (2, 6), one per source
    pseudo: torch.Tensor  # (1, 1, H, W)

    @property
    def Km(self):
        return K.matrix(torch.float64)


def _draw(rng: np.random.Generator) -> Instance:
    t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float64))
    target = t(rng.uniform(0, 1, (1, 3, H, W)))
    sources = [t(rng.uniform(0, 1, (1, 3, H, W))) for _ in range(2)]
    depth_t = t(rng.uniform(2, 4, (1, 1, H, W)))
    depth_s = t(rng.uniform(2, 4, (2, 1, H, W)))
    # A sideways baseline of about one pixel spreads the sub-pixel offsets.
    shift = rng.choice([-1, 1], (2, 1)) * rng.uniform(0.3, 0.6, (2, 1)) * np.array([[1.0, 0.0, 0.0]])
    pose = t(np.concatenate([rng.normal(0, 0.03, (2, 3)), shift + rng.normal(0, 0.05, (2, 3))], 1))
    pseudo = depth_t * t(1 + rng.uniform(-0.3, 0.3, (1, 1, H, W)))
    return Instance(target, sources, depth_t, depth_s, pose, pseudo)


def _far_from_integer(x):
    return bool((np.abs(x - np.round(x)) > COORD_MARGIN).all())


def _projections(inst: Instance, k: int):
    """Source-frame pixel coordinates and depths of every target pixel (numpy)."""
    R = np.array(rodrigues(inst.pose[k, :3].tolist()))
    t = inst.pose[k, 3:].numpy()
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    d = inst.depth_t[0, 0].numpy()
    X = np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], -1) @ R.T + t
    z = X[..., 2]
    return K.fx * X[..., 0] / z + K.cx, K.fy * X[..., 1] / z + K.cy, z


def _generic(inst: Instance) -> bool:
    Km = inst.Km
    for k in range(2):
        us, vs, z = _projections(inst, k)
        if z.min() < COORD_MARGIN or not (_far_from_integer(us) and _far_from_integer(vs)):
            return False
        warp = warp_frame(inst.sources[k], inst.depth_s[k : k + 1], inst.depth_t, inst.pose[k : k + 1], Km)
        valid = warp.validity[0, 0]
        if int(valid.sum()) < 8:
            return False
        gap = (warp.projected_depth - warp.interpolated_depth)[0, 0][valid].abs()
        l1 = (inst.target - warp.reconstruction)[0][:, valid].abs()
        if gap.min() < VALUE_MARGIN or l1.min() < VALUE_MARGIN:
            return False

    # Per-pixel source minimum and automask comparison inside L_Self.
    maps, ident, valid_both = [], [], True
    for k in range(2):
        warp = warp_frame(inst.sources[k], inst.depth_s[k : k + 1], inst.depth_t, inst.pose[k : k + 1], Km)
        per = photometric_error_map(inst.target, warp.reconstruction)
        diff = depth_inconsistency(warp.projected_depth, warp.interpolated_depth, warp.validity)
        maps.append(torch.where(warp.validity, (1 - diff) * per, torch.full_like(per, 10.0)))
        ident.append(photometric_error_map(inst.target, inst.sources[k]))
        valid_both = valid_both & warp.validity
    both = torch.stack(maps)
    best = both.min(0).values
    # Pixels invalid in both sources tie at the constant and carry no gradient.
    if valid_both.any() and (both[0] - both[1])[valid_both].abs().min() < VALUE_MARGIN:
        return False
    if (best - torch.stack(ident).min(0).values).abs().min() < VALUE_MARGIN:
        return False

    # Hinge arguments of the ranking loss and absolute values of the normal losses.
    flat = inst.depth_t.reshape(-1)
    for b, i, j in ranking_pairs(inst).tolist():
        if abs(float(flat[i] - flat[j])) < VALUE_MARGIN:
            return False
    n_pred, _ = surface_normals(inst.depth_t, Km)
    n_ps, _ = surface_normals(inst.pseudo, Km)
    if (n_pred - n_ps).abs().min() < VALUE_MARGIN:
        return False
    pairs = edge_pairs(inst.target)
    bk, v, u, v2, u2 = pairs.unbind(1)
    cos_p = (n_pred[bk, :, v, u] * n_pred[bk, :, v2, u2]).sum(1)
    cos_s = (n_ps[bk, :, v, u] * n_ps[bk, :, v2, u2]).sum(1)
    return bool(len(pairs) and (cos_p - cos_s).abs().min() > VALUE_MARGIN)


def ranking_pairs(inst: Instance):
    return sample_ranking_pairs(inst.pseudo, 64, torch.Generator().manual_seed(PAIRS_SEED))


def instances(n: int, seed: int = 0) -> list[Instance]:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        inst = _draw(rng)
        if _generic(inst):
            out.append(inst)
    return out


# --- losses as functions of (target depth, source depths, poses) ------------------


def _warp(inst, d_t, d_s, pose, k=0):
    return warp_frame(inst.sources[k], d_s[k : k + 1], d_t, pose[k : k + 1], inst.Km)


def loss_p(inst, d_t, d_s, pose):
    return photometric_loss(_warp(inst, d_t, d_s, pose), inst.target)


def loss_p_masked(inst, d_t, d_s, pose):
    warp = _warp(inst, d_t, d_s, pose)
    diff = depth_inconsistency(warp.projected_depth, warp.interpolated_depth, warp.validity)
    return mask_weighted_photometric(warp, inst.target, 1 - diff)


def loss_g(inst, d_t, d_s, pose):
    warp = _warp(inst, d_t, d_s, pose)
    return geometry_consistency_loss(
        depth_inconsistency(warp.projected_depth, warp.interpolated_depth, warp.validity), warp.validity)


def loss_n(inst, d_t, d_s, pose):
    return normal_matching_loss(d_t, inst.pseudo, inst.Km)


def loss_cdr(inst, d_t, d_s, pose):
    return confident_depth_ranking_loss(d_t, inst.pseudo, ranking_pairs(inst))


def loss_ern(inst, d_t, d_s, pose):
    return edge_aware_relative_normal_loss(d_t, inst.pseudo, inst.target, inst.Km)


def loss_self(inst, d_t, d_s, pose):
    depths = torch.cat([d_t, d_s])
    by_source = {id(s): pose[k : k + 1] for k, s in enumerate(inst.sources)}
    settings = LossSettings(rank_pairs=64)
    out = self_supervised_loss(lambda x: depths, lambda a, b: by_source[id(b)], inst.target, inst.sources,
                               inst.pseudo, inst.Km[None], settings, torch.Generator().manual_seed(PAIRS_SEED))
    return out.l_self


LOSSES = {
    "L_p": loss_p,
    "L_p_masked": loss_p_masked,
    "L_g": loss_g,
    "L_n": loss_n,
    "L_cdr": loss_cdr,
    "L_ern": loss_ern,
    "L_self": loss_self,
}


def gradient_errors(fn, inst: Instance, step=1e-5):
    """Relative errors of autograd vs central differences for depth and pose."""
    from oracles import central_fd, relative_error

    d_t = inst.depth_t.clone().requires_grad_(True)
    d_s = inst.depth_s.clone().requires_grad_(True)
    pose = inst.pose.clone().requires_grad_(True)
    loss = fn(inst, d_t, d_s, pose)
    grads = torch.autograd.grad(loss, [d_t, d_s, pose], allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for g, x in zip(grads, (d_t, d_s, pose))]
    with torch.no_grad():
        fd_t = central_fd(lambda x: fn(inst, x, inst.depth_s, inst.pose), inst.depth_t, step)
        fd_s = central_fd(lambda x: fn(inst, inst.depth_t, x, inst.pose), inst.depth_s, step)
        fd_p = central_fd(lambda x: fn(inst, inst.depth_t, inst.depth_s, x), inst.pose, step)
    depth_err = relative_error(torch.cat([grads[0].reshape(-1), grads[1].reshape(-1)]),
                               torch.cat([fd_t.reshape(-1), fd_s.reshape(-1)]))
    return depth_err, relative_error(grads[2], fd_p)
