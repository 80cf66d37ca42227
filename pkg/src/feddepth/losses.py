"""Self-supervision losses for view-synthesis depth training.

Every function works on batched (B, C, H, W) tensors and stays differentiable
with respect to predicted depths and poses. Reductions over the valid set
divide by the number of valid pixels across the whole batch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import EmptyValidityError, InvalidArgument, NonFiniteLossError
from .geometry import Intrinsics, WarpResult, backproject

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    delta: float = 0.1
    epsilon: float = 0.1
    lambda_i: float = 0.15
    lambda_s: float = 0.85

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidArgument(f"loss weight {f.name} must be non-negative")


@dataclass
class LossBreakdown:
    l_p: torch.Tensor
    l_p_masked: torch.Tensor
    l_g: torch.Tensor
    l_n: torch.Tensor
    l_cdr: torch.Tensor
    l_ern: torch.Tensor
    l_self: torch.Tensor
    weights: LossWeights = LossWeights()

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self) if f.name != "weights"}


def _batched(x: torch.Tensor) -> torch.Tensor:
    """Lift (H, W) or (C, H, W) inputs to (B, C, H, W)."""
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


def _mask(valid: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return _batched(valid).to(torch.bool).expand(like.shape[0], 1, *like.shape[-2:])


def masked_mean(values: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Average ``values`` over the valid set; raises if the set is empty."""
    values = _batched(values)
    valid = _mask(valid, values)
    n = int(valid.sum())
    if n == 0:
        raise EmptyValidityError("no valid pixels")
    return torch.where(valid, values, torch.zeros_like(values)).sum() / n


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows with reflection padding, averaged over channels."""
    if a.shape != b.shape:
        raise InvalidArgument(f"SSIM needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    a, b = _batched(a), _batched(b)
    pad = lambda x: F.pad(x, (1, 1, 1, 1), mode="reflect")
    pool = lambda x: F.avg_pool2d(pad(x), 3, 1)

    mu_a, mu_b = pool(a), pool(b)
    var_a = pool(a * a) - mu_a**2
    var_b = pool(b * b) - mu_b**2
    cov = pool(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(1, keepdim=True)


def photometric_terms(l1, ssim, weights: LossWeights = LossWeights()):
    """Per-pixel photometric integrand from channel-mean L1 and SSIM maps."""
    return weights.lambda_i * l1 + weights.lambda_s * (1 - ssim) / 2


def photometric_error_map(target: torch.Tensor, recon: torch.Tensor, weights: LossWeights = LossWeights()):
    target, recon = _batched(target), _batched(recon)
    l1 = (target - recon).abs().mean(1, keepdim=True)
    return photometric_terms(l1, ssim_map(target, recon), weights)


def photometric_loss(warp: WarpResult, target: torch.Tensor, weights: LossWeights = LossWeights()):
    per_pixel = photometric_error_map(target, warp.reconstruction, weights)
    return masked_mean(per_pixel, warp.validity)


def depth_inconsistency(projected: torch.Tensor, interpolated: torch.Tensor, valid: torch.Tensor):
    """Normalised depth disagreement ``|a - b| / (a + b)`` on the valid set, 0 elsewhere."""
    valid = valid.to(torch.bool)
    if valid.any():
        if not ((projected[valid] > 0).all() and (interpolated[valid] > 0).all()):
            raise InvalidArgument("depths must be positive on the valid set")
    one = torch.ones_like(projected)
    a = torch.where(valid, projected, one)
    b = torch.where(valid, interpolated, one)
    diff = (a - b).abs() / (a + b)
    return torch.where(valid, diff, torch.zeros_like(diff))


def mask_weighted_photometric(warp: WarpResult, target, mask, weights: LossWeights = LossWeights()):
    per_pixel = photometric_error_map(target, warp.reconstruction, weights)
    return masked_mean(_batched(mask) * per_pixel, warp.validity)


def geometry_consistency_loss(inconsistency: torch.Tensor, valid: torch.Tensor):
    return masked_mean(inconsistency, valid)


def _central_gradient(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Central differences in the interior, one-sided differences on the border."""
    n = x.shape[dim]
    first = x.narrow(dim, 1, 1) - x.narrow(dim, 0, 1)
    last = x.narrow(dim, n - 1, 1) - x.narrow(dim, n - 2, 1)
    if n == 2:
        return torch.cat([first, last], dim)
    mid = (x.narrow(dim, 2, n - 2) - x.narrow(dim, 0, n - 2)) / 2
    return torch.cat([first, mid, last], dim)


def surface_normals(depth: torch.Tensor, K, eps: float = 1e-12):
    """Unit normals of the back-projected depth surface.

    Returns ``(normals, ok)`` with normals (B, 3, H, W) and ``ok`` marking
    pixels whose tangent cross product is non-degenerate.
    """
    depth = _batched(depth)
    if isinstance(K, Intrinsics):
        K = K.matrix(dtype=depth.dtype, device=depth.device)
    points = backproject(depth, torch.linalg.inv(K.to(depth.dtype)))
    du = _central_gradient(points, 3)
    dv = _central_gradient(points, 2)
    n = torch.cross(du, dv, dim=1)
    norm2 = (n * n).sum(1, keepdim=True)
    ok = norm2 > eps
    norm = torch.where(ok, norm2, torch.ones_like(norm2)).sqrt()
    return torch.where(ok, n / norm, torch.zeros_like(n)), ok


def normal_matching_loss(depth, pseudo_depth, K):
    """Mean L1 distance between unit normals of predicted and pseudo depth."""
    n_pred, ok_pred = surface_normals(depth, K)
    n_pseudo, ok_pseudo = surface_normals(pseudo_depth.detach(), K)
    ok = ok_pred & ok_pseudo
    if not ok.any():
        return _batched(depth).sum() * 0
    return masked_mean((n_pred - n_pseudo).abs().sum(1, keepdim=True), ok)


def sample_ranking_pairs(pseudo_depth, num_pairs: int, generator=None, tau: float = 0.1):
    """Draw random pixel pairs per image, keeping those the prior orders confidently.

    Returns a (N, 3) long tensor of ``(batch, far_index, near_index)`` with
    flat pixel indices, oriented so the first index is the farther point.
    """
    pd = _batched(pseudo_depth).detach()
    b = pd.shape[0]
    flat = pd.reshape(b, -1)
    n = flat.shape[1]
    i = torch.randint(0, n, (b, num_pairs), generator=generator)
    j = torch.randint(0, n, (b, num_pairs), generator=generator)
    di, dj = flat.gather(1, i), flat.gather(1, j)
    swap = dj > di
    far = torch.where(swap, j, i)
    near = torch.where(swap, i, j)
    d_far, d_near = torch.maximum(di, dj), torch.minimum(di, dj)
    keep = d_far > d_near * (1 + tau)
    batch = torch.arange(b).unsqueeze(1).expand_as(i)
    return torch.stack([batch[keep], far[keep], near[keep]], 1)


def confident_depth_ranking_loss(depth, pseudo_depth, pairs, tau: float = 0.1, margin: float = 0.0):
    """Hinge on predicted depth order for pairs the prior orders confidently."""
    depth = _batched(depth)
    flat = depth.reshape(depth.shape[0], -1)
    pflat = _batched(pseudo_depth).detach().reshape(depth.shape[0], -1)
    pairs = torch.as_tensor(pairs, dtype=torch.long).reshape(-1, 3)
    bi, i, j = pairs.unbind(1)
    pi, pj = pflat[bi, i], pflat[bi, j]
    # Orient each pair so that i is the farther point under the prior.
    flip = pj > pi
    i, j = torch.where(flip, j, i), torch.where(flip, i, j)
    confident = torch.maximum(pi, pj) > torch.minimum(pi, pj) * (1 + tau)
    if not confident.any():
        log.warning("no confident ranking pairs; ranking loss is 0")
        return flat.sum() * 0
    bi, i, j = bi[confident], i[confident], j[confident]
    return F.relu(flat[bi, j] - flat[bi, i] + margin).mean()


def edge_pairs(image, percentile: float = 90.0, distance: int = 2):
    """Pixel pairs straddling strong image edges.

    An edge pixel has gradient magnitude strictly above the given percentile
    of the image; its partner lies ``distance`` pixels away along the
    dominant gradient axis, in the gradient's direction. Returns a (N, 5)
    long tensor of ``(batch, v, u, v2, u2)``.
    """
    image = _batched(image).detach()
    gray = image.mean(1, keepdim=True)
    gu = _central_gradient(gray, 3)[:, 0]
    gv = _central_gradient(gray, 2)[:, 0]
    mag = torch.sqrt(gu**2 + gv**2)
    b, h, w = mag.shape
    out = []
    for k in range(b):
        thr = torch.quantile(mag[k].reshape(-1).to(torch.float64), percentile / 100)
        vs, us = torch.nonzero(mag[k].to(torch.float64) > thr, as_tuple=True)
        horiz = gu[k, vs, us].abs() >= gv[k, vs, us].abs()
        step_u = torch.where(horiz, torch.where(gu[k, vs, us] >= 0, distance, -distance), 0)
        step_v = torch.where(horiz, 0, torch.where(gv[k, vs, us] >= 0, distance, -distance))
        u2, v2 = us + step_u, vs + step_v
        inside = (u2 >= 0) & (u2 < w) & (v2 >= 0) & (v2 < h)
        kk = torch.full_like(vs, k)
        out.append(torch.stack([kk, vs, us, v2, u2], 1)[inside])
    return torch.cat(out) if out else torch.zeros(0, 5, dtype=torch.long)


def edge_aware_relative_normal_loss(depth, pseudo_depth, image, K, pairs=None):
    """Match the relative normal angle of edge-straddling pairs to the prior."""
    if pairs is None:
        pairs = edge_pairs(image)
    n_pred, ok_pred = surface_normals(depth, K)
    n_pseudo, ok_pseudo = surface_normals(pseudo_depth.detach(), K)
    if len(pairs):
        bk, v, u, v2, u2 = pairs.unbind(1)
        ok = ok_pred[bk, 0, v, u] & ok_pred[bk, 0, v2, u2] & ok_pseudo[bk, 0, v, u] & ok_pseudo[bk, 0, v2, u2]
        pairs = pairs[ok]
    if not len(pairs):
        log.warning("no edge pixels; relative normal loss is 0")
        return _batched(depth).sum() * 0
    bk, v, u, v2, u2 = pairs.unbind(1)
    cos_pred = (n_pred[bk, :, v, u] * n_pred[bk, :, v2, u2]).sum(1)
    cos_pseudo = (n_pseudo[bk, :, v, u] * n_pseudo[bk, :, v2, u2]).sum(1)
    return (cos_pred - cos_pseudo).abs().mean()


def min_reprojection_with_automask(per_source_errors, identity_errors):
    """Per-pixel minimum over sources plus the stationary-pixel mask.

    A pixel is kept when its best warped error beats the best error of the
    unwarped source frames.
    """
    if len(per_source_errors) == 0:
        raise InvalidArgument("need at least one source error map")
    shape = per_source_errors[0].shape
    if any(e.shape != shape for e in [*per_source_errors, *identity_errors]):
        raise InvalidArgument("error maps must share one shape")
    best = torch.stack(list(per_source_errors)).min(0).values
    if len(identity_errors) == 0:
        return best, torch.ones(shape, dtype=torch.bool, device=best.device)
    ident = torch.stack(list(identity_errors)).min(0).values
    return best, best < ident


def total_self_supervision_loss(l_p, l_p_masked, l_g, l_n, l_cdr, l_ern, weights: LossWeights = LossWeights()):
    terms = dict(l_p=l_p, l_p_masked=l_p_masked, l_g=l_g, l_n=l_n, l_cdr=l_cdr, l_ern=l_ern)
    for name, value in terms.items():
        value = float(torch.as_tensor(value).detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    w = weights
    l_self = w.alpha * l_p_masked + w.beta * l_g + w.gamma * l_n + w.delta * l_cdr + w.epsilon * l_ern
    return LossBreakdown(**terms, l_self=l_self, weights=weights)
