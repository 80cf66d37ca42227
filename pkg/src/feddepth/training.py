"""One self-supervised optimisation step and model evaluation."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .data import Sample, collate
from .errors import EmptyValidityError
from .geometry import warp_frame
from .losses import (
    LossWeights,
    confident_depth_ranking_loss,
    depth_inconsistency,
    edge_aware_relative_normal_loss,
    masked_mean,
    min_reprojection_with_automask,
    normal_matching_loss,
    photometric_error_map,
    sample_ranking_pairs,
    total_self_supervision_loss,
)
from .metrics import average_metrics, evaluate_depth

# Stand-in error for pixels a source cannot explain; above any photometric value.
_UNEXPLAINED = 10.0


def derive_seed(master: int, *keys) -> int:
    """Deterministic 63-bit seed from a master seed and a path of keys."""
    words = [int(master) & 0xFFFFFFFF]
    for k in keys:
        words.append(k & 0xFFFFFFFF if isinstance(k, int) else zlib.crc32(str(k).encode()))
    return int(np.random.SeedSequence(words).generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class LossSettings:
    weights: LossWeights = LossWeights()
    rank_pairs: int = 512
    rank_tau: float = 0.1
    rank_margin: float = 0.0
    automask: bool = True


def intrinsics_batch(samples: list[Sample], dtype=torch.float32):
    return torch.stack([s.intrinsics.matrix(dtype) for s in samples])


def self_supervised_loss(depth_net, pose_net, target, sources, pseudo, K, settings=LossSettings(), generator=None):
    """Combined self-supervision loss for a batch.

    ``target`` is (B, 3, H, W), ``sources`` a list of such stacks, ``pseudo``
    the (B, 1, H, W) prior and ``K`` a (B, 3, 3) intrinsics stack. Per pixel,
    the best source is the one with the lowest mask-weighted photometric
    error; stationary pixels are dropped by the automask.
    """
    w = settings.weights
    n_src = len(sources)
    depths = depth_net(torch.cat([target, *sources]))
    d_target, d_sources = depths[: len(target)], depths[len(target):].split(len(target))

    masked_maps, plain_maps, identity_maps, geo_terms = [], [], [], []
    any_valid = torch.zeros_like(d_target, dtype=torch.bool)
    for k in range(n_src):
        pose = pose_net(target, sources[k])
        warp = warp_frame(sources[k], d_sources[k], d_target, pose, K)
        valid = warp.validity
        per_pixel = photometric_error_map(target, warp.reconstruction, w)
        diff = depth_inconsistency(warp.projected_depth, warp.interpolated_depth, valid)
        unexplained = torch.full_like(per_pixel, _UNEXPLAINED)
        masked_maps.append(torch.where(valid, (1 - diff) * per_pixel, unexplained))
        plain_maps.append(torch.where(valid, per_pixel, unexplained))
        if settings.automask:
            identity_maps.append(photometric_error_map(target, sources[k], w).detach())
        if valid.any():
            geo_terms.append(masked_mean(diff, valid))
        any_valid |= valid

    best_masked, keep = min_reprojection_with_automask(masked_maps, identity_maps)
    best_plain = torch.stack(plain_maps).min(0).values
    final = keep & any_valid
    if not final.any():
        raise EmptyValidityError("no valid pixels after warping and auto-masking")
    l_p_masked = masked_mean(best_masked, final)
    l_p = masked_mean(best_plain, final)
    l_g = torch.stack(geo_terms).mean()

    l_n = normal_matching_loss(d_target, pseudo, K)
    pairs = sample_ranking_pairs(pseudo, settings.rank_pairs, generator, settings.rank_tau)
    l_cdr = confident_depth_ranking_loss(d_target, pseudo, pairs, settings.rank_tau, settings.rank_margin)
    l_ern = edge_aware_relative_normal_loss(d_target, pseudo, target, K)
    return total_self_supervision_loss(l_p, l_p_masked, l_g, l_n, l_cdr, l_ern, w)


def batch_loss(depth_net, pose_net, batch: list[Sample], settings=LossSettings(), generator=None):
    target, sources, pseudo = collate(batch)
    if pseudo is None:
        raise ValueError("samples need a precomputed pseudo depth; see attach_pseudo_depth")
    K = intrinsics_batch(batch)
    return self_supervised_loss(depth_net, pose_net, target, sources, pseudo, K, settings, generator)


@torch.no_grad()
def predict_depths(depth_net, samples: list[Sample], chunk: int = 16):
    out = []
    for i in range(0, len(samples), chunk):
        images = torch.stack([s.target for s in samples[i : i + chunk]])
        out.extend(depth_net(images)[:, 0])
    return out


def evaluate_model(depth_net, samples: list[Sample], cap: float = 80.0):
    """Median-scaled depth metrics averaged over samples with ground truth."""
    scored = [s for s in samples if s.gt_depth is not None]
    preds = predict_depths(depth_net, scored)
    return average_metrics(evaluate_depth(p, s.gt_depth, cap) for p, s in zip(preds, scored))
