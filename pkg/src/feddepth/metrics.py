"""Communication and computation cost accounting, and depth evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EvaluationError, InvalidArgument

GB = 10**9


def comm_upper_bound(rounds, participants, omega_bytes):
    """Bytes moved when every participant downloads and uploads both networks each round."""
    return 2 * rounds * (participants * omega_bytes)


def comm_lower_bound(rounds, participants, fraction, omega_bytes):
    """Bytes moved when only the participants selected each round exchange weights."""
    if not 0 < fraction <= 1:
        raise InvalidArgument(f"participant fraction must be in (0, 1], got {fraction}")
    return 2 * rounds * (participants * fraction * omega_bytes)


def steps_centralized(epochs: int, batches_per_epoch: int) -> int:
    return epochs * batches_per_epoch


def steps_federated(records) -> int:
    """Total training steps over rounds.

    ``records`` is a sequence of rounds; each round is either a mapping
    ``participant -> (epochs, batches)``, an object with a ``steps``
    mapping ``participant -> steps``, or a ledger dict holding such a mapping
    under ``"steps"``.
    """
    total = 0
    for rec in records:
        if hasattr(rec, "steps"):
            per = rec.steps
        elif isinstance(rec.get("steps"), dict):
            per = rec["steps"]
        else:
            per = rec
        for value in per.values():
            total += value[0] * value[1] if isinstance(value, (tuple, list)) else value
    return total


@dataclass
class CostReport:
    w_max: float
    w_min: float
    per_participant_per_round: float
    steps_total: int
    steps_per_participant: dict = field(default_factory=dict)
    depth_bytes: int = 0
    pose_bytes: int = 0
    notes: str = "validation-set distribution excluded from communication cost"

    def as_dict(self):
        d = asdict(self)
        d["steps_per_participant"] = {str(k): v for k, v in self.steps_per_participant.items()}
        d["w_max_gb"] = self.w_max / GB
        d["w_min_gb"] = self.w_min / GB
        return d


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float
    count: int = 0

    def as_dict(self):
        return asdict(self)


def _np(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def evaluation_mask(gt, cap: float = 80.0):
    """Pixels with ground truth in (0, cap]."""
    gt = _np(gt)
    return (gt > 0) & (gt <= cap)


def median_scale_align(pred, gt, valid):
    """Scale ``pred`` so its median over ``valid`` matches the ground truth's."""
    pred, gt, valid = _np(pred), _np(gt), _np(valid).astype(bool)
    if not valid.any():
        raise EvaluationError("no valid pixels for median scaling")
    p, g = pred[valid], gt[valid]
    if (p <= 0).any() or (g <= 0).any():
        raise EvaluationError("median scaling needs positive depths on valid pixels")
    return pred * (np.median(g) / np.median(p))


def depth_errors(pred, gt, valid=None, cap: float = 80.0) -> DepthMetrics:
    pred, gt = _np(pred), np.minimum(_np(gt), cap)
    mask = evaluation_mask(gt, cap)
    if valid is not None:
        mask &= _np(valid).astype(bool)
    if not mask.any():
        raise EvaluationError("no valid pixels to evaluate")
    p, g = pred[mask], gt[mask]
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rms=float(np.sqrt(np.mean(diff**2))),
        rms_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        count=int(mask.sum()),
    )


def evaluate_depth(pred, gt, cap: float = 80.0) -> DepthMetrics:
    """Median-scale then score one prediction against capped ground truth."""
    gt = np.minimum(_np(gt), cap)
    valid = evaluation_mask(gt, cap)
    return depth_errors(median_scale_align(pred, gt, valid), gt, valid, cap)


def average_metrics(items) -> DepthMetrics:
    items = list(items)
    if not items:
        raise EvaluationError("nothing to average")
    keys = [k for k in asdict(items[0]) if k != "count"]
    out = {k: float(np.mean([getattr(m, k) for m in items])) for k in keys}
    return DepthMetrics(**out, count=sum(m.count for m in items))


def region_split_errors(pred, gt, region_mask, cap: float = 80.0):
    """Metrics on dynamic (mask true) and static pixels; an empty class is ``None``."""
    pred, gt = _np(pred), _np(gt)
    region = _np(region_mask).astype(bool)
    valid = evaluation_mask(np.minimum(gt, cap), cap)
    results = []
    for part in (region, ~region):
        sel = valid & part
        results.append(depth_errors(pred, gt, sel, cap) if sel.any() else None)
    return tuple(results)
