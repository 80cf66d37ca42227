"""Samples, participant partitions, batch streams and KITTI-layout ingestion."""
from __future__ import annotations

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IngestionError, InvalidArgument
from .geometry import Intrinsics

log = logging.getLogger(__name__)

SCENARIOS = ("CT", "FT-IID", "FT-NIID")
KITTI_RESOLUTION = (832, 256)
KITTI_MAX_DEPTH = 80.0


@dataclass
class Sample:
    """A target frame with its adjacent source frames.

    ``gt_depth`` and ``region_mask`` are for evaluation only and never reach
    the training losses. ``pseudo_depth`` is filled by a frozen provider
    before training.
    """

    sample_id: str
    target: torch.Tensor
    sources: list
    intrinsics: Intrinsics
    drive_id: str
    gt_depth: torch.Tensor | None = None
    region_mask: torch.Tensor | None = None
    pseudo_depth: torch.Tensor | None = None
    source_depths: list | None = None
    gt_poses: list | None = None

    def __post_init__(self):
        shape = self.target.shape
        if len(shape) != 3 or shape[0] != 3:
            raise InvalidArgument(f"{self.sample_id}: target must be (3, H, W), got {tuple(shape)}")
        if any(s.shape != shape for s in self.sources):
            raise InvalidArgument(f"{self.sample_id}: source frames must match the target shape")
        if (self.intrinsics.width, self.intrinsics.height) != (shape[2], shape[1]):
            raise InvalidArgument(f"{self.sample_id}: intrinsics do not match the image size")


@dataclass
class PartitionPlan:
    scenario: str
    assignment: dict[int, list[str]]
    seed: int
    meta: dict = field(default_factory=dict)

    def counts(self) -> dict[int, int]:
        return {pid: len(ids) for pid, ids in self.assignment.items()}

    @property
    def num_participants(self) -> int:
        return len(self.assignment)

    def to_json(self) -> str:
        doc = {
            "scenario": self.scenario,
            "seed": self.seed,
            "meta": self.meta,
            "assignment": {str(k): v for k, v in self.assignment.items()},
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        assignment = {int(k): list(v) for k, v in doc["assignment"].items()}
        return cls(doc["scenario"], dict(sorted(assignment.items())), doc["seed"], doc.get("meta", {}))


def _ids(samples):
    return [s.sample_id if isinstance(s, Sample) else str(s) for s in samples]


def partition_centralized(samples, seed: int = 0) -> PartitionPlan:
    return PartitionPlan("CT", {0: _ids(samples)}, seed)


def partition_iid(samples, num_participants: int, seed: int = 0) -> PartitionPlan:
    """Random equal split; the first ``n % C`` participants get one extra sample."""
    if num_participants <= 0:
        raise InvalidArgument("number of participants must be positive")
    ids = _ids(samples)
    if len(ids) < num_participants:
        raise InvalidArgument(f"{len(ids)} samples cannot cover {num_participants} participants")
    order = np.random.default_rng(seed).permutation(len(ids))
    base, extra = divmod(len(ids), num_participants)
    assignment, start = {}, 0
    for pid in range(num_participants):
        stop = start + base + (pid < extra)
        assignment[pid] = [ids[i] for i in order[start:stop]]
        start = stop
    return PartitionPlan("FT-IID", assignment, seed)


def partition_niid(samples, num_participants: int, seed: int = 0) -> PartitionPlan:
    """Group by drive, keep the largest drives, and hand out the rest.

    The ``C`` drives with the most samples (ties broken by drive id) become
    participants. Samples from the remaining drives are shuffled and dealt
    round-robin, starting with the participant holding the fewest samples.
    """
    if num_participants <= 0:
        raise InvalidArgument("number of participants must be positive")
    by_drive = defaultdict(list)
    for s in samples:
        if not isinstance(s, Sample):
            raise InvalidArgument("non-IID partitioning needs samples carrying drive ids")
        by_drive[s.drive_id].append(s.sample_id)
    if len(by_drive) < num_participants:
        raise InvalidArgument(f"{len(by_drive)} drives cannot cover {num_participants} participants")

    ranked = sorted(by_drive, key=lambda d: (-len(by_drive[d]), d))
    kept, dropped = ranked[:num_participants], ranked[num_participants:]
    assignment = {pid: list(by_drive[d]) for pid, d in enumerate(kept)}

    rng = np.random.default_rng(seed)
    leftovers = [sid for d in dropped for sid in by_drive[d]]
    leftovers = [leftovers[i] for i in rng.permutation(len(leftovers))]
    dealing = sorted(assignment, key=lambda pid: (len(assignment[pid]), pid))
    for k, sid in enumerate(leftovers):
        assignment[dealing[k % len(dealing)]].append(sid)
    meta = {"drives": {str(pid): d for pid, d in enumerate(kept)}, "redistributed": len(leftovers)}
    return PartitionPlan("FT-NIID", assignment, seed, meta)


def make_batches(sample_ids, batches_per_epoch: int, batch_size: int, seed: int = 0) -> list[list[str]]:
    """Exactly ``batches_per_epoch`` batches for one epoch.

    Samples are drawn from shuffled passes over the participant's data; when
    one pass cannot fill the quota, further passes are reshuffled and
    appended, so samples repeat.
    """
    ids = list(sample_ids)
    if not ids:
        raise InvalidArgument("cannot batch an empty sample list")
    need = batches_per_epoch * batch_size
    rng = np.random.default_rng(seed)
    stream = []
    while len(stream) < need:
        stream.extend(ids[i] for i in rng.permutation(len(ids)))
    stream = stream[:need]
    return [stream[i : i + batch_size] for i in range(0, need, batch_size)]


def collate(samples: list[Sample]):
    """Stack a batch of samples into (B, 3, H, W) targets and per-source stacks."""
    target = torch.stack([s.target for s in samples])
    n_src = len(samples[0].sources)
    sources = [torch.stack([s.sources[k] for s in samples]) for k in range(n_src)]
    pseudo = None
    if all(s.pseudo_depth is not None for s in samples):
        pseudo = torch.stack([s.pseudo_depth for s in samples]).unsqueeze(1)
    return target, sources, pseudo


def attach_pseudo_depth(samples, provider):
    """Precompute the frozen depth prior for every sample in place."""
    from .models import pseudo_depth

    for s in samples:
        s.pseudo_depth = pseudo_depth(provider, s.target, s.gt_depth)
    return samples


# --- KITTI layout -------------------------------------------------------------------


def _drive_of(rel: Path) -> str:
    for part in rel.parts:
        if part.endswith("_sync"):
            return part
    return rel.parent.name


def _neighbour(path: Path, offset: int) -> Path:
    m = re.fullmatch(r"(\d+)", path.stem)
    if not m:
        return path.with_name("__missing__")
    idx = int(m.group(1)) + offset
    return path.with_name(f"{idx:0{len(path.stem)}d}{path.suffix}")


def _find_calibration(frame: Path, root: Path) -> Path | None:
    for parent in frame.parents:
        candidate = parent / "calib.txt"
        if candidate.exists():
            return candidate
        if parent == root:
            break
    return None


def _load_image(path: Path, size) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize(size, Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).clamp(0, 1).contiguous()


def _load_depth(path: Path, size, cap: float) -> torch.Tensor:
    depth = torch.from_numpy(np.load(path).astype(np.float32))
    if tuple(depth.shape) != (size[1], size[0]):
        # Nearest resize keeps sparse LiDAR zeros from bleeding into neighbours.
        depth = torch.nn.functional.interpolate(depth[None, None], size=(size[1], size[0]), mode="nearest")[0, 0]
    return depth.clamp(max=cap)


def load_kitti_layout(root, split_file, resolution=KITTI_RESOLUTION, max_depth: float = KITTI_MAX_DEPTH,
                      gt_root=None, region_root=None) -> list[Sample]:
    """Read frames named in ``split_file`` (one relative path per line).

    Each frame takes its previous and next frame in the same directory as
    sources. Intrinsics come from the nearest ``calib.txt`` above the frame
    and are rescaled to ``resolution`` (width, height). Optional ground truth
    lives under ``gt_root`` at the same relative path with an ``.npy``
    suffix; optional region masks likewise under ``region_root``.
    """
    root = Path(root)
    rel_paths = [Path(line.strip()) for line in Path(split_file).read_text().splitlines() if line.strip()]
    width, height = resolution

    missing = []
    plan = []
    for rel in rel_paths:
        frame = root / rel
        prev, nxt = _neighbour(frame, -1), _neighbour(frame, 1)
        calib = _find_calibration(frame, root)
        needed = [frame, prev, nxt]
        missing.extend(p for p in needed if not p.exists())
        if calib is None:
            missing.append(frame.parent / "calib.txt")
        gt = Path(gt_root) / rel.with_suffix(".npy") if gt_root else None
        if gt is not None and not gt.exists():
            missing.append(gt)
        plan.append((rel, frame, prev, nxt, calib, gt))
    if missing:
        raise IngestionError(sorted(set(missing)))

    samples = []
    for rel, frame, prev, nxt, calib, gt in plan:
        try:
            target = _load_image(frame, (width, height))
            sources = [_load_image(prev, (width, height)), _load_image(nxt, (width, height))]
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable frame %s: %s", frame, exc)
            continue
        K = Intrinsics.from_file(calib).scaled(width, height)
        region = None
        if region_root:
            rpath = Path(region_root) / rel.with_suffix(".npy")
            if rpath.exists():
                region = torch.from_numpy(np.load(rpath).astype(bool))
        samples.append(
            Sample(
                sample_id=rel.as_posix(),
                target=target,
                sources=sources,
                intrinsics=K,
                drive_id=_drive_of(rel),
                gt_depth=_load_depth(gt, (width, height), max_depth) if gt is not None else None,
                region_mask=region,
            )
        )
    return samples
