"""Depth and pose networks, pseudo-depth providers and parameter snapshots."""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AggregationError, InvalidArgument

MIN_DEPTH = 0.1
MAX_DEPTH = 100.0


class ParameterSet:
    """Immutable, ordered snapshot of a network's trainable weights."""

    def __init__(self, entries=None):
        self._entries = OrderedDict()
        for name, arr in (entries or {}).items():
            a = np.array(arr, copy=True)
            a.setflags(write=False)
            self._entries[name] = a

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterSet":
        return cls(OrderedDict((n, p.detach().cpu().numpy()) for n, p in module.named_parameters()))

    def load_into(self, module: nn.Module):
        params = dict(module.named_parameters())
        if list(params) != list(self._entries):
            raise AggregationError("parameter names do not match the module")
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(torch.from_numpy(np.array(self._entries[name])))

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self):
        return list(self._entries)

    @property
    def total_bytes(self) -> int:
        return sum(a.size * a.itemsize for a in self._entries.values())

    def signature(self):
        return [(n, a.shape) for n, a in self._entries.items()]

    def check_compatible(self, other: "ParameterSet"):
        """Raise :class:`AggregationError` naming the first mismatched entry."""
        mine, theirs = self.signature(), other.signature()
        for (n1, s1), (n2, s2) in zip(mine, theirs):
            if n1 != n2 or s1 != s2:
                raise AggregationError(f"entry {n1!r} {s1} does not match {n2!r} {s2}")
        if len(mine) != len(theirs):
            extra = (mine if len(mine) > len(theirs) else theirs)[min(len(mine), len(theirs))]
            raise AggregationError(f"entry {extra[0]!r} is present in only one parameter set")

    def compatible(self, other: "ParameterSet") -> bool:
        return self.signature() == other.signature()

    def equals(self, other: "ParameterSet") -> bool:
        return self.compatible(other) and all(np.array_equal(a, other[n]) for n, a in self.items())

    def save(self, path):
        np.savez(path, **{f"p{i:04d}__{n}": a for i, (n, a) in enumerate(self.items())})

    @classmethod
    def load(cls, path) -> "ParameterSet":
        with np.load(path) as data:
            keys = sorted(data.files)
            return cls(OrderedDict((k.split("__", 1)[1], data[k]) for k in keys))


def parameter_bytes(*sets: ParameterSet) -> int:
    return sum(s.total_bytes for s in sets)


def sigmoid_to_depth(sigma, min_depth: float = MIN_DEPTH, max_depth: float = MAX_DEPTH):
    """Map a sigmoid output to depth via ``1 / (a * sigma + b)``.

    ``b = 1 / max_depth`` and ``a = 1 / min_depth - 1 / max_depth`` so that
    sigma = 0 gives ``max_depth`` and sigma = 1 gives ``min_depth``.
    """
    sigma = torch.as_tensor(sigma)
    if ((sigma < 0) | (sigma > 1)).any():
        raise InvalidArgument("sigmoid output must lie in [0, 1]")
    b = 1 / max_depth
    a = 1 / min_depth - b
    return 1 / (a * sigma + b)


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    pose_widths: tuple[int, ...] = (16, 32, 64)
    seed: int = 0
    depth_head_bias: float = -4.0
    coord_channels: bool = True
    rotation_scale: float = 0.01
    translation_scale: float = 0.1

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, padding_mode="reflect"), nn.ELU())


class DepthNet(nn.Module):
    """Small U-Net: strided conv encoder, upsampling decoder with skips, sigmoid head."""

    def __init__(self, widths=(16, 32, 64), head_bias: float = -4.0, coord_channels: bool = True):
        super().__init__()
        enc = [widths[0], *widths]
        self.coord_channels = coord_channels
        self.stem = _conv(5 if coord_channels else 3, enc[0])
        self.down = nn.ModuleList(_conv(enc[i], enc[i + 1], 2) for i in range(len(widths)))
        self.up = nn.ModuleList(_conv(enc[i + 1] + enc[i], enc[i]) for i in reversed(range(len(widths))))
        self.head = nn.Conv2d(enc[0], 1, 3, 1, 1, padding_mode="reflect")
        # Start near sigma = 0.02 (depth ~ 5) so the range has headroom on both sides.
        nn.init.constant_(self.head.bias, head_bias)

    def sigmoid_map(self, x):
        if self.coord_channels:
            # Normalised pixel coordinates let the net tie depth to image position.
            b, _, h, w = x.shape
            v, u = torch.meshgrid(torch.linspace(-1, 1, h, dtype=x.dtype, device=x.device),
                                  torch.linspace(-1, 1, w, dtype=x.dtype, device=x.device), indexing="ij")
            x = torch.cat([x, u.expand(b, 1, h, w), v.expand(b, 1, h, w)], 1)
        feats = [self.stem(x)]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        y = feats.pop()
        for layer in self.up:
            skip = feats.pop()
            y = F.interpolate(y, size=skip.shape[-2:], mode="nearest")
            y = layer(torch.cat([y, skip], 1))
        return torch.sigmoid(self.head(y))

    def forward(self, x):
        return sigmoid_to_depth(self.sigmoid_map(x))


class PoseNet(nn.Module):
    """Six-channel conv encoder regressing a relative pose (axis-angle, translation)."""

    def __init__(self, widths=(16, 32, 64), rotation_scale: float = 0.01, translation_scale: float = 0.01):
        super().__init__()
        self.register_buffer("scale", torch.tensor([rotation_scale] * 3 + [translation_scale] * 3), persistent=False)
        layers, cin = [], 6
        for w in widths:
            layers.append(_conv(cin, w, 2))
            cin = w
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 6, 1)

    def forward(self, a, b):
        out = self.head(self.encoder(torch.cat([a, b], 1))).mean((2, 3))
        return out * self.scale.to(out.dtype)


def build_networks(arch: ArchConfig = ArchConfig()):
    torch.manual_seed(arch.seed)
    return (DepthNet(arch.widths, arch.depth_head_bias, arch.coord_channels),
            PoseNet(arch.pose_widths, arch.rotation_scale, arch.translation_scale))


def _check_image(image):
    if image.dim() != 4 or image.shape[1] != 3:
        raise InvalidArgument(f"expected (B, 3, H, W) images, got {tuple(image.shape)}")


def depth_forward(net: DepthNet, image):
    if image.dim() == 3:
        return depth_forward(net, image[None])[0]
    _check_image(image)
    return net(image)


def pose_forward(net: PoseNet, a, b):
    if a.shape != b.shape:
        raise InvalidArgument(f"image pair shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        return pose_forward(net, a[None], b[None])[0]
    _check_image(a)
    return net(a, b)


class PseudoDepthProvider(Protocol):
    def __call__(self, image: torch.Tensor, reference: torch.Tensor | None = None) -> torch.Tensor: ...


class NoisyAnalyticDepth:
    """Desk-scale stand-in for a pretrained depth prior.

    Perturbs the renderer's analytic depth with smooth multiplicative noise,
    clipped to ``±noise_bound`` relative error. The noise field is a function
    of the seed and the image content, so equal images give equal priors.
    """

    def __init__(self, noise_bound: float = 0.1, smoothing: float = 3.0, seed: int = 0):
        self.noise_bound = noise_bound
        self.smoothing = smoothing
        self.seed = seed

    def __call__(self, image, reference=None):
        if reference is None:
            raise InvalidArgument("analytic provider needs the rendered depth as reference")
        reference = torch.as_tensor(reference)
        if self.noise_bound == 0:
            return reference.clone()
        from scipy.ndimage import gaussian_filter

        img = np.ascontiguousarray(torch.as_tensor(image).detach().cpu().numpy())
        digest = hashlib.sha256(img.tobytes()).digest()
        rng = np.random.default_rng([self.seed, int.from_bytes(digest[:8], "little")])
        field = gaussian_filter(rng.standard_normal(reference.shape[-2:]), self.smoothing)
        field = field / (np.abs(field).max() + 1e-12) * self.noise_bound
        noise = torch.from_numpy(field).to(reference.dtype)
        return reference * (1 + noise)


class ModulePseudoDepth:
    """Wrap a pretrained depth module as a frozen prior."""

    def __init__(self, module: nn.Module):
        self.module = module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    def __call__(self, image, reference=None):
        with torch.no_grad():
            return depth_forward(self.module, image)


def pseudo_depth(provider: PseudoDepthProvider, image, reference=None):
    with torch.no_grad():
        return provider(image, reference).detach()


def save_checkpoint(params: ParameterSet, path, arch: ArchConfig, round_index: int):
    path = Path(path)
    params.save(path.with_suffix(".npz"))
    manifest = {
        "arch_hash": arch.digest(),
        "parameter_bytes": params.total_bytes,
        "round": round_index,
        "entries": [[n, list(s)] for n, s in params.signature()],
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    return ParameterSet.load(path.with_suffix(".npz")), manifest
