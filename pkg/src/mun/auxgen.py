"""Auxiliary feature generator.

Two per-modality learners mine identity-aware patterns with multi-kernel
depth-wise convolutions on an inverted-residual layout; a cross-modality
learner pools both outputs into a spatial pyramid, rebuilds each scale with a
learnable transposed convolution shared across modalities, and fuses the
stack into a single auxiliary feature map. Each learner's contribution is
gated by a learnable scale constrained to (1e-4, 1].
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

SCALE_EPS = 1e-4


def scale_from_raw(raw: Tensor) -> Tensor:
    """Map an unconstrained scalar into (SCALE_EPS, 1]."""
    return SCALE_EPS + (1.0 - SCALE_EPS) * torch.sigmoid(raw)


def raw_for_scale(scale: float) -> float:
    """Inverse of scale_from_raw, for initialization."""
    if not SCALE_EPS < scale <= 1.0 - 1e-9:
        raise ValueError("initial scale must lie in (eps, 1)")
    p = (scale - SCALE_EPS) / (1.0 - SCALE_EPS)
    return math.log(p / (1.0 - p))


class IntraModalityLearner(nn.Module):
    """Per-modality learner (channel split -> 5x5/7x7 depth-wise -> inverted
    residual with a 3x3 depth-wise remodel -> gated projection)."""

    def __init__(self, channels: int, init_scale: float = 0.5):
        super().__init__()
        if channels < 2 or channels % 2:
            raise ValueError("channels must be even (channel split)")
        half = channels // 2
        wide = 4 * channels
        self.channels = channels
        self.dw5 = nn.Conv2d(half, half, 5, padding=2, groups=half)
        self.dw7 = nn.Conv2d(half, half, 7, padding=3, groups=half)
        self.bn1 = nn.BatchNorm2d(channels)
        self.pw_expand = nn.Conv2d(channels, wide, 1)
        self.relu = nn.ReLU()
        self.dw3 = nn.Conv2d(wide, wide, 3, padding=1, groups=wide)
        self.bn2 = nn.BatchNorm2d(wide)
        self.pw_reduce = nn.Conv2d(wide, channels, 1)
        self.i_scale_raw = nn.Parameter(torch.tensor(raw_for_scale(init_scale)))

    @property
    def scale(self) -> Tensor:
        return scale_from_raw(self.i_scale_raw)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}, H, W) input")
        if min(x.shape[2], x.shape[3]) < 7:
            raise ValueError("spatial size must be >= 7 (largest kernel)")
        half = self.channels // 2
        r = torch.cat([self.dw5(x[:, :half]), self.dw7(x[:, half:])], dim=1)
        r1 = self.pw_expand(self.bn1(r))
        r2 = self.dw3(self.relu(r1)) + r1
        return self.scale * self.pw_reduce(self.bn2(r2))


class CrossModalityLearner(nn.Module):
    """Cross-modality learner: spatial pyramid pooling at the configured
    ratios, per-scale transposed-convolution reconstruction (one kernel per
    scale, shared between modalities), channel concat, gated fusion."""

    def __init__(
        self,
        channels: int,
        ratios: Sequence[int] = (2, 4, 6, 12),
        init_scale: float = 0.5,
    ):
        super().__init__()
        if not ratios or any(r < 1 for r in ratios):
            raise ValueError("ratios must be positive")
        self.channels = channels
        self.ratios = tuple(int(r) for r in ratios)
        self.tr = nn.ModuleList(
            [nn.ConvTranspose2d(channels, channels, r, stride=r) for r in self.ratios]
        )
        fused = 2 * len(self.ratios) * channels
        self.bn = nn.BatchNorm2d(fused)
        self.pw_fuse = nn.Conv2d(fused, channels, 1)
        self.c_scale_raw = nn.Parameter(torch.tensor(raw_for_scale(init_scale)))

    @property
    def scale(self) -> Tensor:
        return scale_from_raw(self.c_scale_raw)

    def forward(self, f_v: Tensor, f_r: Tensor) -> Tensor:
        if f_v.shape != f_r.shape:
            raise ValueError(f"shape mismatch: {tuple(f_v.shape)} vs {tuple(f_r.shape)}")
        if f_v.ndim != 4 or f_v.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}, H, W) inputs")
        h, w = f_v.shape[2], f_v.shape[3]
        for r in self.ratios:
            if h % r or w % r:
                raise ValueError(f"ratio {r} does not divide the {h}x{w} map")
        n = f_v.shape[0]
        both = torch.cat([f_v, f_r], dim=0)  # one pass per scale covers both streams
        per_scale = []
        for r, tr in zip(self.ratios, self.tr):
            per_scale.append(tr(F.avg_pool2d(both, kernel_size=r, stride=r)))
        rebuilt = [s[:n] for s in per_scale] + [s[n:] for s in per_scale]
        return self.scale * self.pw_fuse(self.bn(torch.cat(rebuilt, dim=1)))


class AuxiliaryGenerator(nn.Module):
    """Full generator: two independent per-modality learners feeding the
    cross-modality learner."""

    def __init__(self, channels: int, ratios: Sequence[int] = (2, 4, 6, 12)):
        super().__init__()
        self.iml_v = IntraModalityLearner(channels)
        self.iml_r = IntraModalityLearner(channels)
        self.cml = CrossModalityLearner(channels, ratios)

    def forward(self, f_v: Tensor, f_r: Tensor) -> Tensor:
        return self.cml(self.iml_v(f_v), self.iml_r(f_r))
