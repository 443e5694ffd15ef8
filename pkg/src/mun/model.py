"""Backbone: two modality-specific stems, a weight-shared residual trunk,
generalized-mean pooling, and per-modality classifiers.

During training the generator turns identity-aligned pairs of low-level
visible/infrared features into an auxiliary stream that runs through the same
trunk. Inference uses the visible and infrared streams only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .auxgen import AuxiliaryGenerator
from .synthdata import MOD_INFRARED, MOD_VISIBLE

MOD_AUXILIARY = 2

GEM_CLAMP = 1e-6


def gem_pool(x: Tensor, p) -> Tensor:
    """Generalized-mean pooling over the spatial dimensions.

    Values are clamped below at 1e-6 before exponentiation. p=1 is average
    pooling; large p approaches max pooling.
    """
    p = torch.as_tensor(p, dtype=x.dtype, device=x.device)
    if float(p.detach()) < 1.0:
        raise ValueError("gem_pool requires p >= 1")
    return x.clamp(min=GEM_CLAMP).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)


class GeMPool(nn.Module):
    """GeM pooling with a learnable exponent p = 1 + softplus(p_raw) >= 1."""

    def __init__(self, init_p: float = 3.0):
        super().__init__()
        if init_p <= 1.0:
            raise ValueError("init_p must be > 1")
        # softplus inverse of (init_p - 1)
        self.p_raw = nn.Parameter(torch.tensor(math.log(math.expm1(init_p - 1.0))))

    @property
    def p(self) -> Tensor:
        return 1.0 + F.softplus(self.p_raw)

    def forward(self, x: Tensor) -> Tensor:
        return gem_pool(x, self.p)


class Stem(nn.Module):
    def __init__(self, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(3, out_channels, 3, stride=2, padding=1)
        self.bn = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        return self.relu(self.bn(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU()
        if in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn2(self.conv2(self.relu(self.bn1(self.conv1(x)))))
        return self.relu(y + self.shortcut(x))


@dataclass
class ForwardOutput:
    """Training-mode outputs: pooled embeddings per stream plus classifier
    logits. logits_aa is the dedicated auxiliary head, used only when the
    consistency loss is ablated away."""

    z_v: Tensor
    z_r: Tensor
    z_a: Tensor | None
    logits_vv: Tensor
    logits_rr: Tensor
    logits_va: Tensor | None
    logits_ra: Tensor | None
    logits_aa: Tensor | None


class MunModel(nn.Module):
    def __init__(
        self,
        num_classes: int,
        stem_channels: int = 16,
        trunk_channels: Sequence[int] = (32, 64),
        pyramid_ratios: Sequence[int] = (2, 4, 6, 12),
    ):
        super().__init__()
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.stem_v = Stem(stem_channels)
        self.stem_r = Stem(stem_channels)
        self.generator = AuxiliaryGenerator(stem_channels, pyramid_ratios)
        blocks = []
        c = stem_channels
        for out in trunk_channels:
            blocks.append(ResidualBlock(c, out))
            c = out
        self.trunk = nn.Sequential(*blocks)
        self.gem = GeMPool()
        self.feature_dim = c
        self.num_classes = num_classes
        # batch-norm neck: classifiers see normalized features, metric losses
        # see the raw pooled ones
        self.feat_bn = nn.BatchNorm1d(c)
        self.feat_bn.bias.requires_grad_(False)
        self.classifier_v = nn.Linear(c, num_classes, bias=False)
        self.classifier_r = nn.Linear(c, num_classes, bias=False)
        self.classifier_a = nn.Linear(c, num_classes, bias=False)
        for head in (self.classifier_v, self.classifier_r, self.classifier_a):
            nn.init.normal_(head.weight, std=0.001)

    def stem_features(self, images: Tensor, modalities) -> Tensor:
        """Route each sample through the stem matching its modality tag."""
        modalities = np.asarray(modalities)
        if np.any(modalities == MOD_AUXILIARY):
            raise ValueError("auxiliary-tagged samples cannot be stemmed; "
                             "auxiliary features are generated")
        if not np.all(np.isin(modalities, (MOD_VISIBLE, MOD_INFRARED))):
            raise ValueError("unknown modality tag")
        vis = np.flatnonzero(modalities == MOD_VISIBLE)
        inf = np.flatnonzero(modalities == MOD_INFRARED)
        n, _, h, w = images.shape
        out = images.new_zeros((n, self.stem_v.conv.out_channels, h // 2, w // 2))
        if len(vis):
            out[torch.as_tensor(vis, device=images.device)] = self.stem_v(images[vis])
        if len(inf):
            out[torch.as_tensor(inf, device=images.device)] = self.stem_r(images[inf])
        return out

    def _validate_pk(self, labels, modalities, P: int, K: int) -> None:
        n = len(labels)
        if n != 2 * P * K:
            raise ValueError(f"PK batch must hold 2*P*K = {2 * P * K} samples, got {n}")
        half = P * K
        modalities = np.asarray(modalities)
        labels = np.asarray(labels)
        if not (np.all(modalities[:half] == MOD_VISIBLE)
                and np.all(modalities[half:] == MOD_INFRARED)):
            raise ValueError("PK batch layout is visible half then infrared half")
        if not np.array_equal(labels[:half], labels[half:]):
            raise ValueError("visible and infrared halves must align by identity")
        ids, counts = np.unique(labels[:half], return_counts=True)
        if len(ids) != P or not np.all(counts == K):
            raise ValueError(f"PK batch needs {P} identities with {K} samples each")

    def forward_train(
        self,
        images: Tensor,
        labels,
        modalities,
        P: int,
        K: int,
        with_aux: bool = True,
    ) -> ForwardOutput:
        """Training forward pass over a PK batch.

        The j-th visible and j-th infrared sample share an identity by the
        batch layout; the generator consumes those aligned pairs.
        """
        if not self.training:
            raise RuntimeError("forward_train requires train mode; use embed() for eval")
        self._validate_pk(labels, modalities, P, K)
        half = P * K
        f_v = self.stem_v(images[:half])
        f_r = self.stem_r(images[half:])
        if with_aux:
            f_a = self.generator(f_v, f_r)
            feats = torch.cat([f_v, f_r, f_a], dim=0)
        else:
            feats = torch.cat([f_v, f_r], dim=0)
        z = self.gem(self.trunk(feats))
        zn = self.feat_bn(z)
        z_v, z_r = z[:half], z[half : 2 * half]
        zn_v, zn_r = zn[:half], zn[half : 2 * half]
        z_a = z[2 * half :] if with_aux else None
        zn_a = zn[2 * half :] if with_aux else None
        return ForwardOutput(
            z_v=z_v,
            z_r=z_r,
            z_a=z_a,
            logits_vv=self.classifier_v(zn_v),
            logits_rr=self.classifier_r(zn_r),
            logits_va=self.classifier_v(zn_a) if with_aux else None,
            logits_ra=self.classifier_r(zn_a) if with_aux else None,
            logits_aa=self.classifier_a(zn_a) if with_aux else None,
        )

    def embed(self, images: Tensor, modalities) -> Tensor:
        """Inference embeddings (normalized by the neck); only the visible and
        infrared streams exist here, never the auxiliary one."""
        z = self.gem(self.trunk(self.stem_features(images, modalities)))
        return self.feat_bn(z)
