"""Training objectives.

Five components: per-modality identity cross-entropy, batch-hard triplet,
identity consistency through the auxiliary stream, identity-centre alignment
across the three streams, and a Gaussian-MMD modality alignment on temporally
accumulated prototypes. The total is their weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .model import ForwardOutput

BETA_FLOOR = 1e-8

# exact distances matter more than speed at these sizes
_CDIST_MODE = "donot_use_mm_for_euclid_dist"


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.55
    gamma: float = 0.25
    theta: float = 0.5
    sigma: float = 0.008
    tri_margin: float = 0.3

    def __post_init__(self):
        for name in ("alpha", "gamma", "theta", "sigma", "tri_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean NLL of the softmax, stabilized by max subtraction."""
    labels = torch.as_tensor(labels, device=logits.device)
    if labels.ndim != 1 or logits.ndim != 2 or len(labels) != len(logits):
        raise ValueError("expected (N, C) logits and (N,) labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    log_p = F.log_softmax(logits, dim=1)
    return -log_p.gather(1, labels.view(-1, 1)).mean()


def identity_loss(out: ForwardOutput, labels: Tensor) -> Tensor:
    """Sum of the visible and infrared classification losses."""
    return cross_entropy(out.logits_vv, labels) + cross_entropy(out.logits_rr, labels)


def identity_consistency_loss(out: ForwardOutput, labels: Tensor) -> Tensor:
    """Auxiliary embeddings scored by both per-modality classifiers; gradients
    reach the classifiers and the auxiliary stream alike."""
    if out.logits_va is None or out.logits_ra is None:
        raise ValueError("consistency loss needs auxiliary logits (training mode, aux on)")
    return cross_entropy(out.logits_va, labels) + cross_entropy(out.logits_ra, labels)


def auxiliary_identity_loss(out: ForwardOutput, labels: Tensor) -> Tensor:
    """Plain identity loss on the auxiliary stream via its own head; stands in
    for the consistency loss in the aux-only ablation."""
    if out.logits_aa is None:
        raise ValueError("auxiliary identity loss needs the auxiliary stream")
    return cross_entropy(out.logits_aa, labels)


def identity_centres(embeddings: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Per-identity arithmetic mean; rows follow sorted unique labels."""
    labels = torch.as_tensor(labels, device=embeddings.device)
    if len(labels) != len(embeddings):
        raise ValueError("labels and embeddings disagree on length")
    uniq = torch.unique(labels)
    centres = torch.stack(
        [embeddings[labels == ident].mean(dim=0) for ident in uniq]
    )
    return centres, uniq


def identity_alignment_loss(c_v: Tensor, c_r: Tensor, c_a: Tensor, alpha: float) -> Tensor:
    """Hinged triplet objective over identity centres.

    For each identity, the positive is the farther of its own visible and
    infrared centres from the auxiliary centre; the negative is the nearest
    visible-or-infrared centre of any other identity. Summed over identities.
    """
    if not (c_v.shape == c_r.shape == c_a.shape) or c_a.ndim != 2:
        raise ValueError("centres must be three equal (P, C) matrices")
    p = c_a.shape[0]
    if p < 2:
        raise ValueError("need >= 2 identities (no negative centre otherwise)")
    pos = torch.maximum(
        (c_a - c_v).norm(dim=1), (c_a - c_r).norm(dim=1)
    )
    d_v = torch.cdist(c_a, c_v, compute_mode=_CDIST_MODE)
    d_r = torch.cdist(c_a, c_r, compute_mode=_CDIST_MODE)
    cross = torch.minimum(d_v, d_r)
    eye = torch.eye(p, dtype=torch.bool, device=c_a.device)
    neg = cross.masked_fill(eye, float("inf")).min(dim=1).values
    return F.relu(alpha + pos - neg).sum()


def beta_schedule(iteration: int, total: int) -> float:
    """Prototype update ratio: linear from the 1e-8 floor up to 1 at the end
    of training."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= iteration <= total:
        raise ValueError("iteration must lie in [0, total]")
    return max(BETA_FLOOR, iteration / total)


def project_prototypes(z: Tensor, w: Tensor) -> Tensor:
    """Row features projected by the learnable matrix (rows of z map through w)."""
    return z @ w.T


def accumulate_prototypes(z: Tensor, w: Tensor, prev: Tensor | None, beta: float) -> Tensor:
    """Convex combination of the fresh projection with the accumulated
    prototype; the history term is a constant for differentiation."""
    fresh = project_prototypes(z, w)
    if prev is None or beta >= 1.0:
        return fresh
    if prev.shape != fresh.shape:
        raise ValueError(
            f"prototype rows changed shape: {tuple(prev.shape)} -> {tuple(fresh.shape)}"
        )
    return beta * fresh + (1.0 - beta) * prev.detach()


class PrototypeMemory(nn.Module):
    """Per-modality projection matrices plus the accumulated prototypes.

    The first update projects the batch directly; later updates blend the new
    projection in with the scheduled ratio. Stored prototypes are detached, so
    gradients only flow through the current batch's term.
    """

    def __init__(self, feature_dim: int, rows: int, total_iterations: int):
        super().__init__()
        if total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        self.total_iterations = total_iterations
        for name in ("w_v", "w_r", "w_a"):
            self.register_parameter(name, nn.Parameter(torch.eye(feature_dim)))
        for name in ("t_v", "t_r", "t_a"):
            self.register_buffer(name, torch.zeros(rows, feature_dim))
        self.register_buffer("iteration", torch.zeros((), dtype=torch.long))

    def effective_beta(self) -> float:
        """Update ratio the next update() call will apply."""
        i = int(self.iteration)
        return 1.0 if i == 0 else beta_schedule(i, self.total_iterations)

    def update(self, z_v: Tensor, z_r: Tensor, z_a: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        i = int(self.iteration)
        if i > self.total_iterations:
            raise ValueError("prototype memory advanced past total_iterations")
        outs = []
        for z, w, name in ((z_v, self.w_v, "t_v"), (z_r, self.w_r, "t_r"),
                           (z_a, self.w_a, "t_a")):
            if i == 0:
                t = project_prototypes(z, w)
            else:
                beta = beta_schedule(i, self.total_iterations)
                prev = getattr(self, name)
                if beta < 1.0 and prev.shape != (z.shape[0], w.shape[0]):
                    raise ValueError("batch rows no longer match stored prototypes")
                t = accumulate_prototypes(z, w, prev, beta)
            setattr(self, name, t.detach())
            outs.append(t)
        self.iteration += 1
        return tuple(outs)


def _median_bandwidth(d: Tensor) -> Tensor:
    """Median of the off-diagonal pooled pairwise distances; 1 when degenerate."""
    n = d.shape[0]
    if n < 2:
        return d.new_tensor(1.0)
    iu = torch.triu_indices(n, n, offset=1, device=d.device)
    med = d[iu[0], iu[1]].median()
    if float(med.detach()) <= 0.0:
        return d.new_tensor(1.0)
    return med


def gaussian_mmd(x: Tensor, y: Tensor, bandwidth="median") -> Tensor:
    """Squared maximum mean discrepancy under a Gaussian kernel.

    Biased estimator (diagonal terms included), so the value is a true squared
    RKHS norm and never negative. The median heuristic takes the median of all
    pairwise distances of the pooled rows, falling back to 1 when degenerate.
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError("expected (N, C) and (M, C) with matching C")
    n = x.shape[0]
    z = torch.cat([x, y], dim=0)
    d = torch.cdist(z, z, compute_mode=_CDIST_MODE)
    if bandwidth == "median":
        sigma = _median_bandwidth(d)
    else:
        sigma = torch.as_tensor(float(bandwidth), dtype=x.dtype, device=x.device)
        if float(sigma) <= 0:
            raise ValueError("bandwidth must be positive")
    k = torch.exp(-d.pow(2) / (2.0 * sigma**2))
    return k[:n, :n].mean() + k[n:, n:].mean() - 2.0 * k[:n, n:].mean()


def modality_alignment_loss(t_v: Tensor, t_r: Tensor, t_a: Tensor, labels) -> Tensor:
    """Mean over identities of the auxiliary-bridged prototype distances:
    MMD(visible, auxiliary) + MMD(auxiliary, infrared). The visible-infrared
    distance is only constrained through the bridge."""
    labels = torch.as_tensor(labels, device=t_a.device)
    if not (t_v.shape == t_r.shape == t_a.shape) or len(labels) != t_a.shape[0]:
        raise ValueError("prototypes must be three equal (B, C) matrices with row labels")
    uniq = torch.unique(labels)
    total = t_a.new_zeros(())
    for ident in uniq:
        rows = labels == ident
        if not bool(rows.any()):
            raise ValueError("empty identity group")
        total = total + gaussian_mmd(t_v[rows], t_a[rows]) + gaussian_mmd(
            t_a[rows], t_r[rows]
        )
    return total / len(uniq)


def hard_triplet_loss(embeddings: Tensor, labels, margin: float) -> Tensor:
    """Batch-hard triplet loss with Euclidean distances: mean over anchors of
    the hinged hardest-positive minus hardest-negative gap."""
    labels = torch.as_tensor(labels, device=embeddings.device)
    if embeddings.ndim != 2 or len(labels) != len(embeddings):
        raise ValueError("expected (N, C) embeddings with (N,) labels")
    same = labels.view(-1, 1) == labels.view(1, -1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=embeddings.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not bool(pos_mask.any(dim=1).all()):
        raise ValueError("every anchor needs a positive (>= 2 samples per identity)")
    if not bool(neg_mask.any(dim=1).all()):
        raise ValueError("every anchor needs a negative (>= 2 identities)")
    d = torch.cdist(embeddings, embeddings, compute_mode=_CDIST_MODE)
    hardest_pos = d.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = d.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return F.relu(margin + hardest_pos - hardest_neg).mean()


_COMPONENT_ORDER = ("id", "tri", "idc", "ia", "ma", "id_aux")


def total_loss(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of whichever components an ablation computed.

    'id' and 'tri' enter with weight 1, as does the stand-in auxiliary
    identity loss 'id_aux'; 'idc', 'ia', 'ma' are scaled by gamma, theta,
    sigma. A non-finite component aborts with its name.
    """
    unknown = set(components) - set(_COMPONENT_ORDER)
    if unknown:
        raise ValueError(f"unknown loss component(s): {sorted(unknown)}")
    for name, value in components.items():
        if not bool(torch.isfinite(value)):
            raise FloatingPointError(f"loss component '{name}' is not finite")
    scale = {"id": 1.0, "tri": 1.0, "id_aux": 1.0,
             "idc": weights.gamma, "ia": weights.theta, "ma": weights.sigma}
    first = next(iter(components.values()))
    total = first.new_zeros(())
    for name in _COMPONENT_ORDER:
        if name in components:
            total = total + scale[name] * components[name]
    return total
