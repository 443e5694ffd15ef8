"""Finite-difference verification of every analytic gradient path.

Each registered check builds a tiny float64 instance, computes autograd
gradients of a scalar objective, and compares them against central finite
differences (h = 1e-5). Builders re-draw their instance while any hinge or
max/min selection sits too close to a kink for the difference quotient to be
trusted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from .auxgen import CrossModalityLearner, IntraModalityLearner
from .losses import (
    accumulate_prototypes,
    hard_triplet_loss,
    identity_alignment_loss,
    identity_centres,
    identity_consistency_loss,
    identity_loss,
    modality_alignment_loss,
)
from .model import ForwardOutput, GeMPool, MunModel

H_STEP = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
MAX_REDRAWS = 50

# name -> builder(seed) -> (loss_fn, {param_name: leaf tensor})
CheckBuilder = Callable[[int], tuple[Callable[[], Tensor], dict[str, Tensor]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_param: str
    passed: bool


def finite_difference_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor,
                               h: float = H_STEP) -> Tensor:
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = float(loss_fn())
            flat[i] = orig - h
            minus = float(loss_fn())
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    diff = float((analytic - numeric).abs().max())
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), 1e-6)
    return diff / scale


def run_check(name: str, builder: CheckBuilder, seed: int,
              h: float = H_STEP) -> tuple[float, str]:
    """Returns (max relative error over parameter tensors, worst tensor name)."""
    loss_fn, params = builder(seed)
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    value = loss_fn()
    value.backward()
    worst, worst_name = 0.0, ""
    for pname, p in params.items():
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        numeric = finite_difference_gradient(loss_fn, p, h)
        err = relative_error(analytic, numeric)
        if err > worst:
            worst, worst_name = err, pname
    return worst, worst_name


def _leaf(rng: torch.Generator, *shape) -> Tensor:
    return torch.randn(*shape, generator=rng, dtype=torch.float64, requires_grad=True)


def _labels(rng: torch.Generator, n: int, classes: int) -> Tensor:
    return torch.randint(0, classes, (n,), generator=rng)


def _partial_output(**kwargs) -> ForwardOutput:
    fields = dict(z_v=None, z_r=None, z_a=None, logits_vv=None, logits_rr=None,
                  logits_va=None, logits_ra=None, logits_aa=None)
    fields.update(kwargs)
    return ForwardOutput(**fields)


def _build_identity_loss(seed: int):
    rng = torch.Generator().manual_seed(seed)
    lv, lr_ = _leaf(rng, 6, 4), _leaf(rng, 6, 4)
    y = _labels(rng, 6, 4)
    def loss_fn():
        return identity_loss(_partial_output(logits_vv=lv, logits_rr=lr_), y)
    return loss_fn, {"logits_vv": lv, "logits_rr": lr_}


def _build_consistency_loss(seed: int):
    rng = torch.Generator().manual_seed(seed)
    za = _leaf(rng, 6, 3)
    wv, wr = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    y = _labels(rng, 6, 4)
    def loss_fn():
        out = _partial_output(z_a=za, logits_va=za @ wv.T, logits_ra=za @ wr.T)
        return identity_consistency_loss(out, y)
    return loss_fn, {"z_a": za, "classifier_v": wv, "classifier_r": wr}


def _alignment_kink_margin(c_v, c_r, c_a, alpha) -> float:
    """Distance of the hinge arguments and selector gaps from their kinks."""
    with torch.no_grad():
        pos_v = (c_a - c_v).norm(dim=1)
        pos_r = (c_a - c_r).norm(dim=1)
        pos = torch.maximum(pos_v, pos_r)
        cross = torch.minimum(torch.cdist(c_a, c_v), torch.cdist(c_a, c_r))
        eye = torch.eye(len(c_a), dtype=torch.bool)
        masked = cross.masked_fill(eye, float("inf"))
        neg = masked.min(dim=1).values
        hinge = (alpha + pos - neg).abs().min()
        selector = (pos_v - pos_r).abs().min()
        flat = masked.view(len(c_a), -1)
        top2 = flat.topk(2, dim=1, largest=False).values
        tie = (top2[:, 1] - top2[:, 0]).min()
        return float(torch.minimum(hinge, torch.minimum(selector, tie)))


def _build_alignment_loss(seed: int):
    rng = torch.Generator().manual_seed(seed)
    alpha = 0.55
    for redraw in range(MAX_REDRAWS):
        z_v, z_r, z_a = (_leaf(rng, 8, 4) for _ in range(3))
        y = torch.repeat_interleave(torch.arange(4), 2)
        with torch.no_grad():
            cs = [identity_centres(z, y)[0] for z in (z_v, z_r, z_a)]
        if _alignment_kink_margin(*cs, alpha) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw an alignment instance away from kinks")
    def loss_fn():
        c_v, _ = identity_centres(z_v, y)
        c_r, _ = identity_centres(z_r, y)
        c_a, _ = identity_centres(z_a, y)
        return identity_alignment_loss(c_v, c_r, c_a, alpha)
    return loss_fn, {"z_v": z_v, "z_r": z_r, "z_a": z_a}


def _build_modality_alignment(beta: float):
    def build(seed: int):
        rng = torch.Generator().manual_seed(seed)
        z_v, z_r, z_a = (_leaf(rng, 6, 3) for _ in range(3))
        w_v, w_r, w_a = (_leaf(rng, 3, 3) for _ in range(3))
        prev = {m: torch.randn(6, 3, generator=rng, dtype=torch.float64)
                for m in ("v", "r", "a")}
        y = torch.repeat_interleave(torch.arange(2), 3)
        def loss_fn():
            t_v = accumulate_prototypes(z_v, w_v, prev["v"], beta)
            t_r = accumulate_prototypes(z_r, w_r, prev["r"], beta)
            t_a = accumulate_prototypes(z_a, w_a, prev["a"], beta)
            return modality_alignment_loss(t_v, t_r, t_a, y)
        return loss_fn, {"z_v": z_v, "z_r": z_r, "z_a": z_a,
                         "w_v": w_v, "w_r": w_r, "w_a": w_a}
    return build


def _triplet_kink_margin(emb: Tensor, labels: Tensor, margin: float) -> float:
    with torch.no_grad():
        same = labels.view(-1, 1) == labels.view(1, -1)
        eye = torch.eye(len(labels), dtype=torch.bool)
        d = torch.cdist(emb, emb)
        pos = d.masked_fill(~(same & ~eye), float("-inf"))
        neg = d.masked_fill(same, float("inf"))
        hp = pos.max(dim=1).values
        hn = neg.min(dim=1).values
        hinge = (margin + hp - hn).abs().min()
        pos_sorted = pos.sort(dim=1, descending=True).values
        neg_sorted = neg.sort(dim=1).values
        gaps = [hinge]
        if pos_sorted.shape[1] > 1:
            gap = pos_sorted[:, 0] - pos_sorted[:, 1]
            gaps.append(gap[torch.isfinite(gap)].min())
        if neg_sorted.shape[1] > 1:
            gap = neg_sorted[:, 1] - neg_sorted[:, 0]
            gaps.append(gap[torch.isfinite(gap)].min())
        return float(min(gaps))


def _build_triplet_loss(seed: int):
    rng = torch.Generator().manual_seed(seed)
    margin = 0.3
    y = torch.repeat_interleave(torch.arange(3), 3)
    for redraw in range(MAX_REDRAWS):
        emb = _leaf(rng, 9, 4)
        if _triplet_kink_margin(emb.detach(), y, margin) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a triplet instance away from kinks")
    def loss_fn():
        return hard_triplet_loss(emb, y, margin)
    return loss_fn, {"embeddings": emb}


def _build_gem(seed: int):
    rng = torch.Generator().manual_seed(seed)
    pool = GeMPool().double()
    # inputs bounded away from the 1e-6 clamp
    x = (torch.rand(2, 3, 4, 4, generator=rng, dtype=torch.float64) + 0.1)
    x.requires_grad_(True)
    def loss_fn():
        return pool(x).pow(2).sum()
    return loss_fn, {"input": x, "p_raw": pool.p_raw}


def _min_prerelu(module: torch.nn.Module, run: Callable[[], Tensor]) -> float:
    """Smallest |pre-activation| seen by any ReLU during one forward pass."""
    margins: list[float] = []
    hooks = [
        m.register_forward_pre_hook(
            lambda _m, inp: margins.append(float(inp[0].abs().min()))
        )
        for m in module.modules()
        if isinstance(m, torch.nn.ReLU)
    ]
    try:
        with torch.no_grad():
            run()
    finally:
        for h in hooks:
            h.remove()
    return min(margins) if margins else float("inf")


def _build_iml(seed: int):
    rng = torch.Generator().manual_seed(seed)
    for redraw in range(MAX_REDRAWS):
        torch.manual_seed(seed * 1009 + redraw)
        iml = IntraModalityLearner(2).double().train()
        x = torch.randn(2, 2, 8, 8, generator=rng, dtype=torch.float64)
        if _min_prerelu(iml, lambda: iml(x)) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw an IML instance away from ReLU kinks")
    def loss_fn():
        return iml(x).pow(2).sum()
    return loss_fn, dict(iml.named_parameters())


def _build_cml(seed: int):
    rng = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed * 2003)
    cml = CrossModalityLearner(2, ratios=(2, 4)).double().train()
    f_v = torch.randn(2, 2, 8, 8, generator=rng, dtype=torch.float64)
    f_r = torch.randn(2, 2, 8, 8, generator=rng, dtype=torch.float64)
    def loss_fn():
        return cml(f_v, f_r).pow(2).sum()
    return loss_fn, dict(cml.named_parameters())


def _build_model(seed: int):
    """End-to-end miniature: stems + generator + shared trunk + GeM."""
    rng = torch.Generator().manual_seed(seed)
    for redraw in range(MAX_REDRAWS):
        torch.manual_seed(seed * 3001 + redraw)
        model = MunModel(
            num_classes=2, stem_channels=4, trunk_channels=(4,),
            pyramid_ratios=(2, 4),
        ).double().train()
        images = torch.rand(4, 3, 16, 16, generator=rng, dtype=torch.float64)
        labels = torch.tensor([0, 1, 0, 1])
        modalities = torch.tensor([0, 0, 1, 1])
        def run():
            out = model.forward_train(images, labels, modalities, P=2, K=1)
            return (out.z_v.pow(2).sum() + out.z_r.pow(2).sum()
                    + out.z_a.pow(2).sum() + out.logits_vv.pow(2).sum())
        if _min_prerelu(model, run) > KINK_MARGIN:
            break
    else:
        raise RuntimeError("could not draw a model instance away from ReLU kinks")
    return run, dict(model.named_parameters())


CHECKS: dict[str, tuple[str, CheckBuilder]] = {
    "loss/id": ("loss", _build_identity_loss),
    "loss/idc": ("loss", _build_consistency_loss),
    "loss/ia": ("loss", _build_alignment_loss),
    "loss/ma_beta0.3": ("loss", _build_modality_alignment(0.3)),
    "loss/ma_beta1.0": ("loss", _build_modality_alignment(1.0)),
    "loss/tri": ("loss", _build_triplet_loss),
    "module/gem": ("module", _build_gem),
    "module/iml": ("module", _build_iml),
    "module/cml": ("module", _build_cml),
    "module/model": ("module", _build_model),
}


def run_gradient_checks(
    which: str = "all",
    seeds=range(10),
    tol: float = TOLERANCE,
) -> list[CheckResult]:
    if which not in ("all", "loss", "module"):
        raise ValueError("which must be 'loss', 'module', or 'all'")
    results = []
    for name, (group, builder) in CHECKS.items():
        if which != "all" and group != which:
            continue
        worst, worst_param = 0.0, ""
        for seed in seeds:
            err, pname = run_check(name, builder, seed)
            if err > worst:
                worst, worst_param = err, pname
        results.append(CheckResult(name, worst, worst_param, worst < tol))
    return results
