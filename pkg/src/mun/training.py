"""Training loop: warmup/step-decay schedule, decoupled weight decay,
ablation masking of the loss components, per-iteration metrics, and
checkpointing."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import Archive, load_archive, save_archive
from .config import TrainConfig
from .evaluation import evaluate
from .losses import (
    LossWeights,
    PrototypeMemory,
    auxiliary_identity_loss,
    hard_triplet_loss,
    identity_alignment_loss,
    identity_centres,
    identity_consistency_loss,
    identity_loss,
    modality_alignment_loss,
    total_loss,
)
from .model import MunModel
from .synthdata import SynthDataset, augment_batch, sample_pk_batch

METRIC_COLUMNS = (
    "epoch", "iter", "L_id", "L_tri", "L_idc", "L_ia", "L_ma",
    "L_total", "lr", "beta", "eval_rank1", "eval_mAP",
)


@dataclass(frozen=True)
class AblationFlags:
    use_aux: bool
    use_idc: bool
    use_ia: bool
    use_ma: bool


ABLATIONS: dict[str, AblationFlags] = {
    "baseline": AblationFlags(False, False, False, False),
    "aux": AblationFlags(True, False, False, False),
    "aux+idc": AblationFlags(True, True, False, False),
    "aux+idc+ia": AblationFlags(True, True, True, False),
    "aux+idc+ma": AblationFlags(True, True, False, True),
    "full": AblationFlags(True, True, True, True),
}


def lr_at_step(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warmup from the floor to the peak, then step decay by epoch."""
    warmup_steps = config.warmup_epochs * steps_per_epoch
    if warmup_steps > 0 and step < warmup_steps:
        frac = step / warmup_steps
        return config.lr_floor + (config.peak_lr - config.lr_floor) * frac
    epoch = step // steps_per_epoch
    decays = sum(1 for d in config.decay_epochs if epoch >= d)
    return config.peak_lr * config.decay_factor**decays


@dataclass
class TrainingResult:
    model: MunModel
    prototypes: PrototypeMemory | None
    metrics: list[dict]
    final_eval: dict | None
    checkpoint_path: Path | None


def _class_mapping(dataset: SynthDataset) -> dict[int, int]:
    return {int(ident): i for i, ident in enumerate(dataset.identity_ids)}


def run_training(
    config: TrainConfig,
    dataset: SynthDataset,
    ablation: str = "full",
    val_dataset: SynthDataset | None = None,
    out_checkpoint: str | Path | None = None,
    metrics_path: str | Path | None = None,
    on_step=None,
    force: bool = False,
    verbose: bool = False,
) -> TrainingResult:
    config.validate()
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation '{ablation}'; choose from {sorted(ABLATIONS)}")
    flags = ABLATIONS[ablation]
    if list(dataset.image_hw) != list(config.image_hw):
        raise ValueError(
            f"dataset images are {dataset.image_hw}, config expects {tuple(config.image_hw)}"
        )

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    weights = LossWeights(
        alpha=config.alpha, gamma=config.gamma, theta=config.theta,
        sigma=config.sigma, tri_margin=config.tri_margin,
    )
    label_to_class = _class_mapping(dataset)
    model = MunModel(
        num_classes=len(label_to_class),
        stem_channels=config.stem_channels,
        trunk_channels=config.trunk_channels,
        pyramid_ratios=config.pyramid_ratios,
    )
    steps_per_epoch = max(1, len(dataset) // (2 * config.P * config.K))
    total_steps = config.epochs * steps_per_epoch
    prototypes = None
    params = list(model.parameters())
    if flags.use_ma:
        prototypes = PrototypeMemory(
            model.feature_dim, config.P * config.K, total_steps
        )
        params += list(prototypes.parameters())
    optimizer = torch.optim.AdamW(
        params, lr=config.peak_lr, betas=(0.9, 0.999), eps=1e-8,
        weight_decay=config.weight_decay, foreach=True,
    )

    model.train()
    metrics: list[dict] = []
    half_labels = None
    step = 0
    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            lr = lr_at_step(step, steps_per_epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = sample_pk_batch(dataset, config.P, config.K, rng)
            batch = augment_batch(batch, rng, config)
            images = torch.from_numpy(batch.images)
            classes = np.array([label_to_class[int(l)] for l in batch.labels])
            half = config.P * config.K
            half_labels = torch.as_tensor(classes[:half])

            out = model.forward_train(
                images, classes, batch.modalities, config.P, config.K,
                with_aux=flags.use_aux,
            )
            components = {
                "id": identity_loss(out, half_labels),
                "tri": hard_triplet_loss(
                    torch.cat([out.z_v, out.z_r]),
                    torch.cat([half_labels, half_labels]),
                    weights.tri_margin,
                ),
            }
            if flags.use_aux:
                if flags.use_idc:
                    components["idc"] = identity_consistency_loss(out, half_labels)
                else:
                    components["id_aux"] = auxiliary_identity_loss(out, half_labels)
            beta = 0.0
            if flags.use_ia:
                c_v, _ = identity_centres(out.z_v, half_labels)
                c_r, _ = identity_centres(out.z_r, half_labels)
                c_a, _ = identity_centres(out.z_a, half_labels)
                components["ia"] = identity_alignment_loss(c_v, c_r, c_a, weights.alpha)
            if flags.use_ma:
                beta = prototypes.effective_beta()
                t_v, t_r, t_a = prototypes.update(out.z_v, out.z_r, out.z_a)
                components["ma"] = modality_alignment_loss(t_v, t_r, t_a, half_labels)

            loss = total_loss(components, weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            def _val(name):
                v = components.get(name)
                return float(v.detach()) if v is not None else 0.0

            row = {
                "epoch": epoch,
                "iter": step,
                "L_id": _val("id"),
                "L_tri": _val("tri"),
                "L_idc": _val("idc"),
                "L_ia": _val("ia"),
                "L_ma": _val("ma"),
                "L_total": float(loss.detach()),
                "lr": lr,
                "beta": beta,
                "eval_rank1": "",
                "eval_mAP": "",
            }
            metrics.append(row)
            if on_step is not None:
                on_step(model, prototypes, row)
            step += 1
        if val_dataset is not None:
            result = evaluate(
                model, val_dataset, direction="ir2vis",
                mode="clean", repeats=1, seed=config.seed * 1000 + epoch,
            )
            metrics[-1]["eval_rank1"] = result.rank(1)
            metrics[-1]["eval_mAP"] = result.map
            if verbose:
                print(
                    f"epoch {epoch:3d}  loss {metrics[-1]['L_total']:.4f}  "
                    f"rank1 {result.rank(1):.3f}  mAP {result.map:.3f}"
                )
        elif verbose:
            print(f"epoch {epoch:3d}  loss {metrics[-1]['L_total']:.4f}")

    final_eval = None
    if val_dataset is not None:
        result = evaluate(model, val_dataset, direction="ir2vis", mode="clean",
                          repeats=10, seed=config.seed)
        final_eval = {"rank1": result.rank(1), "mAP": result.map}

    checkpoint_path = None
    if out_checkpoint is not None:
        checkpoint_path = Path(out_checkpoint)
        save_checkpoint(
            checkpoint_path, model, prototypes, config,
            iteration=step, num_classes=len(label_to_class),
            rng=rng, force=force,
        )
    if metrics_path is not None:
        Path(metrics_path).write_text(render_metrics_csv(metrics), encoding="utf-8")
    return TrainingResult(model, prototypes, metrics, final_eval, checkpoint_path)


def render_metrics_csv(metrics: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in metrics:
        writer.writerow({k: _fmt(row[k]) for k in METRIC_COLUMNS})
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.10g}"
    return value


def _state_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype in (np.int64, np.int32):
            arr = arr.astype(np.int32)
        else:
            arr = arr.astype(np.float32)
        out[prefix + name] = arr
    return out


def save_checkpoint(
    path: str | Path,
    model: MunModel,
    prototypes: PrototypeMemory | None,
    config: TrainConfig,
    iteration: int,
    num_classes: int,
    rng: np.random.Generator | None = None,
    force: bool = False,
) -> None:
    tensors = _state_arrays(model)
    meta = {"num_classes": num_classes, "has_prototypes": prototypes is not None}
    if prototypes is not None:
        tensors.update(_state_arrays(prototypes, prefix="prototypes."))
        meta["prototype_rows"] = int(prototypes.t_v.shape[0])
        meta["total_iterations"] = prototypes.total_iterations
    rng_state = None
    if rng is not None:
        rng_state = {
            "numpy": rng.bit_generator.state,
            "torch": torch.get_rng_state().numpy().tobytes().hex(),
        }
    save_archive(
        path,
        Archive(
            tensors=tensors,
            kind="checkpoint",
            config=config.to_dict(),
            meta=meta,
            iteration=iteration,
            rng_state=rng_state,
        ),
        force=force,
    )


def load_checkpoint(path: str | Path) -> tuple[MunModel, PrototypeMemory | None, TrainConfig, Archive]:
    ar = load_archive(path)
    if ar.kind != "checkpoint":
        raise ValueError(f"{path} is a '{ar.kind}' archive, not a checkpoint")
    config = TrainConfig.from_dict(ar.config)
    model = MunModel(
        num_classes=int(ar.meta["num_classes"]),
        stem_channels=config.stem_channels,
        trunk_channels=config.trunk_channels,
        pyramid_ratios=config.pyramid_ratios,
    )
    model_state = {
        k: torch.from_numpy(v.copy()) for k, v in ar.tensors.items()
        if not k.startswith("prototypes.")
    }
    model.load_state_dict(model_state)
    prototypes = None
    if ar.meta.get("has_prototypes"):
        prototypes = PrototypeMemory(
            model.feature_dim, int(ar.meta["prototype_rows"]),
            int(ar.meta["total_iterations"]),
        )
        proto_state = {
            k[len("prototypes."):]: torch.from_numpy(v.copy())
            for k, v in ar.tensors.items() if k.startswith("prototypes.")
        }
        prototypes.load_state_dict(proto_state)
    model.eval()
    return model, prototypes, config, ar
