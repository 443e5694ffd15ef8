"""Cross-modality retrieval evaluation: CMC, mAP, and the repeated
single-shot protocol with optional test-time corruption of the visible
gallery."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .synthdata import (
    CORRUPTION_KINDS,
    MOD_INFRARED,
    MOD_VISIBLE,
    SynthDataset,
    corrupt,
)

DIRECTIONS = ("ir2vis", "vis2ir")
MODES = ("clean", "corrupted")


def pairwise_distances(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distances between L2-normalized embeddings, queries by rows."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise ValueError("queries and gallery must be (N, C) with matching C")
    q = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    g = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
    sq = np.sum(q**2, axis=1)[:, None] + np.sum(g**2, axis=1)[None, :] - 2.0 * (q @ g.T)
    return np.sqrt(np.maximum(sq, 0.0))


def _valid_and_order(dist_row, q_label, q_cam, g_labels, g_cams):
    order = np.argsort(dist_row, kind="stable")  # ties broken by gallery index
    ordered = order[~((g_labels[order] == q_label) & (g_cams[order] == q_cam))]
    matches = g_labels[ordered] == q_label
    if not matches.any():
        raise ValueError("query has no valid gallery match after camera filtering")
    return matches


def cmc_curve(dist, q_labels, g_labels, q_cams, g_cams) -> np.ndarray:
    """Cumulative match rate over ranks 1..G. Gallery entries sharing both
    identity and camera with the query are excluded before ranking."""
    dist, q_labels, g_labels, q_cams, g_cams = map(
        np.asarray, (dist, q_labels, g_labels, q_cams, g_cams)
    )
    num_q, num_g = dist.shape
    cmc = np.zeros(num_g, dtype=np.float64)
    for qi in range(num_q):
        matches = _valid_and_order(dist[qi], q_labels[qi], q_cams[qi], g_labels, g_cams)
        first_hit = int(np.flatnonzero(matches)[0])
        cmc[first_hit:] += 1.0
    return cmc / num_q


def mean_ap(dist, q_labels, g_labels, q_cams, g_cams) -> float:
    return float(np.mean(per_query_average_precision(dist, q_labels, g_labels, q_cams, g_cams)))


def per_query_average_precision(dist, q_labels, g_labels, q_cams, g_cams) -> np.ndarray:
    dist, q_labels, g_labels, q_cams, g_cams = map(
        np.asarray, (dist, q_labels, g_labels, q_cams, g_cams)
    )
    aps = np.zeros(dist.shape[0], dtype=np.float64)
    for qi in range(dist.shape[0]):
        matches = _valid_and_order(dist[qi], q_labels[qi], q_cams[qi], g_labels, g_cams)
        hit_ranks = np.flatnonzero(matches) + 1  # 1-indexed ranks of the hits
        precisions = np.arange(1, len(hit_ranks) + 1) / hit_ranks
        aps[qi] = precisions.mean()
    return aps


@dataclass
class RankingResult:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    per_repeat: list[dict] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def embed_dataset(model, images: np.ndarray, modalities: np.ndarray,
                  batch_size: int = 128) -> np.ndarray:
    """Eval-mode embeddings for a stack of images."""
    was_training = model.training
    model.eval()
    outs = []
    with torch.inference_mode():
        for start in range(0, len(images), batch_size):
            chunk = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
            outs.append(model.embed(chunk, modalities[start : start + batch_size]).numpy())
    if was_training:
        model.train()
    return np.concatenate(outs, axis=0)


def evaluate(
    model,
    dataset: SynthDataset,
    direction: str = "ir2vis",
    mode: str = "clean",
    repeats: int = 10,
    seed: int = 0,
) -> RankingResult:
    """Repeated single-shot evaluation.

    Every repeat draws one gallery image per identity from the gallery
    modality; in corrupted mode each drawn visible gallery image gets one
    random corruption kind and severity. Metrics are averaged over repeats.
    The auxiliary stream never runs here.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    q_mod = MOD_INFRARED if direction == "ir2vis" else MOD_VISIBLE
    g_mod = MOD_VISIBLE if direction == "ir2vis" else MOD_INFRARED

    rng = np.random.default_rng(seed)
    q_idx = np.flatnonzero(dataset.modalities == q_mod)
    q_emb = embed_dataset(model, dataset.images[q_idx], dataset.modalities[q_idx])
    q_labels, q_cams = dataset.labels[q_idx], dataset.cameras[q_idx]

    g_pool = {
        int(ident): np.flatnonzero((dataset.labels == ident) & (dataset.modalities == g_mod))
        for ident in dataset.identity_ids
    }
    clean_gallery_emb = None
    if mode == "clean":
        g_all = np.flatnonzero(dataset.modalities == g_mod)
        emb_all = embed_dataset(model, dataset.images[g_all], dataset.modalities[g_all])
        clean_gallery_emb = dict(zip(g_all.tolist(), emb_all))

    cmcs, maps, apss, per_repeat = [], [], [], []
    for rep in range(repeats):
        g_idx = np.array(
            [int(rng.choice(g_pool[int(ident)])) for ident in dataset.identity_ids]
        )
        if mode == "clean":
            g_emb = np.stack([clean_gallery_emb[int(i)] for i in g_idx])
        else:
            samples = [dataset.sample(int(i)) for i in g_idx]
            corrupted = []
            for s in samples:
                if s.modality == MOD_VISIBLE:
                    kind = str(rng.choice(CORRUPTION_KINDS))
                    severity = int(rng.integers(1, 6))
                    s = corrupt(s, kind, severity, rng)
                corrupted.append(s.image)
            g_emb = embed_dataset(
                model, np.stack(corrupted), dataset.modalities[g_idx]
            )
        g_labels, g_cams = dataset.labels[g_idx], dataset.cameras[g_idx]
        dist = pairwise_distances(q_emb, g_emb)
        cmc = cmc_curve(dist, q_labels, g_labels, q_cams, g_cams)
        aps = per_query_average_precision(dist, q_labels, g_labels, q_cams, g_cams)
        cmcs.append(cmc)
        maps.append(float(aps.mean()))
        apss.append(aps)
        per_repeat.append(
            {
                "repeat": rep,
                "direction": direction,
                "mode": mode,
                "rank1": float(cmc[0]),
                "rank5": float(cmc[min(5, len(cmc)) - 1]),
                "rank10": float(cmc[min(10, len(cmc)) - 1]),
                "mAP": maps[-1],
            }
        )
    return RankingResult(
        cmc=np.mean(cmcs, axis=0),
        map=float(np.mean(maps)),
        per_query_ap=np.mean(apss, axis=0),
        per_repeat=per_repeat,
    )
