"""Synthetic paired two-modality identity dataset.

Each identity is a parameterized stick-figure silhouette. Body geometry
(proportions and pose ranges) is shared by both renderings: it is the only
identity signal that survives the modality change. Clothing colors and
texture exist solely in the visible rendering; the infrared rendering is a
single intensity channel derived from a fixed thermal profile of the body
parts, plus sensor noise, replicated to three channels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .archive import Archive, load_archive, save_archive
from .config import TrainConfig

MOD_VISIBLE = 0
MOD_INFRARED = 1

VISIBLE_CAMERAS = (0, 1)
INFRARED_CAMERAS = (2, 3)

CORRUPTION_KINDS = ("noise", "blur", "occlusion", "brightness")

# severity -> corruption magnitude; each kind consumes its rng identically at
# every severity so severities are nested for a fixed seed
_NOISE_STD = (0.04, 0.08, 0.13, 0.19, 0.26)
_BLUR_MIX = (0.2, 0.4, 0.6, 0.8, 1.0)
_OCCLUSION_AREA = (0.06, 0.12, 0.20, 0.30, 0.42)
_BRIGHTNESS_SCALE = (0.8, 0.65, 0.5, 0.35, 0.2)

# fixed thermal emission per body part (identity-independent by design)
_THERMAL = {"legs": 0.60, "arms": 0.70, "torso": 0.78, "head": 0.92}


@dataclass(frozen=True)
class IdentitySpec:
    """Procedural description of one identity.

    body_params (shared by both modalities):
      0 head_radius  1 shoulder_halfwidth  2 torso_len  3 torso_halfwidth
      4 hip_halfwidth  5 leg_len  6 leg_thickness  7 arm_len  8 arm_thickness
      9 arm_swing_range  10 leg_stance_base  11 leg_stance_range
      12 lean_range  13 build_scale
    appearance_params (visible rendering only):
      0:3 shirt rgb  3:6 trouser rgb  6 skin_tone  7 stripe_frequency
      8 stripe_phase
    """

    identity_id: int
    body_params: np.ndarray
    appearance_params: np.ndarray


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    identity: int
    modality: int
    camera_id: int


@dataclass
class Batch:
    """P identities x K visible + K infrared samples.

    Layout: the visible half comes first (P blocks of K), then the infrared
    half in the same identity order, so position j of the visible half and
    position j of the infrared half always share an identity.
    """

    images: np.ndarray  # (B, 3, H, W) float32
    labels: np.ndarray  # (B,) int64
    modalities: np.ndarray  # (B,) int32
    cameras: np.ndarray  # (B,) int32
    P: int
    K: int


@dataclass
class SynthDataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    modalities: np.ndarray  # (N,) int32
    cameras: np.ndarray  # (N,) int32
    identities: list[IdentitySpec] | None = None
    meta: dict | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @property
    def identity_ids(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def num_identities(self) -> int:
        return len(self.identity_ids)

    def indices_by_identity_modality(self) -> dict[tuple[int, int], np.ndarray]:
        out: dict[tuple[int, int], np.ndarray] = {}
        for ident in self.identity_ids:
            for mod in (MOD_VISIBLE, MOD_INFRARED):
                mask = (self.labels == ident) & (self.modalities == mod)
                out[(int(ident), mod)] = np.flatnonzero(mask)
        return out

    def sample(self, index: int) -> Sample:
        return Sample(
            image=self.images[index],
            identity=int(self.labels[index]),
            modality=int(self.modalities[index]),
            camera_id=int(self.cameras[index]),
        )

    def save(self, path: str | Path, force: bool = False) -> None:
        save_archive(
            path,
            Archive(
                tensors={
                    "images": self.images.astype(np.float32, copy=False),
                    "labels": self.labels.astype(np.int32),
                    "modalities": self.modalities.astype(np.int32, copy=False),
                    "cameras": self.cameras.astype(np.int32, copy=False),
                },
                kind="dataset",
                meta=self.meta or {},
            ),
            force=force,
        )

    @classmethod
    def load(cls, path: str | Path) -> "SynthDataset":
        ar = load_archive(path)
        if ar.kind != "dataset":
            raise ValueError(f"{path} is a '{ar.kind}' archive, not a dataset")
        return cls(
            images=ar["images"],
            labels=ar["labels"].astype(np.int64),
            modalities=ar["modalities"],
            cameras=ar["cameras"],
            meta=ar.meta,
        )


def _sample_identity(identity_id: int, rng: np.random.Generator) -> IdentitySpec:
    u = rng.uniform
    body = np.array(
        [
            u(0.045, 0.080),  # head radius
            u(0.050, 0.110),  # shoulder half width
            u(0.22, 0.34),    # torso length
            u(0.030, 0.080),  # torso half width
            u(0.025, 0.065),  # hip half width
            u(0.28, 0.42),    # leg length
            u(0.014, 0.036),  # leg thickness
            u(0.16, 0.27),    # arm length
            u(0.009, 0.024),  # arm thickness
            u(0.10, 0.35),    # arm swing range (radians)
            u(0.05, 0.16),    # leg stance base (radians)
            u(0.03, 0.10),    # leg stance range
            u(0.01, 0.05),    # lean range
            u(0.90, 1.00),    # overall build scale
        ]
    )
    # saturated palettes: high/mid/low levels assigned to channels by one
    # per-identity permutation shared by shirt and trousers, so the clothed
    # area drives well-separated per-channel image means
    perm = rng.permutation(3)

    def palette() -> np.ndarray:
        levels = np.array([u(0.85, 0.95), u(0.45, 0.55), u(0.05, 0.15)])
        return levels[perm]

    appearance = np.concatenate(
        [
            palette(),                       # shirt
            palette(),                       # trousers
            [u(0.55, 0.85)],                 # skin tone
            [u(2.0, 9.0)],                   # stripe frequency
            [u(0.0, 2.0 * np.pi)],           # stripe phase
        ]
    )
    return IdentitySpec(identity_id, body, appearance)


def _segment_coverage(yy, xx, p0, p1, radius, soft):
    """Soft-edged coverage of a capsule (thick segment) over the pixel grid."""
    d = np.array(p1) - np.array(p0)
    len2 = float(d @ d)
    if len2 < 1e-12:
        dist = np.hypot(yy - p0[0], xx - p0[1])
    else:
        t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / len2
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return np.clip((radius - dist) / soft + 0.5, 0.0, 1.0)


def _disc_coverage(yy, xx, center, radius, soft):
    dist = np.hypot(yy - center[0], xx - center[1])
    return np.clip((radius - dist) / soft + 0.5, 0.0, 1.0)


def _render_parts(spec: IdentitySpec, pose: dict, hw: tuple[int, int]):
    """Rasterize the figure; returns a list of (part_name, coverage) back to
    front. Coordinates are in units of image height, origin top-left."""
    h, w = hw
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / h  # same unit as y keeps shapes isotropic
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    soft = 1.0 / h

    b = spec.body_params
    s = b[13] * pose["scale"]
    head_r, shoulder, torso_len, torso_w, hip_w = b[0] * s, b[1] * s, b[2] * s, b[3] * s, b[4] * s
    leg_len, leg_th, arm_len, arm_th = b[5] * s, b[6] * s, b[7] * s, b[8] * s

    cx = 0.5 * w / h + pose["dx"]
    top = 0.06 + pose["dy"]
    lean = pose["lean"]

    head_c = (top + head_r, cx + lean * 0.1)
    neck = (top + 2.0 * head_r, cx + lean * 0.08)
    hip_y = neck[0] + torso_len
    hip_c = (hip_y, cx)

    parts = []
    for side, angle in ((-1, pose["leg_l"]), (1, pose["leg_r"])):
        hip = (hip_y, cx + side * hip_w)
        foot = (hip_y + leg_len * np.cos(angle), hip[1] + side * leg_len * np.sin(angle))
        parts.append(("legs", _segment_coverage(yy, xx, hip, foot, leg_th, soft)))
    for side, angle in ((-1, pose["arm_l"]), (1, pose["arm_r"])):
        sh = (neck[0] + 0.02, neck[1] + side * shoulder)
        hand = (sh[0] + arm_len * np.cos(angle), sh[1] + side * arm_len * np.sin(angle))
        parts.append(("arms", _segment_coverage(yy, xx, sh, hand, arm_th, soft)))
    # torso: a capsule from neck to hips, widened to the torso half width
    parts.append(("torso", _segment_coverage(yy, xx, neck, hip_c, torso_w, soft)))
    parts.append(("head", _disc_coverage(yy, xx, head_c, head_r, soft)))
    return parts, yy


def _draw_pose(spec: IdentitySpec, rng: np.random.Generator) -> dict:
    b = spec.body_params
    u = rng.uniform
    return {
        "arm_l": u(-b[9], b[9]),
        "arm_r": u(-b[9], b[9]),
        "leg_l": b[10] + u(-b[11], b[11]),
        "leg_r": b[10] + u(-b[11], b[11]),
        "lean": u(-b[12], b[12]),
        "dx": u(-0.025, 0.025),
        "dy": u(-0.012, 0.012),
        "scale": u(0.96, 1.02),
    }


def _render_visible(spec, pose, camera, hw, rng) -> np.ndarray:
    h, w = hw
    parts, yy = _render_parts(spec, pose, hw)
    a = spec.appearance_params
    shirt, trousers = a[0:3], a[3:6]
    skin = np.array([a[6], a[6] * 0.82, a[6] * 0.66])
    bg_level = 0.32 if camera == VISIBLE_CAMERAS[0] else 0.44
    img = np.full((3, h, w), bg_level, dtype=np.float64)
    stripes = 1.0 + 0.18 * np.sin(2.0 * np.pi * a[7] * yy + a[8])
    colors = {
        "legs": trousers[:, None, None] * np.ones((3, h, w)),
        "arms": shirt[:, None, None] * np.ones((3, h, w)),
        "torso": shirt[:, None, None] * stripes[None],
        "head": skin[:, None, None] * np.ones((3, h, w)),
    }
    for name, cov in parts:
        img = cov[None] * colors[name] + (1.0 - cov[None]) * img
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_infrared(spec, pose, camera, hw, rng) -> np.ndarray:
    h, w = hw
    parts, _ = _render_parts(spec, pose, hw)
    bg_level = 0.12 if camera == INFRARED_CAMERAS[0] else 0.18
    intensity = np.full((h, w), bg_level, dtype=np.float64)
    for name, cov in parts:
        intensity = cov * _THERMAL[name] + (1.0 - cov) * intensity
    intensity = intensity ** 0.8  # nonlinear sensor response
    intensity += rng.normal(0.0, 0.02, size=intensity.shape)
    intensity = np.clip(intensity, 0.0, 1.0)
    return np.repeat(intensity[None], 3, axis=0).astype(np.float32)


def generate_dataset(
    num_identities: int,
    samples_per_modality: int,
    seed: int,
    image_hw: tuple[int, int] = (96, 48),
) -> SynthDataset:
    """Deterministically generate the paired two-modality dataset."""
    if num_identities < 2:
        raise ValueError("need >= 2 identities (retrieval is undefined with one class)")
    if samples_per_modality < 2:
        raise ValueError("need >= 2 samples per modality")
    rng = np.random.default_rng(seed)
    specs = [_sample_identity(i, rng) for i in range(num_identities)]

    images, labels, modalities, cameras = [], [], [], []
    for spec in specs:
        for modality in (MOD_VISIBLE, MOD_INFRARED):
            cams = VISIBLE_CAMERAS if modality == MOD_VISIBLE else INFRARED_CAMERAS
            for _ in range(samples_per_modality):
                pose = _draw_pose(spec, rng)
                camera = int(rng.choice(cams))
                if modality == MOD_VISIBLE:
                    img = _render_visible(spec, pose, camera, image_hw, rng)
                else:
                    img = _render_infrared(spec, pose, camera, image_hw, rng)
                images.append(img)
                labels.append(spec.identity_id)
                modalities.append(modality)
                cameras.append(camera)

    return SynthDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        modalities=np.asarray(modalities, dtype=np.int32),
        cameras=np.asarray(cameras, dtype=np.int32),
        identities=specs,
        meta={
            "num_identities": num_identities,
            "samples_per_modality": samples_per_modality,
            "seed": seed,
            "image_hw": list(image_hw),
        },
    )


def sample_pk_batch(
    dataset: SynthDataset, P: int, K: int, rng: np.random.Generator
) -> Batch:
    """Draw an identity-balanced batch: P identities, K per modality each."""
    index = dataset.indices_by_identity_modality()
    eligible = [
        ident
        for ident in dataset.identity_ids
        if len(index[(int(ident), MOD_VISIBLE)]) >= K
        and len(index[(int(ident), MOD_INFRARED)]) >= K
    ]
    if len(eligible) < P:
        raise ValueError(
            f"dataset has {len(eligible)} identities with >= {K} samples per "
            f"modality; cannot draw P={P}"
        )
    chosen = rng.choice(np.asarray(eligible), size=P, replace=False)
    picks: list[int] = []
    for modality in (MOD_VISIBLE, MOD_INFRARED):
        for ident in chosen:
            pool = index[(int(ident), modality)]
            picks.extend(rng.choice(pool, size=K, replace=False).tolist())
    picks = np.asarray(picks, dtype=np.int64)
    return Batch(
        images=dataset.images[picks].copy(),
        labels=dataset.labels[picks].copy(),
        modalities=dataset.modalities[picks].copy(),
        cameras=dataset.cameras[picks].copy(),
        P=P,
        K=K,
    )


def _random_rectangle(hw, area_lo, area_hi, rng):
    """Rectangle (top, left, height, width) with area fraction in the given
    range; returns None when the draw degenerates to zero pixels."""
    h, w = hw
    area = rng.uniform(area_lo, area_hi) * h * w
    aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
    rh = int(round(np.sqrt(area * aspect)))
    rw = int(round(np.sqrt(area / aspect)))
    rh, rw = min(rh, h), min(rw, w)
    if rh < 1 or rw < 1:
        return None
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return top, left, rh, rw


def augment(sample: Sample, rng: np.random.Generator, config: TrainConfig) -> Sample:
    """Training augmentations: horizontal flip, random erasing, and (visible
    only) a random permutation of the color channels."""
    img = sample.image.copy()
    if rng.uniform() < config.flip_prob:
        img = img[:, :, ::-1].copy()
    if rng.uniform() < config.erase_prob:
        rect = _random_rectangle(img.shape[1:], 0.02, 0.2, rng)
        if rect is not None:
            top, left, rh, rw = rect
            img[:, top : top + rh, left : left + rw] = 0.5
    if sample.modality == MOD_VISIBLE and rng.uniform() < config.channel_swap_prob:
        img = img[rng.permutation(3)].copy()
    return replace(sample, image=img)


def augment_batch(
    batch: Batch, rng: np.random.Generator, config: TrainConfig
) -> Batch:
    images = np.stack(
        [
            augment(
                Sample(batch.images[i], int(batch.labels[i]), int(batch.modalities[i]),
                       int(batch.cameras[i])),
                rng,
                config,
            ).image
            for i in range(batch.images.shape[0])
        ]
    )
    return replace(batch, images=images)


def brightness_scale(severity: int) -> float:
    return _BRIGHTNESS_SCALE[severity - 1]


def apply_brightness(image: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(image * scale, 0.0, 1.0).astype(np.float32)


def corrupt(
    sample: Sample, kind: str, severity: int, rng: np.random.Generator
) -> Sample:
    """Test-time corruption of a gallery image.

    Each kind draws its random parameters independently of severity, so for a
    fixed rng seed the distortion (mean absolute pixel difference) is
    non-decreasing in severity.
    """
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind '{kind}'")
    if not 1 <= severity <= 5:
        raise ValueError("severity must lie in 1..5")
    img = sample.image.astype(np.float64)
    if kind == "noise":
        noise = rng.normal(0.0, 1.0, size=img.shape)
        out = img + _NOISE_STD[severity - 1] * noise
    elif kind == "blur":
        blurred = gaussian_filter(img, sigma=(0.0, 2.0, 2.0), mode="nearest")
        out = (1.0 - _BLUR_MIX[severity - 1]) * img + _BLUR_MIX[severity - 1] * blurred
    elif kind == "occlusion":
        h, w = img.shape[1:]
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        half = 0.5 * np.sqrt(_OCCLUSION_AREA[severity - 1] * h * w)
        y0, y1 = max(0, int(cy - half)), min(h, int(cy + half) + 1)
        x0, x1 = max(0, int(cx - half)), min(w, int(cx + half) + 1)
        out = img.copy()
        out[:, y0:y1, x0:x1] = 0.0
    else:  # brightness
        out = img * brightness_scale(severity)
    return replace(
        sample, image=np.clip(out, 0.0, 1.0).astype(np.float32)
    )
