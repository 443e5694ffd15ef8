"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class TrainConfig:
    """All training hyper-parameters.

    Defaults are the published settings, except the schedule, which is the
    desk-scale variant (30 epochs, warmup 5, decay at 10/20) of the original
    90/15/[30, 60] shape.
    """

    # loss weights and margins
    alpha: float = 0.55
    gamma: float = 0.25
    theta: float = 0.5
    sigma: float = 0.008
    tri_margin: float = 0.3
    # auxiliary generator
    pyramid_ratios: list[int] = field(default_factory=lambda: [2, 4, 6, 12])
    # optimizer schedule
    epochs: int = 30
    warmup_epochs: int = 5
    peak_lr: float = 2e-3
    lr_floor: float = 1e-8
    decay_epochs: list[int] = field(default_factory=lambda: [10, 20])
    decay_factor: float = 0.1
    weight_decay: float = 0.01
    # batch geometry (identities x samples per modality)
    P: int = 4
    K: int = 4
    # model geometry
    image_hw: list[int] = field(default_factory=lambda: [96, 48])
    stem_channels: int = 16
    trunk_channels: list[int] = field(default_factory=lambda: [32, 64])
    # training augmentations
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    channel_swap_prob: float = 0.5
    seed: int = 0

    @property
    def post_stem_hw(self) -> tuple[int, int]:
        """Feature-map size after the stride-2 stem."""
        return self.image_hw[0] // 2, self.image_hw[1] // 2

    def validate(self) -> None:
        for name in ("alpha", "gamma", "theta", "sigma", "tri_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("peak_lr", "lr_floor", "weight_decay", "decay_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("flip_prob", "erase_prob", "channel_swap_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.P < 2:
            raise ValueError("P must be >= 2 (losses need at least two identities)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if len(self.image_hw) != 2 or any(v < 2 for v in self.image_hw):
            raise ValueError("image_hw must be two integers >= 2")
        if any(v % 2 for v in self.image_hw):
            raise ValueError("image_hw must be even (stride-2 stem)")
        if self.stem_channels < 2 or self.stem_channels % 2:
            raise ValueError("stem_channels must be even and >= 2")
        if not self.trunk_channels:
            raise ValueError("trunk_channels must name at least one block width")
        if not self.pyramid_ratios:
            raise ValueError("pyramid_ratios must be non-empty")
        h, w = self.post_stem_hw
        if min(h, w) < 7:
            raise ValueError("post-stem feature map must be at least 7x7")
        for r in self.pyramid_ratios:
            if r < 1 or h % r or w % r:
                raise ValueError(
                    f"pyramid ratio {r} does not divide the post-stem map {h}x{w}"
                )
        if sorted(set(self.decay_epochs)) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be distinct")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        cfg = cls(**{k: _coerce(cls, k, v) for k, v in values.items()})
        cfg.validate()
        return cfg


def paper_schedule_config(**overrides) -> TrainConfig:
    """Config with the original full-length optimizer schedule."""
    cfg = TrainConfig(epochs=90, warmup_epochs=15, decay_epochs=[30, 60], **overrides)
    cfg.validate()
    return cfg


def ablation_study_config(seed: int = 0) -> TrainConfig:
    """Preset for the ablation study at benchmark scale.

    Uses 48x24 images (post-stem 24x12, still divisible by every default
    pyramid ratio) and a narrower trunk so that a six-row ablation over
    several seeds finishes in minutes on a small CPU. The schedule and every
    loss weight keep the default values.
    """
    cfg = TrainConfig(image_hw=[48, 24], trunk_channels=[24, 48], seed=seed)
    cfg.validate()
    return cfg


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(cls, key: str, value):
    if key not in _FIELDS:
        raise ValueError(f"unknown config key '{key}'")
    f = _FIELDS[key]
    if isinstance(value, str):
        return _parse_value(key, value)
    if f.type.startswith("list"):
        return [int(v) for v in value]
    return value


def _parse_value(key: str, text: str):
    f = _FIELDS[key]
    text = text.strip()
    try:
        if f.type == "int":
            return int(text)
        if f.type == "float":
            return float(text)
        if f.type.startswith("list[int]"):
            return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValueError(f"config key '{key}': cannot parse '{text}'") from exc
    raise ValueError(f"config key '{key}' has unsupported type {f.type}")


def parse_config(text: str) -> TrainConfig:
    """Parse the flat config format: ``key = value`` lines, ``#`` comments,
    arrays as comma lists."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key '{key}'")
        values[key] = _parse_value(key, val)
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
