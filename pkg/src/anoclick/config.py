"""Model and training configuration containers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace


@dataclass
class ModelConfig:
    """Structural hyperparameters of the interactive mask network.

    ``residual_dim`` must match the feature extractor output dimension and
    ``residual_grid`` its output grid (``image_size / stride``).
    """

    image_size: int = 1024
    residual_dim: int = 512
    residual_grid: int = 128
    linguistic_dim: int = 512
    text_dim: int = 768
    swin_blocks: int = 2
    swin_heads: int = 32
    swin_window: int = 8
    image_patch: int = 16
    image_dim: int = 768
    image_depth: int = 12
    image_heads: int = 12
    pyramid_dim: int = 256
    scales: tuple[float, ...] = (1 / 32, 1 / 16, 1 / 8, 1 / 4)
    theta: float = 2.0
    window_radius: int = 1
    click_radius: int = 5
    mask_threshold: float = 0.5
    focal_gamma: float = 2.0
    contrastive_weight: float = 0.05
    use_language: bool = True
    mode: str = "click"  # "click" (interactive) or "seg" (automatic)

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.validate()

    def validate(self) -> None:
        if any(b >= a for a, b in zip(self.scales[1:], self.scales)):
            raise ValueError("scales must be strictly increasing")
        if self.swin_blocks < 1:
            raise ValueError("swin_blocks must be >= 1")
        for name in ("image_size", "residual_dim", "residual_grid", "linguistic_dim",
                     "text_dim", "image_dim", "pyramid_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("click", "seg"):
            raise ValueError("mode must be 'click' or 'seg'")
        if self.image_size % self.image_patch != 0:
            raise ValueError("image_size must be divisible by image_patch")

    @property
    def active_scales(self) -> tuple[float, ...]:
        """Seg mode drops the two coarsest pyramid scales."""
        if self.mode == "seg" and len(self.scales) > 2:
            return self.scales[-2:]
        return self.scales

    def structural_fields(self) -> dict:
        keys = ("image_size", "residual_dim", "residual_grid", "linguistic_dim",
                "text_dim", "swin_blocks", "swin_heads", "swin_window",
                "image_patch", "image_dim", "image_depth", "image_heads",
                "pyramid_dim", "scales", "use_language", "mode")
        return {k: getattr(self, k) for k in keys}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in known}
        if "scales" in kwargs:
            kwargs["scales"] = tuple(kwargs["scales"])
        return cls(**kwargs)


def tiny_model_config(**overrides) -> ModelConfig:
    """Desk-scale stand-in: 64-dim features on 64x64 inputs."""
    base = dict(
        image_size=64,
        residual_dim=64,
        residual_grid=8,
        linguistic_dim=64,
        text_dim=32,
        swin_blocks=2,
        swin_heads=4,
        swin_window=4,
        image_patch=4,
        image_dim=64,
        image_depth=2,
        image_heads=4,
        pyramid_dim=32,
        click_radius=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class TrainConfig:
    """Optimizer and loop settings. Defaults follow the full-scale recipe;
    toy runs override lr and step counts."""

    lr: float = 1e-5
    weight_decay: float = 0.05
    batch_size: int = 4
    steps: int = 1000
    max_train_clicks: int = 8
    click_jitter: float = 0.3
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500
    prompt_batch: int = 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def toy_train_config(**overrides) -> TrainConfig:
    base = dict(lr=2e-3, batch_size=4, steps=400, max_train_clicks=6, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def with_overrides(cfg, **kwargs):
    return replace(cfg, **kwargs)
