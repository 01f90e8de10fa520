"""Engine configuration: avatar architecture, rendering, and training."""

import json
from dataclasses import dataclass, field, asdict, fields as dc_fields

import numpy as np

from .geom.template import TemplateConfig
from .fields.body import BodyFieldConfig
from .fields.hand import HandFieldConfig
from .fields.face import FaceFieldConfig


@dataclass
class AvatarConfig:
    """Architecture of one avatar (serialized into the asset container)."""

    template: TemplateConfig = field(default_factory=TemplateConfig)
    body: BodyFieldConfig = field(default_factory=BodyFieldConfig)
    hand: HandFieldConfig = field(default_factory=HandFieldConfig)
    face: FaceFieldConfig = field(default_factory=FaceFieldConfig)
    tone_width: int = 32
    compose_band_lo: float = -0.05
    compose_band_hi: float = 0.025
    seed: int = 0

    @staticmethod
    def desk(seed: int = 0) -> "AvatarConfig":
        """Single-core-friendly profile: trims free widths, keeps every
        pinned constant (128 nodes, 32x32 patches, sigma/eps, resolutions)."""
        return AvatarConfig(
            template=TemplateConfig(body_mc_resolution=72, hand_mc_resolution=48,
                                    face_mc_resolution=48),
            body=BodyFieldConfig(patch_hidden=8, patch_channels=8, patch_pe_channels=4,
                                 geo_width=64, color_width=64),
            face=FaceFieldConfig(encoder_hidden=(8, 12), plane_channels=8),
            seed=seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "AvatarConfig":
        return AvatarConfig(
            template=TemplateConfig(**d["template"]),
            body=BodyFieldConfig(**d["body"]),
            hand=HandFieldConfig(**d["hand"]),
            face=FaceFieldConfig(**{**d["face"],
                                    "encoder_hidden": tuple(d["face"]["encoder_hidden"])}),
            tone_width=d.get("tone_width", 32),
            compose_band_lo=d.get("compose_band_lo", -0.05),
            compose_band_hi=d.get("compose_band_hi", 0.025),
            seed=d.get("seed", 0),
        )


@dataclass
class RenderConfig:
    coarse_resolution: int = 128
    coarse_voxel: float = 0.02
    fine_factor: int = 4
    surface_tolerance: float = 1e-3
    background: tuple = (1.0, 1.0, 1.0)
    max_trace_steps: int = 256
    volume_samples: int = 64
    gamma: float = 5e-4
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RenderConfig":
        d = dict(d)
        if "background" in d:
            d["background"] = tuple(d["background"])
        return RenderConfig(**d)


@dataclass
class TrainConfig:
    """Two-pass training hyperparameters (loss weights per the published
    defaults; iteration budgets are desk-scale, full budgets selectable)."""

    lambda_mask: float = 1.0
    lambda_eikonal: float = 2.0
    lambda_node: float = 0.04
    lambda_ebd: float = 0.01
    lambda_kl: float = 1e-6
    lambda_percep: float = 1.0
    rays_per_batch: int = 400
    samples_per_ray: int = 64
    patch_size: int = 128
    batch_size: int = 4
    lr_pass1: float = 5e-4
    lr_pass2: float = 1e-4
    gamma0: float = 5e-4
    gamma1: float = 0.02
    gamma_anneal_iters: int = 100000
    lr_decay: float = 0.9
    lr_decay_every: int = 20000
    body_pass1_iters: int = 20000
    body_pass2_iters: int = 5000
    face_pass1_iters: int = 2000
    face_pass2_iters: int = 500
    checkpoint_every: int = 5000
    pointmap_refresh: int = 500
    eikonal_samples: int = 256
    geometry_pretrain_iters: int = 800
    fg_ray_fraction: float = 0.7  # fraction of rays biased to foreground-ish pixels
    divergence_abort: float = 1e3
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_mask", "lambda_eikonal", "lambda_node",
                     "lambda_ebd", "lambda_kl", "lambda_percep"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.patch_size < 16:
            raise ValueError("patch size must be >= 16")
        if self.gamma_anneal_iters < 1:
            raise ValueError("gamma_anneal_iters must be >= 1")

    @staticmethod
    def full_scale() -> "TrainConfig":
        """Paper-scale iteration budgets (Table-1-sized; days of CPU)."""
        return TrainConfig(body_pass1_iters=300000, body_pass2_iters=100000,
                           face_pass1_iters=200000, face_pass2_iters=100000)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in d.items() if k in known})


def load_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def dump_json(obj: dict, path: str):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
