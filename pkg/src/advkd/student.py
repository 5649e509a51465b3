"""Staged one-pass student generator with detachable per-stage image heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional

import torch
import torch.nn as nn

from .archive import load_archive, load_state_tensors, save_archive, state_tensors
from .trajectory import StagePlan


class StudentConfigError(ValueError):
    pass


@dataclass
class StudentConfig:
    plan: StagePlan
    latent_channels: int
    latent_resolution: int
    image_channels: int = 3
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.latent_resolution != self.plan.base_resolution:
            raise StudentConfigError(
                f"latent_resolution {self.latent_resolution} != plan base {self.plan.base_resolution}"
            )
        if self.latent_channels != self.plan.latent_channels:
            raise StudentConfigError(
                f"latent_channels {self.latent_channels} != plan latent_channels {self.plan.latent_channels}"
            )

    @classmethod
    def from_plan(cls, plan: StagePlan, image_channels: int = 3, negative_slope: float = 0.2) -> "StudentConfig":
        return cls(plan, plan.latent_channels, plan.base_resolution, image_channels, negative_slope)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "latent_channels": self.latent_channels,
            "latent_resolution": self.latent_resolution,
            "image_channels": self.image_channels,
            "negative_slope": self.negative_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudentConfig":
        return cls(StagePlan.from_dict(d["plan"]), d["latent_channels"], d["latent_resolution"],
                   d["image_channels"], d["negative_slope"])

    @property
    def latent_shape(self):
        return (self.latent_channels, self.latent_resolution, self.latent_resolution)


class StudentStage(nn.Sequential):
    """[2x nearest upsample] -> (3x3 conv, batch norm, LeakyReLU) x 2."""

    def __init__(self, in_ch: int, out_ch: int, upsample: bool, negative_slope: float):
        layers = [nn.Upsample(scale_factor=2, mode="nearest")] if upsample else []
        layers += [
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.LeakyReLU(negative_slope),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.LeakyReLU(negative_slope),
        ]
        super().__init__(*layers)


class FinalStage(nn.Module):
    """Last submodule: the usual stage body plus the features-to-image projection."""

    def __init__(self, in_ch: int, out_ch: int, upsample: bool, negative_slope: float, image_channels: int):
        super().__init__()
        self.body = StudentStage(in_ch, out_ch, upsample, negative_slope)
        self.to_image = image_head(out_ch, image_channels)

    def forward(self, x):
        return self.to_image(self.body(x))


def image_head(in_ch: int, image_channels: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_ch, image_channels, 1), nn.Tanh())


@dataclass
class StageOutputs:
    features: Dict[int, torch.Tensor] = field(default_factory=dict)
    images: Dict[int, torch.Tensor] = field(default_factory=dict)
    final: Optional[torch.Tensor] = None


class StudentModel(nn.Module):
    def __init__(self, config: StudentConfig):
        super().__init__()
        self.config = config
        plan = config.plan
        self.submodules = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        in_ch = config.latent_channels
        for spec in plan.entries:
            if spec.is_final:
                self.submodules[str(spec.n)] = FinalStage(
                    in_ch, spec.feature_channels, spec.upsamples_input, config.negative_slope, config.image_channels
                )
            else:
                self.submodules[str(spec.n)] = StudentStage(
                    in_ch, spec.feature_channels, spec.upsamples_input, config.negative_slope
                )
                self.heads[str(spec.n)] = image_head(spec.feature_channels, config.image_channels)
            in_ch = spec.feature_channels
        self.trained_stages: set = set()

    @property
    def order(self):
        return self.config.plan.order

    def forward(self, z: torch.Tensor, with_heads: bool = False) -> StageOutputs:
        return student_forward(self, z, with_heads)

    def features_before(self, z: torch.Tensor, stage_n: int) -> torch.Tensor:
        """Chain every submodule applied ahead of ``stage_n``."""
        h = z
        for n in self.order:
            if n == stage_n:
                return h
            h = self.submodules[str(n)](h)
        raise StudentConfigError(f"no stage {stage_n}")

    def stage_image(self, h: torch.Tensor, stage_n: int) -> torch.Tensor:
        """Apply stage ``stage_n`` to its input features and map the result to an image."""
        out = self.submodules[str(stage_n)](h)
        if self.config.plan.stage(stage_n).is_final:
            return out
        return self.heads[str(stage_n)](out)

    def stage_parameters(self, stage_n: int):
        params = list(self.submodules[str(stage_n)].parameters())
        if str(stage_n) in self.heads:
            params += list(self.heads[str(stage_n)].parameters())
        return params

    def deployment_copy(self) -> "StudentModel":
        """Same submodules without terminal heads."""
        clone = StudentModel(self.config)
        clone.load_state_dict(self.state_dict())
        clone.heads = nn.ModuleDict()
        clone.trained_stages = set(self.trained_stages)
        return clone.train(self.training)

    def sample_latent(self, n: int, seed: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        return torch.randn((n, *self.config.latent_shape), generator=gen)

    @torch.no_grad()
    def generate(self, n: int, seed: int, batch_size: int = 256) -> torch.Tensor:
        was_training = self.training
        self.eval()
        z = self.sample_latent(n, seed)
        out = torch.cat([self(z[i : i + batch_size]).final for i in range(0, n, batch_size)])
        self.train(was_training)
        return out

    def save(self, path, schedule_hash: str = "", deployment: bool = False) -> Path:
        tensors = state_tensors(self)
        if deployment:
            tensors = {k: v for k, v in tensors.items() if not k.startswith("heads.")}
        manifest = {
            "kind": "student",
            "config": self.config.to_dict(),
            "deployment": deployment,
            "schedule_hash": schedule_hash,
            "trained_stages": sorted(self.trained_stages),
        }
        return save_archive(path, manifest, tensors)

    @classmethod
    def load(cls, path) -> "StudentModel":
        manifest, tensors = load_archive(path)
        if manifest.get("kind") != "student":
            raise StudentConfigError(f"{path} is not a student checkpoint")
        model = cls(StudentConfig.from_dict(manifest["config"]))
        if manifest["deployment"]:
            model.heads = nn.ModuleDict()
        load_state_tensors(model, tensors)
        model.trained_stages = set(manifest["trained_stages"])
        model.schedule_hash = manifest["schedule_hash"]
        return model


def build_student(config: StudentConfig, init_seed: int = 0) -> StudentModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = StudentModel(config)
    return model


def student_forward(model: StudentModel, z: torch.Tensor, with_heads: bool = False) -> StageOutputs:
    """Single pass through every submodule in application order."""
    squeeze = z.ndim == 3
    if squeeze:
        z = z[None]
    if tuple(z.shape[1:]) != model.config.latent_shape:
        raise StudentConfigError(f"latent shape {tuple(z.shape[1:])} != {model.config.latent_shape}")
    out = StageOutputs()
    h = z
    plan = model.config.plan
    for n in model.order:
        h = model.submodules[str(n)](h)
        if plan.stage(n).is_final:
            out.final = h
            if with_heads:
                out.images[n] = h
        else:
            out.features[n] = h
            if with_heads and str(n) in model.heads:
                out.images[n] = model.heads[str(n)](h)
    if squeeze:
        out.features = {k: v[0] for k, v in out.features.items()}
        out.images = {k: v[0] for k, v in out.images.items()}
        out.final = out.final[0]
    return out


def count_parameters(modules: Iterable[nn.Module]) -> int:
    return sum(p.numel() for m in modules for p in m.parameters())


def deployment_parameter_count(model: StudentModel) -> int:
    return count_parameters(model.submodules.values())
