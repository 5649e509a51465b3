"""Per-stage Wasserstein critics and the progressive adversarial distillation loop."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .student import StudentModel
from .trajectory import TrajectoryDataset, epoch_batches


class DistillError(RuntimeError):
    pass


class NumericError(DistillError):
    """A loss became NaN or infinite."""


@dataclass(frozen=True)
class LipschitzPolicy:
    kind: str = "weight_clip"  # or "gradient_penalty"
    value: float = 0.01  # clip bound c, or penalty weight lambda

    def __post_init__(self):
        if self.kind not in ("weight_clip", "gradient_penalty"):
            raise ValueError(f"unknown Lipschitz policy {self.kind!r}")
        if self.value <= 0:
            raise ValueError("policy value must be positive")

    @classmethod
    def weight_clip(cls, c: float = 0.01) -> "LipschitzPolicy":
        return cls("weight_clip", c)

    @classmethod
    def gradient_penalty(cls, lam: float = 10.0) -> "LipschitzPolicy":
        return cls("gradient_penalty", lam)


class Critic(nn.Module):
    """DCGAN-style critic: strided 4x4 convs down to 4x4, then a linear scalar score (no sigmoid)."""

    def __init__(self, stage_n: int, resolution: int, image_channels: int = 3,
                 policy: LipschitzPolicy = LipschitzPolicy(), width: int = 32, max_width: int = 256):
        super().__init__()
        self.stage_n = stage_n
        self.resolution = resolution
        self.policy = policy
        use_bn = policy.kind == "weight_clip"  # the penalty is per-sample, so no batch statistics there
        layers: List[nn.Module] = [nn.Conv2d(image_channels, width, 3, padding=1), nn.LeakyReLU(0.2)]
        ch, r = width, resolution
        while r > 4:
            out = min(ch * 2, max_width)
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1, bias=not use_bn)]
            if use_bn:
                layers.append(nn.BatchNorm2d(out))
            layers.append(nn.LeakyReLU(0.2))
            ch, r = out, r // 2
        layers += [nn.Flatten(), nn.Linear(ch * r * r, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(f"critic for stage {self.stage_n} expects {self.resolution}px input, got {tuple(x.shape)}")
        return self.net(x).view(-1)


def build_critic(stage_n: int, resolution: int, image_channels: int, policy: LipschitzPolicy,
                 width: int = 32, init_seed: int = 0) -> Critic:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        critic = Critic(stage_n, resolution, image_channels, policy, width)
    if policy.kind == "weight_clip":
        clip_weights(critic, policy.value)  # start inside the constraint set
    return critic


def _nonempty(x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, torch.Tensor) else x
    if t.numel() == 0:
        raise ValueError("empty critic score array")
    return t


def critic_loss(d_real, d_fake):
    """Negated Wasserstein estimate: -(mean D(real) - mean D(fake))."""
    return -(_nonempty(d_real).mean() - _nonempty(d_fake).mean())


def generator_loss(d_fake):
    return -_nonempty(d_fake).mean()


def gradient_penalty_at(critic: nn.Module, x_hat: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * E[(||grad_x D(x)|| - 1)^2] evaluated at the given points."""
    x_hat = x_hat.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(critic(x_hat).sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    return lam * ((norms - 1.0) ** 2).mean()


def gradient_penalty(critic: nn.Module, real: torch.Tensor, fake: torch.Tensor, lam: float,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    mix = torch.rand((real.shape[0],) + (1,) * (real.ndim - 1), generator=generator, dtype=real.dtype)
    return gradient_penalty_at(critic, mix * real + (1 - mix) * fake.detach(), lam)


@torch.no_grad()
def clip_weights(critic: nn.Module, c: float) -> None:
    for p in critic.parameters():
        # round the bound toward zero in the parameter dtype so |p| <= c holds exactly
        bound = torch.tensor(c, dtype=p.dtype)
        if float(bound) > c:
            bound = torch.nextafter(bound, torch.zeros_like(bound))
        p.clamp_(-float(bound), float(bound))


def apply_lipschitz_policy(critic: Critic, real_batch: torch.Tensor, fake_batch: torch.Tensor,
                           generator: Optional[torch.Generator] = None) -> Optional[torch.Tensor]:
    """Penalty term to add to the critic loss, or ``None`` after clamping weights in place.

    Clipping is meant to run right after each critic update.
    """
    policy = critic.policy
    if policy.kind == "weight_clip":
        clip_weights(critic, policy.value)
        return None
    return gradient_penalty(critic, real_batch, fake_batch, policy.value, generator)


@dataclass
class DistillConfig:
    stage_order: Optional[List[int]] = None  # None: the plan's application order
    steps_per_stage: int = 1000
    critic_steps_per_generator_step: int = 5
    lr_generator: Optional[float] = None
    lr_critic: Optional[float] = None
    lipschitz_policy: LipschitzPolicy = field(default_factory=LipschitzPolicy)
    seed: int = 0
    critic_width: int = 32
    batch_size: Optional[int] = None  # overrides the plan's per-stage batch size

    def optimizer(self, params, lr: Optional[float]) -> torch.optim.Optimizer:
        if self.lipschitz_policy.kind == "weight_clip":
            return torch.optim.RMSprop(params, lr=lr or 5e-5)
        return torch.optim.Adam(params, lr=lr or 1e-4, betas=(0.0, 0.9))


@dataclass
class StageReport:
    stage: int
    generator_steps: int = 0
    critic_steps: int = 0
    critic_losses: List[float] = field(default_factory=list)
    generator_losses: List[float] = field(default_factory=list)
    rows: List[dict] = field(default_factory=list)

    def write_jsonl(self, path: Union[str, Path]) -> None:
        with open(path, "a") as f:
            for row in self.rows:
                f.write(json.dumps(row) + "\n")


def critic_update(critic: Critic, opt: torch.optim.Optimizer, real: torch.Tensor, fake: torch.Tensor,
                  generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One critic optimizer step under the critic's Lipschitz policy; returns the loss (penalty included)."""
    policy = critic.policy
    loss = critic_loss(critic(real), critic(fake))
    if policy.kind == "gradient_penalty":
        loss = loss + gradient_penalty(critic, real, fake, policy.value, generator)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    if policy.kind == "weight_clip":
        clip_weights(critic, policy.value)
    return loss.detach()


def stage_seed(seed: int, stage_n: int) -> int:
    return int(np.random.SeedSequence([seed, stage_n]).generate_state(1)[0])


def _finite(value: torch.Tensor, what: str, stage_n: int) -> float:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not np.isfinite(v):
        raise NumericError(f"{what} is {v} in stage {stage_n}")
    return v


def train_stage(model: StudentModel, critic: Critic, dataset: TrajectoryDataset, stage_n: int,
                config: DistillConfig) -> StageReport:
    """Adversarially fit submodule ``stage_n`` (and its head) against the stage's teacher targets.

    Upstream submodules are frozen; only stage ``stage_n`` and its head are updated.
    """
    plan = model.config.plan
    spec = plan.stage(stage_n)
    order = plan.order
    upstream = order[: order.index(stage_n)]
    untrained = [n for n in upstream if n not in model.trained_stages]
    if untrained:
        raise DistillError(f"stage {stage_n} needs upstream stages {untrained} trained first")
    if critic.resolution != spec.resolution:
        raise DistillError(f"critic resolution {critic.resolution} != stage resolution {spec.resolution}")
    batch = config.batch_size or spec.batch_size
    targets = dataset.stage_targets(stage_n)
    if len(targets) < batch:
        raise DistillError(f"dataset has {len(targets)} records, fewer than batch size {batch}")

    seed = stage_seed(config.seed, stage_n)
    gen = torch.Generator().manual_seed(seed)
    batches = epoch_batches(len(targets), batch, seed)
    opt_g = config.optimizer(model.stage_parameters(stage_n), config.lr_generator)
    opt_c = config.optimizer(critic.parameters(), config.lr_critic)

    def latent_features():
        z = torch.randn((batch, *model.config.latent_shape), generator=gen)
        with torch.no_grad():
            return model.features_before(z, stage_n)

    model.eval()
    model.submodules[str(stage_n)].train()
    critic.train()
    report = StageReport(stage_n)
    step = 0
    for _ in range(config.steps_per_stage):
        critic.requires_grad_(True)
        for _ in range(config.critic_steps_per_generator_step):
            t0 = time.perf_counter()
            real = targets[torch.from_numpy(next(batches))]
            with torch.no_grad():
                fake = model.stage_image(latent_features(), stage_n)
            value = _finite(critic_update(critic, opt_c, real, fake, gen), "critic loss", stage_n)
            report.critic_losses.append(value)
            report.critic_steps += 1
            step += 1
            report.rows.append({"stage": stage_n, "step": step, "critic_loss": value, "generator_loss": None,
                                "wall_ms": (time.perf_counter() - t0) * 1e3})

        t0 = time.perf_counter()
        critic.requires_grad_(False)
        g_loss = generator_loss(critic(model.stage_image(latent_features(), stage_n)))
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        value = _finite(g_loss, "generator loss", stage_n)
        report.generator_losses.append(value)
        report.generator_steps += 1
        step += 1
        report.rows.append({"stage": stage_n, "step": step, "critic_loss": None, "generator_loss": value,
                            "wall_ms": (time.perf_counter() - t0) * 1e3})

    critic.requires_grad_(True)
    model.eval()
    model.trained_stages.add(stage_n)
    return report


def _ladder(plan) -> list:
    return [(e.n, e.teacher_t, e.resolution) for e in plan.entries]


def distill(model: StudentModel, dataset: TrajectoryDataset, config: DistillConfig,
            checkpoint_dir: Optional[Union[str, Path]] = None, report_path: Optional[Union[str, Path]] = None,
            log: bool = False) -> tuple:
    """Train every stage in order, skipping stages the model already has trained (resume).

    Returns ``(model, reports)``. A checkpoint is written after every stage when
    ``checkpoint_dir`` is given.
    """
    plan = model.config.plan
    if _ladder(plan) != _ladder(dataset.plan):
        raise DistillError("dataset stage plan does not match the student's plan")
    order = config.stage_order or plan.order
    if sorted(order) != sorted(plan.order):
        raise DistillError("stage_order must be a permutation of the plan's stages")
    reports: List[StageReport] = []
    for i, n in enumerate(order):
        if n in model.trained_stages:
            continue
        spec = plan.stage(n)
        critic = build_critic(n, spec.resolution, model.config.image_channels, config.lipschitz_policy,
                              config.critic_width, init_seed=stage_seed(config.seed, n) ^ 0x5EED)
        t0 = time.perf_counter()
        report = train_stage(model, critic, dataset, n, config)
        reports.append(report)
        if log:
            tail = lambda xs: float(np.mean(xs[-20:])) if xs else float("nan")
            print(f"stage n={n} res={spec.resolution}: critic {tail(report.critic_losses):.4f} "
                  f"generator {tail(report.generator_losses):.4f} ({time.perf_counter() - t0:.1f}s)", flush=True)
        if report_path is not None:
            report.write_jsonl(report_path)
        if checkpoint_dir is not None:
            d = Path(checkpoint_dir)
            model.save(d / f"stage_{i:02d}_n{n}.ckpt", schedule_hash=dataset.schedule_hash)
            model.save(d / "latest.ckpt", schedule_hash=dataset.schedule_hash)
    return model, reports
