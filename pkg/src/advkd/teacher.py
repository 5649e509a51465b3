"""Desk-scale epsilon-predicting DDPM teacher: U-Net, training, trajectory sampling, checkpoints."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, load_state_tensors, save_archive, state_tensors
from .diffusion import NoiseSchedule, make_linear_schedule, q_sample, sample_loop, simple_loss, visited_steps
from .trajectory import TrajectoryRecord


class TeacherConfigError(ValueError):
    pass


@dataclass
class TeacherConfig:
    image_resolution: int = 32
    channels: int = 3
    base_width: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2)
    time_embedding_dim: int = 128
    num_res_blocks: int = 1
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        r = self.image_resolution
        if r < 8 or r & (r - 1):
            raise TeacherConfigError(f"image_resolution must be a power of two >= 8, got {r}")
        if not self.channel_multipliers:
            raise TeacherConfigError("channel_multipliers must not be empty")
        if r % (2 ** (len(self.channel_multipliers) - 1)) or r // 2 ** (len(self.channel_multipliers) - 1) < 2:
            raise TeacherConfigError(
                f"resolution {r} does not support {len(self.channel_multipliers)} resolution levels"
            )
        if self.num_res_blocks < 1 or self.base_width < 1 or self.channels < 1:
            raise TeacherConfigError("num_res_blocks, base_width and channels must be positive")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def full_scale(cls) -> "TeacherConfig":
        """Reference 256x256 configuration used for size accounting."""
        return cls(
            image_resolution=256,
            channels=3,
            base_width=128,
            channel_multipliers=(1, 1, 2, 2, 4, 4),
            time_embedding_dim=512,
            num_res_blocks=2,
        )


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TeacherUNet(nn.Module):
    """Small U-Net: per-level residual blocks, strided-conv downsampling, skip concatenation."""

    def __init__(self, config: TeacherConfig):
        super().__init__()
        self.config = config
        base, temb = config.base_width, config.time_embedding_dim
        self.time_mlp = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(config.channels, base, 3, padding=1)

        mults = config.channel_multipliers
        self.down = nn.ModuleList()
        skips = [base]
        ch = base
        for i, m in enumerate(mults):
            for _ in range(config.num_res_blocks):
                self.down.append(ResBlock(ch, base * m, temb))
                ch = base * m
                skips.append(ch)
            if i < len(mults) - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)

        self.mid = nn.ModuleList([ResBlock(ch, ch, temb), ResBlock(ch, ch, temb)])

        self.up = nn.ModuleList()
        for i, m in reversed(list(enumerate(mults))):
            for _ in range(config.num_res_blocks + 1):
                self.up.append(ResBlock(ch + skips.pop(), base * m, temb))
                ch = base * m
            if i > 0:
                self.up.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, config.channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.config.base_width))
        h = self.conv_in(x)
        hs = [h]
        for layer in self.down:
            h = layer(h, temb) if isinstance(layer, ResBlock) else layer(h)
            hs.append(h)
        for layer in self.mid:
            h = layer(h, temb)
        for layer in self.up:
            if isinstance(layer, ResBlock):
                h = layer(torch.cat([h, hs.pop()], dim=1), temb)
            else:
                h = layer(F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out[0] if squeeze else out


def build_teacher(config: TeacherConfig, init_seed: int = 0) -> TeacherUNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = TeacherUNet(config)
    return model.eval()


@dataclass
class TeacherCheckpoint:
    config: TeacherConfig
    weights: Dict[str, np.ndarray]
    training_step: int
    schedule_hash: str
    loss_trace: List[float] = field(default_factory=list, repr=False)

    def schedule(self) -> NoiseSchedule:
        return self.config.schedule()

    def denoiser(self) -> TeacherUNet:
        model = TeacherUNet(self.config)
        load_state_tensors(model, self.weights)
        return model.eval()

    def save(self, path) -> Path:
        manifest = {
            "kind": "teacher",
            "config": self.config.to_dict(),
            "training_step": self.training_step,
            "schedule_hash": self.schedule_hash,
        }
        return save_archive(path, manifest, self.weights)

    @classmethod
    def load(cls, path) -> "TeacherCheckpoint":
        manifest, tensors = load_archive(path)
        if manifest.get("kind") != "teacher":
            raise TeacherConfigError(f"{path} is not a teacher checkpoint")
        config = TeacherConfig(**manifest["config"])
        if config.schedule().hash() != manifest["schedule_hash"]:
            raise TeacherConfigError(f"{path}: schedule hash does not match its config")
        return cls(config, tensors, int(manifest["training_step"]), manifest["schedule_hash"])


def train_teacher(
    denoiser: TeacherUNet,
    dataset: torch.Tensor,
    schedule: NoiseSchedule,
    steps: int,
    batch_size: int,
    lr: float = 2e-4,
    seed: int = 0,
    log_every: int = 0,
) -> TeacherCheckpoint:
    """Minimize the simple epsilon loss with t drawn uniformly from [0, T)."""
    config = denoiser.config
    dataset = torch.as_tensor(dataset, dtype=torch.float32)
    if dataset.ndim != 4 or dataset.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (N, C, H, W) batch")
    expected = (config.channels, config.image_resolution, config.image_resolution)
    if tuple(dataset.shape[1:]) != expected:
        raise ValueError(f"dataset images {tuple(dataset.shape[1:])} do not match teacher {expected}")
    if schedule.T != config.T:
        raise ValueError("schedule length differs from teacher config T")

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    denoiser.train()
    losses = []
    for step in range(steps):
        idx = torch.randint(0, dataset.shape[0], (batch_size,), generator=gen)
        x0 = dataset[idx]
        t = torch.randint(0, schedule.T, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        loss = simple_loss(eps, denoiser(q_sample(x0, t, eps, schedule), t))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"teacher step {step + 1}/{steps} loss {np.mean(losses[-log_every:]):.4f}", flush=True)
    denoiser.eval()
    return TeacherCheckpoint(config, state_tensors(denoiser), steps, schedule.hash(), losses)


def teacher_sample_batch(
    checkpoint: TeacherCheckpoint,
    record_steps: Iterable[int],
    mode: str,
    stride: int,
    seeds: Sequence[int],
    denoiser: Optional[TeacherUNet] = None,
    clip_denoised: Optional[float] = None,
) -> List[TrajectoryRecord]:
    schedule = checkpoint.schedule()
    record_steps = sorted(set(int(s) for s in record_steps), reverse=True)
    visited = set(visited_steps(schedule.T, stride, mode))
    missing = [s for s in record_steps if s not in visited]
    if missing:
        raise ValueError(f"steps {missing} are not visited by {mode} sampling with stride {stride}")
    denoiser = denoiser or checkpoint.denoiser()
    c = checkpoint.config
    shape = (c.channels, c.image_resolution, c.image_resolution)
    final, trace = sample_loop(
        denoiser, schedule, shape, stride=stride, mode=mode, seed=list(seeds), keep=record_steps,
        clip_denoised=clip_denoised,
    )
    first = max(trace)
    return [
        TrajectoryRecord(
            seed=int(s),
            noise=trace[first][i].clone(),
            intermediates={t: trace[t][i].clone() for t in record_steps},
            final=final[i].clone(),
        )
        for i, s in enumerate(seeds)
    ]


def teacher_sample_with_trace(
    checkpoint: TeacherCheckpoint, record_steps: Iterable[int], mode: str = "ddim", stride: int = 20, seed: int = 0,
    clip_denoised: Optional[float] = None,
) -> TrajectoryRecord:
    return teacher_sample_batch(checkpoint, record_steps, mode, stride, [seed], clip_denoised=clip_denoised)[0]
