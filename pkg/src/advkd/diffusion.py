"""Forward/reverse diffusion math: schedules, closed-form marginals, DDPM and DDIM steps.

Step indices are zero-based, ``t in {0, ..., T-1}``. Image tensors are torch
tensors with layout ``(C, H, W)`` or batched ``(B, C, H, W)``. Per-step
coefficients come from float64 numpy arrays and are applied as python floats,
so float64 inputs keep full precision.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import torch

Denoiser = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
StepIndex = Union[int, torch.Tensor]


class ScheduleError(ValueError):
    """Invalid schedule parameters or step index."""


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @classmethod
    def from_betas(cls, betas: Iterable[float]) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D array")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ScheduleError("betas must lie in [0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        return cls(betas, alphas, alpha_bars)

    def hash(self) -> str:
        """Lowercase hex SHA-256 over the betas serialized as float64 little-endian."""
        return hashlib.sha256(self.betas.astype("<f8").tobytes()).hexdigest()

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at ``t``; ``t = -1`` denotes clean data (1.0)."""
        if t == -1:
            return 1.0
        check_step(t, self)
        return float(self.alpha_bars[t])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def check_step(t: StepIndex, schedule: NoiseSchedule) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
            raise ScheduleError(f"step index out of range [0, {schedule.T})")
        return
    if not 0 <= int(t) < schedule.T:
        raise ScheduleError(f"step index {t} out of range [0, {schedule.T})")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _coef(values: np.ndarray, t: StepIndex, like: torch.Tensor):
    # scalar t -> python float; batched t -> (B, 1, 1, 1) tensor
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t.long()]
        return c.view(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t)])


def q_sample(x0: torch.Tensor, t: StepIndex, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form draw from q(x_t | x_0) given the noise ``eps``."""
    _check_shapes(x0, eps)
    check_step(t, schedule)
    a = _coef(np.sqrt(schedule.alpha_bars), t, x0)
    s = _coef(np.sqrt(1.0 - schedule.alpha_bars), t, x0)
    return a * x0 + s * eps


def forward_kernel_step(x_prev: torch.Tensor, t: StepIndex, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One Markov transition x_{t-1} -> x_t."""
    _check_shapes(x_prev, eps)
    check_step(t, schedule)
    return _coef(np.sqrt(schedule.alphas), t, x_prev) * x_prev + _coef(np.sqrt(schedule.betas), t, x_prev) * eps


def simple_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    _check_shapes(eps_true, eps_pred)
    return torch.mean((eps_true - eps_pred) ** 2)


def ddpm_reverse_step(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    noise: Optional[torch.Tensor],
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Ancestral update with epsilon-parameterized mean and variance beta_t (zero at t=0)."""
    _check_shapes(x_t, eps_hat)
    check_step(t, schedule)
    beta = float(schedule.betas[t])
    # beta = 0 only occurs in degenerate test schedules, where 1 - alpha_bar may also be 0
    eps_coef = beta / np.sqrt(1.0 - schedule.alpha_bars[t]) if beta > 0 else 0.0
    mean = (x_t - eps_coef * eps_hat) / np.sqrt(schedule.alphas[t])
    if t == 0 or noise is None:
        return mean
    _check_shapes(x_t, noise)
    return mean + np.sqrt(beta) * noise


def ddim_step(x_t: torch.Tensor, t: int, t_prev: int, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``; ``t_prev = -1`` is clean data."""
    _check_shapes(x_t, eps_hat)
    check_step(t, schedule)
    if t_prev >= t:
        raise ScheduleError(f"t_prev ({t_prev}) must be < t ({t})")
    if t_prev < -1:
        raise ScheduleError(f"t_prev must be >= -1, got {t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def clip_denoised_eps(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, schedule: NoiseSchedule,
                      bound: float = 1.0) -> torch.Tensor:
    """Noise estimate consistent with the predicted x0 clamped to [-bound, bound].

    Feeding the result to either update is the usual "clip denoised" sampler.
    """
    _check_shapes(x_t, eps_hat)
    check_step(t, schedule)
    ab_t = schedule.alpha_bar(t)
    if ab_t >= 1.0:
        return eps_hat
    x0_hat = ((x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)).clamp(-bound, bound)
    return (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)


def visited_steps(T: int, stride: int, mode: str = "ddim") -> list[int]:
    """Descending step indices a sampler evaluates the denoiser at."""
    if stride < 1:
        raise ScheduleError(f"stride must be positive, got {stride}")
    if mode == "ancestral":
        if stride != 1:
            raise ScheduleError("ancestral sampling requires stride=1")
    elif mode != "ddim":
        raise ScheduleError(f"unknown sampling mode {mode!r}")
    return list(range(0, T, stride))[::-1]


def seeded_normal(
    shape: Sequence[int], seeds: Union[int, Sequence[int]], dtype=torch.float32
) -> Tuple[torch.Tensor, list]:
    """Standard-normal batch with one independent generator per sample.

    Returns the batch ``(len(seeds), *shape)`` and the generators, which the
    caller can keep drawing from so each sample's stream depends only on its seed.
    """
    if isinstance(seeds, (int, np.integer)):
        seeds = [int(seeds)]
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    x = torch.stack([torch.randn(tuple(shape), generator=g, dtype=dtype) for g in gens])
    return x, gens


def sample_loop(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    shape: Sequence[int],
    stride: int = 1,
    mode: str = "ancestral",
    seed: Union[int, Sequence[int]] = 0,
    x_T: Optional[torch.Tensor] = None,
    dtype=torch.float32,
    keep: Optional[Iterable[int]] = None,
    clip_denoised: Optional[float] = None,
) -> Tuple[torch.Tensor, Dict[int, torch.Tensor]]:
    """Run the reverse process from seeded noise down to clean data.

    ``shape`` is the per-sample (C, H, W). ``seed`` may be a list, one per
    sample. The trace maps each visited step to the state the denoiser saw
    there (so ``trace[steps[0]]`` is the input noise). ``keep`` restricts the
    trace to those steps plus the first one, bounding memory for long chains.
    ``clip_denoised`` clamps every predicted x0 to that bound before stepping.
    """
    steps = visited_steps(schedule.T, stride, mode)
    seeds = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    noise, gens = seeded_normal(shape, seeds, dtype=dtype)
    x = noise if x_T is None else x_T.to(dtype)
    keep = None if keep is None else set(keep) | {steps[0]}
    trace: Dict[int, torch.Tensor] = {}
    with torch.no_grad():
        for i, t in enumerate(steps):
            if keep is None or t in keep:
                trace[t] = x
            t_batch = torch.full((x.shape[0],), t, dtype=torch.long)
            eps_hat = denoiser(x, t_batch)
            if clip_denoised is not None:
                eps_hat = clip_denoised_eps(x, t, eps_hat, schedule, clip_denoised)
            if mode == "ddim":
                t_prev = steps[i + 1] if i + 1 < len(steps) else -1
                x = ddim_step(x, t, t_prev, eps_hat, schedule)
            else:
                z = None
                if t > 0:
                    z = torch.stack([torch.randn(tuple(shape), generator=g, dtype=dtype) for g in gens])
                x = ddpm_reverse_step(x, t, eps_hat, z, schedule)
    return x, trace
