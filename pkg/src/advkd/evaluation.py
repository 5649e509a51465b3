"""Frechet scoring, parameter/memory accounting and sampling-latency benchmarks."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .archive import read_blob, write_blob
from .diffusion import sample_loop
from .trajectory import downsample_psi

EIG_TOL = -1e-8


@dataclass
class FeatureExtractor:
    name: str
    dim: int
    transform: Callable[[np.ndarray], np.ndarray]  # (N, C, H, W) -> (N, dim)

    def __call__(self, images) -> np.ndarray:
        if isinstance(images, torch.Tensor):
            images = images.detach().cpu().numpy()
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        return self.transform(images)


def pixel_extractor(resolution: Optional[int] = None) -> FeatureExtractor:
    """Flattened (optionally area-downsampled) pixels."""

    def transform(x):
        if resolution is not None:
            x = downsample_psi(x, resolution)
        return x.reshape(x.shape[0], -1)

    return FeatureExtractor(f"pixels{resolution or ''}", -1, transform)


def random_projection_extractor(input_shape, dim: int = 64, seed: int = 0) -> FeatureExtractor:
    """Fixed Gaussian linear map from flattened pixels to ``dim`` features."""
    d_in = int(np.prod(input_shape))
    w = np.random.default_rng(seed).standard_normal((d_in, dim)) / np.sqrt(d_in)

    def transform(x):
        if x.shape[1:] != tuple(input_shape):
            raise ValueError(f"extractor expects {tuple(input_shape)}, got {x.shape[1:]}")
        return x.reshape(x.shape[0], -1) @ w

    return FeatureExtractor(f"random-projection{dim}", dim, transform)


@dataclass
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def summarize(features) -> GaussianSummary:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = f.mean(axis=0)
    centered = f - mu
    cov = centered.T @ centered / (f.shape[0] - 1)
    return GaussianSummary(mu, (cov + cov.T) / 2)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min(initial=0.0) < EIG_TOL * max(1.0, np.abs(w).max(initial=0.0)):
        raise np.linalg.LinAlgError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace term uses the symmetric form (S_a^(1/2) S_b S_a^(1/2))^(1/2),
    which has the same eigenvalues as (S_a S_b)^(1/2).
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    sa = _psd_sqrt(a.covariance)
    inner = sa @ b.covariance @ sa
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min(initial=0.0) < EIG_TOL * max(1.0, np.abs(w).max(initial=0.0)):
        raise np.linalg.LinAlgError(f"covariance product not PSD (min eigenvalue {w.min():.3e})")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def fid_score(real_images, fake_images, extractor: FeatureExtractor) -> float:
    if len(real_images) == 0 or len(fake_images) == 0:
        raise ValueError("both image sets must be non-empty")
    if tuple(real_images.shape[1:]) != tuple(fake_images.shape[1:]):
        raise ValueError(f"image shape mismatch: {tuple(real_images.shape[1:])} vs {tuple(fake_images.shape[1:])}")
    return frechet_distance(summarize(extractor(real_images)), summarize(extractor(fake_images)))


def write_feature_file(path, features) -> Path:
    return write_blob(path, np.asarray(features), layout="nd")


def read_feature_file(path) -> np.ndarray:
    f = read_blob(path, expect_layout="nd")
    if f.ndim != 2:
        raise ValueError(f"{path}: feature file must be (N, dim), got {f.shape}")
    return f


def fid_from_feature_files(real_path, fake_path) -> float:
    return frechet_distance(summarize(read_feature_file(real_path)), summarize(read_feature_file(fake_path)))


def account(model: Union[nn.Module, int]) -> Tuple[int, int]:
    """(scalar parameter count, float32 bytes)."""
    count = model if isinstance(model, int) else sum(p.numel() for p in model.parameters())
    return int(count), int(count) * 4


class _CountingDenoiser:
    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, x, t):
        self.calls += 1
        return self.fn(x, t)


def count_submodule_applications(student, z) -> int:
    calls = [0]

    def hook(*_):
        calls[0] += 1

    handles = [m.register_forward_hook(hook) for m in student.submodules.values()]
    try:
        with torch.no_grad():
            student(z)
    finally:
        for h in handles:
            h.remove()
    return calls[0]


def benchmark_sampling(teacher_checkpoint, student_model, n_samples: int = 16, resolution: Optional[int] = None,
                       seed: int = 0, mode: str = "ddim", stride: int = 20, repeats: int = 1,
                       clip_denoised: Optional[float] = None) -> dict:
    """Time teacher multi-step sampling against one student pass at matched resolution."""
    tc = teacher_checkpoint.config
    student_res = student_model.config.plan.full_resolution
    resolution = resolution or tc.image_resolution
    if tc.image_resolution != resolution or student_res != resolution:
        raise ValueError(f"resolution mismatch: teacher {tc.image_resolution}, student {student_res}, asked {resolution}")
    schedule = teacher_checkpoint.schedule()
    denoiser = _CountingDenoiser(teacher_checkpoint.denoiser())
    shape = (tc.channels, resolution, resolution)
    seeds = list(range(seed, seed + n_samples))

    teacher_ms = []
    for _ in range(repeats):
        denoiser.calls = 0
        t0 = time.perf_counter()
        sample_loop(denoiser, schedule, shape, stride=stride, mode=mode, seed=seeds, keep=(),
                    clip_denoised=clip_denoised)
        teacher_ms.append((time.perf_counter() - t0) * 1e3)
    teacher_evals = denoiser.calls

    student_model.eval()
    z = student_model.sample_latent(n_samples, seed)
    student_evals = count_submodule_applications(student_model, z)
    student_ms = []
    with torch.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            student_model(z)
            student_ms.append((time.perf_counter() - t0) * 1e3)

    def entry(name, evals, ms):
        total = float(min(ms))
        return {"mode": name, "n_samples": n_samples, "evals_per_sample": evals,
                "wall_ms_total": total, "wall_ms_per_sample": total / n_samples}

    teacher = entry(f"teacher-{mode}-stride{stride}", teacher_evals, teacher_ms)
    student = entry("student-one-pass", student_evals, student_ms)
    return {
        "teacher": teacher,
        "student": student,
        "eval_ratio": teacher_evals / student_evals,
        "speedup": teacher["wall_ms_total"] / max(student["wall_ms_total"], 1e-9),
    }
