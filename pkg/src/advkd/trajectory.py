"""Stage plan, downsampling supervisor and the on-disk teacher trajectory dataset."""

from __future__ import annotations

import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import torch

from .archive import read_blob, write_blob

SCHEMA_VERSION = 1
MAX_MAPPED_STAGE = 10
FINAL = None  # teacher_t of the image-producing stage: the teacher's final output


class PlanError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def stage_timestep(n: int) -> int:
    """Teacher step supervising stage ``n``: a decreasing quadratic in noise level as n falls."""
    if not 0 <= n <= MAX_MAPPED_STAGE:
        raise PlanError(f"stage index {n} outside [0, {MAX_MAPPED_STAGE}]")
    return 190 * n - 10 * n * n + 80


@dataclass(frozen=True)
class StageSpec:
    n: int
    teacher_t: Optional[int]
    resolution: int
    upsamples_input: bool
    batch_size: int
    feature_channels: int

    @property
    def is_final(self) -> bool:
        return self.teacher_t is None


@dataclass(frozen=True)
class StagePlan:
    """Stages in application (and training) order: noisiest first, image-producing stage last."""

    num_stages: int
    base_resolution: int
    full_resolution: int
    latent_channels: int
    entries: tuple

    def stage(self, n: int) -> StageSpec:
        for e in self.entries:
            if e.n == n:
                return e
        raise PlanError(f"no stage {n} in plan")

    @property
    def final(self) -> StageSpec:
        return self.entries[-1]

    @property
    def order(self) -> List[int]:
        return [e.n for e in self.entries]

    def supervised_steps(self) -> List[int]:
        return sorted({e.teacher_t for e in self.entries if e.teacher_t is not None}, reverse=True)

    def to_dict(self) -> dict:
        return {
            "num_stages": self.num_stages,
            "base_resolution": self.base_resolution,
            "full_resolution": self.full_resolution,
            "latent_channels": self.latent_channels,
            "entries": [{**asdict(e), "teacher_t": "final" if e.is_final else e.teacher_t} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        entries = tuple(
            StageSpec(**{**e, "teacher_t": None if e["teacher_t"] == "final" else int(e["teacher_t"])})
            for e in d["entries"]
        )
        return cls(d["num_stages"], d["base_resolution"], d["full_resolution"], d["latent_channels"], entries)


def _batch_size_for(train_index: int) -> int:
    if train_index < 8:
        return 64
    if train_index == 8:
        return 32
    return 16


def build_stage_plan(
    num_stages: int = 12, base_resolution: int = 4, full_resolution: int = 256, latent_channels: int = 384
) -> StagePlan:
    """Lay out stages ``n = num_stages-2 .. 0`` (mapped steps) followed by the final stage ``n = num_stages-1``.

    Every even ``n`` upsamples its input 2x, so the ladder must satisfy
    ``full = base * 2**(number of even n)``.
    """
    if not 1 <= num_stages <= MAX_MAPPED_STAGE + 2:
        raise PlanError(f"num_stages must be in [1, {MAX_MAPPED_STAGE + 2}], got {num_stages}")
    for r in (base_resolution, full_resolution):
        if r < 1 or r & (r - 1):
            raise PlanError(f"resolution {r} is not a power of two")
    doublings = sum(1 for n in range(num_stages) if n % 2 == 0)
    if base_resolution * 2**doublings != full_resolution:
        raise PlanError(
            f"{num_stages} stages double {doublings} times: {base_resolution} -> "
            f"{base_resolution * 2**doublings}, not {full_resolution}"
        )
    order = list(range(num_stages - 2, -1, -1)) + [num_stages - 1]
    entries = []
    res, ups = base_resolution, 0
    for i, n in enumerate(order):
        upsample = n % 2 == 0
        if upsample:
            res *= 2
            ups += 1
        entries.append(
            StageSpec(
                n=n,
                teacher_t=FINAL if n == num_stages - 1 else stage_timestep(n),
                resolution=res,
                upsamples_input=upsample,
                batch_size=_batch_size_for(i),
                feature_channels=max(latent_channels >> ups, 1),
            )
        )
    return StagePlan(num_stages, base_resolution, full_resolution, latent_channels, tuple(entries))


def downsample_psi(x, target_resolution: int):
    """Area-average pool the trailing (H, W) dims down to ``target_resolution``.

    Accepts torch tensors or numpy arrays with layout (..., H, W).
    """
    h, w = x.shape[-2], x.shape[-1]
    if h != w:
        raise ValueError(f"expected square images, got {h}x{w}")
    if target_resolution < 1 or target_resolution > h or h % target_resolution:
        raise ValueError(f"cannot reduce {h} to {target_resolution} by an integer factor")
    f = h // target_resolution
    if f == 1:
        return x
    shape = tuple(x.shape[:-2]) + (target_resolution, f, target_resolution, f)
    return x.reshape(shape).mean(axis=(-3, -1)) if isinstance(x, np.ndarray) else x.reshape(shape).mean(dim=(-3, -1))


@dataclass
class TrajectoryRecord:
    seed: int
    noise: torch.Tensor
    intermediates: Dict[int, torch.Tensor] = field(default_factory=dict)
    final: Optional[torch.Tensor] = None

    def write(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_blob(directory / "noise.bin", self.noise, step=None)
        for t, x in sorted(self.intermediates.items(), reverse=True):
            write_blob(directory / f"t_{t}.bin", x, step=t)
        write_blob(directory / "final.bin", self.final, step=-1)
        return directory

    @classmethod
    def read(cls, directory: Union[str, Path], seed: int, steps: Sequence[int]) -> "TrajectoryRecord":
        directory = Path(directory)
        load = lambda name: torch.from_numpy(read_blob(directory / name, expect_layout="chw"))
        return cls(
            seed=seed,
            noise=load("noise.bin"),
            intermediates={t: load(f"t_{t}.bin") for t in steps},
            final=load("final.bin"),
        )


@dataclass
class SupervisionSample:
    stage_n: int
    target: torch.Tensor
    source_record: int


class TrajectoryDataset:
    """Read-only view over a generated trajectory directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise DatasetError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("schema_version") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported schema_version {self.manifest.get('schema_version')}")
        self.plan = StagePlan.from_dict(self.manifest["plan"])
        self._cache: Dict[int, torch.Tensor] = {}

    @property
    def schedule_hash(self) -> str:
        return self.manifest["schedule_hash"]

    @property
    def seeds(self) -> List[int]:
        return [r["seed"] for r in self.manifest["records"]]

    def __len__(self) -> int:
        return len(self.manifest["records"])

    def record(self, seed: int) -> TrajectoryRecord:
        return TrajectoryRecord.read(self.root / "records" / str(seed), seed, self.manifest["steps"])

    def _blob_name(self, stage_n: int) -> str:
        spec = self.plan.stage(stage_n)
        return "final.bin" if spec.is_final else f"t_{spec.teacher_t}.bin"

    def stage_targets(self, stage_n: int) -> torch.Tensor:
        """All supervision targets for a stage, shape (N, C, r, r), in manifest record order."""
        if stage_n not in self._cache:
            spec = self.plan.stage(stage_n)
            name = self._blob_name(stage_n)
            arrs = [read_blob(self.root / "records" / str(s) / name, expect_layout="chw") for s in self.seeds]
            self._cache[stage_n] = downsample_psi(torch.from_numpy(np.stack(arrs)), spec.resolution)
        return self._cache[stage_n]

    def finals(self) -> torch.Tensor:
        arrs = [read_blob(self.root / "records" / str(s) / "final.bin", expect_layout="chw") for s in self.seeds]
        return torch.from_numpy(np.stack(arrs))


def epoch_batches(num_items: int, batch_size: int, rng_seed: int) -> Iterator[np.ndarray]:
    """Endless index batches; each epoch is a fresh permutation, so no repeats within an epoch."""
    if batch_size > num_items:
        raise DatasetError(f"batch size {batch_size} exceeds dataset size {num_items}")
    rng = np.random.default_rng(rng_seed)
    while True:
        perm = rng.permutation(num_items)
        for start in range(0, num_items - batch_size + 1, batch_size):
            yield perm[start : start + batch_size]


def load_supervision_batch(
    dataset: Union[TrajectoryDataset, str, Path], stage_n: int, batch_size: int, rng_seed: int
) -> List[SupervisionSample]:
    if not isinstance(dataset, TrajectoryDataset):
        dataset = TrajectoryDataset(dataset)
    spec = dataset.plan.stage(stage_n)
    idx = next(epoch_batches(len(dataset), batch_size, rng_seed))
    targets = dataset.stage_targets(spec.n)
    seeds = dataset.seeds
    return [SupervisionSample(spec.n, targets[i], seeds[i]) for i in idx]


def _generate_chunk(args) -> List[int]:
    from .teacher import teacher_sample_batch

    checkpoint, steps, mode, stride, seeds, out_dir, clip = args
    denoiser = checkpoint.denoiser()
    for rec in teacher_sample_batch(checkpoint, steps, mode, stride, seeds, denoiser=denoiser, clip_denoised=clip):
        rec.write(Path(out_dir) / "records" / str(rec.seed))
    return list(seeds)


def generate_dataset(
    checkpoint,
    plan: StagePlan,
    count: int,
    mode: str = "ddim",
    stride: int = 20,
    seed_base: int = 0,
    out_dir: Union[str, Path] = "trajectories",
    overwrite: bool = False,
    chunk_size: int = 50,
    workers: int = 1,
    extra_steps: Sequence[int] = (),
    clip_denoised: Optional[float] = None,
) -> dict:
    """Sample ``count`` teacher trajectories and persist them with a manifest.

    Records are produced in fixed seed chunks, so the bytes do not depend on
    ``workers``. ``extra_steps`` are stored alongside the supervised ones;
    ``clip_denoised`` is passed through to the sampler.
    """
    from .diffusion import visited_steps

    out_dir = Path(out_dir)
    if count < 1:
        raise DatasetError("count must be >= 1")
    c = checkpoint.config
    if plan.full_resolution != c.image_resolution:
        raise DatasetError(f"plan resolution {plan.full_resolution} != teacher resolution {c.image_resolution}")
    steps = sorted(set(plan.supervised_steps()) | {int(t) for t in extra_steps}, reverse=True)
    visited = set(visited_steps(c.T, stride, mode))
    bad = [t for t in steps if t not in visited]
    if bad:
        raise DatasetError(f"plan steps {bad} are not visited by {mode} sampling with stride {stride}")
    if out_dir.exists() and any(out_dir.iterdir()):
        if not overwrite:
            raise DatasetError(f"{out_dir} exists and is not empty")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seeds = list(range(seed_base, seed_base + count))
    chunks = [(checkpoint, steps, mode, stride, seeds[i : i + chunk_size], str(out_dir), clip_denoised) for i in range(0, count, chunk_size)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_generate_chunk, chunks))
    else:
        for chunk in chunks:
            _generate_chunk(chunk)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "schedule_hash": checkpoint.schedule_hash,
        "mode": mode,
        "stride": stride,
        "clip_denoised": clip_denoised,
        "steps": steps,
        "image_shape": [c.channels, c.image_resolution, c.image_resolution],
        "plan": plan.to_dict(),
        "records": [{"seed": s, "path": f"records/{s}"} for s in seeds],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
