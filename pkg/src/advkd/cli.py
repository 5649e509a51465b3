"""``advkd`` command line: train-teacher, gen-trajectories, distill, sample, eval, bench, inspect-schedule."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .archive import ArchiveError, read_blob, write_blob
from .config import ConfigError, RunConfig, load_config
from .data import load_images, make_shapes_dataset, save_grid_png
from .distill import NumericError, distill
from .evaluation import (
    benchmark_sampling,
    fid_from_feature_files,
    fid_score,
    pixel_extractor,
    random_projection_extractor,
)
from .student import StudentModel, build_student
from .teacher import TeacherCheckpoint, build_teacher, train_teacher
from .trajectory import DatasetError, TrajectoryDataset, generate_dataset, stage_timestep

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _load_teacher(cfg: RunConfig) -> TeacherCheckpoint:
    if not cfg.teacher_path.exists():
        raise DataError(f"no teacher checkpoint at {cfg.teacher_path}; run train-teacher first")
    ckpt = TeacherCheckpoint.load(cfg.teacher_path)
    _check_hash(cfg, ckpt.schedule_hash, cfg.teacher_path)
    return ckpt


def _check_hash(cfg: RunConfig, found: str, where) -> None:
    expected = cfg.schedule().hash()
    if found != expected:
        raise DataError(f"{where} was produced under schedule {found[:12]}..., config expects {expected[:12]}...")


def _load_dataset(cfg: RunConfig, root: Optional[Path] = None) -> TrajectoryDataset:
    ds = TrajectoryDataset(root or cfg.trajectories_dir)
    _check_hash(cfg, ds.schedule_hash, ds.root)
    return ds


def _load_student(cfg: RunConfig, path: Optional[Path] = None) -> StudentModel:
    path = Path(path or cfg.student_dir / "student.ckpt")
    if not path.exists():
        raise DataError(f"no student checkpoint at {path}; run distill first")
    model = StudentModel.load(path)
    _check_hash(cfg, model.schedule_hash, path)
    return model.eval()


def _clip(cfg: RunConfig) -> Optional[float]:
    bound = float(cfg["trajectories"]["clip_denoised"])
    return bound if bound > 0 else None  # 0 turns clipping off


def _extractor(cfg: RunConfig, image_shape):
    e = cfg["eval"]
    if e["extractor"] == "pixels":
        return pixel_extractor()
    return random_projection_extractor(image_shape, int(e["feature_dim"]), int(e["extractor_seed"]))


# -- commands -----------------------------------------------------------------

def cmd_train_teacher(cfg: RunConfig, steps: Optional[int] = None) -> Path:
    tcfg = cfg.teacher_config()
    t = cfg["teacher"]
    if cfg["data"]["kind"] == "shapes":
        images = make_shapes_dataset(int(cfg["data"]["count"]), tcfg.image_resolution, cfg.seed)
    else:
        path = cfg.data_path()
        if not str(cfg["data"]["path"]) or not path.exists():
            raise ConfigError("data.path", f"dataset path {str(path)!r} does not exist")
        try:
            images = load_images(path, tcfg.image_resolution)
        except ValueError as e:
            raise DataError(str(e)) from None
    denoiser = build_teacher(tcfg, int(t["init_seed"]))
    n_steps = int(steps if steps is not None else t["steps"])
    ckpt = train_teacher(denoiser, images, cfg.schedule(), n_steps, int(t["batch_size"]), float(t["lr"]),
                         seed=cfg.seed, log_every=max(n_steps // 10, 1))
    if ckpt.loss_trace and not np.isfinite(ckpt.loss_trace[-1]):
        raise NumericError("teacher loss diverged")
    path = ckpt.save(cfg.teacher_path)
    tail = float(np.mean(ckpt.loss_trace[-50:])) if ckpt.loss_trace else float("nan")
    print(f"final loss {tail:.5f}")
    print(f"checkpoint {path}")
    return path


def cmd_gen_trajectories(cfg: RunConfig, count: Optional[int] = None, out: Optional[Path] = None,
                         workers: int = 1, overwrite: bool = False) -> Path:
    ckpt = _load_teacher(cfg)
    tr = cfg["trajectories"]
    out = Path(out or cfg.trajectories_dir)
    generate_dataset(ckpt, cfg.plan(), int(count or tr["count"]), tr["mode"], int(tr["stride"]),
                     int(tr["seed_base"]), out, overwrite=overwrite, chunk_size=int(tr["chunk_size"]), workers=workers,
                     extra_steps=tr["extra_steps"], clip_denoised=_clip(cfg))
    path = out / "manifest.json"
    print(f"manifest {path}")
    return path


def cmd_distill(cfg: RunConfig, steps_per_stage: Optional[int] = None, fresh: bool = False) -> Path:
    ds = _load_dataset(cfg)
    dcfg = cfg.distill_config()
    if steps_per_stage is not None:
        dcfg.steps_per_stage = steps_per_stage
    latest = cfg.student_dir / "latest.ckpt"
    report = cfg.student_dir / "report.jsonl"
    if latest.exists() and not fresh:
        model = StudentModel.load(latest)
        _check_hash(cfg, model.schedule_hash, latest)
        print(f"resuming from {latest} (trained stages {sorted(model.trained_stages)})")
    else:
        for old in cfg.student_dir.glob("*"):
            old.unlink()
        model = build_student(cfg.student_config(), int(cfg["student"]["init_seed"]))
    cfg.student_dir.mkdir(parents=True, exist_ok=True)
    model, _ = distill(model, ds, dcfg, checkpoint_dir=cfg.student_dir, report_path=report, log=True)
    path = model.save(cfg.student_dir / "student.ckpt", schedule_hash=ds.schedule_hash, deployment=True)
    print(f"student {path}")
    return path


def _write_samples(images: torch.Tensor, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("sample_*"):
        old.unlink()
    for i, img in enumerate(images):
        write_blob(out / f"sample_{i:04d}.bin", img)
    side = int(np.ceil(np.sqrt(len(images))))
    return save_grid_png(images, out / "grid.png", side)


def generate_images(cfg: RunConfig, model: str, n: int, seed: int) -> torch.Tensor:
    if model == "teacher":
        from .diffusion import sample_loop

        ckpt = _load_teacher(cfg)
        c, tr = ckpt.config, cfg["trajectories"]
        final, _ = sample_loop(ckpt.denoiser(), ckpt.schedule(), (c.channels, c.image_resolution, c.image_resolution),
                               stride=int(tr["stride"]), mode=tr["mode"], seed=list(range(seed, seed + n)), keep=(),
                               clip_denoised=_clip(cfg))
        return final
    if model == "untrained":
        student = build_student(cfg.student_config(), int(cfg["student"]["init_seed"]))
    else:
        student = _load_student(cfg)
    return student.generate(n, seed)


def cmd_sample(cfg: RunConfig, n: int = 16, model: str = "student", out: Optional[Path] = None,
               seed: Optional[int] = None) -> Path:
    images = generate_images(cfg, model, n, cfg.seed + 7_000_000 if seed is None else seed)
    out = Path(out or cfg.samples_dir / model)
    grid = _write_samples(images, out)
    print(f"{len(images)} samples in {out}, grid {grid}")
    return out


def read_sample_dir(path: Path) -> torch.Tensor:
    files = sorted(Path(path).glob("*.bin"))
    if not files:
        raise DataError(f"no .bin samples in {path}")
    return torch.from_numpy(np.stack([read_blob(f, expect_layout="chw") for f in files]))


def cmd_eval(cfg: RunConfig, real: Optional[Path] = None, fakes=(), features: Optional[tuple] = None) -> dict:
    if features:
        score = fid_from_feature_files(*features)
        print(f"{'real':<28}{'fake':<28}{'frechet':>14}")
        print(f"{str(features[0]):<28}{str(features[1]):<28}{score:>14.6f}")
        return {str(features[1]): score}
    real = Path(real or cfg.samples_dir / "teacher")
    fakes = [Path(f) for f in fakes] or [cfg.samples_dir / "student", cfg.samples_dir / "untrained"]
    real_images = read_sample_dir(real)
    extractor = _extractor(cfg, tuple(real_images.shape[1:]))
    scores = {}
    print(f"extractor {extractor.name}, real set {real} ({len(real_images)} images)")
    print(f"{'fake set':<40}{'n':>6}{'frechet':>16}")
    for f in fakes:
        if not f.exists():
            continue
        imgs = read_sample_dir(f)
        scores[str(f)] = fid_score(real_images, imgs, extractor)
        print(f"{str(f):<40}{len(imgs):>6}{scores[str(f)]:>16.6f}")
    return scores


def cmd_bench(cfg: RunConfig, n_samples: int = 16, repeats: int = 3) -> dict:
    ckpt = _load_teacher(cfg)
    student = _load_student(cfg)
    tr = cfg["trajectories"]
    report = benchmark_sampling(ckpt, student, n_samples, seed=cfg.seed, mode=tr["mode"], stride=int(tr["stride"]),
                                repeats=repeats, clip_denoised=_clip(cfg))
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "bench.json").write_text(json.dumps(report, indent=1) + "\n")
    print(json.dumps(report, indent=1))
    return report


def cmd_inspect_schedule(cfg: RunConfig) -> list:
    plan = cfg.plan()
    present = {e.n: e for e in plan.entries}
    rows = []
    for n in range(11):
        row = f"n={n} t={stage_timestep(n)}"
        e = present.get(n)
        if e is not None and not e.is_final:
            row += f" res={e.resolution} batch={e.batch_size} upsample={'yes' if e.upsamples_input else 'no'}"
        rows.append(row)
    f = plan.final
    rows.append(f"n={f.n} t=final res={f.resolution} batch={f.batch_size} upsample={'yes' if f.upsamples_input else 'no'}")
    print("\n".join(rows))
    return rows


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advkd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", type=Path, default=None, help="TOML run config (default: full-scale defaults)")
        return sp

    sp = add("train-teacher", "train the DDPM teacher")
    sp.add_argument("--steps", type=int)
    sp = add("gen-trajectories", "record teacher trajectories")
    sp.add_argument("--count", type=int)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--overwrite", action="store_true")
    sp = add("distill", "train the student stage by stage")
    sp.add_argument("--steps-per-stage", type=int)
    sp.add_argument("--fresh", action="store_true", help="ignore existing stage checkpoints")
    sp = add("sample", "write samples and a grid image")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--model", choices=["student", "teacher", "untrained"], default="student")
    sp.add_argument("--out", type=Path)
    sp.add_argument("--seed", type=int)
    sp = add("eval", "Frechet scores of sample sets against a reference set")
    sp.add_argument("--real", type=Path)
    sp.add_argument("--fake", type=Path, action="append", default=[])
    sp.add_argument("--features", type=Path, nargs=2, metavar=("REAL", "FAKE"), help="precomputed feature files")
    sp = add("bench", "teacher vs student sampling latency")
    sp.add_argument("--n-samples", type=int, default=16)
    sp.add_argument("--repeats", type=int, default=3)
    add("inspect-schedule", "print the stage/timestep table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "train-teacher":
            cmd_train_teacher(cfg, args.steps)
        elif args.command == "gen-trajectories":
            cmd_gen_trajectories(cfg, args.count, args.out, args.workers, args.overwrite)
        elif args.command == "distill":
            cmd_distill(cfg, args.steps_per_stage, args.fresh)
        elif args.command == "sample":
            cmd_sample(cfg, args.n, args.model, args.out, args.seed)
        elif args.command == "eval":
            cmd_eval(cfg, args.real, args.fake, tuple(args.features) if args.features else None)
        elif args.command == "bench":
            cmd_bench(cfg, args.n_samples, args.repeats)
        else:
            cmd_inspect_schedule(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DatasetError, ArchiveError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
