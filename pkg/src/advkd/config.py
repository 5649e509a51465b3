"""Run configuration: TOML loading, defaults at full scale, cross-field validation."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .diffusion import NoiseSchedule, ScheduleError, make_linear_schedule, visited_steps
from .distill import DistillConfig, LipschitzPolicy
from .student import StudentConfig
from .teacher import TeacherConfig, TeacherConfigError
from .trajectory import PlanError, StagePlan, build_stage_plan

SCHEMA_VERSION = 1
PACKAGED = Path(__file__).with_name("configs")

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "run": {"schema_version": SCHEMA_VERSION, "seed": 0, "out": "runs/default"},
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "teacher": {
        "image_resolution": 256, "channels": 3, "base_width": 128,
        "channel_multipliers": [1, 1, 2, 2, 4, 4], "time_embedding_dim": 512, "num_res_blocks": 2,
        "steps": 500_000, "batch_size": 64, "lr": 2e-4, "init_seed": 0,
    },
    "data": {"kind": "path", "path": "", "count": 0},
    "trajectories": {"count": 11_000, "mode": "ddim", "stride": 20, "seed_base": 1_000_000, "chunk_size": 16,
                     "extra_steps": [], "clip_denoised": 1.0},
    "plan": {"num_stages": 12, "base_resolution": 4, "latent_channels": 384},
    "student": {"negative_slope": 0.2, "init_seed": 0},
    "distill": {
        "steps_per_stage": 10_000, "critic_steps_per_generator_step": 5,
        "lipschitz_policy": "weight_clip", "lipschitz_value": 0.01,
        "lr_generator": 0.0, "lr_critic": 0.0, "critic_width": 64, "batch_size": 0,
    },
    "eval": {"n_samples": 1000, "extractor": "random-projection", "feature_dim": 64, "extractor_seed": 0},
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    raw: Dict[str, Dict[str, Any]]
    path: Optional[Path] = None

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.raw[section]

    @property
    def seed(self) -> int:
        return int(self.raw["run"]["seed"])

    @property
    def out(self) -> Path:
        env = os.environ.get("ADVKD_OUT")
        return Path(env) if env else Path(self.raw["run"]["out"])

    # -- derived objects -----------------------------------------------------
    def schedule(self) -> NoiseSchedule:
        s = self.raw["schedule"]
        return make_linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))

    def teacher_config(self) -> TeacherConfig:
        t, s = self.raw["teacher"], self.raw["schedule"]
        return TeacherConfig(
            image_resolution=int(t["image_resolution"]), channels=int(t["channels"]), base_width=int(t["base_width"]),
            channel_multipliers=tuple(t["channel_multipliers"]), time_embedding_dim=int(t["time_embedding_dim"]),
            num_res_blocks=int(t["num_res_blocks"]), T=int(s["T"]), beta_start=float(s["beta_start"]),
            beta_end=float(s["beta_end"]),
        )

    def plan(self) -> StagePlan:
        p = self.raw["plan"]
        return build_stage_plan(int(p["num_stages"]), int(p["base_resolution"]),
                                int(self.raw["teacher"]["image_resolution"]), int(p["latent_channels"]))

    def student_config(self) -> StudentConfig:
        return StudentConfig.from_plan(self.plan(), int(self.raw["teacher"]["channels"]),
                                       float(self.raw["student"]["negative_slope"]))

    def distill_config(self) -> DistillConfig:
        d = self.raw["distill"]
        return DistillConfig(
            steps_per_stage=int(d["steps_per_stage"]),
            critic_steps_per_generator_step=int(d["critic_steps_per_generator_step"]),
            lr_generator=float(d["lr_generator"]) or None,
            lr_critic=float(d["lr_critic"]) or None,
            lipschitz_policy=LipschitzPolicy(d["lipschitz_policy"], float(d["lipschitz_value"])),
            seed=self.seed,
            critic_width=int(d["critic_width"]),
            batch_size=int(d["batch_size"]) or None,
        )

    # -- artifact locations --------------------------------------------------
    @property
    def teacher_path(self) -> Path:
        return self.out / "teacher.ckpt"

    @property
    def trajectories_dir(self) -> Path:
        return self.out / "trajectories"

    @property
    def student_dir(self) -> Path:
        return self.out / "student"

    @property
    def samples_dir(self) -> Path:
        return self.out / "samples"

    def data_path(self) -> Optional[Path]:
        d = self.raw["data"]
        if d["kind"] == "shapes":
            return None
        p = Path(d["path"])
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p


def _merge(base: Dict, override: Dict, where: str = "") -> Dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{where}{key}"
        if key not in out:
            raise ConfigError(name, "unknown field")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(name, "expected a table")
            out[key] = _merge(out[key], value, name + ".")
        else:
            out[key] = value
    return out


def validate(cfg: RunConfig) -> None:
    raw = cfg.raw
    if raw["run"]["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {raw['run']['schema_version']}")
    try:
        cfg.schedule()
    except ScheduleError as e:
        raise ConfigError("schedule", str(e)) from None
    try:
        cfg.teacher_config()
    except TeacherConfigError as e:
        raise ConfigError("teacher.image_resolution", str(e)) from None
    try:
        cfg.plan()
    except PlanError as e:
        raise ConfigError("plan.base_resolution", str(e)) from None
    tr = raw["trajectories"]
    try:
        steps = set(visited_steps(int(raw["schedule"]["T"]), int(tr["stride"]), tr["mode"]))
    except ScheduleError as e:
        raise ConfigError("trajectories.stride", str(e)) from None
    bad = [t for t in cfg.plan().supervised_steps() + [int(t) for t in tr["extra_steps"]] if t not in steps]
    if bad:
        raise ConfigError("trajectories.stride", f"plan steps {bad} are not visited by {tr['mode']} sampling")
    if float(tr["clip_denoised"]) < 0:
        raise ConfigError("trajectories.clip_denoised", "must be >= 0 (0 disables clipping)")
    d = raw["distill"]
    try:
        LipschitzPolicy(d["lipschitz_policy"], float(d["lipschitz_value"]))
    except ValueError as e:
        raise ConfigError("distill.lipschitz_policy", str(e)) from None
    if raw["data"]["kind"] not in ("shapes", "path"):
        raise ConfigError("data.kind", "must be 'shapes' or 'path'")
    if raw["data"]["kind"] == "shapes" and int(raw["data"]["count"]) < 1:
        raise ConfigError("data.count", "synthetic dataset needs count >= 1")
    if raw["eval"]["extractor"] not in ("pixels", "random-projection"):
        raise ConfigError("eval.extractor", "must be 'pixels' or 'random-projection'")


def load_config(path: Optional[os.PathLike] = None) -> RunConfig:
    """Load a TOML run config over the full-scale defaults.

    Top-level scalars (``schema_version``, ``seed``, ``out``) live in the
    ``run`` section; everything else is a table.
    """
    override: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists() and (PACKAGED / path.name).exists():
            path = PACKAGED / path.name
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError("config", f"no such file {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("config", f"invalid TOML: {e}") from None
        run = {k: data.pop(k) for k in list(data) if not isinstance(data[k], dict)}
        override = {"run": run, **data}
    cfg = RunConfig(_merge(DEFAULTS, override), Path(path) if path else None)
    validate(cfg)
    return cfg
