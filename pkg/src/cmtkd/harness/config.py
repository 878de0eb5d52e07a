"""Experiment configuration: TOML file <-> dataclasses."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..distill import FEATURE_LOSSES
from ..netbuilder import NetworkSpec
from ..quantizers import SCHEMES

PRESETS = (
    "single",
    "kd_fp",
    "average_teacher",
    "cmtkd",
    "cmtkd_no_att",
    "cmtkd_no_ml",
    "combined_teacher_eval",
)
ENSEMBLE_PRESETS = ("cmtkd", "cmtkd_no_att", "cmtkd_no_ml", "combined_teacher_eval")
SCHEDULES = ("step", "cosine")
DEFAULT_GAMMA = {"attention": 100.0, "fitnet": 1.0}


def parse_bits(value) -> int | None:
    """``"fp"``, ``"FP"``, ``None`` or ``0`` mean full precision."""
    if value is None or (isinstance(value, str) and value.lower() in ("fp", "none", "full")):
        return None
    bits = int(value)
    if bits == 0:
        return None
    if bits < 1:
        raise ValueError(f"invalid bit-width {value!r}")
    return bits


def format_bits(bits: int | None) -> str:
    return "FP" if bits is None else f"{bits}-bit"


@dataclass
class ArchConfig:
    layers: list[str] = field(default_factory=lambda: ["c16", "c16", "M", "c32", "c32", "M", "c64", "c64"])
    in_channels: int = 3
    image_size: list[int] = field(default_factory=lambda: [16, 16])
    num_classes: int = 10


@dataclass
class ExperimentConfig:
    preset: str = "cmtkd"
    teacher_bits: list[int | None] = field(default_factory=lambda: [4, 6, 8])
    student_bits: int | None = 2
    quantizer: str = "hwgq"
    feat_loss: str = "attention"
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float | None = None
    temperature: float = 4.0
    epochs: int = 10
    teacher_epochs: int | None = None
    max_steps: int | None = None
    batch_size: int = 64
    eval_batch_size: int = 250
    base_lr: float = 0.05
    momentum: float = 0.9
    schedule: str = "cosine"
    milestones: list[int] = field(default_factory=lambda: [50, 100])
    fusion_indices: list[int] = field(default_factory=lambda: [2, 4, 6])
    arch: ArchConfig = field(default_factory=ArchConfig)
    data_path: str = "data/desk"
    seed: int = 0
    dtype: str = "float32"
    augment: bool = True
    reshuffle: bool = False
    save_checkpoints: bool = True

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        self.teacher_bits = [parse_bits(b) for b in self.teacher_bits]
        self.student_bits = parse_bits(self.student_bits)
        if self.gamma is None:
            self.gamma = DEFAULT_GAMMA.get(self.feat_loss, 1.0)
        self.validate()

    @property
    def pi_lr_scale(self) -> float:
        return 0.1

    @property
    def uses_ensemble(self) -> bool:
        return self.preset in ENSEMBLE_PRESETS

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            layers=tuple(self.arch.layers),
            fusion_indices=tuple(self.fusion_indices),
            num_classes=self.arch.num_classes,
            in_channels=self.arch.in_channels,
            image_size=tuple(self.arch.image_size),
        )

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.quantizer not in SCHEMES:
            raise ValueError(f"unknown quantizer {self.quantizer!r}")
        if self.feat_loss not in FEATURE_LOSSES:
            raise ValueError(f"unknown feat_loss {self.feat_loss!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.preset not in ("single", "kd_fp") and not self.teacher_bits:
            raise ValueError(f"preset {self.preset!r} needs at least one teacher bit-width")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.network_spec()

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["teacher_bits"] = ["fp" if b is None else b for b in self.teacher_bits]
        d["student_bits"] = "fp" if self.student_bits is None else self.student_bits
        return {k: v for k, v in d.items() if v is not None}

    def replace(self, **changes) -> ExperimentConfig:
        d = self.to_dict()
        d.update(changes)
        if "feat_loss" in changes and "gamma" not in changes:
            d.pop("gamma", None)
        return config_from_dict(d)


def config_from_dict(d: dict[str, Any]) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    cfg = config_from_dict(raw)
    data = Path(cfg.data_path)
    if not data.is_absolute():
        cfg.data_path = str((Path(path).parent / data).resolve())
    return cfg
