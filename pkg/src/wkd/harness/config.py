"""Run configuration: one JSON document per run.

Sections map to dataclasses; every leaf field can be overridden from the CLI
as ``--section.field VALUE``. The config hash is the SHA-256 of the
canonical (sorted-key) JSON, so it does not depend on field order.

Schema (defaults in parentheses)::

    seed                       run seed: student init and batch order (0)
    dataset.*                  see DatasetSpec
    teacher.stages             [[filters, stride], ...]  ([[32,1],[32,2],[32,2]])
    student.stages             ([[16,2],[16,2]])
    teacher_optim.*, student_optim.*
        epochs (30 / 10), batch_size (64), lr (0.05 / 0.02), momentum (0.9),
        weight_decay (5e-4),
        schedule ("cosine" | "step"), milestones, warmup_epochs (0 / 1,
        linear per-step ramp from 0), seed (teacher init only)
    loss.method                ce | kd | wkd-l | wkd-f | wkd-l+wkd-f | <feature kind>
    loss.tau (2), kappa (1), lam (30), eta (0.05), iters (9), target_weight (1),
    loss.separate_target (true), wd_value ("objective" | "transport"),
    loss.kd_weight (1), gamma (2), feature_weight (2e-2), grid (1),
    loss.feature_kind (wd-diag, used by wkd-f), ir_method (cka-linear),
    loss.ir_degree (2), ir_alpha (0.4), ir_per_class (50)
    record_timing              write wall-clock seconds into the record (false)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

from ..errors import InvalidSpec
from ..feature_dist import KINDS as FEATURE_KINDS
from ..feature_dist import TRAINABLE
from ..interrelation import METHODS as IR_METHODS
from .dataset import DatasetSpec

LOGIT_METHODS = ("ce", "kd", "wkd-l", "wkd-f", "wkd-l+wkd-f")


@dataclass(frozen=True)
class NetConfig:
    stages: tuple = ((8, 2), (8, 2))


@dataclass(frozen=True)
class OptimConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    milestones: tuple = ()
    warmup_epochs: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class LossConfig:
    method: str = "ce"
    tau: float = 2.0
    kappa: float = 1.0
    lam: float = 30.0
    eta: float = 0.05
    iters: int = 9
    target_weight: float = 1.0
    separate_target: bool = True
    wd_value: str = "objective"
    kd_weight: float = 1.0
    gamma: float = 2.0
    feature_weight: float = 2e-2
    grid: int = 1
    feature_kind: str = "wd-diag"
    ir_method: str = "cka-linear"
    ir_degree: int = 2
    ir_alpha: float = 0.4
    ir_per_class: int = 50

    def parts(self):
        """``(logit_kind, feature_kind)`` selected by ``method`` (either may be None)."""
        m = self.method
        if m == "ce":
            return None, None
        if m == "kd":
            return "kd", None
        if m == "wkd-l":
            return "wkd-l", None
        if m == "wkd-f":
            return None, self.feature_kind
        if m == "wkd-l+wkd-f":
            return "wkd-l", self.feature_kind
        if m in FEATURE_KINDS:
            return None, m
        raise InvalidSpec(f"unknown loss method {m!r}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: NetConfig = field(default_factory=lambda: NetConfig(((32, 1), (32, 2), (32, 2))))
    student: NetConfig = field(default_factory=lambda: NetConfig(((16, 2), (16, 2))))
    teacher_optim: OptimConfig = field(default_factory=OptimConfig)
    student_optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=10, lr=0.02, warmup_epochs=1.0))
    loss: LossConfig = field(default_factory=LossConfig)
    record_timing: bool = False

    def validate(self) -> "TrainConfig":
        self.dataset.validate()
        logit, feat = self.loss.parts()
        if feat is not None and feat not in TRAINABLE:
            raise InvalidSpec(f"feature loss {feat!r} has no training gradient")
        if self.loss.ir_method not in IR_METHODS:
            raise InvalidSpec(f"unknown IR method {self.loss.ir_method!r}")
        for name in ("teacher_optim", "student_optim"):
            o = getattr(self, name)
            if o.epochs < 0 or o.batch_size < 1 or o.lr < 0 or o.warmup_epochs < 0:
                raise InvalidSpec(f"{name}: bad epochs/batch_size/lr")
            if o.schedule not in ("cosine", "step"):
                raise InvalidSpec(f"{name}: unknown schedule {o.schedule!r}")
        if self.loss.tau <= 0 or self.loss.kappa <= 0 or self.loss.eta <= 0 or self.loss.lam < 0:
            raise InvalidSpec("tau, kappa, eta must be positive and lam nonnegative")
        if self.loss.wd_value not in ("objective", "transport"):
            raise InvalidSpec(f"unknown wd_value {self.loss.wd_value!r}")
        if self.loss.ir_per_class < 2:
            raise InvalidSpec("ir_per_class must be at least 2")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def replace(self, **sections) -> "TrainConfig":
        return dataclasses.replace(self, **sections)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    return v


SECTIONS = {
    "dataset": DatasetSpec,
    "teacher": NetConfig,
    "student": NetConfig,
    "teacher_optim": OptimConfig,
    "student_optim": OptimConfig,
    "loss": LossConfig,
}


def from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    kwargs = {}
    for name, cls in SECTIONS.items():
        section = d.pop(name, None)
        if section is None:
            continue
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise InvalidSpec(f"unknown {name} field(s): {sorted(unknown)}")
        kwargs[name] = cls(**{k: _tupled(v) for k, v in section.items()})
    for key in ("seed", "record_timing"):
        if key in d:
            kwargs[key] = d.pop(key)
    if d:
        raise InvalidSpec(f"unknown config key(s): {sorted(d)}")
    return TrainConfig(**kwargs).validate()


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return from_dict(json.load(fh))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    d = cfg.to_dict() if isinstance(cfg, TrainConfig) else cfg
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


def group_hash(cfg: TrainConfig) -> str:
    """Hash of the config without the run seed (runs differing only by seed share it)."""
    d = cfg.to_dict()
    d.pop("seed")
    return config_hash(d)


def leaf_fields():
    """``(dotted_name, type, default)`` for every overridable field."""
    out = [("seed", int, 0), ("record_timing", bool, False)]
    default = TrainConfig()
    for name in SECTIONS:
        section = getattr(default, name)
        for f in dataclasses.fields(section):
            out.append((f"{name}.{f.name}", type(getattr(section, f.name)), getattr(section, f.name)))
    return out


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply ``{"section.field": value}`` overrides (values already parsed)."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        parts = key.split(".")
        target = d
        for p in parts[:-1]:
            if p not in target:
                raise InvalidSpec(f"unknown config section {p!r}")
            target = target[p]
        if parts[-1] not in target:
            raise InvalidSpec(f"unknown config field {key!r}")
        target[parts[-1]] = value
    return from_dict(d)
