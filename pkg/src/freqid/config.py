"""Layered run configuration: defaults < JSON file < ``--set`` overrides.

Every section maps onto one module's config dataclass. Unknown keys are
rejected and every value is validated by building the dataclasses before any
command does work.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields

from .backbone import DiTConfig
from .curation import CurationParams
from .diffusion import NoiseSchedule, SamplerConfig
from .errors import InvalidArgumentError
from .injection import PLANS, InjectionPlan, ModelConfig
from .pretrain import TowerConfig
from .trainer import TrainConfig


class ValidationError(InvalidArgumentError):
    pass


@dataclass
class DataConfig:
    n_identities: int = 16
    videos_per_identity: int = 8
    frames: int = 8
    height: int = 32
    width: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.n_identities, self.videos_per_identity) < 1:
            raise InvalidArgumentError("dataset needs at least one identity and one video")
        if min(self.frames, self.height, self.width) < 8:
            raise InvalidArgumentError("frames, height and width must be >= 8")


@dataclass
class EvalConfig:
    n_pairs: int = 20
    seed: int = 1234
    split_radius: float = 0.25

    def __post_init__(self):
        if self.n_pairs < 1:
            raise InvalidArgumentError("n_pairs must be >= 1")
        if not 0.0 < self.split_radius <= 0.5:
            raise InvalidArgumentError("split_radius must lie in (0, 0.5]")


@dataclass
class AblationConfig:
    plans: tuple = ("a", "b", "c", "d", "e", "f", "g")
    fault_plans: tuple = ()
    variants: tuple = ("w/o GFE", "w/o LFE", "w/o CFT", "w/o DML", "w/o DCL", "full")
    t_values: tuple = (25, 50, 75, 100, 125, 150, 175, 200)

    def __post_init__(self):
        self.plans, self.fault_plans = tuple(self.plans), tuple(self.fault_plans)
        self.variants, self.t_values = tuple(self.variants), tuple(int(t) for t in self.t_values)
        for p in self.plans + self.fault_plans:
            if p not in PLANS:
                raise InvalidArgumentError(f"unknown plan {p!r}")
        if not self.t_values or min(self.t_values) < 1:
            raise InvalidArgumentError("t_values must be positive")


@dataclass
class ScheduleConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    kind: str = "linear"

    def build(self):
        return NoiseSchedule(self.num_steps, self.beta_start, self.beta_end, self.kind)


@dataclass
class InjectionConfig:
    """A named plan, optionally overridden field by field."""

    plan: str = "c"
    low_freq: bool | None = None
    keypoints: bool | None = None
    hf_site: str | None = None

    def __post_init__(self):
        if self.plan not in PLANS:
            raise InvalidArgumentError(f"unknown plan {self.plan!r}")
        self.resolved()

    def resolved(self) -> InjectionPlan:
        base = PLANS[self.plan]
        return InjectionPlan(
            base.low_freq if self.low_freq is None else bool(self.low_freq),
            base.keypoints if self.keypoints is None else bool(self.keypoints),
            base.hf_site if self.hf_site is None else self.hf_site,
        )


@dataclass
class PathConfig:
    data: str = ""
    towers: str = ""
    checkpoint: str = ""


SECTIONS = {
    "data": DataConfig,
    "towers": TowerConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "schedule": ScheduleConfig,
    "eval": EvalConfig,
    "curation": CurationParams,
    "ablation": AblationConfig,
    "injection": InjectionConfig,
    "paths": PathConfig,
}


def defaults():
    doc = {name: asdict(cls()) for name, cls in SECTIONS.items()}
    doc["model"] = asdict(ModelConfig())
    doc["seed"] = None
    return doc


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"{where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_override(text):
    """'a.b=value' -> {'a': {'b': value}}; the value is JSON when it parses, else a string."""
    if "=" not in text:
        raise ValidationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = cur = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return out


@dataclass
class RunConfig:
    doc: dict
    data: DataConfig
    towers: TowerConfig
    train: TrainConfig
    model: ModelConfig
    sampler: SamplerConfig
    schedule: ScheduleConfig
    eval: EvalConfig
    curation: CurationParams
    ablation: AblationConfig
    injection: InjectionConfig
    paths: PathConfig

    @property
    def plan(self) -> InjectionPlan:
        return self.injection.resolved()

    def to_dict(self):
        return copy.deepcopy(self.doc)


def _build(cls, values, name):
    known = {f.name for f in fields(cls)}
    extra = set(values) - known
    if extra:
        raise ValidationError(f"unknown keys in {name}: {sorted(extra)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid {name}: {exc}") from exc


def resolve(config_path=None, overrides=(), seed=None) -> RunConfig:
    doc = defaults()
    if config_path:
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        _merge(doc, loaded)
    for text in overrides:
        _merge(doc, parse_override(text))
    if seed is not None:
        doc["seed"] = seed
    if doc["seed"] is not None:
        if not isinstance(doc["seed"], int) or doc["seed"] < 0:
            raise ValidationError("seed must be a non-negative integer")
        for section in ("train", "towers", "sampler", "model"):
            doc[section]["seed"] = doc["seed"]
    built = {name: _build(cls, doc[name], name) for name, cls in SECTIONS.items()}
    model_doc = dict(doc["model"])
    model_doc["dit"] = _build(DiTConfig, model_doc.get("dit", {}), "model.dit")
    model = _build(ModelConfig, model_doc, "model")
    sampler = built["sampler"]
    if sampler.steps < 1:
        raise ValidationError("sampler.steps must be >= 1")
    try:
        built["schedule"].build()
        if sampler.steps > built["schedule"].num_steps:
            raise ValidationError("sampler.steps exceeds schedule.num_steps")
    except InvalidArgumentError as exc:
        raise ValidationError(str(exc)) from exc
    if max(built["ablation"].t_values) > built["schedule"].num_steps:
        raise ValidationError("ablation.t_values exceed schedule.num_steps")
    dit = model.dit
    data = built["data"]
    if (built["train"].window, data.height, data.width) != (dit.frames, dit.height, dit.width):
        raise ValidationError(
            f"train.window/data height/width {built['train'].window}x{data.height}x{data.width} "
            f"must match model.dit frames/height/width {dit.frames}x{dit.height}x{dit.width}"
        )
    if built["train"].window > data.frames:
        raise ValidationError("train.window exceeds data.frames")
    return RunConfig(doc=doc, model=model, **built)
