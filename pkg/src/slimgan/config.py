"""Run configuration: a strict, versioned TOML schema.

Unknown keys are hard errors so a typo can never silently fall back to a
default. The full key schema::

    version = 1                     # required, must be 1
    task = "translation"            # translation | super_resolution
    seed = 7                        # required; no wall-clock seeding
    out_dir = "runs/example"        # created if missing

    [supernet]
    max_width = 256                 # body maximal width (multiple of 8)
    body_layers = 9                 # translation only
    rir_groups = 5                  # super_resolution only
    group_layers = 5                # super_resolution only

    [dataset]
    kind = "toy"                    # toy | tensor_file | folder
    toy_kind = "translation_toy"    # toy only: translation_toy | sr_toy
    size = 256                      # toy only
    image_size = 16                 # toy only (input side)
    path = "..."                    # tensor_file/folder only

    [phases]
    pretrain_epochs = 5
    search_epochs = 30
    scratch_epochs = 60
    batch_size = 8
    scratch_batch_size = 16         # optional, defaults to batch_size

    [optim]
    w_lr = 0.05
    w_momentum = 0.9
    w_decay_start = 10              # linear schedule: epochs at full lr
    w_milestones = [25, 50, 75]     # step schedule (super_resolution)
    arch_lr = 3e-4
    scratch_lr = 0.05
    scratch_decay_start = 15
    scratch_milestones = [...]

    [budget]
    lambda0 = 1e-8
    omega1 = 0.25
    omega2 = 0.75
    flops_lower = 1.5e6             # absolute bounds, or:
    lower_frac = 0.4                # fractions of the max architecture's cost
    upper_frac = 0.6
    check_interval = 1

    [distill]
    beta1 = 1e-2
    beta2 = 1.0
    beta3 = 5e-8
    content_norm = "l1"
    extractor = "fixed_random"      # or a checkpoint path
    extractor_seed = 0
    extractor_widths = [16, 32]

    [gumbel]
    temperature = 1.0
    anneal = 1.0                    # per-epoch multiplier; 1.0 = no anneal

    [eval]
    height = 16
    width = 16
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .budget import SR_BUDGET_DEFAULTS, TRANSLATION_BUDGET_DEFAULTS, BudgetConfig
from .distill import DistillConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str
    seed: int
    out_dir: str
    max_width: int
    body_layers: int = 9
    rir_groups: int = 5
    group_layers: int = 5
    dataset_kind: str = "toy"
    toy_kind: str = "translation_toy"
    dataset_size: int = 256
    image_size: int = 16
    dataset_path: str = ""
    pretrain_epochs: int = 5
    search_epochs: int = 30
    scratch_epochs: int = 60
    batch_size: int = 8
    scratch_batch_size: int | None = None
    w_optimizer: str = ""
    w_lr: float = 0.05
    w_momentum: float = 0.9
    w_decay_start: int = 10
    w_milestones: tuple[int, ...] = ()
    arch_lr: float = 3e-4
    scratch_lr: float | None = None
    scratch_decay_start: int | None = None
    scratch_milestones: tuple[int, ...] = ()
    lambda0: float | None = None
    omega1: float | None = None
    omega2: float | None = None
    flops_lower: float | None = None
    flops_upper: float | None = None
    lower_frac: float | None = None
    upper_frac: float | None = None
    check_interval: int = 1
    beta1: float = 1e-2
    beta2: float = 1.0
    beta3: float = 5e-8
    content_norm: str = "l1"
    extractor: str = "fixed_random"
    extractor_seed: int = 0
    extractor_widths: tuple[int, ...] = (16, 32)
    temperature: float = 1.0
    temperature_anneal: float = 1.0
    eval_height: int = 16
    eval_width: int = 16
    teacher_arch: str = ""
    teacher_weights: str = ""

    def __post_init__(self) -> None:
        if self.task not in ("translation", "super_resolution"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.dataset_kind not in ("toy", "tensor_file", "folder"):
            raise ConfigError(f"unknown dataset kind {self.dataset_kind!r}")
        if not self.w_optimizer:
            self.w_optimizer = "sgd" if self.task == "translation" else "adam"
        if self.w_optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown weight optimizer {self.w_optimizer!r}")
        if self.scratch_batch_size is None:
            self.scratch_batch_size = self.batch_size
        if self.scratch_lr is None:
            self.scratch_lr = self.w_lr
        if self.scratch_decay_start is None:
            self.scratch_decay_start = self.w_decay_start
        defaults = TRANSLATION_BUDGET_DEFAULTS if self.task == "translation" else SR_BUDGET_DEFAULTS
        if self.lambda0 is None:
            self.lambda0 = defaults["lambda0"]
        if self.omega1 is None:
            self.omega1 = defaults["omega1"]
        if self.omega2 is None:
            self.omega2 = defaults["omega2"]
        has_abs = self.flops_lower is not None and self.flops_upper is not None
        has_frac = self.lower_frac is not None and self.upper_frac is not None
        if has_abs == has_frac:
            raise ConfigError(
                "budget bounds: set exactly one of (flops_lower, flops_upper) or (lower_frac, upper_frac)"
            )
        if self.dataset_kind != "toy":
            if not self.dataset_path:
                raise ConfigError(f"dataset kind {self.dataset_kind!r} needs a path")
            if not os.path.exists(self.dataset_path):
                raise ConfigError(f"dataset path does not exist: {self.dataset_path}")
            if not self.teacher_arch or not self.teacher_weights:
                raise ConfigError("non-toy datasets need [teacher] arch and weights paths")
        for path in (self.teacher_arch, self.teacher_weights):
            if path and not os.path.exists(path):
                raise ConfigError(f"teacher file does not exist: {path}")
        if self.extractor != "fixed_random" and not os.path.exists(self.extractor):
            raise ConfigError(f"extractor checkpoint does not exist: {self.extractor}")

    def budget_config(self, max_arch_flops: float | None = None) -> BudgetConfig:
        """Resolve the budget bounds, scaling fractional bounds by the widest
        architecture's exact cost."""
        if self.flops_lower is not None:
            lower, upper = self.flops_lower, self.flops_upper
        else:
            if max_arch_flops is None:
                raise ConfigError("fractional budget bounds need the max architecture cost")
            lower = self.lower_frac * max_arch_flops
            upper = self.upper_frac * max_arch_flops
        return BudgetConfig(
            lambda0=self.lambda0,
            omega1=self.omega1,
            omega2=self.omega2,
            flops_lower=lower,
            flops_upper=upper,
            check_interval=self.check_interval,
        )

    def distill_config(self) -> DistillConfig:
        if self.extractor == "fixed_random":
            descriptor = ("fixed_random", self.extractor_seed, tuple(self.extractor_widths))
        else:
            descriptor = ("external", self.extractor)
        return DistillConfig(
            beta1=self.beta1,
            beta2=self.beta2,
            beta3=self.beta3,
            content_norm=self.content_norm,
            extractor=descriptor,
        )

    def config_hash(self) -> str:
        payload = repr(
            [(f.name, getattr(self, f.name)) for f in fields(self)]
        ).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


_SCHEMA: dict[str, dict[str, tuple[str, type]]] = {
    "": {
        "version": ("", int),
        "task": ("task", str),
        "seed": ("seed", int),
        "out_dir": ("out_dir", str),
    },
    "supernet": {
        "max_width": ("max_width", int),
        "body_layers": ("body_layers", int),
        "rir_groups": ("rir_groups", int),
        "group_layers": ("group_layers", int),
    },
    "dataset": {
        "kind": ("dataset_kind", str),
        "toy_kind": ("toy_kind", str),
        "size": ("dataset_size", int),
        "image_size": ("image_size", int),
        "path": ("dataset_path", str),
    },
    "phases": {
        "pretrain_epochs": ("pretrain_epochs", int),
        "search_epochs": ("search_epochs", int),
        "scratch_epochs": ("scratch_epochs", int),
        "batch_size": ("batch_size", int),
        "scratch_batch_size": ("scratch_batch_size", int),
    },
    "optim": {
        "w_optimizer": ("w_optimizer", str),
        "w_lr": ("w_lr", float),
        "w_momentum": ("w_momentum", float),
        "w_decay_start": ("w_decay_start", int),
        "w_milestones": ("w_milestones", tuple),
        "arch_lr": ("arch_lr", float),
        "scratch_lr": ("scratch_lr", float),
        "scratch_decay_start": ("scratch_decay_start", int),
        "scratch_milestones": ("scratch_milestones", tuple),
    },
    "budget": {
        "lambda0": ("lambda0", float),
        "omega1": ("omega1", float),
        "omega2": ("omega2", float),
        "flops_lower": ("flops_lower", float),
        "flops_upper": ("flops_upper", float),
        "lower_frac": ("lower_frac", float),
        "upper_frac": ("upper_frac", float),
        "check_interval": ("check_interval", int),
    },
    "distill": {
        "beta1": ("beta1", float),
        "beta2": ("beta2", float),
        "beta3": ("beta3", float),
        "content_norm": ("content_norm", str),
        "extractor": ("extractor", str),
        "extractor_seed": ("extractor_seed", int),
        "extractor_widths": ("extractor_widths", tuple),
    },
    "gumbel": {
        "temperature": ("temperature", float),
        "anneal": ("temperature_anneal", float),
    },
    "eval": {
        "height": ("eval_height", int),
        "width": ("eval_width", int),
    },
    "teacher": {
        "arch": ("teacher_arch", str),
        "weights": ("teacher_weights", str),
    },
}


def load_config(path: str | os.PathLike, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a TOML run config; unknown keys are errors."""
    with open(path, "rb") as handle:
        try:
            raw = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    values: dict[str, object] = {}
    for section, content in raw.items():
        if isinstance(content, dict):
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in content.items():
                values.update(_convert(section, key, value))
        else:
            values.update(_convert("", section, content))
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config must declare version = {CONFIG_VERSION}")
    for required in ("task", "seed", "out_dir", "max_width"):
        if required not in values:
            raise ConfigError(f"missing required config key {required!r}")
    if seed_override is not None:
        values["seed"] = seed_override
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _convert(section: str, key: str, value) -> dict[str, object]:
    table = _SCHEMA.get(section)
    if table is None or key not in table:
        where = f"[{section}] " if section else ""
        raise ConfigError(f"unknown config key {where}{key!r}")
    attr, kind = table[key]
    if attr == "":
        return {}
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return {attr: float(value)}
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return {attr: value}
    if kind is str and isinstance(value, str):
        return {attr: value}
    if kind is tuple and isinstance(value, list):
        return {attr: tuple(value)}
    raise ConfigError(f"config key {key!r} has the wrong type ({type(value).__name__})")


def full_translation_config(out_dir: str, seed: int, dataset_path: str,
                            teacher_arch: str, teacher_weights: str, **overrides) -> RunConfig:
    """Full-scale translation compression defaults (256x256 images).

    Weight training uses SGD with momentum 0.9 at 0.1, constant for 10 epochs
    then linear to zero; architecture parameters use Adam at a constant 3e-4;
    50 pretrain and 50 search epochs at batch size 2; from-scratch training
    runs 400 epochs at batch 16. Budget weights 1/4 and 3/4 with the
    trade-off factor starting at 1e-17.
    """
    params = dict(
        task="translation",
        seed=seed,
        out_dir=out_dir,
        max_width=256,
        body_layers=9,
        dataset_kind="folder",
        dataset_path=dataset_path,
        teacher_arch=teacher_arch,
        teacher_weights=teacher_weights,
        pretrain_epochs=50,
        search_epochs=50,
        scratch_epochs=400,
        batch_size=2,
        scratch_batch_size=16,
        w_optimizer="sgd",
        w_lr=0.1,
        w_momentum=0.9,
        w_decay_start=10,
        arch_lr=3e-4,
        scratch_lr=0.1,
        scratch_decay_start=100,
        lambda0=1e-17,
        omega1=0.25,
        omega2=0.75,
        lower_frac=0.08,
        upper_frac=0.15,
        eval_height=256,
        eval_width=256,
    )
    params.update(overrides)
    return RunConfig(**params)


def full_sr_config(out_dir: str, seed: int, dataset_path: str,
                   teacher_arch: str, teacher_weights: str, **overrides) -> RunConfig:
    """Full-scale 4x super-resolution compression defaults (32x32 patches).

    Adam everywhere: weights at 1e-4 halved at epochs 25/50/75, architecture
    parameters at a constant 3e-4; 100 pretrain and 100 search epochs at
    batch size 6; from-scratch training runs 1800 epochs with halvings at
    225/450/900/1300. Budget weights 2/7 and 5/7 with the trade-off factor
    starting at 1e-12.
    """
    params = dict(
        task="super_resolution",
        seed=seed,
        out_dir=out_dir,
        max_width=64,
        dataset_kind="folder",
        dataset_path=dataset_path,
        teacher_arch=teacher_arch,
        teacher_weights=teacher_weights,
        pretrain_epochs=100,
        search_epochs=100,
        scratch_epochs=1800,
        batch_size=6,
        w_optimizer="adam",
        w_lr=1e-4,
        w_milestones=(25, 50, 75),
        arch_lr=3e-4,
        scratch_lr=1e-4,
        scratch_milestones=(225, 450, 900, 1300),
        lambda0=1e-12,
        omega1=2.0 / 7.0,
        omega2=5.0 / 7.0,
        lower_frac=0.05,
        upper_frac=0.12,
        eval_height=32,
        eval_width=32,
    )
    params.update(overrides)
    return RunConfig(**params)


def toy_translation_config(out_dir: str, seed: int = 7, **overrides) -> RunConfig:
    """The small translation preset: 16x16 textures, 3 searchable body layers."""
    params = dict(
        task="translation",
        seed=seed,
        out_dir=out_dir,
        max_width=32,
        body_layers=3,
        dataset_kind="toy",
        toy_kind="translation_toy",
        dataset_size=512,
        image_size=16,
        pretrain_epochs=5,
        search_epochs=30,
        scratch_epochs=80,
        batch_size=8,
        scratch_batch_size=16,
        w_optimizer="adam",
        w_lr=2e-3,
        w_decay_start=20,
        arch_lr=0.02,
        scratch_lr=3e-3,
        scratch_decay_start=35,
        lambda0=1e-8,
        lower_frac=0.4,
        upper_frac=0.6,
        extractor_widths=(8, 16),
        eval_height=16,
        eval_width=16,
    )
    params.update(overrides)
    return RunConfig(**params)


def toy_sr_config(out_dir: str, seed: int = 7, **overrides) -> RunConfig:
    """The small super-resolution preset: 16x16 inputs upscaled 4x."""
    params = dict(
        task="super_resolution",
        seed=seed,
        out_dir=out_dir,
        max_width=16,
        rir_groups=2,
        group_layers=2,
        dataset_kind="toy",
        toy_kind="sr_toy",
        dataset_size=128,
        image_size=16,
        pretrain_epochs=3,
        search_epochs=10,
        scratch_epochs=20,
        batch_size=8,
        w_lr=1e-3,
        w_milestones=(5, 8),
        scratch_lr=1e-3,
        scratch_milestones=(10, 16),
        lambda0=1e-8,
        lower_frac=0.4,
        upper_frac=0.7,
        extractor_widths=(8, 16),
        eval_height=16,
        eval_width=16,
    )
    params.update(overrides)
    return RunConfig(**params)


def write_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    """Emit a TOML file reproducing the config (for provenance and reruns)."""
    def fmt(value) -> str:
        if isinstance(value, bool):
            raise ConfigError("boolean config values are not part of the schema")
        if isinstance(value, str):
            return f'"{value}"'
        if isinstance(value, tuple):
            return "[" + ", ".join(fmt(v) for v in value) + "]"
        return repr(value)

    lines = [f"version = {CONFIG_VERSION}"]
    for key in ("task", "seed", "out_dir"):
        lines.append(f"{key} = {fmt(getattr(cfg, key))}")
    for section, table in _SCHEMA.items():
        if not section:
            continue
        body = []
        for key, (attr, _) in table.items():
            value = getattr(cfg, attr)
            if value is None:
                continue
            body.append(f"{key} = {fmt(value)}")
        if body:
            lines.append("")
            lines.append(f"[{section}]")
            lines.extend(body)
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")
