"""Experiment configuration: dataclasses, the nested key-value file format,
and dotted-key overrides with field-level validation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Raised with one message per offending field."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class DataConfig:
    n_clients: int = 4
    samples_per_client: int = 12
    grid: int = 32
    val_fraction: float = 0.25
    test_per_client: int = 4  # fixed_test protocol only
    dtilde_path: str = ""  # optional pre-generated set from `dsfed gen-data`


@dataclass
class ModelConfig:
    lightweight_width: int = 8
    lightweight_depth: int = 3
    foundation_width: int = 16
    foundation_depth: int = 6


@dataclass
class FederationConfig:
    n_rounds: int = 100
    local_steps: int = 10
    batch_size: int = 4
    lr_client: float = 0.1
    lr_server: float = 0.05
    lr_distill: float = 0.02
    momentum: float = 0.9
    lambda_: float = 0.3
    selection_rate: float = 0.8
    n_generated_per_client: int = 10
    n_holdout_per_client: int = 4
    style_augment: float = 0.0  # generator-space jitter strength; 0 disables
    server_steps: int = 12
    seed: int = 0
    mutual_kd: bool = True
    lg_selection: bool = True
    eval_protocol: str = "leave_one_out"  # "leave_one_out" | "fixed_test"


@dataclass
class DistillConfig:
    alpha: float = 0.5
    epochs: int = 1
    batch_size: int = 4
    momentum: float = 0.0  # distillation phases are short; plain SGD by default
    mode: str = "topk"  # "topk" | "softmax"
    normalize_terms: bool = True


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)


# external dotted key "federation.lambda" maps to the python-safe field name
_ALIASES = {"lambda": "lambda_"}
_REVERSE_ALIASES = {v: k for k, v in _ALIASES.items()}

_SECTIONS = ("data", "model", "federation", "distill")


def to_dict(cfg: ExperimentConfig) -> dict:
    out: dict = {}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        out[section] = {
            _REVERSE_ALIASES.get(name, name): getattr(sub, name)
            for name in sub.__dataclass_fields__
        }
    return out


def _coerce(raw: str, default, key: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError([f"{key}: expected a boolean, got {raw!r}"])
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError([f"{key}: expected an integer, got {raw!r}"]) from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError([f"{key}: expected a number, got {raw!r}"]) from None
    return raw.strip()


def set_dotted(cfg: ExperimentConfig, key: str, raw_value: str) -> None:
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError([f"unknown config key {key!r} (expected section.field with section in {_SECTIONS})"])
    section, name = parts
    field_name = _ALIASES.get(name, name)
    sub = getattr(cfg, section)
    if field_name not in sub.__dataclass_fields__:
        raise ConfigError([f"unknown config key {key!r}"])
    current = getattr(sub, field_name)
    setattr(sub, field_name, _coerce(raw_value, current, key))


def parse_config_file(path: str) -> ExperimentConfig:
    """Nested key-value text: one `section.field = value` per line, # comments."""
    cfg = ExperimentConfig()
    problems: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                problems.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
                continue
            key, _, raw = stripped.partition("=")
            try:
                set_dotted(cfg, key.strip(), raw.strip())
            except ConfigError as exc:
                problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    p: list[str] = []
    d, f, di = cfg.data, cfg.federation, cfg.distill
    if d.n_clients < 2:
        p.append(f"data.n_clients: must be >= 2, got {d.n_clients}")
    if d.grid < 16 or d.grid % 2:
        p.append(f"data.grid: must be even and >= 16, got {d.grid}")
    if d.samples_per_client < 5:
        p.append(f"data.samples_per_client: must be >= 5 (generator fitting), got {d.samples_per_client}")
    if not 0.0 <= d.val_fraction < 1.0:
        p.append(f"data.val_fraction: must be in [0, 1), got {d.val_fraction}")
    if f.n_rounds < 1:
        p.append(f"federation.n_rounds: must be >= 1, got {f.n_rounds}")
    if not 0.0 <= f.lambda_ <= 1.0:
        p.append(f"federation.lambda: must be in [0, 1], got {f.lambda_}")
    if not 0.0 < f.selection_rate <= 1.0:
        p.append(f"federation.selection_rate: must be in (0, 1], got {f.selection_rate}")
    if f.local_steps < 0 or f.server_steps < 0:
        p.append("federation.local_steps/server_steps: must be >= 0")
    for name in ("lr_client", "lr_server", "lr_distill"):
        if getattr(f, name) <= 0:
            p.append(f"federation.{name}: must be positive, got {getattr(f, name)}")
    if not 0.0 <= f.momentum < 1.0:
        p.append(f"federation.momentum: must be in [0, 1), got {f.momentum}")
    if f.n_generated_per_client < 1:
        p.append(f"federation.n_generated_per_client: must be >= 1, got {f.n_generated_per_client}")
    if f.style_augment < 0:
        p.append(f"federation.style_augment: must be >= 0, got {f.style_augment}")
    if f.eval_protocol not in ("leave_one_out", "fixed_test"):
        p.append(f"federation.eval_protocol: must be leave_one_out or fixed_test, got {f.eval_protocol!r}")
    if di.alpha < 0:
        p.append(f"distill.alpha: must be >= 0, got {di.alpha}")
    if di.epochs < 0:
        p.append(f"distill.epochs: must be >= 0, got {di.epochs}")
    if di.mode not in ("topk", "softmax"):
        p.append(f"distill.mode: must be topk or softmax, got {di.mode!r}")
    if p:
        raise ConfigError(p)
