"""Declarative run configuration: defaults, validation, dotted overrides."""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from . import attacks as atk
from .models import ModelSpec
from .trainer import SchedulerConfig, TrainingConfig, scaled_milestones

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_FREE = object()  # marks a value that is accepted as-is (lists of lists, null-able tables)

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "dataset": {
        "name": None,
        "per_class": 200,
        "test_per_class": 100,
        "synthetic": {
            "means": [[0.3, 0.3], [0.7, 0.7]],
            "scales": [0.3, 0.05],
            "samples_per_class": 500,
            "data_seed": 0,
        },
    },
    "model": {"architecture": "mlp", "widths": [128], "channels": [16, 32]},
    "teacher": {
        "checkpoint": None,
        "architecture": "mlp",
        "widths": [256, 256],
        "channels": [16, 32],
        "epochs": None,
        "trades_lambda": 6.0,
        "seed": 2000,
    },
    "training": {
        "max_epochs": 30,
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 2e-4,
        "lr_milestones": None,
        "lr_divisor": 10.0,
        "batch_size": 128,
        "eval_every": 1,
        "loss": "absld",
        "alpha": 0.9,
        "trades_lambda": 6.0,
        "smoothing": None,
        "eval_q": 0.1,
        "select_on": "worst",
    },
    "scheduler": {
        "mode": "adaptive",
        "beta": 0.1,
        "tau_init": 1.0,
        "tau_min": 0.5,
        "tau_max": 5.0,
        "tau_student": 1.0,
        "manual_table": None,
        "branches": ["clean", "adv"],
    },
    "attack_train": {
        "epsilon": 8 / 255,
        "step_size": 2 / 255,
        "steps": 10,
        "random_start_scale": 0.001,
        "objective": "kl",
    },
    "attack_eval": {
        "epsilon": 8 / 255,
        "step_size": 2 / 255,
        "attacks": ["clean", "fgsm", "pgd20", "cw30"],
        "during_training": ["pgd20"],
    },
    "theory": {
        "experiments": ["ssd_dsd", "temperature", "manual_adaptive"],
        "seeds": [0, 1, 2, 3, 4],
        "designation_seed": 1000,
        "ssd_gamma": 0.2,
        "dsd_gamma_hard": 0.05,
        "dsd_gamma_easy": 0.35,
        "tau_hard_grid": [0.5, 1.0, 2.0],
        "tau_easy_grid": [0.5, 1.0, 2.0],
        "manual_tau_hard": 0.5,
        "manual_tau_easy": 5.0,
        "alpha": 0.9,
    },
}

REQUIRED = ("schema_version", "dataset.name")
EVAL_ATTACKS = ("clean", "fgsm", "pgd20", "cw30")
EXPERIMENTS = ("ssd_dsd", "temperature", "manual_adaptive")

# keys whose values are not type-checked against the default
_UNTYPED = {
    "dataset.synthetic.means",
    "dataset.synthetic.scales",
    "training.lr_milestones",
    "training.smoothing",
    "scheduler.manual_table",
    "teacher.checkpoint",
    "teacher.epochs",
    "dataset.name",
}

_CHOICES = {
    "dataset.name": ("mnist", "cifar10", "synthetic"),
    "model.architecture": ("mlp", "small-cnn", "linear"),
    "teacher.architecture": ("mlp", "small-cnn", "linear"),
    "training.loss": ("absld", "rslad", "sat", "trades", "sat-smooth"),
    "scheduler.mode": ("adaptive", "manual-static", "fixed"),
    "attack_train.objective": atk.OBJECTIVES,
}


def _line_map(text: str) -> dict:
    """Dotted key path -> 1-based line number in the YAML source."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)

    walk(root, "")
    return lines


def _where(path: str, lines: dict) -> str:
    return f"{path} (line {lines[path]})" if path in lines else path


def _check_type(path, value, default, lines):
    if path in _UNTYPED or default is None or value is None:
        if value is None and default is not None and path not in _UNTYPED:
            raise ConfigError(f"{_where(path, lines)}: null is not allowed")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(
            f"{_where(path, lines)}: expected {type(default).__name__}, got {type(value).__name__} ({value!r})"
        )
    if path in _CHOICES and value not in _CHOICES[path]:
        raise ConfigError(f"{_where(path, lines)}: must be one of {list(_CHOICES[path])}, got {value!r}")
    return value


def _merge(defaults: dict, user: dict, prefix: str, lines: dict) -> dict:
    out = copy.deepcopy(defaults)
    if not isinstance(user, dict):
        raise ConfigError(f"{_where(prefix, lines) or 'config'}: expected a mapping")
    for key, value in user.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in defaults:
            raise ConfigError(f"unknown key {_where(path, lines)}")
        default = defaults[key]
        if isinstance(default, dict):
            out[key] = _merge(default, value if value is not None else {}, path, lines)
        else:
            out[key] = _check_type(path, value, default, lines)
    return out


def _get(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {raw!r}: {exc}") from None
    return key.strip(), value


def apply_overrides(user: dict, overrides) -> dict:
    user = copy.deepcopy(user)
    for text in overrides or ():
        key, value = parse_override(text)
        node = user
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {part} is not a section")
        node[parts[-1]] = value
    return user


def resolve(user: dict, overrides=(), source_text: str = "") -> dict:
    """Validate a user document against the schema and fill defaults."""
    lines = _line_map(source_text) if source_text else {}
    for text in overrides or ():
        lines.pop(parse_override(text)[0], None)  # overridden values have no source line
    user = apply_overrides(user or {}, overrides)
    for path in REQUIRED:
        if _get(user, path) is None:
            raise ConfigError(f"missing required key {path}")
    if user["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"{_where('schema_version', lines)}: unsupported schema version {user['schema_version']!r}")
    cfg = _merge(DEFAULTS, user, "", lines)
    name = cfg["dataset"]["name"]
    if name not in _CHOICES["dataset.name"]:
        raise ConfigError(f"{_where('dataset.name', lines)}: must be one of {list(_CHOICES['dataset.name'])}, got {name!r}")
    for key, allowed in (("attack_eval.attacks", EVAL_ATTACKS), ("attack_eval.during_training", EVAL_ATTACKS),
                         ("theory.experiments", EXPERIMENTS)):
        bad = [v for v in _get(cfg, key) if v not in allowed]
        if bad:
            raise ConfigError(f"{_where(key, lines)}: unknown entries {bad}; allowed {list(allowed)}")
    try:
        build_training_config(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, overrides=(), seed: int | None = None) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        user = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if seed is not None:
        user = {**user, "seed": seed}
    return resolve(user, overrides, text)


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


# ---------------------------------------------------------------------------
# builders


def attack_config(section: dict) -> atk.AttackConfig:
    return atk.AttackConfig(**section)


def eval_configs(cfg: dict) -> dict:
    ev = cfg["attack_eval"]
    return atk.eval_attack_configs(ev["epsilon"], ev["step_size"])


def build_training_config(cfg: dict) -> TrainingConfig:
    t = cfg["training"]
    milestones = t["lr_milestones"]
    if milestones is None:
        milestones = scaled_milestones(t["max_epochs"])
    s = cfg["scheduler"]
    return TrainingConfig(
        max_epochs=t["max_epochs"],
        lr=t["lr"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        lr_milestones=tuple(milestones),
        lr_divisor=t["lr_divisor"],
        batch_size=t["batch_size"],
        seed=cfg["seed"],
        eval_every=t["eval_every"],
        loss=t["loss"],
        alpha=t["alpha"],
        trades_lambda=t["trades_lambda"],
        smoothing=None if t["smoothing"] is None else tuple(t["smoothing"]),
        scheduler=SchedulerConfig(
            mode=s["mode"],
            beta=s["beta"],
            tau_init=s["tau_init"],
            tau_min=s["tau_min"],
            tau_max=s["tau_max"],
            tau_student=s["tau_student"],
            manual_table=None if s["manual_table"] is None else tuple(s["manual_table"]),
            branches=tuple(s["branches"]),
        ),
        attack_train=attack_config(cfg["attack_train"]),
        attack_eval=eval_configs(cfg),
        eval_attacks=tuple(cfg["attack_eval"]["during_training"]),
        eval_q=t["eval_q"],
        select_on=t["select_on"],
    )


def build_model_spec(cfg: dict, role: str, num_classes: int, input_shape: tuple) -> ModelSpec:
    m = cfg[role]
    return ModelSpec(m["architecture"], tuple(m["widths"]), num_classes, tuple(input_shape), tuple(m["channels"]))
