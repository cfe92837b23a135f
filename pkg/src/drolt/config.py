"""Flat, namespaced run configuration with a fixed schema.

A config file is a JSON object mapping keys such as ``"data.beta"`` to
values.  Unknown keys are rejected and every problem is reported at once.
"""

import hashlib
import json

SCHEMA_VERSION = 1


def _list_of_int(v):
    return isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v)


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _integer(v):
    return isinstance(v, int) and not isinstance(v, bool)


# key: (default, type check, range check, description)
SCHEMA = {
    "data.classes": (10, _integer, lambda v: v >= 2, "number of classes C"),
    "data.n_max": (500, _integer, lambda v: v >= 1, "training samples of the largest class"),
    "data.beta": (100.0, _number, lambda v: v >= 1, "imbalance factor n_max / n_min"),
    "data.dim": (16, _integer, lambda v: v >= 1, "input dimension"),
    "data.spread": (1.0, _number, lambda v: v > 0, "per-class standard deviation"),
    "data.separation": (4.0, _number, lambda v: v > 0, "mean inter-class distance in units of spread"),
    "data.seed": (0, _integer, lambda v: v >= 0, "dataset seed"),
    "data.test_per_class": (100, _integer, lambda v: v >= 1, "balanced test samples per class"),
    "data.val_per_class": (20, _integer, lambda v: v >= 1, "balanced validation samples per class"),
    "data.path": ("", lambda v: isinstance(v, str), lambda v: True, "dataset file; empty means synthesize"),
    "model.widths": ([64, 64], _list_of_int, lambda v: all(w >= 1 for w in v), "hidden layer widths"),
    "model.embedding_dim": (32, _integer, lambda v: v >= 1, "embedding dimension"),
    "model.activation": ("tanh", lambda v: v in ("tanh", "relu"), lambda v: True, "hidden nonlinearity"),
    "train.seed": (0, _integer, lambda v: v >= 0, "initialization and batching seed"),
    "train.warmup_epochs": (20, _integer, lambda v: v >= 0, "stage 1: cross-entropy only"),
    "train.joint_epochs": (20, _integer, lambda v: v >= 0, "stage 2: joint loss"),
    "train.rebalance_epochs": (10, _integer, lambda v: v >= 0, "stage 3: classifier re-training"),
    "train.lambda": (0.5, _number, lambda v: 0 <= v <= 1, "weight of cross-entropy in the joint loss"),
    "train.lr": (0.05, _number, lambda v: v > 0, "base learning rate, stages 1-2"),
    "train.milestones": ([30], _list_of_int, lambda v: all(m >= 0 for m in v), "epochs at which lr is multiplied by gamma"),
    "train.gamma": (0.1, _number, lambda v: 0 < v <= 1, "multistep decay factor"),
    "train.momentum": (0.9, _number, lambda v: 0 <= v < 1, "SGD momentum"),
    "train.weight_decay": (5e-4, _number, lambda v: v >= 0, "L2 penalty"),
    "train.batch_size": (64, _integer, lambda v: v >= 2, "minibatch size"),
    "train.rebalance_lr": (0.01, _number, lambda v: v > 0, "stage 3 learning rate"),
    "train.patience": (0, _integer, lambda v: v >= 0, "early-stopping patience in stage 2; 0 disables"),
    "train.weight_mode": ("inverse_count", lambda v: v in ("inverse_count", "in_batch", "uniform"),
                          lambda v: True, "class weights w(c) of the robust loss"),
    "epsilon.variant": ("learned", lambda v: v in ("shared", "sqrt_n", "learned"), lambda v: True,
                        "radius policy"),
    "epsilon.value": (1.0, _number, lambda v: v >= 0, "shared radius (shared / sqrt_n variants)"),
    "epsilon.init": (1.0, _number, lambda v: v > 0, "initial radius (learned variant)"),
    "epsilon.lr": (0.05, _number, lambda v: v > 0, "learning rate of the learned radii"),
    "run.stage": ("all", lambda v: v in ("all", "warmup-only"), lambda v: True, "stages to execute"),
    "run.checkpoint_every": (1, _integer, lambda v: v >= 0, "epochs between checkpoints; 0 disables"),
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


def defaults():
    return {k: (list(v[0]) if isinstance(v[0], list) else v[0]) for k, v in SCHEMA.items()}


def validate(cfg):
    """Return the list of every problem in ``cfg`` (empty when valid)."""
    problems = []
    for key in cfg:
        if key == "schema_version":
            if cfg[key] != SCHEMA_VERSION:
                problems.append(f"schema_version {cfg[key]!r} is not supported (expected {SCHEMA_VERSION})")
            continue
        if key not in SCHEMA:
            problems.append(f"unknown key {key!r}")
            continue
        _, type_ok, range_ok, desc = SCHEMA[key]
        value = cfg[key]
        if not type_ok(value):
            problems.append(f"{key}: bad type or value {value!r} ({desc})")
        elif not range_ok(value):
            problems.append(f"{key}: {value!r} out of range ({desc})")
    if not problems:
        full = resolve(cfg, check=False)
        try:
            from drolt.data import count_profile

            count_profile(full["data.classes"], full["data.n_max"], full["data.beta"])
        except ValueError as exc:
            problems.append(f"data: {exc}")
    return problems


def resolve(cfg, check=True):
    """Defaults overlaid with ``cfg``; raises :class:`ConfigError` listing all problems."""
    if check:
        problems = validate(cfg)
        if problems:
            raise ConfigError(problems)
    full = defaults()
    full.update({k: v for k, v in cfg.items() if k != "schema_version"})
    full["schema_version"] = SCHEMA_VERSION
    return full


def coerce(key, text):
    """Parse a command-line string for ``key`` into the schema's type."""
    if key not in SCHEMA:
        raise ConfigError([f"unknown key {key!r}"])
    default = SCHEMA[key][0]
    try:
        if isinstance(default, list):
            return [int(x) for x in text.split(",") if x.strip()]
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError([f"{key}: cannot parse {text!r}"]) from None
    return text


def load(path):
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(cfg, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return cfg


def digest(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]
