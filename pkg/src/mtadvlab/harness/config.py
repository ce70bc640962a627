"""Experiment configuration.

The native format is flat ``key = value`` text with dotted section names::

    seed = 0
    dataset.n_examples = 256
    task.depth.sharpness = 8
    model.encoder = 32
    attack.variant = pgd, wgd
    attack.epsilon = 8/255
    sweep.epsilon = 4/255, 8/255, 16/255
    sweep.combinations = pairs

Lists are comma separated; ``sweep.encoders`` separates encoders with ``;``
(each encoder is itself a comma list of hidden widths).  Fractions such as
``8/255`` are accepted wherever a number is.  A JSON document with the same
keys, nested or already dotted, is read by :func:`load_config` when the file
name ends in ``.json``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction

from ..model import TaskSpec, TrainConfig
from ..synth import SynthSpec, SynthTask
from ..tensor import norm_order

__all__ = ["ExperimentConfig", "SweepAxes", "AttackSettings", "ConfigError", "parse_config",
           "parse_flat", "read_flat", "load_config", "config_from_mapping", "encoder_id",
           "POLICIES"]

POLICIES = ("none", "pairs", "incremental", "all_subsets_up_to_k")
VARIANTS = ("fgsm", "pgd", "wgd", "apgd")


class ConfigError(ValueError):
    pass


def _number(text):
    text = str(text).strip()
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            return float(Fraction(num.strip()) / Fraction(den.strip()))
        try:
            return int(text)
        except ValueError:
            return float(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {text!r}") from None


def _bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _list(value, sep=","):
    if isinstance(value, (list, tuple)):
        return list(value)
    text = str(value).strip()
    return [v.strip() for v in text.split(sep) if v.strip()] if text else []


def _numbers(value):
    return [_number(v) for v in _list(value)]


def _encoder(value):
    # "16,8" and the encoder id form "16x8" are both accepted
    items = value if isinstance(value, (list, tuple)) else str(value).replace("x", ",")
    widths = [int(_number(v)) for v in _list(items)]
    if not widths or any(w < 1 for w in widths):
        raise ConfigError(f"bad encoder spec {value!r}")
    return tuple(widths)


def encoder_id(widths):
    return "x".join(str(w) for w in widths)


@dataclass(frozen=True)
class AttackSettings:
    """Attack defaults shared by every variant of a run.

    ``step_size=None`` means ``epsilon / 4`` (2/255 at the default 8/255).
    """

    variants: tuple = ("pgd",)
    epsilon: float = 8 / 255
    steps: int = 25
    step_size: float | None = None
    norm: str = "linf"
    random_start: bool = False
    input_bounds: tuple | None = (0.0, 1.0)
    rate_inverted: bool = False
    momentum: float = 0.75
    target: str = "main"

    def __post_init__(self):
        if not self.variants:
            raise ConfigError("at least one attack variant is required")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown attack variant {v!r}")
        norm_order(self.norm)
        if self.target not in ("main", "all"):
            raise ConfigError(f"attack.target must be main or all, got {self.target!r}")

    def params(self, variant, epsilon, steps, norm, seed):
        alpha = self.step_size if self.step_size is not None else epsilon / 4
        return dict(epsilon=epsilon, steps=steps, step_size=alpha, norm=norm,
                    random_start=self.random_start, seed=seed,
                    input_bounds=self.input_bounds, rate_inverted=self.rate_inverted,
                    momentum=self.momentum)


@dataclass(frozen=True)
class SweepAxes:
    """Declared sweep axes; ``None`` means "use the single base value"."""

    epsilon: tuple | None = None
    steps: tuple | None = None
    norm: tuple | None = None
    encoders: tuple | None = None
    epochs: tuple | None = None
    combinations: str = "none"
    max_k: int = 2
    order: tuple | None = None
    weighting: str = "uniform"

    def __post_init__(self):
        for name in ("epsilon", "steps", "norm", "encoders", "epochs"):
            value = getattr(self, name)
            if value is not None and len(value) == 0:
                raise ConfigError(f"sweep.{name} is declared but empty")
        if self.combinations not in POLICIES:
            raise ConfigError(f"unknown combination policy {self.combinations!r}")
        if self.max_k < 1:
            raise ConfigError("sweep.max_k must be >= 1")
        if self.weighting not in ("uniform", "model"):
            raise ConfigError(f"sweep.weighting must be uniform or model, got {self.weighting!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SynthSpec | str = field(default_factory=SynthSpec)
    tasks: tuple | None = None  # TaskSpecs, needed only with a dataset path
    encoder: tuple = (32,)
    weights: tuple | None = None
    activation: str = "tanh"
    decoder_hidden: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSettings = field(default_factory=AttackSettings)
    sweep: SweepAxes = field(default_factory=SweepAxes)
    eval_fraction: float = 0.25
    model_tasks: tuple | None = None
    output_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        if self.weights is not None and len(self.weights) != len(self.task_specs()):
            raise ConfigError(
                f"{len(self.weights)} model weights for {len(self.task_specs())} tasks")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigError("dataset.eval_fraction must be in [0, 1)")

    def task_specs(self):
        if isinstance(self.dataset, SynthSpec):
            return self.dataset.task_specs()
        if not self.tasks:
            raise ConfigError("a dataset path needs explicit task.<id>.* entries")
        return list(self.tasks)

    @property
    def task_ids(self):
        return [t.id for t in self.task_specs()]

    def task_weights(self):
        """Loss weight of every dataset task (uniform over the modelled tasks by default)."""
        ids = self.task_ids
        if self.weights is None:
            n = len(self.model_tasks or ids)
            return {t: 1.0 / n for t in ids}
        return dict(zip(ids, (float(w) for w in self.weights)))

    def restrict_tasks(self, ids):
        """Copy of the config that models only ``ids`` (in that order)."""
        ids = tuple(ids)
        known = self.task_ids
        missing = [t for t in ids if t not in known]
        if missing or not ids:
            raise ConfigError(f"unknown or empty task selection {missing}; known: {known}")
        return replace(self, model_tasks=ids)

    def model_task_specs(self):
        """Specs of the modelled tasks; the dataset may carry more."""
        specs = self.task_specs()
        if self.model_tasks is None:
            return specs
        by_id = {t.id: t for t in specs}
        return [by_id[t] for t in self.model_tasks]

    def model_task_weights(self):
        w = self.task_weights()
        return {t.id: w[t.id] for t in self.model_task_specs()}


# ----------------------------------------------------------------------
# parsing


def parse_flat(text):
    """Read ``key = value`` lines into a dict of raw strings."""
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value
    return flat


def parse_config(text):
    """Parse flat ``key = value`` text into an :class:`ExperimentConfig`."""
    return config_from_mapping(parse_flat(text))


def _flatten(obj, prefix=""):
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def read_flat(path):
    """Flat dotted mapping from a text or ``.json`` config file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        return _flatten(json.loads(text))
    return parse_flat(text)


def load_config(path):
    return config_from_mapping(read_flat(path))


_TASK_FIELDS = {"kind": str, "target_dim": lambda v: int(_number(v)),
                "sharpness": lambda v: float(_number(v)), "loss_kind": str, "error_kind": str}


def config_from_mapping(flat):
    """Build a config from a flat dotted-key mapping (values may be text)."""
    flat = dict(flat)
    pop = flat.pop
    tasks = {}
    for key in [k for k in flat if k.startswith("task.")]:
        parts = key.split(".")
        if len(parts) != 3 or parts[2] not in _TASK_FIELDS:
            raise ConfigError(f"bad task key {key!r}")
        tasks.setdefault(parts[1], {})[parts[2]] = _TASK_FIELDS[parts[2]](pop(key))

    seed = int(_number(pop("seed", 0)))
    ds_path = pop("dataset.path", None)
    ds = {}
    for name, conv in (("latent_dim", int), ("input_dim", int), ("n_examples", int),
                       ("noise_std", float), ("seed", int), ("task_scale", float)):
        if f"dataset.{name}" in flat:
            ds[name] = conv(_number(pop(f"dataset.{name}")))
    eval_fraction = float(_number(pop("dataset.eval_fraction", 0.25)))
    if ds_path is not None:
        if ds:
            raise ConfigError("dataset.path cannot be combined with generator settings")
        dataset = ds_path
        task_specs = tuple(
            TaskSpec(tid, **{k: v for k, v in f.items() if k != "sharpness"})
            for tid, f in tasks.items())
    else:
        synth_tasks = tuple(SynthTask(tid, **f) for tid, f in tasks.items()) or (SynthTask("a"),)
        ds.setdefault("seed", seed)
        dataset = SynthSpec(tasks=synth_tasks, **ds)
        task_specs = None

    weights = pop("model.weights", None)
    if weights is not None and str(weights).strip() != "uniform":
        weights = tuple(float(w) for w in _numbers(weights))
    else:
        weights = None
    dh = pop("model.decoder_hidden", None)
    model = dict(encoder=_encoder(pop("model.encoder", "32")), weights=weights,
                 activation=str(pop("model.activation", "tanh")),
                 decoder_hidden=None if dh is None else int(_number(dh)))

    train = {}
    for name in ("epochs", "batch_size"):
        if f"train.{name}" in flat:
            train[name] = int(_number(pop(f"train.{name}")))
    for name in ("learning_rate", "momentum"):
        if f"train.{name}" in flat:
            train[name] = float(_number(pop(f"train.{name}")))
    if "train.optimizer" in flat:
        train["optimizer"] = str(pop("train.optimizer"))

    attack = {}
    if "attack.variant" in flat:
        attack["variants"] = tuple(str(v).lower() for v in _list(pop("attack.variant")))
    for name, conv in (("epsilon", float), ("step_size", float), ("momentum", float),
                       ("steps", int)):
        if f"attack.{name}" in flat:
            attack[name] = conv(_number(pop(f"attack.{name}")))
    for name in ("random_start", "rate_inverted"):
        if f"attack.{name}" in flat:
            attack[name] = _bool(pop(f"attack.{name}"))
    if "attack.norm" in flat:
        attack["norm"] = str(pop("attack.norm"))
    if "attack.target" in flat:
        attack["target"] = str(pop("attack.target"))
    if "attack.input_bounds" in flat:
        b = pop("attack.input_bounds")
        attack["input_bounds"] = None if str(b).strip() == "none" else \
            tuple(float(v) for v in _numbers(b))

    sweep = {}
    if "sweep.epsilon" in flat:
        sweep["epsilon"] = tuple(float(v) for v in _numbers(pop("sweep.epsilon")))
    if "sweep.steps" in flat:
        sweep["steps"] = tuple(int(v) for v in _numbers(pop("sweep.steps")))
    if "sweep.epochs" in flat:
        sweep["epochs"] = tuple(int(v) for v in _numbers(pop("sweep.epochs")))
    if "sweep.norm" in flat:
        sweep["norm"] = tuple(str(v) for v in _list(pop("sweep.norm")))
    if "sweep.encoders" in flat:
        enc = pop("sweep.encoders")
        items = enc if isinstance(enc, (list, tuple)) else _list(enc, ";")
        sweep["encoders"] = tuple(_encoder(e) for e in items)
    if "sweep.combinations" in flat:
        sweep["combinations"] = str(pop("sweep.combinations"))
    if "sweep.max_k" in flat:
        sweep["max_k"] = int(_number(pop("sweep.max_k")))
    if "sweep.order" in flat:
        sweep["order"] = tuple(str(v) for v in _list(pop("sweep.order")))
    if "sweep.weighting" in flat:
        sweep["weighting"] = str(pop("sweep.weighting"))

    output_dir = str(pop("output_dir", "out"))
    if flat:
        raise ConfigError(f"unknown config keys: {sorted(flat)}")
    return ExperimentConfig(dataset=dataset, tasks=task_specs, train=TrainConfig(**train),
                            attack=AttackSettings(**attack), sweep=SweepAxes(**sweep),
                            eval_fraction=eval_fraction, output_dir=output_dir, seed=seed,
                            **model)
