"""Deterministic synthetic multi-task data.

Every example starts from a latent Gaussian vector ``z``.  Inputs are a noisy
random mixing of ``z`` squashed into ``(0, 1)``; each task reads ``z`` through
its own random map.  Regression targets are ``sin(sharpness * B z)``, so the
sharpness of a task controls how quickly its target oscillates and therefore
how large the trained model's input gradients for it become.  Task maps are
drawn with standard deviation ``task_scale / sqrt(latent_dim)``; the default
keeps sharpness 8 learnable by a small network, which is what makes the knob
monotone rather than collapsing into an unlearnable, flat fit.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .container import read_container, write_container
from .model import TaskSpec

__all__ = ["SynthTask", "SynthSpec", "SynthDataset", "generate_dataset", "task_target",
           "load_dataset"]


@dataclass(frozen=True)
class SynthTask:
    id: str
    kind: str = "regression"
    target_dim: int = 1
    sharpness: float = 1.0
    loss_kind: str | None = None
    error_kind: str | None = None

    def __post_init__(self):
        if self.sharpness < 1:
            raise ValueError(f"task {self.id!r}: sharpness must be >= 1")

    def task_spec(self):
        return TaskSpec(self.id, self.kind, self.target_dim, self.loss_kind, self.error_kind)


@dataclass(frozen=True)
class SynthSpec:
    latent_dim: int = 4
    input_dim: int = 16
    n_examples: int = 256
    tasks: tuple = field(default_factory=lambda: (SynthTask("a"),))
    noise_std: float = 0.0
    seed: int = 0
    task_scale: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(
            t if isinstance(t, SynthTask) else SynthTask(**t) for t in self.tasks))
        if self.latent_dim > self.input_dim:
            raise ValueError(
                f"latent_dim {self.latent_dim} exceeds input_dim {self.input_dim}")
        if self.latent_dim < 1 or self.n_examples < 1:
            raise ValueError("latent_dim and n_examples must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not self.task_scale > 0:
            raise ValueError("task_scale must be positive")
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate task ids {ids}")

    def task_specs(self):
        return [t.task_spec() for t in self.tasks]

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthDataset:
    X: np.ndarray
    Y: dict
    spec: SynthSpec
    Z: np.ndarray | None = None
    maps: dict | None = None

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        return SynthDataset(self.X[idx], {t: y[idx] for t, y in self.Y.items()}, self.spec,
                            None if self.Z is None else self.Z[idx], self.maps)

    def save(self, path):
        arrays = {"X": self.X}
        arrays.update({f"Y/{t}": y for t, y in self.Y.items()})
        header = {"spec": self.spec.to_dict(),
                  "classification": [t.id for t in self.spec.tasks
                                     if t.kind == "classification"]}
        write_container(path, "dataset", header, arrays)


def load_dataset(path):
    header, arrays = read_container(path, "dataset")
    spec = SynthSpec(**dict(header["spec"], tasks=tuple(header["spec"]["tasks"])))
    Y = {}
    for t in spec.tasks:
        y = arrays[f"Y/{t.id}"]
        Y[t.id] = y.astype(np.int64) if t.id in header["classification"] else y
    return SynthDataset(arrays["X"], Y, spec)


def task_target(z, task, task_map):
    """Target of ``task`` for latent vector(s) ``z`` given its random map.

    Regression: ``sin(sharpness * map @ z)``; classification: index of the
    largest class score ``map @ z``.
    """
    scores = np.asarray(z, dtype=np.float64) @ np.asarray(task_map).T
    if task.kind == "classification":
        return np.argmax(scores, axis=-1)
    return np.sin(task.sharpness * scores)


def _squash(a):
    return 1.0 / (1.0 + np.exp(-a))


def generate_dataset(spec):
    """Draw a dataset from ``spec``; identical specs give identical bits.

    Random draws happen in a fixed order: mixing map, task maps (in task
    order), latents, then input noise.
    """
    rng = np.random.default_rng(spec.seed)
    k, d = spec.latent_dim, spec.input_dim
    mixing = rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k))
    maps = {}
    for t in spec.tasks:
        maps[t.id] = rng.normal(0.0, spec.task_scale / np.sqrt(k), size=(t.target_dim, k))
    Z = rng.normal(size=(spec.n_examples, k))
    noise = rng.normal(0.0, spec.noise_std, size=(spec.n_examples, d)) \
        if spec.noise_std > 0 else np.zeros((spec.n_examples, d))
    X = _squash(Z @ mixing.T + noise)
    Y = {t.id: task_target(Z, t, maps[t.id]) for t in spec.tasks}
    maps["__mixing__"] = mixing
    return SynthDataset(X, Y, spec, Z, maps)
