"""Hard-parameter-sharing multi-task models.

A :class:`MultiTaskModel` is one shared encoder graph plus a decoder graph per
task, glued together with per-task losses into a single differentiable graph.
Every loss is reduced per example (mean over target components), so batched
gradients with respect to the input are per-example gradients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from ._validation import check_inputs, check_targets
from .container import read_container, write_container
from .tensor import ACTIVATIONS, ComputationGraph, GraphError, Node, NonFiniteError

__all__ = [
    "TaskSpec",
    "TrainConfig",
    "MultiTaskModel",
    "TrainingDivergedError",
    "mlp_graph",
    "build_model",
    "task_loss",
    "joint_loss",
    "train",
    "clean_error",
    "task_errors",
]

_LOSS_OPS = {"cross_entropy": "softmax_ce", "l1": "l1", "mse": "mse"}
_ERROR_KINDS = ("one_minus_accuracy", "one_minus_iou", "mse", "l1")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")


@dataclass(frozen=True)
class TaskSpec:
    """Description of one task.

    ``target_dim`` is the number of classes for classification tasks and the
    number of regression outputs otherwise.
    """

    id: str
    kind: str = "regression"
    target_dim: int = 1
    loss_kind: str | None = None
    error_kind: str | None = None

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"task {self.id!r}: unknown kind {self.kind!r}")
        if self.loss_kind is None:
            object.__setattr__(
                self, "loss_kind",
                "cross_entropy" if self.kind == "classification" else "l1",
            )
        if self.error_kind is None:
            default = {"cross_entropy": "one_minus_accuracy", "l1": "l1", "mse": "mse"}
            object.__setattr__(self, "error_kind", default[self.loss_kind])
        if self.kind == "classification" and self.loss_kind != "cross_entropy":
            raise ValueError(f"task {self.id!r}: classification needs cross_entropy loss")
        if self.kind == "regression" and self.loss_kind not in ("l1", "mse"):
            raise ValueError(f"task {self.id!r}: regression loss must be l1 or mse")
        if self.error_kind not in _ERROR_KINDS:
            raise ValueError(f"task {self.id!r}: unknown error kind {self.error_kind!r}")
        if int(self.target_dim) < 1:
            raise ValueError(f"task {self.id!r}: target_dim must be positive")
        if self.kind == "classification" and self.target_dim < 2:
            raise ValueError(f"task {self.id!r}: classification needs >= 2 classes")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def mlp_graph(sizes, activation, rng, final_activation=True, input_name="x"):
    """Dense feed-forward graph ``sizes[0] -> ... -> sizes[-1]``.

    Weights use LeCun-normal initialization, biases start at zero.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    sizes = [int(s) for s in sizes]
    if len(sizes) < 1 or min(sizes) < 1:
        raise ValueError(f"invalid layer sizes {sizes}")
    nodes, params = [], {}
    prev = input_name
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W, b = f"W{k}", f"b{k}"
        params[W] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        params[b] = np.zeros(fan_out)
        nodes.append(Node(f"affine{k}", "affine", (prev,), (W, b)))
        prev = f"affine{k}"
        if final_activation or k < len(sizes) - 2:
            nodes.append(Node(f"{activation}{k}", activation, (prev,)))
            prev = f"{activation}{k}"
    return ComputationGraph((input_name,), nodes, params, output=prev)


def _graph_to_dict(graph, prefix):
    return {
        "inputs": list(graph.inputs),
        "output": graph.output,
        "nodes": [[n.name, n.op, list(n.inputs), list(n.params), list(n.attrs)]
                  for n in graph.nodes],
        "params": [prefix + p for p in graph.params],
    }


def _graph_from_dict(d, arrays, prefix):
    nodes = [Node(name, op, tuple(i), tuple(p), tuple(a)) for name, op, i, p, a in d["nodes"]]
    params = {p[len(prefix):]: arrays[p] for p in d["params"]}
    return ComputationGraph(d["inputs"], nodes, params, d["output"])


class MultiTaskModel:
    """Shared encoder, per-task decoders and per-task loss weights.

    Parameters
    ----------
    encoder : ComputationGraph
        Single-input graph mapping ``x`` to the shared representation.
    decoders : dict of str to ComputationGraph
        One single-input graph per task id, fed by the encoder output.
    tasks : sequence of TaskSpec
    weights : dict of str to float, optional
        Non-negative task weights; uniform ``1/M`` when omitted.

    Instances are treated as immutable: every "modifying" method returns a
    new model.
    """

    def __init__(self, encoder, decoders, tasks, weights=None, seed=None):
        tasks = list(tasks)
        if not tasks:
            raise ValueError("a multi-task model needs at least one task")
        ids = [t.id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate task ids in {ids}")
        if set(decoders) != set(ids):
            raise ValueError(f"decoder keys {sorted(decoders)} != task ids {sorted(ids)}")
        if weights is None:
            weights = {t: 1.0 / len(ids) for t in ids}
        weights = {t: float(weights[t]) for t in ids} if set(weights) == set(ids) else None
        if weights is None:
            raise ValueError("weight keys must equal the task ids")
        if any(w < 0 for w in weights.values()) or not any(w > 0 for w in weights.values()):
            raise ValueError("weights must be non-negative with at least one positive")
        if len(encoder.inputs) != 1:
            raise GraphError("encoder must have exactly one input")
        for t, dec in decoders.items():
            if len(dec.inputs) != 1:
                raise GraphError(f"decoder {t!r} must have exactly one input")
        self.encoder = encoder
        self.decoders = {t: decoders[t] for t in ids}
        self.tasks = tasks
        self.weights = weights
        self.seed = seed

    # ------------------------------------------------------------------
    @property
    def task_ids(self):
        return [t.id for t in self.tasks]

    def task(self, task_id):
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(f"unknown task {task_id!r}; model tasks are {self.task_ids}")

    @property
    def n_features(self):
        for node in self.encoder.nodes:
            if node.op == "affine":
                return self.encoder.params[node.params[0]].shape[1]
        return None

    @cached_property
    def params(self):
        """Flat parameter map with ``enc/`` and ``dec/<task>/`` prefixes."""
        out = {f"enc/{k}": v for k, v in self.encoder.params.items()}
        for t, dec in self.decoders.items():
            out.update({f"dec/{t}/{k}": v for k, v in dec.params.items()})
        return out

    def with_params(self, params):
        enc = {k[4:]: v for k, v in params.items() if k.startswith("enc/")}
        decs = {}
        for t, dec in self.decoders.items():
            pre = f"dec/{t}/"
            sub = {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}
            decs[t] = dec.with_params(sub) if sub else dec
        encoder = self.encoder.with_params(enc) if enc else self.encoder
        return MultiTaskModel(encoder, decs, self.tasks, self.weights, self.seed)

    def with_weights(self, weights):
        return MultiTaskModel(self.encoder, self.decoders, self.tasks, weights, self.seed)

    # ------------------------------------------------------------------
    @cached_property
    def _graph(self):
        nodes, params = [], {}
        enc_nodes, enc_params, h = self.encoder.renamed("enc/", {self.encoder.inputs[0]: "x"})
        nodes += enc_nodes
        params.update(enc_params)
        inputs = ["x"]
        losses = []
        for t in self.tasks:
            dec = self.decoders[t.id]
            dn, dp, pred = dec.renamed(f"dec/{t.id}/", {dec.inputs[0]: h})
            nodes += dn
            params.update(dp)
            nodes.append(Node(f"pred/{t.id}", "identity", (pred,)))
            nodes.append(Node(f"loss/{t.id}", _LOSS_OPS[t.loss_kind],
                              (f"pred/{t.id}", f"y/{t.id}")))
            inputs.append(f"y/{t.id}")
            losses.append(f"loss/{t.id}")
        coefs = [f"c/{t.id}" for t in self.tasks]
        inputs += coefs
        nodes.append(Node("joint", "weighted_sum", tuple(losses) + tuple(coefs)))
        nodes.append(Node("total", "sum", ("joint",)))
        return ComputationGraph(inputs, nodes, params, output="total")

    def _bind(self, X, Y, coefs):
        feed = {"x": X}
        for t in self.tasks:
            feed[f"y/{t.id}"] = _target_array(Y, t, X) if Y is not None else _dummy_target(t, X)
            feed[f"c/{t.id}"] = np.asarray(coefs.get(t.id, 0.0), dtype=np.float64)
        return feed

    def _forward_values(self, X, Y=None, coefs=None, params=None):
        X = np.asarray(X, dtype=np.float64)
        return self._graph.forward(self._bind(X, Y, coefs or {}), params=params)

    def predict(self, X, tasks=None):
        """Raw decoder outputs (logits for classification) per task."""
        values = self._forward_values(X)
        tasks = self.task_ids if tasks is None else tasks
        return {t: values[f"pred/{t}"] for t in tasks}

    def task_losses(self, X, Y, tasks=None):
        """Per-example loss arrays ``{task: L_i}``."""
        values = self._forward_values(X, Y)
        tasks = self.task_ids if tasks is None else list(tasks)
        for t in tasks:
            self.task(t)
        return {t: values[f"loss/{t}"] for t in tasks}

    def joint_losses(self, X, Y, attacked=None, weights=None):
        """Per-example ``sum_{i in attacked} w_i L_i``."""
        attacked = self._attacked(attacked)
        w = self.weights if weights is None else weights
        losses = self.task_losses(X, Y, attacked)
        total = 0.0
        for t in attacked:
            total = total + w[t] * losses[t]
        return total

    def loss_and_grad(self, X, Y, coefs):
        """Per-task losses and ``d/dx sum_i coefs_i * L_i`` in one pass.

        ``coefs`` maps task ids to scalars or per-example arrays; missing
        tasks get coefficient zero.  Row ``k`` of the returned gradient is the
        gradient for example ``k`` alone.
        """
        X = np.asarray(X, dtype=np.float64)
        for t in coefs:
            self.task(t)
        feed = self._bind(X, Y, coefs)
        values = self._graph.forward(feed)
        grads = self._graph.backward(values, {"total": np.asarray(1.0)})
        losses = {t: values[f"loss/{t}"] for t in self.task_ids}
        return losses, grads["x"]

    def input_gradients(self, X, Y, tasks=None):
        """Per-task input gradients ``r_i`` (unweighted)."""
        tasks = self.task_ids if tasks is None else list(tasks)
        return {t: self.loss_and_grad(X, Y, {t: 1.0})[1] for t in tasks}

    def task_errors(self, X, Y, task_id):
        """Per-example task error ``f_i`` according to the task's error kind."""
        t = self.task(task_id)
        pred = self.predict(X, [task_id])[task_id]
        y = _target_array(Y, t, np.asarray(X))
        return _errors(t.error_kind, pred, y)

    def _attacked(self, attacked):
        if attacked is None:
            return self.task_ids
        attacked = list(attacked)
        if not attacked:
            raise ValueError("attacked task set must be non-empty")
        for t in attacked:
            self.task(t)
        return attacked

    # ------------------------------------------------------------------
    def save(self, path):
        header = {
            "tasks": [asdict(t) for t in self.tasks],
            "weights": self.weights,
            "seed": self.seed,
            "encoder": _graph_to_dict(self.encoder, "enc/"),
            "decoders": {t: _graph_to_dict(d, f"dec/{t}/") for t, d in self.decoders.items()},
        }
        write_container(path, "model", header, self.params)

    @classmethod
    def load(cls, path):
        header, arrays = read_container(path, "model")
        tasks = [TaskSpec(**t) for t in header["tasks"]]
        encoder = _graph_from_dict(header["encoder"], arrays, "enc/")
        decoders = {t: _graph_from_dict(d, arrays, f"dec/{t}/")
                    for t, d in header["decoders"].items()}
        return cls(encoder, decoders, tasks, header["weights"], header["seed"])

    def __repr__(self):
        return f"MultiTaskModel(tasks={self.task_ids}, weights={self.weights})"


def _target_array(Y, task, X):
    if task.id not in Y:
        return _dummy_target(task, X)
    y = np.asarray(Y[task.id])
    if task.kind == "classification":
        return y.astype(np.int64)
    return y.astype(np.float64)


def _dummy_target(task, X):
    lead = np.shape(X)[:-1]
    if task.kind == "classification":
        return np.zeros(lead, dtype=np.int64)
    return np.zeros(lead + (task.target_dim,))


def _errors(kind, pred, y):
    if kind == "one_minus_accuracy":
        return (np.argmax(pred, axis=-1) != y).astype(np.float64)
    if kind == "mse":
        return ((pred - y) ** 2).mean(axis=-1)
    if kind == "l1":
        return np.abs(pred - y).mean(axis=-1)
    # hard masks at 0.5; an empty union counts as a perfect match
    pm, tm = pred > 0.5, y > 0.5
    inter = np.logical_and(pm, tm).sum(axis=-1)
    union = np.logical_or(pm, tm).sum(axis=-1)
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return 1.0 - iou


# ----------------------------------------------------------------------
# functional interface


def build_model(encoder_spec, tasks, weights=None, seed=0, activation="tanh",
                decoder_hidden=None):
    """Initialize a model deterministically from ``seed``.

    ``encoder_spec`` lists layer widths starting with the input dimension.
    Decoders have one hidden layer of ``decoder_hidden`` units (the encoder
    output width by default).
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("task list must be non-empty")
    if weights is not None:
        weights = list(weights)
        if len(weights) != len(tasks):
            raise ValueError(f"{len(weights)} weights for {len(tasks)} tasks")
        if any(w < 0 for w in weights):
            raise ValueError("task weights must be non-negative")
        weights = {t.id: float(w) for t, w in zip(tasks, weights)}
    encoder_spec = [int(s) for s in encoder_spec]
    if len(encoder_spec) < 2:
        raise ValueError("encoder_spec needs an input width and at least one layer")
    rng = np.random.default_rng(seed)
    encoder = mlp_graph(encoder_spec, activation, rng, final_activation=True)
    hidden = decoder_hidden or encoder_spec[-1]
    decoders = {}
    for t in tasks:
        decoders[t.id] = mlp_graph([encoder_spec[-1], hidden, t.target_dim], activation,
                                   rng, final_activation=False, input_name="h")
    return MultiTaskModel(encoder, decoders, tasks, weights, seed)


def task_loss(model, x, Y, task):
    """``L_i(x, y_i)``: a float for one example, per-example array for a batch."""
    model.task(task)
    out = model.task_losses(x, Y, [task])[task]
    return float(out) if np.ndim(out) == 0 else out


def joint_loss(model, x, Y, attacked=None, weights=None):
    """Weighted sum of the attacked tasks' losses (float for one example)."""
    out = model.joint_losses(x, Y, attacked, weights)
    return float(out) if np.ndim(out) == 0 else out


def train(model, X, Y, cfg=None):
    """Minibatch SGD on the weighted joint loss.

    Returns ``(trained_model, history)`` where ``history[e]`` is the mean
    joint loss over the whole dataset after ``e`` epochs (``history[0]`` is
    the untrained loss).  The input model is not modified.
    """
    cfg = cfg or TrainConfig()
    X = check_inputs(X, model.n_features)
    Y = check_targets(Y, model.tasks, X.shape[0])
    n = X.shape[0]
    graph = model._graph
    params = {k: np.array(v) for k, v in model.params.items()}
    full_coefs = {t: w / n for t, w in model.weights.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()} \
        if cfg.optimizer == "sgd_momentum" else None

    def epoch_loss(epoch):
        try:
            vals = graph.forward(model._bind(X, Y, full_coefs), params=params)
        except NonFiniteError as exc:
            raise TrainingDivergedError(epoch, str(exc)) from exc
        return float(vals["total"])

    history = [epoch_loss(0)]
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Yb = {t: y[idx] for t, y in Y.items()}
            coefs = {t: w / len(idx) for t, w in model.weights.items()}
            feed = model._bind(X[idx], Yb, coefs)
            try:
                values = graph.forward(feed, params=params)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, str(exc)) from exc
            grads = graph.backward(values, {"total": np.asarray(1.0)}, params=params)
            for k in params:
                g = grads[k]
                if velocity is not None:
                    velocity[k] = cfg.momentum * velocity[k] + g
                    g = velocity[k]
                params[k] = params[k] - cfg.learning_rate * g
        loss = epoch_loss(epoch)
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, "non-finite joint loss")
        history.append(loss)
    return model.with_params(params), history


def task_errors(model, X, Y, task):
    return model.task_errors(X, Y, task)


def clean_error(model, X, Y, task):
    """Mean task error over a dataset."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("clean_error needs a non-empty 2-D dataset")
    return float(model.task_errors(X, Y, task).mean())
