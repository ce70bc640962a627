"""Shared builders and independent oracles for the test-suite."""
import numpy as np

from mtadvlab import ComputationGraph, Node, SynthSpec, SynthTask, generate_dataset
from mtadvlab.model import TrainConfig, build_model, train

KINK = 1e-4


def random_graph(rng):
    """Random feed-forward graph with a scalar loss output.

    Returns ``(graph, inputs)``.  Inputs are redrawn until no ReLU
    pre-activation or L1 residual sits within ``KINK`` of zero, so central
    differences are valid everywhere.
    """
    d = int(rng.integers(1, 9))
    n_layers = int(rng.integers(1, 4))
    widths = [d] + [int(rng.integers(1, 33)) for _ in range(n_layers)]
    out_dim = int(rng.integers(2, 5))
    params, nodes, prev = {}, [], "x"
    kink_nodes = []
    for i in range(n_layers):
        W = rng.normal(0, 1 / np.sqrt(widths[i]), size=(widths[i + 1], widths[i]))
        params[f"W{i}"], params[f"b{i}"] = W, rng.normal(0, 0.1, size=widths[i + 1])
        nodes.append(Node(f"a{i}", "affine", (prev,), (f"W{i}", f"b{i}")))
        act = rng.choice(["tanh", "sigmoid", "relu"])
        if act == "relu":
            kink_nodes.append(f"a{i}")
        nodes.append(Node(f"h{i}", str(act), (f"a{i}",)))
        prev = f"h{i}"
    W = rng.normal(0, 1 / np.sqrt(widths[-1]), size=(out_dim, widths[-1]))
    params["Wo"], params["bo"] = W, np.zeros(out_dim)
    nodes.append(Node("out", "affine", (prev,), ("Wo", "bo")))
    loss = str(rng.choice(["mse", "l1", "softmax_ce"]))
    B = int(rng.integers(1, 5))
    nodes.append(Node("per_example", loss, ("out", "y")))
    if loss == "l1":
        kink_nodes.append("residual")
    red = str(rng.choice(["sum", "mean"]))
    nodes.append(Node("loss", red, ("per_example",)))
    graph = ComputationGraph(["x", "y"], nodes, params)
    for _ in range(100):
        x = rng.uniform(-1.5, 1.5, size=(B, d))
        y = rng.integers(0, out_dim, size=B) if loss == "softmax_ce" \
            else rng.normal(size=(B, out_dim))
        vals = graph.forward({"x": x, "y": y})
        near = False
        for k in kink_nodes:
            v = vals["out"] - y if k == "residual" else vals[k]
            near |= bool(np.any(np.abs(v) < KINK))
        if not near:
            return graph, {"x": x, "y": y}
    raise RuntimeError("could not draw a kink-free input")


def grads_agree(analytic, numeric, rel=1e-6, floor=1e-9):
    """Elementwise agreement: relative ``rel`` or absolute ``floor``."""
    err = np.abs(analytic - numeric)
    return bool(np.all((err <= rel * np.abs(numeric)) | (err <= floor)))


def small_spec(seed=0, n=64, tasks=None, noise=0.05):
    tasks = tasks or (SynthTask("a", target_dim=2, sharpness=1.0),
                      SynthTask("b", target_dim=2, sharpness=4.0),
                      SynthTask("c", kind="classification", target_dim=3))
    return SynthSpec(latent_dim=3, input_dim=6, n_examples=n, tasks=tasks,
                     noise_std=noise, seed=seed)


def trained_model(seed=0, epochs=30, n=64, tasks=None, weights=None, hidden=(8,), lr=0.1):
    ds = generate_dataset(small_spec(seed, n, tasks))
    model = build_model([ds.X.shape[1], *hidden], ds.spec.task_specs(), weights, seed=seed)
    model, _ = train(model, ds.X, ds.Y, TrainConfig(epochs=epochs, learning_rate=lr, seed=seed))
    return model, ds


def kendall_brute(x, y):
    """Tau-b by explicit pair enumeration."""
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            a = np.sign(x[i] - x[j])
            b = np.sign(y[i] - y[j])
            if a == 0 and b == 0:
                continue
            if a == 0:
                tx += 1
            elif b == 0:
                ty += 1
            elif a == b:
                conc += 1
            else:
                disc += 1
    return (conc - disc) / np.sqrt((conc + disc + tx) * (conc + disc + ty))


def wilcoxon_brute(d, alternative):
    """Exact signed-rank p-value by enumerating all 2^n sign patterns."""
    from itertools import product

    from scipy.stats import rankdata
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    ws = np.array([sum(ri for ri, s in zip(r, signs) if s)
                   for signs in product((0, 1), repeat=len(d))])
    upper = np.mean(ws >= w - 1e-9)
    lower = np.mean(ws <= w + 1e-9)
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2 * min(upper, lower))


class ToyModel:
    """Duck-typed model with analytic per-task losses, for attack tests.

    ``tasks`` maps a task id to ``(loss, grad)`` callables acting on one row.
    """

    def __init__(self, tasks, weights=None):
        self.tasks = dict(tasks)
        self.task_ids = list(self.tasks)
        self.weights = weights or {t: 1.0 for t in self.tasks}

    def _attacked(self, attacked):
        if attacked is None:
            return list(self.task_ids)
        attacked = list(attacked)
        if not attacked:
            raise ValueError("empty attacked set")
        return attacked

    def task_losses(self, X, Y, attacked=None):
        ids = self._attacked(attacked)
        return {t: np.array([self.tasks[t][0](x) for x in X], dtype=float) for t in ids}

    def joint_losses(self, X, Y, attacked=None, weights=None):
        w = self.weights if weights is None else weights
        losses = self.task_losses(X, Y, attacked)
        return sum(w[t] * v for t, v in losses.items())

    def input_gradients(self, X, Y, tasks=None):
        return {t: np.array([self.tasks[t][1](x) for x in X]) for t in self._attacked(tasks)}

    def loss_and_grad(self, X, Y, coefs):
        losses = self.task_losses(X, Y, list(coefs))
        g = np.zeros_like(X, dtype=float)
        for t, c in coefs.items():
            g += np.asarray(c, dtype=float).reshape(-1, 1) * \
                np.array([self.tasks[t][1](x) for x in X])
        return losses, g


def linear_task(c, offset=0.0):
    c = np.asarray(c, dtype=float)
    return (lambda x: offset + float(c @ x), lambda x: c.copy())


def quadratic_task(lam=2.0):
    return (lambda x: 0.5 * lam * float(x @ x), lambda x: lam * x)
