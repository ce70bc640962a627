"""Small reverse-mode differentiation engine over numpy arrays.

A :class:`ComputationGraph` is a Wengert list: an ordered tuple of
:class:`Node` records, each applying one primitive to named values that
were defined earlier (graph inputs, parameters or previous nodes).  Values
are float64 numpy arrays; a leading batch axis is carried through every
primitive so a whole dataset can be evaluated in one pass.

Only first derivatives are supported.  Curvature is obtained by finite
differences of :func:`grad_input` (see :mod:`mtadvlab.metrics`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "Node",
    "ComputationGraph",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "forward_eval",
    "grad_input",
    "finite_diff_grad",
    "dual_norm",
    "norm_order",
]


class GraphError(ValueError):
    """Malformed graph or invalid evaluation request."""


class ShapeError(GraphError):
    """Operand shapes do not satisfy a node's contract."""


class NonFiniteError(FloatingPointError):
    """A node produced NaN or Inf."""

    def __init__(self, node, message=None):
        self.node = node
        super().__init__(message or f"non-finite value produced by node {node!r}")


@dataclass(frozen=True)
class Node:
    """One primitive application.

    ``inputs`` name earlier values, ``params`` name entries of the graph's
    parameter collection and ``attrs`` carries constant scalars (weights of
    a ``weighted_sum``, for instance).
    """

    name: str
    op: str
    inputs: tuple = ()
    params: tuple = ()
    attrs: tuple = ()


# ---------------------------------------------------------------------------
# primitives: forward(node, args, params) and vjp(node, g, out, args, params).
# vjp returns (input grads, param grads); ``None`` marks a non-differentiable
# operand (integer labels).


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_pair(node, a, b):
    if a.shape != b.shape:
        raise ShapeError(
            f"node {node.name!r} ({node.op}): prediction shape {a.shape} "
            f"!= target shape {b.shape}"
        )


def _fwd_identity(node, args, params):
    return args[0]


def _vjp_identity(node, g, out, args, params):
    return [g], []


def _fwd_const(node, args, params):
    return params[0]


def _vjp_const(node, g, out, args, params):
    return [], [np.zeros_like(params[0])]


def _fwd_square(node, args, params):
    return args[0] * args[0]


def _vjp_square(node, g, out, args, params):
    return [2.0 * args[0] * g], []


def _fwd_affine(node, args, params):
    x = args[0]
    W, b = params
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"node {node.name!r} (affine): input width {x.shape[-1]} does not "
            f"match weight matrix {W.shape}"
        )
    return x @ W.T + b


def _vjp_affine(node, g, out, args, params):
    x = args[0]
    W, _ = params
    gx = g @ W
    if x.ndim == 1:
        gW = np.outer(g, x)
        gb = g
    else:
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ x.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0)
    return [gx], [gW, gb]


def _fwd_relu(node, args, params):
    return np.maximum(args[0], 0.0)


def _vjp_relu(node, g, out, args, params):
    return [g * (args[0] > 0.0)], []


def _fwd_tanh(node, args, params):
    return np.tanh(args[0])


def _vjp_tanh(node, g, out, args, params):
    return [g * (1.0 - out * out)], []


def _fwd_sigmoid(node, args, params):
    x = args[0]
    # split to avoid overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _vjp_sigmoid(node, g, out, args, params):
    return [g * out * (1.0 - out)], []


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _fwd_softmax_ce(node, args, params):
    logits, labels = args
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(
            f"node {node.name!r} (softmax_ce): labels shape {labels.shape} "
            f"incompatible with logits {logits.shape}"
        )
    idx = labels.astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= logits.shape[-1]):
        raise ShapeError(f"node {node.name!r} (softmax_ce): label out of range")
    logp = _log_softmax(logits)
    return -np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]


def _vjp_softmax_ce(node, g, out, args, params):
    logits, labels = args
    probs = np.exp(_log_softmax(logits))
    idx = np.asarray(labels).astype(np.int64)
    np.put_along_axis(
        probs, idx[..., None],
        np.take_along_axis(probs, idx[..., None], axis=-1) - 1.0, axis=-1,
    )
    return [np.asarray(g)[..., None] * probs, None], []


def _fwd_l1(node, args, params):
    pred, target = args
    _check_pair(node, pred, target)
    return np.abs(pred - target).mean(axis=-1)


def _vjp_l1(node, g, out, args, params):
    pred, target = args
    # np.sign(0) == 0: the subgradient at a perfect fit is zero
    d = np.sign(pred - target) / pred.shape[-1] * np.asarray(g)[..., None]
    return [d, -d], []


def _fwd_mse(node, args, params):
    pred, target = args
    _check_pair(node, pred, target)
    r = pred - target
    return (r * r).mean(axis=-1)


def _vjp_mse(node, g, out, args, params):
    pred, target = args
    d = 2.0 * (pred - target) / pred.shape[-1] * np.asarray(g)[..., None]
    return [d, -d], []


def _fwd_weighted_sum(node, args, params):
    if node.attrs:
        terms = zip(args, node.attrs)
    else:
        half = len(args) // 2
        terms = zip(args[:half], args[half:])
    total = None
    for value, coef in terms:
        term = coef * value
        total = term if total is None else total + term
    return total


def _vjp_weighted_sum(node, g, out, args, params):
    if node.attrs:
        return [w * g for w in node.attrs], []
    half = len(args) // 2
    values, coefs = args[:half], args[half:]
    gv = [_unbroadcast(c * g, np.shape(v)) for v, c in zip(values, coefs)]
    gc = [_unbroadcast(v * g, np.shape(c)) for v, c in zip(values, coefs)]
    return gv + gc, []


def _fwd_sum(node, args, params):
    scale = node.attrs[0] if node.attrs else 1.0
    return np.asarray(args[0].sum() * scale)


def _vjp_sum(node, g, out, args, params):
    scale = node.attrs[0] if node.attrs else 1.0
    return [np.full(args[0].shape, float(g) * scale)], []


def _fwd_mean(node, args, params):
    return np.asarray(args[0].mean())


def _vjp_mean(node, g, out, args, params):
    x = args[0]
    return [np.full(x.shape, float(g) / x.size)], []


# name -> (input arity (None = variadic), param count, forward, vjp)
OPS: dict[str, tuple] = {
    "identity": (1, 0, _fwd_identity, _vjp_identity),
    "const": (0, 1, _fwd_const, _vjp_const),
    "square": (1, 0, _fwd_square, _vjp_square),
    "affine": (1, 2, _fwd_affine, _vjp_affine),
    "relu": (1, 0, _fwd_relu, _vjp_relu),
    "tanh": (1, 0, _fwd_tanh, _vjp_tanh),
    "sigmoid": (1, 0, _fwd_sigmoid, _vjp_sigmoid),
    "softmax_ce": (2, 0, _fwd_softmax_ce, _vjp_softmax_ce),
    "l1": (2, 0, _fwd_l1, _vjp_l1),
    "mse": (2, 0, _fwd_mse, _vjp_mse),
    "weighted_sum": (None, 0, _fwd_weighted_sum, _vjp_weighted_sum),
    "sum": (1, 0, _fwd_sum, _vjp_sum),
    "mean": (1, 0, _fwd_mean, _vjp_mean),
}

ACTIVATIONS = ("relu", "tanh", "sigmoid")


class ComputationGraph:
    """Immutable, acyclic sequence of primitive nodes.

    Parameters
    ----------
    inputs : sequence of str
        Names bound at evaluation time.
    nodes : sequence of Node
        Topologically ordered; a node may only read names defined before it.
    params : mapping of str to array-like, optional
        Named parameter tensors (copied to float64).
    output : str, optional
        Default output name; the last node when omitted.
    """

    def __init__(self, inputs, nodes, params=None, output=None):
        self.inputs = tuple(inputs)
        self.nodes = tuple(nodes)
        self.params = {
            k: np.array(v, dtype=np.float64) for k, v in (params or {}).items()
        }
        for v in self.params.values():
            v.setflags(write=False)
        if output is None:
            if not self.nodes:
                if len(self.inputs) != 1:
                    raise GraphError("empty graph needs exactly one input")
                output = self.inputs[0]
            else:
                output = self.nodes[-1].name
        self.output = output
        self._validate()

    def _validate(self):
        defined = set(self.inputs)
        if len(defined) != len(self.inputs):
            raise GraphError("duplicate graph input names")
        for node in self.nodes:
            if node.op not in OPS:
                raise GraphError(f"node {node.name!r}: unknown op {node.op!r}")
            arity, n_params, _, _ = OPS[node.op]
            if arity is not None and len(node.inputs) != arity:
                raise GraphError(
                    f"node {node.name!r} ({node.op}) expects {arity} inputs, "
                    f"got {len(node.inputs)}"
                )
            if node.op == "weighted_sum":
                if not node.inputs:
                    raise GraphError(f"node {node.name!r}: weighted_sum needs inputs")
                if node.attrs and len(node.attrs) != len(node.inputs):
                    raise GraphError(
                        f"node {node.name!r}: {len(node.attrs)} weights for "
                        f"{len(node.inputs)} inputs"
                    )
                if not node.attrs and len(node.inputs) % 2:
                    raise GraphError(
                        f"node {node.name!r}: coefficient-input weighted_sum "
                        "needs (values..., coefficients...) pairs"
                    )
            if len(node.params) != n_params:
                raise GraphError(
                    f"node {node.name!r} ({node.op}) expects {n_params} params"
                )
            for name in node.inputs:
                if name not in defined:
                    raise GraphError(
                        f"node {node.name!r} reads undefined value {name!r}"
                    )
            for name in node.params:
                if name not in self.params:
                    raise GraphError(
                        f"node {node.name!r} references missing param {name!r}"
                    )
            if node.op == "affine":
                W, b = (self.params[p] for p in node.params)
                if W.ndim != 2 or b.shape != (W.shape[0],):
                    raise ShapeError(
                        f"node {node.name!r} (affine): weight {W.shape} and "
                        f"bias {b.shape} are inconsistent"
                    )
            if node.name in defined or node.name in self.params:
                raise GraphError(f"duplicate value name {node.name!r}")
            defined.add(node.name)
        if self.output not in defined:
            raise GraphError(f"output {self.output!r} is not defined")

    # ------------------------------------------------------------------
    def with_params(self, params):
        """Copy of the graph with some or all parameters replaced."""
        merged = dict(self.params)
        for k, v in params.items():
            if k not in merged:
                raise GraphError(f"unknown parameter {k!r}")
            v = np.asarray(v, dtype=np.float64)
            if v.shape != merged[k].shape:
                raise ShapeError(
                    f"parameter {k!r}: shape {v.shape} != {merged[k].shape}"
                )
            merged[k] = v
        return ComputationGraph(self.inputs, self.nodes, merged, self.output)

    def renamed(self, prefix, input_map=None):
        """Nodes and params with every internal name prefixed.

        ``input_map`` rebinds graph inputs to external names, which is how
        an encoder output is wired into a decoder.
        """
        input_map = dict(input_map or {})
        names = {name: input_map.get(name, prefix + name) for name in self.inputs}
        for node in self.nodes:
            names[node.name] = prefix + node.name
        pnames = {p: prefix + p for p in self.params}
        nodes = [
            Node(
                names[n.name], n.op,
                tuple(names[i] for i in n.inputs),
                tuple(pnames[p] for p in n.params),
                n.attrs,
            )
            for n in self.nodes
        ]
        params = {pnames[k]: v for k, v in self.params.items()}
        return nodes, params, names[self.output]

    # ------------------------------------------------------------------
    def forward(self, inputs, params=None):
        """Evaluate every node; returns the full value table.

        ``params`` temporarily overrides the stored parameters (same names and
        shapes), which lets a trainer evaluate candidate weights without
        rebuilding the graph.
        """
        pvals = self.params if params is None else params
        missing = [n for n in self.inputs if n not in inputs]
        if missing:
            raise GraphError(f"unbound graph inputs: {missing}")
        values = {}
        for name in self.inputs:
            v = inputs[name]
            values[name] = v if isinstance(v, np.ndarray) else np.asarray(v, dtype=np.float64)
        for node in self.nodes:
            fwd = OPS[node.op][2]
            args = [values[i] for i in node.inputs]
            out = fwd(node, args, [pvals[p] for p in node.params])
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(node.name)
            values[node.name] = out
        return values

    def backward(self, values, seeds, params=None):
        """Reverse sweep from ``seeds`` (name -> upstream gradient).

        Returns gradients for graph inputs and parameters.  Values that do
        not influence any seeded output receive zeros.
        """
        pvals = self.params if params is None else params
        grads = {k: np.asarray(v, dtype=np.float64) for k, v in seeds.items()}
        pgrads = {}
        for node in reversed(self.nodes):
            g = grads.get(node.name)
            if g is None:
                continue
            vjp = OPS[node.op][3]
            args = [values[i] for i in node.inputs]
            gin, gpar = vjp(
                node, g, values[node.name], args, [pvals[p] for p in node.params]
            )
            for name, gi in zip(node.inputs, gin):
                if gi is None:
                    continue
                if name in grads:
                    grads[name] = grads[name] + gi
                else:
                    grads[name] = gi
            for name, gp in zip(node.params, gpar):
                pgrads[name] = pgrads[name] + gp if name in pgrads else gp
        out = {}
        for name in self.inputs:
            g = grads.get(name)
            out[name] = np.zeros(np.shape(values[name])) if g is None else g
        for name, p in self.params.items():
            out[name] = pgrads.get(name, np.zeros_like(p))
        return out

    def __repr__(self):
        return (
            f"ComputationGraph(inputs={self.inputs}, nodes={len(self.nodes)}, "
            f"params={len(self.params)}, output={self.output!r})"
        )


def forward_eval(graph, inputs, outputs=None):
    """Evaluate ``graph`` and return the requested named outputs.

    With ``outputs=None`` only the graph's default output is returned, keyed
    by its name.  Evaluation is pure: neither graph nor inputs are modified.
    """
    values = graph.forward(inputs)
    names = [graph.output] if outputs is None else list(outputs)
    for name in names:
        if name not in values:
            raise GraphError(f"unknown output {name!r}")
    return {name: values[name] for name in names}


def grad_input(graph, inputs, output=None, wrt=None):
    """Gradient of a scalar graph value with respect to one input.

    Parameters
    ----------
    graph : ComputationGraph
    inputs : mapping of str to array
    output : str, optional
        Name of a scalar value; defaults to the graph output.
    wrt : str, optional
        Input to differentiate against; defaults to the first input.

    Returns
    -------
    ndarray with the shape of ``inputs[wrt]``.  An input that does not reach
    ``output`` gets an all-zero gradient rather than an error.
    """
    output = graph.output if output is None else output
    wrt = graph.inputs[0] if wrt is None else wrt
    if wrt not in graph.inputs:
        raise GraphError(f"{wrt!r} is not a graph input")
    values = graph.forward(inputs)
    if output not in values:
        raise GraphError(f"unknown output {output!r}")
    if np.ndim(values[output]) != 0:
        raise GraphError(
            f"output {output!r} is not scalar (shape {np.shape(values[output])})"
        )
    return graph.backward(values, {output: np.asarray(1.0)})[wrt]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h=1e-5):
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def norm_order(p):
    """Normalize an attack-norm spelling (``"linf"``, ``"l2"``, 2, inf...)."""
    if isinstance(p, str):
        key = p.strip().lower()
        table = {"linf": np.inf, "inf": np.inf, "l_inf": np.inf, "infinity": np.inf,
                 "l2": 2, "2": 2, "l1": 1, "1": 1}
        if key not in table:
            raise ValueError(f"unsupported norm {p!r}")
        return table[key]
    if p == np.inf:
        return np.inf
    if p in (1, 2):
        return int(p)
    raise ValueError(f"unsupported norm {p!r}; expected 1, 2 or inf")


def dual_norm(v, p, axis=None):
    """``||v||_q`` where ``q`` is the conjugate exponent of the attack norm ``p``.

    ``axis`` selects per-row norms for batched gradients.
    """
    p = norm_order(p)
    v = np.asarray(v, dtype=np.float64)
    if p == np.inf:
        return np.abs(v).sum(axis=axis)
    if p == 2:
        return np.sqrt((v * v).sum(axis=axis))
    return np.abs(v).max(axis=axis)
