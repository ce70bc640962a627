"""Vulnerability measures, Taylor estimates and the gradient-moment bounds.

Dataset-level quantities take ``(model, X, Y)`` and evaluate every row in one
batch.  Bound checkers take lists of :class:`GradientSample` so they can be
fed either with model gradients (:func:`gradient_samples`) or with planted
synthetic gradients.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.base import clone

from .tensor import dual_norm, norm_order

__all__ = [
    "GradientSample",
    "BoundCheck",
    "RelativeVulnerability",
    "VulnerabilityReport",
    "ConvergenceError",
    "adversarial_vulnerability",
    "per_example_vulnerability",
    "first_order_estimate",
    "second_order_estimate",
    "hessian_vector_product",
    "marginal_vulnerability",
    "gradient_samples",
    "first_order_from_samples",
    "theorem7_bound",
    "lemma4_check",
    "theorem5_bound",
    "theorem3_factor",
    "relative_task_vulnerability",
    "attack_success_rate",
    "vulnerability_report",
]

REPORT_COLUMNS = ("tasks", "metric", "value", "attack_variant", "epsilon", "p", "steps", "seed")


class ConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        self.residual = residual
        super().__init__(
            f"power iteration did not converge in {iterations} iterations "
            f"(max relative change {residual:.3e})"
        )


@dataclass
class GradientSample:
    """Per-task input gradients ``r_i`` at one input, with task weights."""

    per_task: dict
    weights: dict

    def __post_init__(self):
        shapes = {np.shape(v) for v in self.per_task.values()}
        if len(shapes) > 1:
            raise ValueError(f"task gradients have mismatched shapes {shapes}")
        self.per_task = {t: np.asarray(v, dtype=np.float64) for t, v in self.per_task.items()}

    @property
    def tasks(self):
        return list(self.per_task)

    def joint(self, tasks=None, weights=None):
        tasks = self.tasks if tasks is None else tasks
        w = self.weights if weights is None else weights
        return sum(w[t] * self.per_task[t] for t in tasks)


class BoundCheck(NamedTuple):
    lhs: float
    rhs: float
    holds: bool


class RelativeVulnerability(NamedTuple):
    value: float
    n_excluded: int


def _attacked_weights(model, attacked, uniform):
    attacked = model._attacked(attacked)
    if uniform:
        return attacked, {t: 1.0 / len(attacked) for t in attacked}
    return attacked, {t: model.weights[t] for t in attacked}


def _run_attack(model, X, Y, attacked, attack, weights):
    atk = clone(attack).set_params(attacked=list(attacked), weights=weights)
    return atk.perturb(model, X, Y)


def per_example_vulnerability(model, X, Y, attacked, attack, uniform_weights=False):
    """``|L'(x + delta*) - L'(x)|`` for each row, plus the attack trace."""
    model = getattr(model, "model_", model)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a non-empty 2-D array")
    attacked, w = _attacked_weights(model, attacked, uniform_weights)
    trace = _run_attack(model, X, Y, attacked, attack, w)
    clean = model.joint_losses(X, Y, attacked, w)
    adv = model.joint_losses(X + trace.delta, Y, attacked, w)
    return np.abs(adv - clean), trace


def adversarial_vulnerability(model, X, Y, attacked, attack, uniform_weights=False):
    """Mean absolute joint-loss increase of ``attacked`` under ``attack``.

    The attack's output stands in for the worst-case perturbation.  With
    ``uniform_weights`` every attacked task gets weight ``1/|attacked|`` in
    both the attack objective and the measured loss; otherwise the model's
    task weights are used.
    """
    inc, _ = per_example_vulnerability(model, X, Y, attacked, attack, uniform_weights)
    return float(inc.mean())


def marginal_vulnerability(model, X, Y, base, added, attack, uniform_weights=False):
    """Vulnerability over ``base + [added]`` minus vulnerability over ``base``."""
    base = list(base)
    if added in base:
        raise ValueError(f"task {added!r} is already in the base set")
    v_next = adversarial_vulnerability(model, X, Y, base + [added], attack, uniform_weights)
    v_base = adversarial_vulnerability(model, X, Y, base, attack, uniform_weights)
    return v_next - v_base


def _joint_grads(model, X, Y, attacked, weights):
    return model.loss_and_grad(X, Y, {t: weights[t] for t in attacked})[1]


def first_order_estimate(model, X, Y, attacked, epsilon, p, uniform_weights=False):
    """``epsilon * mean_x ||d/dx L'(x)||_q`` with ``q`` dual to ``p``."""
    model = getattr(model, "model_", model)
    attacked, w = _attacked_weights(model, attacked, uniform_weights)
    g = _joint_grads(model, np.asarray(X, dtype=np.float64), Y, attacked, w)
    return float(epsilon * dual_norm(g, p, axis=-1).mean())


def hessian_vector_product(model, X, Y, attacked, weights, V, h=1e-4):
    """Central difference of the joint input gradient along ``V`` (row-wise)."""
    gp = _joint_grads(model, X + h * V, Y, attacked, weights)
    gm = _joint_grads(model, X - h * V, Y, attacked, weights)
    return (gp - gm) / (2.0 * h)


def hessian_spectral_norms(model, X, Y, attacked=None, weights=None, h=1e-4, max_iter=30,
                           tol=1e-6, seed=0):
    """Largest |eigenvalue| of each row's input Hessian by power iteration.

    The estimate is ``||H v||`` for the current unit iterate ``v``; a row has
    converged when it changes by less than ``tol`` relative to
    ``max(1, estimate)``.
    """
    model = getattr(model, "model_", model)
    X = np.asarray(X, dtype=np.float64)
    attacked = model._attacked(attacked)
    weights = model.weights if weights is None else weights
    rng = np.random.default_rng(seed)
    V = rng.normal(size=X.shape)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    est = np.zeros(X.shape[0])
    change = np.full(X.shape[0], np.inf)
    for _ in range(max_iter):
        HV = hessian_vector_product(model, X, Y, attacked, weights, V, h)
        new = np.linalg.norm(HV, axis=1)
        change = np.abs(new - est) / np.maximum(1.0, new)
        est = new
        nz = new > 0
        V[nz] = HV[nz] / new[nz, None]
        if np.all(change <= tol):
            return est
    raise ConvergenceError(float(change.max()), max_iter)


def second_order_estimate(model, X, Y, attacked, epsilon, p=2, uniform_weights=False,
                          h=1e-4, max_iter=30, tol=1e-6, seed=0):
    """``(epsilon^2 / 2) * mean_x ||d^2/dx^2 L'(x)||_2`` (spectral norm)."""
    if norm_order(p) != 2:
        raise ValueError("the second-order term is defined for the l2 attack norm only")
    model = getattr(model, "model_", model)
    attacked, w = _attacked_weights(model, attacked, uniform_weights)
    norms = hessian_spectral_norms(model, X, Y, attacked, w, h, max_iter, tol, seed)
    return float(0.5 * epsilon ** 2 * norms.mean())


# ----------------------------------------------------------------------
# bound checkers over gradient samples


def gradient_samples(model, X, Y, tasks=None, weights=None):
    """One :class:`GradientSample` per row of ``X``."""
    model = getattr(model, "model_", model)
    tasks = model.task_ids if tasks is None else list(tasks)
    weights = {t: model.weights[t] for t in tasks} if weights is None else weights
    grads = model.input_gradients(np.asarray(X, dtype=np.float64), Y, tasks)
    return [GradientSample({t: grads[t][k] for t in tasks}, weights)
            for k in range(np.shape(X)[0])]


def _mean_norm(samples, task, q, power=1):
    return float(np.mean([dual_norm(s.per_task[task], q) ** power for s in samples]))


def first_order_from_samples(samples, tasks, weights, epsilon, p=2):
    """First-order vulnerability ``epsilon * E||sum_i w_i r_i||_q`` over ``tasks``."""
    return float(epsilon * np.mean([dual_norm(s.joint(tasks, weights), p) for s in samples]))


def theorem7_bound(samples, weights, epsilon, N, new_task, p=2):
    """Plug-in upper bound on the first-order marginal vulnerability.

    ``epsilon * ((N+1) w_new E||r_new|| + N max_i w_i E||r_i||)`` where ``i``
    runs over the tasks already attacked.  Norms are the dual of ``p``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if not samples:
        raise ValueError("need at least one gradient sample")
    base = [t for t in samples[0].tasks if t != new_task]
    if not base:
        raise ValueError("samples must contain at least one task besides the new one")
    new_term = (N + 1) * weights[new_task] * _mean_norm(samples, new_task, p)
    base_term = N * max(weights[t] * _mean_norm(samples, t, p) for t in base)
    return float(epsilon * (new_term + base_term))


def lemma4_check(samples, p_exp, q_norm, weights=None):
    """Compare ``E||sum w_i r_i||_q^p`` with ``M^p sum w_i^p E||r_i||_q^p``.

    ``q_norm`` is the norm itself (1, 2 or inf), not an attack norm.
    """
    if p_exp < 1:
        raise ValueError("p_exp must be >= 1")
    q = norm_order(q_norm)
    attack_p = {1: np.inf, 2: 2, np.inf: 1}[q]  # dual_norm takes the attack norm
    tasks = samples[0].tasks
    w = samples[0].weights if weights is None else weights
    M = len(tasks)
    lhs = float(np.mean([dual_norm(s.joint(tasks, w), attack_p) ** p_exp for s in samples]))
    rhs = float(M ** p_exp * sum(
        w[t] ** p_exp * _mean_norm(samples, t, attack_p, p_exp) for t in tasks))
    return BoundCheck(lhs, rhs, lhs <= rhs * (1 + 1e-9))


def theorem5_bound(samples, weights=None):
    """Mean joint-gradient norm against the covariance-based bound.

    Convention: ``sigma_i^2 = E||r_i||^2`` and ``Cov(r_i, r_j) = E<r_i, r_j>``
    summed over ordered pairs ``i != j``.  A negative radicand yields
    ``rhs = nan`` and ``holds = False`` instead of raising.
    """
    tasks = samples[0].tasks
    w = samples[0].weights if weights is None else weights
    M = len(tasks)
    if M < 2:
        raise ValueError("the bound needs at least two tasks")
    lhs = float(np.mean([np.linalg.norm(s.joint(tasks, w).ravel()) for s in samples]))
    R = np.stack([np.stack([s.per_task[t].ravel() for t in tasks]) for s in samples])
    moments = np.einsum("kid,kjd->ij", R, R) / len(samples)
    sigma2 = np.diag(moments)
    cross = moments.sum() - sigma2.sum()
    radicand = (M - 1) / M * sigma2.sum() - cross / M
    if radicand < 0:
        return BoundCheck(lhs, math.nan, False)
    rhs = math.sqrt(radicand)
    return BoundCheck(lhs, rhs, lhs <= rhs * (1 + 1e-9) + 1e-15)


def _covariance(a, b):
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    return float((a * b).sum(axis=1).mean())


def theorem3_factor(samples):
    """``sqrt((1 + 2/M sum_{j<i} Cov(r_i, r_j) / Cov(r_i, r_i)) / M)``.

    Covariances are sample covariances over the inputs, summed over
    coordinates.  The unknown scale constant is left out.
    """
    tasks = samples[0].tasks
    M = len(tasks)
    R = {t: np.stack([s.per_task[t].ravel() for s in samples]) for t in tasks}
    self_cov = {t: _covariance(R[t], R[t]) for t in tasks}
    for t, c in self_cov.items():
        if c <= 0:
            raise ValueError(f"task {t!r} has zero gradient self-covariance")
    acc = 0.0
    for i, ti in enumerate(tasks):
        for tj in tasks[:i]:
            acc += _covariance(R[ti], R[tj]) / self_cov[ti]
    inner = (1.0 + 2.0 / M * acc) / M
    return math.sqrt(inner) if inner >= 0 else math.nan


# ----------------------------------------------------------------------
# task-level error metrics


def relative_task_vulnerability(clean_errors, adv_errors, floor=1e-8):
    """Mean relative error increase; rows with clean error below ``floor`` are dropped."""
    clean = np.asarray(clean_errors, dtype=np.float64)
    adv = np.asarray(adv_errors, dtype=np.float64)
    if clean.shape != adv.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {adv.shape}")
    keep = clean > floor
    if not np.any(keep):
        raise ValueError("every clean error is below the floor; relative vulnerability undefined")
    value = float(((adv[keep] - clean[keep]) / clean[keep]).mean())
    return RelativeVulnerability(value, int((~keep).sum()))


def attack_success_rate(clean_correct, adv_correct):
    """Fraction of clean-correct inputs that the attack flips to incorrect."""
    clean = np.asarray(clean_correct, dtype=bool)
    adv = np.asarray(adv_correct, dtype=bool)
    if clean.shape != adv.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {adv.shape}")
    if not clean.any():
        raise ValueError("no input is classified correctly before the attack")
    return float((clean & ~adv).sum() / clean.sum())


# ----------------------------------------------------------------------


@dataclass
class VulnerabilityReport:
    attacked: list
    vulnerability: float
    first_order: float
    second_order: float | None = None
    per_task_relative: dict = field(default_factory=dict)
    bound_values: dict = field(default_factory=dict)
    attack_params: dict = field(default_factory=dict)
    trace: object = field(default=None, repr=False, compare=False)

    def rows(self):
        a = self.attack_params
        key = ["+".join(self.attacked)]
        tail = [a.get("variant", ""), a.get("epsilon", ""), a.get("p", ""), a.get("steps", ""),
                a.get("seed", "")]
        metrics = [("vulnerability", self.vulnerability), ("first_order", self.first_order)]
        if self.second_order is not None:
            metrics.append(("second_order", self.second_order))
        metrics += [(f"relative_vulnerability/{t}", v)
                    for t, v in sorted(self.per_task_relative.items())]
        metrics += sorted(self.bound_values.items())
        return [key + [m, repr(float(v))] + tail for m, v in metrics]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            w.writerows(self.rows())


def vulnerability_report(model, X, Y, attacked, attack, second_order=False):
    """Collect every measure for one attacked task set and one attack."""
    model = getattr(model, "model_", model)
    X = np.asarray(X, dtype=np.float64)
    attacked = model._attacked(attacked)
    w = {t: model.weights[t] for t in attacked}
    inc, trace = per_example_vulnerability(model, X, Y, attacked, attack)
    p = norm_order(attack.norm)
    eps = attack.epsilon
    report = VulnerabilityReport(
        attacked=list(attacked),
        vulnerability=float(inc.mean()),
        first_order=first_order_estimate(model, X, Y, attacked, eps, p),
        attack_params={"variant": attack.variant, "epsilon": eps,
                       "p": "inf" if p == np.inf else p,
                       "steps": getattr(attack, "steps", 1),
                       "seed": getattr(attack, "seed", 0)},
        trace=trace,
    )
    if second_order and p == 2:
        report.second_order = second_order_estimate(model, X, Y, attacked, eps, p)
    X_adv = X + trace.delta
    for t in attacked:
        try:
            rel = relative_task_vulnerability(model.task_errors(X, Y, t),
                                              model.task_errors(X_adv, Y, t))
        except ValueError:
            continue
        report.per_task_relative[t] = rel.value
    samples = gradient_samples(model, X, Y, attacked, w)
    l4 = lemma4_check(samples, 1, {np.inf: 1, 2: 2, 1: np.inf}[p])
    report.bound_values.update(lemma4_lhs=l4.lhs, lemma4_rhs=l4.rhs)
    if len(attacked) >= 2:
        t5 = theorem5_bound(samples)
        report.bound_values.update(thm5_lhs=t5.lhs, thm5_rhs=t5.rhs)
        report.bound_values["thm7_bound"] = theorem7_bound(
            samples, w, eps, len(attacked) - 1, attacked[-1], p)
    try:
        report.bound_values["thm3_factor"] = theorem3_factor(samples)
    except ValueError:
        pass
    return report
