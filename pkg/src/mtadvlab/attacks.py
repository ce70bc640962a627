"""Gradient-based evasion attacks on multi-task models.

All attacks share the scikit-learn parameter protocol (``get_params`` /
``set_params`` / ``clone``) and expose ``perturb(model, X, Y)``, which returns
an :class:`AttackTrace`.  Rows of ``X`` are attacked independently: each row
has its own epsilon-ball, its own random start (seeded with
``seed ^ row_index``) and, for the adaptive attacks, its own step size and
task rates.  Attacking a batch therefore gives the same result as attacking
its rows one at a time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_inputs
from .tensor import norm_order

__all__ = [
    "AttackTrace",
    "StepRecord",
    "FGSM",
    "PGD",
    "WGD",
    "APGD",
    "ATTACKS",
    "make_attack",
    "project",
    "apgd_checkpoints",
]

TRACE_COLUMNS = ("step", "t", "task_id", "loss", "delta_norm", "rho", "step_size")


def _pnorm(delta, p):
    if p == np.inf:
        return np.abs(delta).max(axis=-1)
    if p == 2:
        return np.sqrt((delta * delta).sum(axis=-1))
    return np.abs(delta).sum(axis=-1)


def project(delta, epsilon, p):
    """Nearest point of the ``epsilon``-ball around zero.

    l-inf clamps coordinates; l2 rescales radially when the norm exceeds
    ``epsilon``.  A 2-D ``delta`` is projected row by row.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    p = norm_order(p)
    delta = np.asarray(delta, dtype=np.float64)
    if p == np.inf:
        return np.clip(delta, -epsilon, epsilon)
    if p != 2:
        raise ValueError("projection is implemented for the l2 and l-inf balls only")
    norms = _pnorm(delta, 2)
    scale = np.where(norms > epsilon, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * np.expand_dims(scale, -1)


def _direction(g, p):
    if p == np.inf:
        return np.sign(g)
    norms = np.sqrt((g * g).sum(axis=-1, keepdims=True))
    return np.where(norms > 0, g / np.where(norms > 0, norms, 1.0), 0.0)


@dataclass
class StepRecord:
    t: int
    losses: dict
    joint: np.ndarray
    delta_norm: np.ndarray
    rho: dict | None = None
    step_size: np.ndarray | None = None


@dataclass
class AttackTrace:
    """Final perturbation plus a record per iterate (``t = 0`` is the start).

    ``delta`` has the shape of the attacked input; per-step arrays hold one
    value per attacked row.
    """

    variant: str
    delta: np.ndarray
    attacked: list
    epsilon: float
    p: float
    records: list = field(default_factory=list)
    checkpoints: list | None = None

    @property
    def final_losses(self):
        return self.records[-1].losses

    def joint_curve(self):
        """``(n_records, n_rows)`` joint loss per iterate."""
        return np.stack([np.atleast_1d(r.joint) for r in self.records])

    def rows(self):
        """CSV rows: one per (iterate, input row, task) plus a ``joint`` row."""
        out = []
        for rec in self.records:
            norms = np.atleast_1d(rec.delta_norm)
            sizes = None if rec.step_size is None else np.atleast_1d(rec.step_size)
            joint = np.atleast_1d(rec.joint)
            for k in range(norms.shape[0]):
                size = "" if sizes is None else repr(float(sizes[k]))
                for task in self.attacked:
                    rho = "" if rec.rho is None else repr(float(np.atleast_1d(rec.rho[task])[k]))
                    out.append([rec.t, k, task, repr(float(np.atleast_1d(rec.losses[task])[k])),
                                repr(float(norms[k])), rho, size])
                out.append([rec.t, k, "joint", repr(float(joint[k])), repr(float(norms[k])),
                            "", size])
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            writer.writerows(self.rows())


def apgd_checkpoints(n_steps, first=0.22, shrink=0.03, floor=0.06):
    """Iteration indices after which the step-size condition is checked."""
    fracs = [0.0, first]
    while fracs[-1] < 1.0:
        fracs.append(fracs[-1] + max(fracs[-1] - fracs[-2] - shrink, floor))
    points = sorted({math.ceil(f * n_steps) for f in fracs[1:]})
    return [c for c in points if 0 < c <= n_steps]


class BaseAttack(BaseEstimator):
    """Shared machinery; subclasses implement ``_run``."""

    variant = None

    def perturb(self, model, X, Y):
        """Attack every row of ``X``; returns an :class:`AttackTrace`."""
        model = getattr(model, "model_", model)
        single = np.ndim(X) == 1
        X = check_inputs(np.atleast_2d(X))
        if single:
            Y = {t: np.asarray(y)[None] for t, y in Y.items()}
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        attacked = model._attacked(self.attacked)
        weights = model.weights if self.weights is None else dict(self.weights)
        missing = [t for t in attacked if t not in weights]
        if missing:
            raise ValueError(f"no weight for attacked tasks {missing}")
        self._p = norm_order(self.norm)
        trace = self._run(model, X, Y, attacked, weights)
        if single:
            trace.delta = trace.delta[0]
        return trace

    # helpers ----------------------------------------------------------
    def _clamp(self, X, delta):
        if self.input_bounds is None:
            return delta
        lo, hi = self.input_bounds
        Xd = X + delta
        delta = np.where(Xd > hi, hi - X, delta)
        return np.where(Xd < lo, lo - X, delta)

    def _start(self, X):
        delta = np.zeros_like(X)
        if not getattr(self, "random_start", False) or self.epsilon == 0:
            return delta
        n, d = X.shape
        for k in range(n):
            rng = np.random.default_rng(self.seed ^ k)
            if self._p == np.inf:
                delta[k] = rng.uniform(-self.epsilon, self.epsilon, size=d)
            else:
                v = rng.normal(size=d)
                v /= np.linalg.norm(v)
                delta[k] = v * self.epsilon * rng.uniform() ** (1.0 / d)
        return self._clamp(X, project(delta, self.epsilon, self._p))

    def _record(self, t, losses, attacked, weights, delta, rho=None, step_size=None):
        joint = sum(weights[a] * losses[a] for a in attacked)
        for a in attacked:
            if not np.all(np.isfinite(losses[a])):
                raise FloatingPointError(f"non-finite loss for task {a!r} at step {t}")
        return StepRecord(t, {a: losses[a].copy() for a in attacked}, joint,
                          _pnorm(delta, self._p), rho, step_size)

    def _trace(self, delta, attacked, records, checkpoints=None):
        return AttackTrace(self.variant, delta, list(attacked), float(self.epsilon),
                           self._p, records, checkpoints)


class FGSM(BaseAttack):
    """Single signed-gradient step of size ``epsilon`` (l-inf only)."""

    variant = "fgsm"

    def __init__(self, epsilon=8 / 255, norm="linf", attacked=None, input_bounds=None,
                 weights=None):
        self.epsilon = epsilon
        self.norm = norm
        self.attacked = attacked
        self.input_bounds = input_bounds
        self.weights = weights

    def _run(self, model, X, Y, attacked, weights):
        if self._p != np.inf:
            raise ValueError("FGSM is the l-inf sign step; use PGD for other norms")
        coefs = {a: weights[a] for a in attacked}
        delta = np.zeros_like(X)
        losses, g = model.loss_and_grad(X, Y, coefs)
        records = [self._record(0, losses, attacked, weights, delta)]
        delta = self._clamp(X, self.epsilon * np.sign(g))
        losses, _ = model.loss_and_grad(X + delta, Y, coefs)
        records.append(self._record(1, losses, attacked, weights, delta))
        return self._trace(delta, attacked, records)


class PGD(BaseAttack):
    """Projected gradient ascent on the weighted joint loss of ``attacked``.

    With a single attacked task this is the single-task attack; with several
    it is the joint multi-task attack.  The l-inf step follows the gradient
    sign, the l2 step the normalized gradient.
    """

    variant = "pgd"

    def __init__(self, epsilon=8 / 255, norm="linf", steps=25, step_size=2 / 255,
                 random_start=False, attacked=None, seed=0, input_bounds=None, weights=None):
        self.epsilon = epsilon
        self.norm = norm
        self.steps = steps
        self.step_size = step_size
        self.random_start = random_start
        self.attacked = attacked
        self.seed = seed
        self.input_bounds = input_bounds
        self.weights = weights

    def _check(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")

    _adaptive = False

    def _coefs(self, losses, attacked, weights, initial):
        return {a: weights[a] for a in attacked}, None

    def _run(self, model, X, Y, attacked, weights):
        self._check()
        delta = self._start(X)
        initial = model.task_losses(X + delta, Y, attacked) if self._adaptive else None
        coefs, rho = self._coefs(initial, attacked, weights, initial)
        records = []
        for t in range(self.steps + 1):
            if self._adaptive and t > 0:
                current = model.task_losses(X + delta, Y, attacked)
                coefs, rho = self._coefs(current, attacked, weights, initial)
            losses, g = model.loss_and_grad(X + delta, Y, coefs)
            records.append(self._record(t, losses, attacked, weights, delta, rho))
            if t == self.steps:
                break
            step = delta + self.step_size * _direction(g, self._p)
            delta = self._clamp(X, project(step, self.epsilon, self._p))
        return self._trace(delta, attacked, records)


class WGD(PGD):
    """PGD whose task gradients are re-weighted every step by task attack rates.

    For each row the loss ratio ``L_i(t) / L_i(0)`` of every attacked task is
    divided by its mean over the attacked tasks, giving a rate ``rho_i``; the
    step then follows ``d/dx sum_i rho_i * w_i * L_i``.  ``rate_inverted=True``
    uses the reciprocal ratios instead, which boosts the tasks whose loss has
    grown least.
    """

    variant = "wgd"

    def __init__(self, epsilon=8 / 255, norm="linf", steps=25, step_size=2 / 255,
                 random_start=False, attacked=None, seed=0, input_bounds=None, weights=None,
                 rate_inverted=False):
        super().__init__(epsilon, norm, steps, step_size, random_start, attacked, seed,
                         input_bounds, weights)
        self.rate_inverted = rate_inverted

    _adaptive = True

    def _run(self, model, X, Y, attacked, weights):
        if len(attacked) < 2:
            raise ValueError("WGD needs at least two attacked tasks")
        return super()._run(model, X, Y, attacked, weights)

    def _coefs(self, losses, attacked, weights, initial):
        for a in attacked:
            if np.any(initial[a] <= 0):
                raise ValueError(f"task {a!r} has zero initial loss; attack rate undefined")
        rho = task_attack_rates(losses, initial, self.rate_inverted)
        return {a: rho[a] * weights[a] for a in attacked}, rho


def task_attack_rates(current, initial, inverted=False):
    """Relative attack rates ``rho_i`` from current and initial task losses."""
    ratios = {a: np.asarray(current[a]) / np.asarray(initial[a]) for a in current}
    if inverted:
        ratios = {a: 1.0 / r for a, r in ratios.items()}
    mean = sum(ratios.values()) / len(ratios)
    return {a: r / mean for a, r in ratios.items()}


class APGD(BaseAttack):
    """Auto-PGD style attack: momentum plus step-size halving at checkpoints.

    The step size starts at ``2 * epsilon``.  At each checkpoint, rows whose
    fraction of loss-increasing steps since the previous checkpoint is below
    ``rho`` halve their step size and restart from their best iterate.  The
    best iterate seen is returned.
    """

    variant = "apgd"

    def __init__(self, epsilon=8 / 255, norm="linf", steps=25, random_start=False,
                 attacked=None, seed=0, input_bounds=None, weights=None, momentum=0.75,
                 rho=0.75):
        self.epsilon = epsilon
        self.norm = norm
        self.steps = steps
        self.random_start = random_start
        self.attacked = attacked
        self.seed = seed
        self.input_bounds = input_bounds
        self.weights = weights
        self.momentum = momentum
        self.rho = rho

    def _run(self, model, X, Y, attacked, weights):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        p, eps, m = self._p, self.epsilon, self.momentum
        coefs = {a: weights[a] for a in attacked}
        n = X.shape[0]
        checkpoints = apgd_checkpoints(self.steps)

        delta = self._start(X)
        losses, g = model.loss_and_grad(X + delta, Y, coefs)
        joint = sum(weights[a] * losses[a] for a in attacked)
        alpha = np.full(n, 2.0 * eps)
        records = [self._record(0, losses, attacked, weights, delta, step_size=alpha.copy())]

        best_delta, best_grad, best_loss = delta.copy(), g.copy(), joint.copy()
        prev_delta = delta.copy()
        prev_loss = joint
        n_increase = np.zeros(n)
        last_check = 0
        for i in range(self.steps):
            z = self._clamp(X, project(delta + alpha[:, None] * _direction(g, p), eps, p))
            if i == 0:
                new = z
            else:
                new = delta + m * (z - delta) + (1.0 - m) * (delta - prev_delta)
                new = self._clamp(X, project(new, eps, p))
            prev_delta, delta = delta, new
            step_used = alpha.copy()

            losses, g = model.loss_and_grad(X + delta, Y, coefs)
            joint = sum(weights[a] * losses[a] for a in attacked)
            n_increase += joint > prev_loss
            prev_loss = joint
            better = joint > best_loss
            best_delta[better] = delta[better]
            best_grad[better] = g[better]
            best_loss = np.where(better, joint, best_loss)
            records.append(self._record(i + 1, losses, attacked, weights, delta,
                                        step_size=step_used))

            if i + 1 in checkpoints:
                window = i + 1 - last_check
                halve = n_increase < self.rho * window
                alpha[halve] /= 2.0
                delta[halve] = best_delta[halve]
                prev_delta[halve] = best_delta[halve]
                g[halve] = best_grad[halve]
                n_increase[:] = 0
                last_check = i + 1
        return self._trace(best_delta, attacked, records, checkpoints)


ATTACKS = {"fgsm": FGSM, "pgd": PGD, "wgd": WGD, "apgd": APGD}


def make_attack(variant, **params):
    """Instantiate an attack by name, ignoring parameters it does not take."""
    try:
        cls = ATTACKS[variant]
    except KeyError:
        raise ValueError(f"unknown attack variant {variant!r}") from None
    accepted = cls._get_param_names()
    return cls(**{k: v for k, v in params.items() if k in accepted})
