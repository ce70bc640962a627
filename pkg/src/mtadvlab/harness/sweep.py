"""Sweep execution: result tables, the model cache and the experiment runners."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from ..attacks import make_attack
from ..metrics import adversarial_vulnerability, per_example_vulnerability, \
    relative_task_vulnerability
from ..model import MultiTaskModel, build_model, clean_error, train
from ..stats import kendall_tau, pearson, wilcoxon_signed_rank
from ..synth import SynthSpec, generate_dataset, load_dataset
from ..tensor import norm_order
from .config import encoder_id

__all__ = ["SweepRow", "SweepTable", "ErrorRecord", "KEY_COLUMNS", "COLUMNS",
           "run_experiment", "incremental_task_sweep", "surrogate_correlation",
           "task_combinations", "model_jobs", "train_models", "cell_seed", "load_data",
           "worker_count"]

KEY_COLUMNS = ("main_task", "auxiliary_set", "encoder_id", "epochs", "attack_variant",
               "epsilon", "p", "steps", "metric_name")
COLUMNS = KEY_COLUMNS + ("value", "seed")


def p_label(p):
    if p is None or p == "":
        return ""
    return "linf" if norm_order(p) == math.inf else f"l{int(norm_order(p))}"


@dataclass(frozen=True)
class SweepRow:
    main_task: str
    auxiliary_set: str
    encoder_id: str
    epochs: int
    attack_variant: str
    epsilon: float
    p: str
    steps: int
    metric_name: str
    value: float
    seed: int

    def key(self):
        return tuple(getattr(self, c) for c in KEY_COLUMNS) + (self.seed,)

    @property
    def tasks(self):
        return [self.main_task] + [t for t in self.auxiliary_set.split("+") if t]

    @property
    def n_tasks(self):
        """Number of tasks in the combination (the prefix length in incremental sweeps)."""
        return len(self.tasks)


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


class SweepTable:
    """Set of :class:`SweepRow` with unique ``(key columns, seed)``."""

    def __init__(self, rows=()):
        self._rows = {}
        self.errors = []
        self.run_log = {}
        for r in rows:
            self.add(r)

    def add(self, row):
        k = row.key()
        if k in self._rows:
            raise ValueError(f"duplicate sweep row {k}")
        self._rows[k] = row

    def extend(self, rows):
        for r in rows:
            self.add(r)

    @property
    def rows(self):
        return [self._rows[k] for k in sorted(self._rows)]

    def __len__(self):
        return len(self._rows)

    def __iter__(self):
        return iter(self.rows)

    def filter(self, **conditions):
        return SweepTable(r for r in self.rows
                          if all(getattr(r, c) == v for c, v in conditions.items()))

    def distinct(self, column):
        return sorted({getattr(r, column) for r in self._rows.values()})

    def to_csv(self, path=None):
        """Write the table (or return it as text when ``path`` is None)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return path

    @classmethod
    def from_csv(cls, path):
        types = {f.name: f.type for f in fields(SweepRow)}
        conv = {"int": int, "float": float, "str": str}
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != COLUMNS:
                raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
            return cls(SweepRow(**{c: conv[types[c]](v) for c, v in rec.items()})
                       for rec in reader)


@dataclass(frozen=True)
class ErrorRecord:
    main_task: str
    auxiliary_set: str
    encoder_id: str
    epochs: int
    attack_variant: str
    epsilon: float
    p: str
    steps: int
    error: str


def write_errors(errors, path):
    cols = [f.name for f in fields(ErrorRecord)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in sorted(errors, key=lambda e: tuple(str(getattr(e, c)) for c in cols)):
            w.writerow([_fmt(getattr(e, c)) for c in cols])


# ----------------------------------------------------------------------
# seeds, data, models


def cell_seed(global_seed, key):
    """Stable 32-bit seed for a cell, independent of execution order."""
    blob = json.dumps([int(global_seed), [str(k) for k in key]]).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


def worker_count():
    try:
        n = int(os.environ.get("MTADVLAB_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


@dataclass
class Data:
    X_train: np.ndarray
    Y_train: dict
    X_eval: np.ndarray
    Y_eval: dict
    digest: str


def _digest(X, Y):
    h = hashlib.sha256(np.ascontiguousarray(X, dtype="<f8").tobytes())
    for t in sorted(Y):
        h.update(t.encode())
        h.update(np.ascontiguousarray(Y[t], dtype="<f8").tobytes())
    return h.hexdigest()


def load_data(cfg):
    """Generate or load the dataset and split off the evaluation tail."""
    ds = generate_dataset(cfg.dataset) if isinstance(cfg.dataset, SynthSpec) \
        else load_dataset(cfg.dataset)
    ids = [t.id for t in cfg.model_task_specs()]
    Y = {t: ds.Y[t] for t in ids}
    n = ds.X.shape[0]
    n_eval = int(round(n * cfg.eval_fraction))
    if n_eval == 0 or n_eval == n:
        return Data(ds.X, Y, ds.X, Y, _digest(ds.X, ds.Y))
    cut = n - n_eval
    return Data(ds.X[:cut], {t: y[:cut] for t, y in Y.items()}, ds.X[cut:],
                {t: y[cut:] for t, y in Y.items()}, _digest(ds.X, ds.Y))


@dataclass(frozen=True)
class ModelJob:
    tasks: tuple
    encoder: tuple
    epochs: int


def _model_weights(cfg, tasks):
    if cfg.weights is None:
        return [1.0 / len(tasks)] * len(tasks)
    w = cfg.task_weights()
    return [w[t] for t in tasks]


def _job_setup(cfg, job, data):
    specs = {t.id: t for t in cfg.model_task_specs()}
    seed = cell_seed(cfg.seed, ("model", encoder_id(job.encoder)) + job.tasks)
    tcfg = replace(cfg.train, epochs=job.epochs, seed=seed)
    enc = [data.X_train.shape[1], *job.encoder]
    payload = {
        "encoder": enc, "activation": cfg.activation, "decoder_hidden": cfg.decoder_hidden,
        "tasks": [asdict(specs[t]) for t in job.tasks],
        "weights": _model_weights(cfg, job.tasks), "train": asdict(tcfg),
        "dataset": data.digest, "eval_fraction": cfg.eval_fraction,
    }
    key = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return key, enc, [specs[t] for t in job.tasks], tcfg


def _train_job(cfg, job, data, cache_dir):
    """Load the model from cache or train it; returns ``(model, log entry)``."""
    key, enc, specs, tcfg = _job_setup(cfg, job, data)
    entry = {"key": key, "tasks": list(job.tasks), "encoder_id": encoder_id(job.encoder),
             "epochs": job.epochs}
    path = os.path.join(cache_dir, f"{key}.ckpt") if cache_dir else None
    if path and os.path.exists(path):
        return MultiTaskModel.load(path), dict(entry, cached=True, train_steps=0)
    model = build_model(enc, specs, _model_weights(cfg, job.tasks), seed=tcfg.seed,
                        activation=cfg.activation, decoder_hidden=cfg.decoder_hidden)
    model, _ = train(model, data.X_train, data.Y_train, tcfg)
    steps = tcfg.epochs * math.ceil(data.X_train.shape[0] / tcfg.batch_size)
    if path:
        tmp = f"{path}.tmp{os.getpid()}"
        model.save(tmp)
        os.replace(tmp, path)
    return model, dict(entry, cached=False, train_steps=steps)


# ----------------------------------------------------------------------
# sweep structure


def task_combinations(task_ids, policy, max_k=2):
    """``(main, auxiliary tuple)`` pairs for a combination policy.

    ``pairs`` gives every single task plus every ordered (main, auxiliary)
    pair; ``all_subsets_up_to_k`` every main task with every auxiliary subset
    such that the combination has at most ``max_k`` tasks; ``none`` the single
    combination of all tasks with the first as main task.
    """
    ids = list(task_ids)
    if policy == "none":
        return [(ids[0], tuple(ids[1:]))]
    if policy == "pairs":
        return [(t, ()) for t in ids] + [(m, (a,)) for m in ids for a in ids if a != m]
    if policy == "all_subsets_up_to_k":
        out = []
        for m in ids:
            others = [t for t in ids if t != m]
            for size in range(min(max_k, len(ids))):
                out.extend((m, c) for c in itertools.combinations(others, size))
        return out
    raise ValueError(f"policy {policy!r} does not enumerate combinations")


def _axes(cfg):
    a, s = cfg.attack, cfg.sweep
    return (s.epsilon or (a.epsilon,), s.steps or (a.steps,), s.norm or (a.norm,),
            s.encoders or (tuple(cfg.encoder),), s.epochs or (cfg.train.epochs,))


def _attack_cells(cfg):
    eps_list, steps_list, norms, _, _ = _axes(cfg)
    cells = []
    for variant in cfg.attack.variants:
        for eps, steps, norm in itertools.product(eps_list, steps_list, norms):
            cells.append((variant, float(eps), 1 if variant == "fgsm" else int(steps),
                          p_label(norm)))
    return sorted(set(cells), key=lambda c: (c[0], c[1], c[2], c[3]))


def _make(cfg, variant, eps, steps, p, seed):
    return make_attack(variant, **cfg.attack.params(variant, eps, steps, p, seed))


def _model_order(cfg, tasks):
    order = [t.id for t in cfg.model_task_specs()]
    return tuple(t for t in order if t in tasks)


def _run_jobs(fn, items):
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _train_all(cfg, jobs, data, cache_dir):
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)

    def one(job):
        try:
            model, entry = _train_job(cfg, job, data, cache_dir)
            return job, model, entry, None
        except (FloatingPointError, ValueError) as exc:
            return job, None, None, exc

    return _run_jobs(one, jobs)


def _finish(cfg, table, entries, n_cells, out_dir):
    entries = sorted((e for e in entries if e), key=lambda e: e["key"])
    table.run_log = {"models": entries, "train_steps": sum(e["train_steps"] for e in entries),
                     "cells": n_cells, "rows": len(table), "errors": len(table.errors),
                     "seed": cfg.seed}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "run_log.json"), "w", encoding="utf-8") as fh:
            json.dump(table.run_log, fh, indent=1, sort_keys=True)
            fh.write("\n")
        err_path = os.path.join(out_dir, "errors.csv")
        if table.errors:
            write_errors(table.errors, err_path)
        elif os.path.exists(err_path):
            os.remove(err_path)
    return table


def model_jobs(cfg):
    """Distinct models a config needs, in a fixed order."""
    ids = [t.id for t in cfg.model_task_specs()]
    _, _, _, encoders, epochs_list = _axes(cfg)
    if cfg.sweep.combinations == "incremental":
        task_sets = {tuple(ids)}
    else:
        combos = task_combinations(ids, cfg.sweep.combinations, cfg.sweep.max_k)
        task_sets = {_model_order(cfg, (m,) + aux) for m, aux in combos}
    return sorted((ModelJob(ts, tuple(enc), int(ep)) for ts in task_sets
                   for enc in encoders for ep in epochs_list),
                  key=lambda j: (j.tasks, j.encoder, j.epochs))


def train_models(cfg, out_dir=None, use_cache=True):
    """Train (or load from cache) every model of ``cfg``; returns the run log."""
    out_dir = cfg.output_dir if out_dir is None else out_dir
    cache_dir = os.path.join(out_dir, "cache") if (use_cache and out_dir) else None
    trained = _train_all(cfg, model_jobs(cfg), load_data(cfg), cache_dir)
    table = SweepTable()
    for job, _, _, exc in trained:
        if exc is not None:
            table.errors.append(_error("+".join(job.tasks), "", encoder_id(job.encoder),
                                       job.epochs, "train", 0.0, "", 0, exc))
    return _finish(cfg, table, [e for _, _, e, _ in trained], 0, out_dir)


def _error(main, aux, enc_id, epochs, variant, eps, p, steps, exc):
    return ErrorRecord(main, aux, enc_id, epochs, variant, eps, p, steps,
                       f"{type(exc).__name__}: {exc}")


def run_experiment(cfg, out_dir=None, use_cache=True):
    """Train the models a config needs and evaluate every sweep cell.

    Models are cached under ``<out_dir>/cache`` keyed by a content hash of
    their full specification, so re-running an unchanged config trains
    nothing.  Per-cell failures become :class:`ErrorRecord` entries in
    ``table.errors`` (and ``errors.csv``); the remaining cells still run.
    """
    if cfg.sweep.combinations == "incremental":
        return incremental_task_sweep(cfg, cfg.sweep.order, out_dir=out_dir,
                                      use_cache=use_cache)
    out_dir = cfg.output_dir if out_dir is None else out_dir
    cache_dir = os.path.join(out_dir, "cache") if (use_cache and out_dir) else None
    data = load_data(cfg)
    ids = [t.id for t in cfg.model_task_specs()]
    combos = task_combinations(ids, cfg.sweep.combinations, cfg.sweep.max_k)
    _, _, _, encoders, epochs_list = _axes(cfg)
    trained = _train_all(cfg, model_jobs(cfg), data, cache_dir)
    models = {job: model for job, model, _, _ in trained}
    table = SweepTable()
    for job, model, _, exc in trained:
        if exc is not None:
            for m, aux in combos:
                if _model_order(cfg, (m,) + aux) == job.tasks:
                    table.errors.append(_error(m, "+".join(aux), encoder_id(job.encoder),
                                               job.epochs, "train", 0.0, "", 0, exc))

    attack_cells = _attack_cells(cfg)
    cells = []
    for m, aux in combos:
        for enc in encoders:
            for ep in epochs_list:
                job = ModelJob(_model_order(cfg, (m,) + aux), tuple(enc), int(ep))
                if models.get(job) is not None:
                    cells.append((m, aux, job, None))
                    cells.extend((m, aux, job, c) for c in attack_cells)

    def run_cell(cell):
        m, aux, job, attack = cell
        model = models[job]
        aux_s, enc_id = "+".join(aux), encoder_id(job.encoder)
        base = dict(main_task=m, auxiliary_set=aux_s, encoder_id=enc_id, epochs=job.epochs,
                    seed=cfg.seed)
        if attack is None:
            try:
                value = clean_error(model, data.X_eval, data.Y_eval, m)
                return [SweepRow(attack_variant="clean", epsilon=0.0, p="", steps=0,
                                 metric_name="clean_error", value=value, **base)], []
            except (FloatingPointError, ValueError) as exc:
                return [], [_error(m, aux_s, enc_id, job.epochs, "clean", 0.0, "", 0, exc)]
        variant, eps, steps, p = attack
        key = (m, aux_s, enc_id, job.epochs, variant, eps, p, steps)
        attacked = [m] if cfg.attack.target == "main" else list(job.tasks)
        uniform = cfg.sweep.weighting == "uniform"
        try:
            atk = _make(cfg, variant, eps, steps, p, cell_seed(cfg.seed, key))
            inc, trace = per_example_vulnerability(model, data.X_eval, data.Y_eval, attacked,
                                                   atk, uniform_weights=uniform)
            clean = model.task_errors(data.X_eval, data.Y_eval, m)
            adv = model.task_errors(data.X_eval + trace.delta, data.Y_eval, m)
            rtv = relative_task_vulnerability(clean, adv).value
        except (FloatingPointError, ValueError) as exc:
            return [], [_error(*key, exc)]
        cell = dict(base, attack_variant=variant, epsilon=eps, p=p, steps=steps)
        return [SweepRow(metric_name="vulnerability", value=float(inc.mean()), **cell),
                SweepRow(metric_name="relative_task_vulnerability", value=rtv, **cell)], []

    for rows, errors in _run_jobs(run_cell, cells):
        table.extend(rows)
        table.errors.extend(errors)
    return _finish(cfg, table, [e for _, _, e, _ in trained], len(cells), out_dir)


def incremental_task_sweep(cfg, order=None, out_dir=None, use_cache=True):
    """Vulnerability as tasks of one all-task model are enabled in ``order``.

    Rows carry ``main_task = order[0]`` and the enabled prefix ``order[1:N]``
    joined with ``+`` as auxiliary set, so ``row.n_tasks`` is the prefix
    length ``N``.  ``marginal_vulnerability`` rows hold the step from ``N-1``
    to ``N``.  With ``sweep.weighting = uniform`` every enabled task gets
    weight ``1/N``; with ``model`` the trained weights are kept.
    """
    ids = [t.id for t in cfg.model_task_specs()]
    order = list(order or cfg.sweep.order or ids)
    if len(order) < 2:
        raise ValueError("incremental sweep needs an order of at least two tasks")
    unknown = [t for t in order if t not in ids]
    if unknown or len(set(order)) != len(order):
        raise ValueError(f"order {order} must list distinct modelled tasks {ids}")
    out_dir = cfg.output_dir if out_dir is None else out_dir
    cache_dir = os.path.join(out_dir, "cache") if (use_cache and out_dir) else None
    data = load_data(cfg)
    _, _, _, encoders, epochs_list = _axes(cfg)
    jobs = [ModelJob(tuple(ids), tuple(enc), int(ep)) for enc in encoders for ep in epochs_list]
    trained = _train_all(cfg, jobs, data, cache_dir)
    uniform = cfg.sweep.weighting == "uniform"
    table = SweepTable()
    cells = []
    for job, model, _, exc in trained:
        if exc is not None:
            table.errors.append(_error(order[0], "+".join(order[1:]), encoder_id(job.encoder),
                                       job.epochs, "train", 0.0, "", 0, exc))
            continue
        cells.extend((job, model, c) for c in _attack_cells(cfg))

    def run_cell(cell):
        job, model, (variant, eps, steps, p) = cell
        enc_id = encoder_id(job.encoder)
        rows, errors, prev = [], [], None
        for n in range(1, len(order) + 1):
            aux = "+".join(order[1:n])
            key = (order[0], aux, enc_id, job.epochs, variant, eps, p, steps)
            try:
                atk = _make(cfg, variant, eps, steps, p, cell_seed(cfg.seed, key))
                v = adversarial_vulnerability(model, data.X_eval, data.Y_eval, order[:n], atk,
                                              uniform_weights=uniform)
            except (FloatingPointError, ValueError) as exc:
                errors.append(_error(*key, exc))
                prev = None
                continue
            base = dict(main_task=order[0], auxiliary_set=aux, encoder_id=enc_id,
                        epochs=job.epochs, attack_variant=variant, epsilon=eps, p=p,
                        steps=steps, seed=cfg.seed)
            rows.append(SweepRow(metric_name="vulnerability", value=v, **base))
            if prev is not None:
                rows.append(SweepRow(metric_name="marginal_vulnerability", value=v - prev,
                                     **base))
            prev = v
        return rows, errors

    for rows, errors in _run_jobs(run_cell, cells):
        table.extend(rows)
        table.errors.extend(errors)
    return _finish(cfg, table, [e for _, _, e, _ in trained], len(cells), out_dir)


# ----------------------------------------------------------------------
# analysis

_STATISTICS = {"pearson": pearson, "kendall": kendall_tau, "wilcoxon": wilcoxon_signed_rank}


def _index(table, on, metric, label):
    rows = table.rows if metric is None else [r for r in table.rows if r.metric_name == metric]
    if metric is None and len({r.metric_name for r in rows}) > 1:
        raise ValueError(f"{label} table holds several metrics; select one")
    out = {}
    for r in rows:
        k = tuple(getattr(r, c) for c in on)
        if k in out:
            raise ValueError(f"{label} table has several rows for {dict(zip(on, k))}; "
                             "filter it to one row per combination first")
        out[k] = r.value
    return out


def surrogate_correlation(target, surrogate, statistic="pearson", target_metric=None,
                          surrogate_metric=None, on=("main_task", "auxiliary_set")):
    """Agreement between a target sweep and a cheaper surrogate sweep.

    Rows are paired on the ``on`` columns; each table must hold exactly one
    row per combination (after selecting the metric), and both tables must
    cover the same combinations.
    """
    try:
        fn = _STATISTICS[statistic]
    except KeyError:
        raise ValueError(f"unknown statistic {statistic!r}; choose from "
                         f"{sorted(_STATISTICS)}") from None
    a = _index(target, on, target_metric, "target")
    b = _index(surrogate, on, surrogate_metric or target_metric, "surrogate")
    unmatched = sorted(set(a) ^ set(b))
    if unmatched:
        raise ValueError(f"unmatched keys between target and surrogate: {unmatched}")
    keys = sorted(a)
    return fn([a[k] for k in keys], [b[k] for k in keys])

