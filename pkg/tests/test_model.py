import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtadvlab.model import (MultiTaskModel, TaskSpec, TrainConfig, TrainingDivergedError,
                            build_model, clean_error, joint_loss, task_loss, train)

REG = TaskSpec("r", "regression", 2)
CLS = TaskSpec("c", "classification", 2)


def fixed_output_model(tasks, biases, weights=None, n_in=3):
    """Model whose decoders ignore the input and emit ``biases[task]``."""
    model = build_model([n_in, 4], tasks, weights, seed=0)
    params = {}
    for t in tasks:
        # the decoder's last affine layer is zeroed so the output is its bias
        params[f"dec/{t.id}/W1"] = np.zeros_like(model.params[f"dec/{t.id}/W1"])
        params[f"dec/{t.id}/b1"] = np.asarray(biases[t.id], dtype=float)
    return model.with_params(params)


# TaskSpec ---------------------------------------------------------------

def test_taskspec_defaults():
    assert CLS.loss_kind == "cross_entropy" and CLS.error_kind == "one_minus_accuracy"
    assert REG.loss_kind == "l1" and REG.error_kind == "l1"
    assert TaskSpec("m", loss_kind="mse").error_kind == "mse"


@pytest.mark.parametrize("kwargs", [
    dict(kind="classification", target_dim=2, loss_kind="l1"),
    dict(kind="regression", loss_kind="cross_entropy"),
    dict(kind="ranking"),
    dict(kind="classification", target_dim=1),
    dict(target_dim=0),
    dict(error_kind="hamming"),
])
def test_taskspec_invariants(kwargs):
    with pytest.raises(ValueError):
        TaskSpec("t", **kwargs)


# build_model ----------------------------------------------------------------

def test_single_task_default_weight():
    assert build_model([3, 4], [REG]).weights == {"r": 1.0}


def test_three_task_uniform_weights():
    tasks = [TaskSpec(i) for i in "abc"]
    assert build_model([3, 4], tasks).weights == {t: 1 / 3 for t in "abc"}


def test_build_is_deterministic():
    a = build_model([5, 8, 4], [REG, CLS], seed=11)
    b = build_model([5, 8, 4], [REG, CLS], seed=11)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    c = build_model([5, 8, 4], [REG, CLS], seed=12)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


@pytest.mark.parametrize("tasks,weights", [
    ([], None), ([REG], [1.0, 2.0]), ([REG, CLS], [1.0, -1.0]), ([REG, CLS], [0.0, 0.0])])
def test_build_rejects(tasks, weights):
    with pytest.raises(ValueError):
        build_model([3, 4], tasks, weights)


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        build_model([3, 4], [REG, REG])


# task_loss / joint_loss ------------------------------------------------------

def test_l1_loss_zero_at_perfect_prediction():
    m = fixed_output_model([REG], {"r": [0.3, -0.7]})
    assert task_loss(m, np.zeros(3), {"r": np.array([0.3, -0.7])}, "r") == 0.0


def test_cross_entropy_uniform_is_ln2():
    m = fixed_output_model([CLS], {"c": [0.0, 0.0]})
    assert task_loss(m, np.zeros(3), {"c": 1}, "c") == pytest.approx(math.log(2), rel=1e-15)


def test_l1_mean_reduction():
    m = fixed_output_model([REG], {"r": [1.0, 2.0]})
    assert task_loss(m, np.zeros(3), {"r": np.array([0.0, 0.0])}, "r") == 1.5


def test_unknown_task():
    m = fixed_output_model([REG], {"r": [1.0, 2.0]})
    with pytest.raises(KeyError):
        task_loss(m, np.zeros(3), {"r": np.zeros(2)}, "nope")


def two_loss_model(weights):
    a, b = TaskSpec("a"), TaskSpec("b")
    return fixed_output_model([a, b], {"a": [2.0], "b": [4.0]}, weights)


def test_joint_loss_weighted_sum():
    m = two_loss_model([0.5, 0.5])
    Y = {"a": np.zeros(1), "b": np.zeros(1)}
    assert joint_loss(m, np.zeros(3), Y) == 3.0


def test_joint_loss_single_task_equals_task_loss():
    m = two_loss_model([1.0, 1.0])
    Y = {"a": np.zeros(1), "b": np.zeros(1)}
    assert joint_loss(m, np.zeros(3), Y, ["b"]) == task_loss(m, np.zeros(3), Y, "b")


def test_joint_loss_empty_attacked():
    with pytest.raises(ValueError):
        joint_loss(two_loss_model(None), np.zeros(3), {}, [])


def test_joint_loss_three_tasks_resummed(trained):
    model, ds = trained
    m = model.with_weights({"a": 0.2, "b": 0.3, "c": 0.5})
    joint = joint_loss(m, ds.X, ds.Y)
    parts = {t: task_loss(m, ds.X, ds.Y, t) for t in "abc"}
    expect = 0.2 * parts["a"] + 0.3 * parts["b"] + 0.5 * parts["c"]
    np.testing.assert_allclose(joint, expect, rtol=1e-12)


def test_joint_uniform_equals_mean_of_task_losses(trained):
    model, ds = trained
    parts = model.task_losses(ds.X, ds.Y)
    mean = sum(parts.values()) / 3
    np.testing.assert_allclose(model.joint_losses(ds.X, ds.Y), mean, rtol=1e-12)


@given(st.floats(0.01, 100))
def test_joint_loss_linear_in_weights(trained, scale):
    model, ds = trained
    w = {"a": 0.1, "b": 0.7, "c": 0.2}
    Y = {t: y[:8] for t, y in ds.Y.items()}
    base = model.joint_losses(ds.X[:8], Y, weights=w)
    scaled = model.joint_losses(ds.X[:8], Y, weights={k: scale * v for k, v in w.items()})
    np.testing.assert_allclose(scaled, scale * base, rtol=1e-12)


def test_joint_gradient_is_weighted_sum_of_task_gradients(trained):
    model, ds = trained
    w = {"a": 0.25, "b": 0.6, "c": 0.15}
    _, g = model.loss_and_grad(ds.X, ds.Y, w)
    r = model.input_gradients(ds.X, ds.Y)
    np.testing.assert_allclose(g, sum(w[t] * r[t] for t in w), rtol=1e-9, atol=1e-15)


def test_batched_gradients_are_per_example(trained):
    model, ds = trained
    Y = {t: y[:5] for t, y in ds.Y.items()}
    _, g = model.loss_and_grad(ds.X[:5], Y, {"a": 1.0, "c": 0.5})
    for k in range(5):
        Yk = {t: y[k:k + 1] for t, y in ds.Y.items()}
        _, gk = model.loss_and_grad(ds.X[k:k + 1], Yk, {"a": 1.0, "c": 0.5})
        np.testing.assert_allclose(g[k], gk[0], rtol=1e-12)


# train -----------------------------------------------------------------------

def linear_problem(seed=0, n=128, d=4):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, d))
    beta = rng.normal(size=(d, 1))
    y = X @ beta * 0.5 + 0.01 * rng.normal(size=(n, 1))
    return X, {"y": y}


def test_zero_epochs_leaves_parameters():
    X, Y = linear_problem()
    m = build_model([4, 8], [TaskSpec("y", loss_kind="mse")], seed=3)
    m2, hist = train(m, X, Y, TrainConfig(epochs=0))
    assert len(hist) == 1
    for k in m.params:
        assert m.params[k].tobytes() == m2.params[k].tobytes()


def test_linear_task_is_learned():
    X, Y = linear_problem()
    m = build_model([4, 8], [TaskSpec("y", loss_kind="mse")], seed=3)
    m2, hist = train(m, X, Y, TrainConfig(epochs=200, learning_rate=0.05, seed=1))
    # least squares shows the task is reducible far below the 10% threshold
    A = np.hstack([X, np.ones((len(X), 1))])
    coef, *_ = np.linalg.lstsq(A, Y["y"], rcond=None)
    ls_mse = float(((A @ coef - Y["y"]) ** 2).mean())
    assert ls_mse < 0.01 * hist[0]
    final = float(m2.task_losses(X, Y)["y"].mean())
    assert final == pytest.approx(hist[-1], rel=1e-12)
    assert final < 0.1 * hist[0]


@pytest.mark.parametrize("optimizer", ["sgd", "sgd_momentum"])
def test_training_is_bitwise_reproducible(optimizer):
    X, Y = linear_problem(1)
    cfg = TrainConfig(epochs=5, learning_rate=0.05, seed=4, optimizer=optimizer)
    m = build_model([4, 6], [TaskSpec("y", loss_kind="mse")], seed=2)
    a, ha = train(m, X, Y, cfg)
    b, hb = train(m, X, Y, cfg)
    assert ha == hb
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_training_does_not_mutate_input_model():
    X, Y = linear_problem(2)
    m = build_model([4, 6], [TaskSpec("y", loss_kind="mse")], seed=2)
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, X, Y, TrainConfig(epochs=2))
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k])


def test_divergence_reports_epoch():
    X, Y = linear_problem(3)
    Y = {"y": Y["y"] * 1e3}
    m = build_model([4, 6], [TaskSpec("y", loss_kind="mse")], seed=2)
    with pytest.raises(TrainingDivergedError) as info, np.errstate(all="ignore"):
        train(m, X, Y, TrainConfig(epochs=50, learning_rate=50.0))
    assert info.value.epoch >= 1 and "epoch" in str(info.value)


@pytest.mark.parametrize("kwargs", [dict(learning_rate=0.0), dict(batch_size=0),
                                    dict(epochs=-1), dict(optimizer="adam")])
def test_train_config_invariants(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_train_validates_targets():
    X, Y = linear_problem()
    m = build_model([4, 6], [TaskSpec("y", loss_kind="mse")])
    with pytest.raises(ValueError):
        train(m, X, {"y": Y["y"][:-1]})
    with pytest.raises(ValueError):
        train(m, X, {})


# clean_error -----------------------------------------------------------------

def test_clean_error_all_correct(trained):
    model, ds = trained
    labels = np.argmax(model.predict(ds.X, ["c"])["c"], axis=-1)
    assert clean_error(model, ds.X, {"c": labels}, "c") == 0.0


def test_clean_error_regression_exact(trained):
    model, ds = trained
    m = model.with_weights(model.weights)
    spec_mse = [TaskSpec(t.id, t.kind, t.target_dim, "mse") if t.kind == "regression" else t
                for t in m.tasks]
    m = MultiTaskModel(m.encoder, m.decoders, spec_mse, m.weights)
    pred = m.predict(ds.X, ["a"])["a"]
    assert clean_error(m, ds.X, {"a": pred}, "a") == 0.0


def test_clean_error_three_of_five():
    m = fixed_output_model([CLS], {"c": [1.0, 0.0]})  # always predicts class 0
    labels = np.array([0, 0, 0, 1, 1])
    assert clean_error(m, np.zeros((5, 3)), {"c": labels}, "c") == pytest.approx(0.4)


def test_clean_error_empty_dataset():
    m = fixed_output_model([CLS], {"c": [1.0, 0.0]})
    with pytest.raises(ValueError):
        clean_error(m, np.zeros((0, 3)), {"c": np.zeros(0)}, "c")


def test_one_minus_iou_thresholds_at_half():
    seg = TaskSpec("s", "regression", 4, "l1", "one_minus_iou")
    m = fixed_output_model([seg], {"s": [0.9, 0.6, 0.2, 0.4]})
    # predicted mask {0, 1}; target mask {1, 2}: IoU = 1/3
    y = np.array([[0.0, 1.0, 1.0, 0.0]])
    assert m.task_errors(np.zeros((1, 3)), {"s": y}, "s")[0] == pytest.approx(2 / 3)
    empty = fixed_output_model([seg], {"s": [0.0] * 4})
    assert empty.task_errors(np.zeros((1, 3)), {"s": np.zeros((1, 4))}, "s")[0] == 0.0


# checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path, trained):
    model, ds = trained
    model = model.with_weights({"a": 0.1, "b": 0.2, "c": 0.7})
    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = MultiTaskModel.load(path)
    assert loaded.weights == model.weights and loaded.tasks == model.tasks
    assert loaded.seed == model.seed
    for k in model.params:
        assert loaded.params[k].tobytes() == model.params[k].tobytes()
    a = model.joint_losses(ds.X, ds.Y)
    assert a.tobytes() == loaded.joint_losses(ds.X, ds.Y).tobytes()
    loaded.save(tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        MultiTaskModel.load(p)
