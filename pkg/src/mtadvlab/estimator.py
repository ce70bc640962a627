"""scikit-learn facade over :mod:`mtadvlab.model`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_inputs, check_targets
from .model import TaskSpec, TrainConfig, build_model, train


class MultiTaskNet(BaseEstimator):
    """Hard-parameter-sharing network trained on a weighted joint loss.

    Parameters
    ----------
    tasks : sequence of TaskSpec or dict
        Task descriptions; dicts are passed to :class:`TaskSpec`.
    hidden : tuple of int, default=(32,)
        Encoder layer widths (the input width is taken from ``X``).
    weights : sequence of float, optional
        Task loss weights in task order; uniform when omitted.
    decoder_hidden : int, optional
        Width of each decoder's hidden layer.
    activation : {"tanh", "relu", "sigmoid"}, default="tanh"
    epochs, batch_size, learning_rate, optimizer, momentum
        Training settings, see :class:`~mtadvlab.model.TrainConfig`.
    random_state : int, default=0
        Seeds both initialization and minibatch order.

    Attributes
    ----------
    model_ : MultiTaskModel
        The trained model; attacks and metrics accept the estimator itself.
    history_ : list of float
        Mean joint loss before training and after every epoch.
    n_features_in_ : int
    """

    def __init__(self, tasks=(), hidden=(32,), weights=None, decoder_hidden=None,
                 activation="tanh", epochs=50, batch_size=32, learning_rate=0.05,
                 optimizer="sgd", momentum=0.9, random_state=0):
        self.tasks = tasks
        self.hidden = hidden
        self.weights = weights
        self.decoder_hidden = decoder_hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.momentum = momentum
        self.random_state = random_state

    def _task_specs(self):
        return [t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks]

    def train_config(self):
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate,
                           self.random_state, self.optimizer, self.momentum)

    def fit(self, X, Y):
        """Initialize from ``random_state`` and train on ``(X, Y)``.

        ``Y`` maps each task id to its targets (integer labels for
        classification tasks, ``(n, target_dim)`` arrays otherwise).
        """
        X = check_inputs(X)
        specs = self._task_specs()
        Y = check_targets(Y, specs, X.shape[0])
        model = build_model([X.shape[1], *self.hidden], specs, self.weights,
                            seed=self.random_state, activation=self.activation,
                            decoder_hidden=self.decoder_hidden)
        self.model_, self.history_ = train(model, X, Y, self.train_config())
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """Class labels for classification tasks, raw outputs for regression."""
        check_is_fitted(self, "model_")
        X = check_inputs(X, self.n_features_in_)
        out = self.model_.predict(X)
        for t in self.model_.tasks:
            if t.kind == "classification":
                out[t.id] = np.argmax(out[t.id], axis=-1)
        return out

    def task_errors(self, X, Y, task):
        check_is_fitted(self, "model_")
        return self.model_.task_errors(check_inputs(X, self.n_features_in_), Y, task)

    def score(self, X, Y):
        """Negative mean weighted joint loss (higher is better)."""
        check_is_fitted(self, "model_")
        X = check_inputs(X, self.n_features_in_)
        return -float(self.model_.joint_losses(X, Y).mean())
