"""scikit-learn compatible wrappers around the gesture network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import LabeledDataset
from .exceptions import ConfigError
from .model import DEFAULT_DROPOUT, build, export_deployed
from .train import TrainConfig, fit
from .validation import check_images, check_uint8_images, check_X_y


class GestureCNNClassifier(ClassifierMixin, BaseEstimator):
    """Two-conv, two-dense image classifier trained with Adam and early stopping.

    Parameters mirror the training protocol: a stratified hold-out of
    ``validation_fraction`` drives early stopping with ``patience``, and the
    weights of the epoch with the lowest validation loss are kept.
    ``class_weight`` maps class labels to loss weights.

    Attributes set by ``fit``: ``classes_``, ``graph_``, ``checkpoint_``,
    ``history_``, ``n_epochs_``.
    """

    def __init__(self, input_size=96, batch_size=32, max_epochs=25, patience=3,
                 learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 class_weight=None, hflip_prob=0.5, validation_fraction=0.15,
                 dropout=DEFAULT_DROPOUT, random_state=0):
        self.input_size = input_size
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.class_weight = class_weight
        self.hflip_prob = hflip_prob
        self.validation_fraction = validation_fraction
        self.dropout = dropout
        self.random_state = random_state

    def _train_config(self):
        weights = None
        if self.class_weight is not None:
            unknown = set(self.class_weight) - set(self.classes_.tolist())
            if unknown:
                raise ConfigError(f"class_weight names unknown classes {sorted(unknown)}")
            weights = [float(self.class_weight.get(c, 1.0)) for c in self.classes_.tolist()]
        return TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, learning_rate=self.learning_rate,
                           beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
                           class_weights=weights, hflip_prob=self.hflip_prob,
                           split_fraction=1.0 - self.validation_fraction,
                           seed=self.random_state)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        X = check_uint8_images(X)
        check_images(X, self.input_size)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("need at least two classes")
        dataset = LabeledDataset(X, encoded, [str(c) for c in self.classes_])
        self.graph_ = build(self.input_size, len(self.classes_), seed=self.random_state,
                            dropout=tuple(self.dropout))
        self.checkpoint_, self.history_ = fit(self.graph_, dataset, self._train_config())
        self.n_epochs_ = len(self.history_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "graph_")
        return self.graph_.predict_proba(check_images(X, self.input_size))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def export(self, precision="f32", X_calib=None):
        """Deployable copy of the best-epoch weights at ``precision``."""
        check_is_fitted(self, "checkpoint_")
        calib = None if X_calib is None else check_images(X_calib, self.input_size)
        return export_deployed(self.checkpoint_, precision, calib)


class QuantizedClassifier(ClassifierMixin, BaseEstimator):
    """Post-training quantized view of a fitted :class:`GestureCNNClassifier`.

    ``fit`` takes the representative images used for calibration; labels
    are ignored.
    """

    def __init__(self, estimator=None, precision="i8"):
        self.estimator = estimator
        self.precision = precision

    def fit(self, X, y=None):
        if self.estimator is None:
            raise ConfigError("QuantizedClassifier needs a fitted estimator")
        check_is_fitted(self.estimator, "checkpoint_")
        self.classes_ = self.estimator.classes_
        self.deployed_ = self.estimator.export(self.precision, X)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "deployed_")
        return self.deployed_.predict_proba(check_images(X, self.deployed_.input_size))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
