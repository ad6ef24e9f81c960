"""scikit-learn style wrappers around source training and online adaptation.

``SourceClassifier`` fits a source model; ``TestTimeAdapter`` adapts a copy
of a fitted classifier on unlabeled batches.  Both follow the usual
estimator contract: hyperparameters live in ``__init__`` untouched, fitted
state ends in ``_``, inputs go through sklearn's validation helpers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from .autodiff import Tensor
from .errors import ConfigError
from .losses import class_logits, make_loss, predict_labels
from .models import USE_BATCH, USE_RUNNING, Model, forward_t, linear_model, mlp_model, train_source
from .tta import TTAConfig, adapt_online, make_optimizer, make_stream, _step


def _proba(spec, logits: np.ndarray) -> np.ndarray:
    return class_logits(spec, Tensor(logits)).softmax(axis=-1).data.copy()


class SourceClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained by mini-batch SGD on one of the supported losses.

    ``architecture="linear"`` is a single affine map; ``"mlp"`` stacks
    affine, batch-norm and ReLU blocks of the given ``hidden`` widths.
    The exponential loss needs exactly two classes and a linear model with a
    single output score.
    """

    def __init__(
        self,
        loss="cross_entropy",
        loss_params=None,
        architecture="linear",
        hidden=(64, 64),
        lr=0.1,
        epochs=10,
        batch_size=64,
        momentum=0.0,
        random_state=0,
    ):
        self.loss = loss
        self.loss_params = loss_params
        self.architecture = architecture
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.random_state = random_state

    def _internal_labels(self, y) -> np.ndarray:
        idx = np.searchsorted(self.classes_, y)
        return np.where(idx == 1, 1, -1) if self.spec_.kind == "exponential" else idx

    def _build(self, n_features: int) -> Model:
        width = self.spec_.width
        if self.architecture == "linear":
            return linear_model(n_features, width, seed=self.random_state)
        if self.architecture == "mlp":
            if self.spec_.kind == "exponential":
                raise ConfigError("the exponential loss is only supported with architecture='linear'")
            return mlp_model(n_features, width, hidden=tuple(self.hidden), seed=self.random_state)
        raise ConfigError(f"unknown architecture {self.architecture!r}")

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("y contains 1 class; need at least two")
        self.spec_ = make_loss(self.loss, self.loss_params, num_classes=len(self.classes_))
        model = self._build(X.shape[1])
        self.model_ = train_source(
            model, X, self._internal_labels(y), self.spec_,
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
            seed=self.random_state, momentum=self.momentum,
        )
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self)
        return validate_data(self, X, dtype=np.float64, reset=False)

    def decision_function(self, X) -> np.ndarray:
        """Logits per class; for two classes a single score favouring ``classes_[1]``."""
        X = self._check(X)
        out = forward_t(self.model_, X, USE_RUNNING)[0].data.copy()
        if self.spec_.kind == "exponential":
            return out[:, 0]
        return out[:, 1] - out[:, 0] if out.shape[1] == 2 else out

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        return _proba(self.spec_, forward_t(self.model_, X, USE_RUNNING)[0].data)

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        logits = forward_t(self.model_, X, USE_RUNNING)[0].data
        pred = predict_labels(self.spec_, logits)
        return self.classes_[(pred > 0).astype(int)] if self.spec_.kind == "exponential" else self.classes_[pred]


class TestTimeAdapter(BaseEstimator):
    """Online test-time adaptation of a fitted :class:`SourceClassifier`.

    ``fit(X)`` runs one adapt-then-predict pass over ``X`` split into
    batches of ``batch_size``; passing ``y`` as well stores the online
    report in ``report_``.  ``partial_fit`` takes one step on one batch.
    Predictions use batch statistics when the adapted model has batch norm
    and ``method`` is not ``"none"``.
    """

    __test__ = False  # not a pytest class despite the name

    def __init__(
        self,
        source=None,
        method="conjugate_pl",
        lr=1e-3,
        temperature=1.0,
        mask="bn_only",
        confidence_threshold=0.9,
        q=0.8,
        optimizer="sgd",
        batch_size=200,
        bn_stats="replace",
        random_state=0,
    ):
        self.source = source
        self.method = method
        self.lr = lr
        self.temperature = temperature
        self.mask = mask
        self.confidence_threshold = confidence_threshold
        self.q = q
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.bn_stats = bn_stats
        self.random_state = random_state

    def _config(self) -> TTAConfig:
        return TTAConfig(
            method=self.method, lr=self.lr, temperature=self.temperature, mask=self.mask,
            confidence_threshold=self.confidence_threshold, q=self.q, optimizer=self.optimizer,
            seed=self.random_state, batch_size=self.batch_size, bn_stats=self.bn_stats,
        )

    def _start(self):
        if self.source is None:
            raise ValueError("TestTimeAdapter needs a fitted SourceClassifier as `source`")
        check_is_fitted(self.source, "model_")
        self.config_ = self._config()
        self.model_ = self.source.model_.copy()
        self.spec_ = self.source.spec_
        self.classes_ = self.source.classes_
        self.n_features_in_ = self.source.n_features_in_
        self.optimizer_ = make_optimizer(self.config_)
        self.n_steps_ = 0

    def _check(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def fit(self, X, y=None):
        self._start()
        X = self._check(X)
        if y is None:
            for i, (xb, _) in enumerate(make_stream(X, np.zeros(len(X)), self.batch_size)):
                _step(self.model_, xb, self.spec_, self.config_, self.optimizer_, i)
            self.n_steps_ = i + 1
            self.report_ = None
            return self
        labels = self.source._internal_labels(np.asarray(y))
        self.report_ = adapt_online(self.model_, make_stream(X, labels, self.batch_size), self.spec_, self.config_)
        self.n_steps_ = len(self.report_.per_batch)
        return self

    def partial_fit(self, X, y=None):
        if not hasattr(self, "model_"):
            self._start()
        _step(self.model_, self._check(X), self.spec_, self.config_, self.optimizer_, self.n_steps_)
        self.n_steps_ += 1
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._check(X)
        stats = USE_BATCH if (self.model_.has_bn and self.method != "none" and len(X) > 1) else USE_RUNNING
        return forward_t(self.model_, X, stats)[0].data

    def predict_proba(self, X) -> np.ndarray:
        return _proba(self.spec_, self._logits(X))

    def predict(self, X) -> np.ndarray:
        pred = predict_labels(self.spec_, self._logits(X))
        return self.classes_[(pred > 0).astype(int)] if self.spec_.kind == "exponential" else self.classes_[pred]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))
