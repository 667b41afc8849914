"""scikit-learn style estimators over the WSN and SoftNet engines."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, SessionSpec, Task
from .errors import ConfigError, MissingHeadError, SessionSpecError
from .fscil import (
    FSCILConfig,
    PrototypeStore,
    compute_prototypes,
    extract_features,
    ncm_predict,
    train_base,
    train_incremental,
)
from .masks import AccumMask, accumulate
from .nn import forward, init_store
from .til import TILRunConfig, train_task


class WSNClassifier(ClassifierMixin, BaseEstimator):
    """Task-incremental classifier; one winning subnetwork and head per task.

    Call :meth:`fit` for the first task and :meth:`partial_fit` for every
    later one.  Prediction needs the task id (defaults to the latest).
    """

    def __init__(
        self,
        hidden_sizes=(64, 64),
        capacity=30.0,
        epochs=5,
        batch_size=64,
        optimizer="adam",
        lr=1e-3,
        mode="wsn",
        inference_eps=1e-3,
        random_state=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.capacity = capacity
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.mode = mode
        self.inference_eps = inference_eps
        self.random_state = random_state

    def _config(self):
        return TILRunConfig(
            capacity=self.capacity,
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            seed=self.random_state,
            mode=self.mode,
            inference_eps=self.inference_eps,
            hidden_sizes=self.hidden_sizes,
        )

    def fit(self, X, y, task=1):
        for attr in ("store_", "masks_", "accum_", "task_classes_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X, y, task=task)

    def partial_fit(self, X, y, task=None):
        X, y = check_X_y(X, y)
        config = self._config()
        if not hasattr(self, "store_"):
            self.store_ = init_store([X.shape[1], *config.hidden_sizes], config.seed)
            self.masks_ = {}
            self.accum_ = AccumMask.zeros(self.store_.weight_shapes)
            self.task_classes_ = {}
        if hasattr(self, "n_features_in_") and X.shape[1] != self.n_features_in_:
            raise ConfigError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if task is None:
            task = max(self.masks_, default=0) + 1
        task = int(task)
        if task in self.masks_:
            raise ConfigError(f"task {task} was already learned")
        classes, encoded = np.unique(y, return_inverse=True)
        data = Dataset(X, encoded, len(classes))
        mask = train_task(self.store_, self.accum_, task, Task(data, data), config)
        self.masks_[task] = mask
        self.accum_ = accumulate(self.accum_, mask)
        self.task_classes_[task] = classes
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        self.last_task_ = task
        return self

    def _task(self, task):
        check_is_fitted(self, "masks_")
        task = self.last_task_ if task is None else int(task)
        if task not in self.masks_:
            raise MissingHeadError(f"task {task} has not been learned")
        return task

    def decision_function(self, X, task=None):
        task = self._task(task)
        X = check_array(X)
        logits, _ = forward(self.store_, self.masks_[task], task, X)
        return logits

    def predict_proba(self, X, task=None):
        logits = self.decision_function(X, task)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, task=None):
        task = self._task(task)
        return self.task_classes_[task][self.decision_function(X, task).argmax(axis=1)]

    def score(self, X, y, task=None, sample_weight=None):
        pred = self.predict(X, task)
        return float(np.average(pred == np.asarray(y), weights=sample_weight))


class SoftNetFSCIL(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Few-shot class-incremental learner with a frozen soft subnetwork.

    ``fit`` runs the base session; each ``partial_fit`` call is one few-shot
    session of new classes.  ``predict`` is nearest-class-mean over every
    class seen so far and ``transform`` returns the penultimate features.
    """

    def __init__(
        self,
        hidden_sizes=(64, 64),
        capacity=80.0,
        base_epochs=50,
        base_lr=1e-3,
        batch_size=32,
        inc_epochs=6,
        inc_lr=0.02,
        temperature=1.0,
        random_state=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.capacity = capacity
        self.base_epochs = base_epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.inc_epochs = inc_epochs
        self.inc_lr = inc_lr
        self.temperature = temperature
        self.random_state = random_state

    def _config(self):
        return FSCILConfig(
            capacity=self.capacity,
            base_epochs=self.base_epochs,
            base_lr=self.base_lr,
            batch_size=self.batch_size,
            inc_epochs=self.inc_epochs,
            inc_lr=self.inc_lr,
            temperature=self.temperature,
            seed=self.random_state,
            hidden_sizes=self.hidden_sizes,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        y = y.astype(np.int64)
        config = self._config()
        self.store_ = init_store([X.shape[1], *config.hidden_sizes], config.seed)
        self.soft_mask_, _ = train_base(self.store_, X, y, config)
        base = np.unique(y)
        self.prototypes_ = compute_prototypes(self.store_, self.soft_mask_, X, y, base, into=PrototypeStore())
        self.n_features_in_ = X.shape[1]
        self.classes_ = base
        self.n_sessions_ = 1
        return self

    def partial_fit(self, X, y):
        check_is_fitted(self, "soft_mask_")
        X, y = check_X_y(X, y)
        y = y.astype(np.int64)
        new = np.unique(y)
        if np.isin(new, self.classes_).any():
            raise SessionSpecError("a few-shot session must only contain new classes")
        data = Dataset(X, y, int(max(new.max(), self.classes_.max())) + 1)
        session = SessionSpec(self.n_sessions_ + 1, tuple(int(c) for c in new), data, data)
        train_incremental(self.store_, self.soft_mask_, session, self.prototypes_, self._config())
        self.classes_ = np.union1d(self.classes_, new)
        self.n_sessions_ += 1
        return self

    def transform(self, X):
        check_is_fitted(self, "soft_mask_")
        return extract_features(self.store_, self.soft_mask_, check_array(X))

    def predict(self, X):
        check_is_fitted(self, "soft_mask_")
        return ncm_predict(self.store_, self.soft_mask_, self.prototypes_, check_array(X))
