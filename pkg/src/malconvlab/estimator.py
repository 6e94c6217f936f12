"""Scikit-learn estimator facade over the byte-sequence CNN."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import model as M
from .validation import check_binary_labels


class MalConvClassifier(BaseEstimator, ClassifierMixin):
    """Binary malware classifier over raw byte strings.

    ``X`` is a sequence of byte strings (bytes, bytearray, memoryview or
    uint8 arrays), ``y`` is 0 (benign) / 1 (malware). ``seed`` drives the
    parameter init; batch shuffling uses ``seed + 1`` so the two random
    streams never collide.

    >>> clf = MalConvClassifier(max_len=1024, epochs=2).fit(X, y)
    >>> clf.predict_proba(X)[:, 1]   # malware scores
    """

    def __init__(
        self,
        max_len: int = 4096,
        embed_dim: int = 8,
        kernel_size: int = 50,
        stride: int | None = None,
        num_filters: int = 32,
        hidden_units: int = 32,
        learning_rate: float = 0.01,
        momentum: float = 0.9,
        decay: float = 0.98,
        batch_size: int = 32,
        epochs: int = 10,
        seed: int = 0,
    ):
        self.max_len = max_len
        self.embed_dim = embed_dim
        self.kernel_size = kernel_size
        self.stride = stride
        self.num_filters = num_filters
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay = decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _hyper(self) -> M.Hyperparams:
        return M.Hyperparams(
            max_len=self.max_len,
            embed_dim=self.embed_dim,
            kernel_size=self.kernel_size,
            stride=self.stride,
            num_filters=self.num_filters,
            hidden_units=self.hidden_units,
            seed=self.seed,
        )

    def _train_config(self) -> M.TrainConfig:
        return M.TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            decay=self.decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed + 1,
        )

    def fit(self, X, y):
        y = check_binary_labels(y)
        self.model_ = M.MalConvModel(self._hyper())
        self.history_ = M.train(self.model_, list(X), y, self._train_config())
        self.classes_ = np.array([M.BENIGN, M.MALWARE])
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This MalConvClassifier instance is not fitted yet; call fit first."
            )

    def decision_scores(self, X) -> np.ndarray:
        """Malware score in [0, 1] for every sample."""
        self._check_fitted()
        return M.predict_scores(self.model_, list(X))

    def predict_proba(self, X) -> np.ndarray:
        scores = self.decision_scores(X)
        return np.column_stack([1.0 - scores, scores])

    def predict(self, X) -> np.ndarray:
        return (self.decision_scores(X) > M.MALWARE_THRESHOLD).astype(np.int64)
