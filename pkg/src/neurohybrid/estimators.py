"""scikit-learn style wrappers around the CNN and the two-stage hybrid.

Inputs are mappings rather than 2D arrays: one ``[N, C, D, H, W]`` array per
branch, plus a ``"volume"`` entry of shape ``[N, 12]`` for the hybrid.
"""

from __future__ import annotations

from dataclasses import asdict
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import voltensor as vt
from .cohort.structures import BRANCHES
from .fusion import fit_logreg, fuse
from .netarch import ArchitectureConfig, build_model, check_batch, extract_features, predict_proba
from .trainer import Dataset, TrainConfig, train


def _binary_labels(y) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    classes = np.unique(y)
    if classes.size != 2:
        raise ValueError(f"binary labels required, got classes {classes.tolist()}")
    return classes, (y == classes[1]).astype(int)


def _branches(X: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    missing = [b for b in BRANCHES if b not in X]
    if missing:
        raise ValueError(f"input lacks branches {missing}")
    return {b: np.asarray(X[b]) for b in BRANCHES}


class CNNClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Three-branch 3D CNN; ``transform`` returns the dense-layer features.

    Parameters
    ----------
    arch : dict or None
        ``ArchitectureConfig`` fields; defaults when None.
    training : dict or None
        ``TrainConfig`` fields; defaults when None.
    seed : int
        Weight-initialization seed.
    precision : {"float32", "float64"}
    """

    def __init__(self, arch=None, training=None, seed=0, precision="float32", threshold=0.5):
        self.arch = arch
        self.training = training
        self.seed = seed
        self.precision = precision
        self.threshold = threshold

    def fit(self, X, y):
        cfg = ArchitectureConfig.from_dict(self.arch or {})
        batch = _branches(X)
        n = check_batch(cfg, batch)
        self.classes_, yb = _binary_labels(y)
        if yb.shape != (n,):
            raise ValueError(f"{n} samples but {yb.shape[0]} labels")
        tcfg = TrainConfig(**{**asdict(TrainConfig()), **(self.training or {})})
        with vt.precision(self.precision):
            model = build_model(cfg, self.seed, np.dtype(self.precision))
            self.model_, self.history_ = train(model, Dataset(batch, yb, [str(i) for i in range(n)]), tcfg)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = predict_proba(self.model_, _branches(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        p = self.predict_proba(X)[:, 1]
        return self.classes_[(p >= self.threshold).astype(int)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        return extract_features(self.model_, _branches(X))


class HybridClassifier(ClassifierMixin, BaseEstimator):
    """CNN features fused with volumes, classified by weighted L2 logistic regression.

    ``cnn`` is a fitted or unfitted :class:`CNNClassifier`; an unfitted one
    is cloned and trained on the same data first.
    """

    def __init__(self, cnn=None, l2=1.0, class_weight="balanced", threshold=0.5):
        self.cnn = cnn
        self.l2 = l2
        self.class_weight = class_weight
        self.threshold = threshold

    def _fused(self, X):
        if "volume" not in X:
            raise ValueError("input lacks the 'volume' entry")
        return fuse(self.cnn_.transform(X), np.asarray(X["volume"], dtype=np.float64))

    def fit(self, X, y):
        self.classes_, yb = _binary_labels(y)
        cnn = self.cnn if self.cnn is not None else CNNClassifier()
        try:
            check_is_fitted(cnn, "model_")
        except NotFittedError:
            cnn = clone(cnn).fit(X, y)
        self.cnn_ = cnn
        self.logreg_ = fit_logreg(self._fused(X), yb, self.l2, self.class_weight)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "logreg_")
        p = self.logreg_.predict_proba(self._fused(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        p = self.predict_proba(X)[:, 1]
        return self.classes_[(p >= self.threshold).astype(int)]
