"""Stage two: CNN features fused with ICV-normalized volumes in a weighted L2 logistic regression."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets, type_of_target
from sklearn.utils.validation import check_is_fitted, validate_data

from .trainer import class_weights as balanced_weights

log = logging.getLogger(__name__)

N_VOLUMES = 12
STD_FLOOR = 1e-8


def fuse(cnn_features, volumes) -> np.ndarray:
    """Concatenate CNN features (first) with the 12 volumes.

    Accepts single vectors or row-aligned matrices.
    """
    cnn = np.asarray(cnn_features, dtype=np.float64)
    vol = np.asarray(volumes, dtype=np.float64)
    if vol.shape[-1] != N_VOLUMES:
        raise ValueError(f"expected {N_VOLUMES} volumes, got {vol.shape[-1]}")
    if cnn.ndim != vol.ndim or (cnn.ndim == 2 and cnn.shape[0] != vol.shape[0]):
        raise ValueError(f"cannot fuse shapes {cnn.shape} and {vol.shape}")
    return np.concatenate([cnn, vol], axis=-1)


@dataclass
class StandardizerStats:
    mean: np.ndarray
    std: np.ndarray


def fit_standardizer(X) -> StandardizerStats:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need a 2D matrix with at least two rows, got shape {X.shape} (n_samples={X.shape[0] if X.ndim else 0})")
    return StandardizerStats(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))


def apply_standardizer(stats: StandardizerStats, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"expected {stats.mean.shape[0]} features, got {X.shape[-1]}")
    return (X - stats.mean) / stats.std


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    lam: float
    mean: np.ndarray
    std: np.ndarray
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0

    def decision(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.weights.shape[0]:
            raise ValueError(f"expected {self.weights.shape[0]} features, got {X.shape[-1]}")
        return ((X - self.mean) / self.std) @ self.weights + self.bias

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision(X))

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("weights", "mean", "std"):
            d[k] = [float(v) for v in d[k]]
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LogRegModel":
        d = json.loads(text)
        for k in ("weights", "mean", "std"):
            d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _objective(theta, Xa, y, s, lam):
    z = Xa @ theta
    # log(1 + e^z) - y z, computed stably
    nll = np.logaddexp(0.0, z) - y * z
    return float(s @ nll + 0.5 * lam * theta[:-1] @ theta[:-1])


def fit_logreg(
    X,
    y,
    lam: float = 1.0,
    class_weights=None,
    standardize: bool = True,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> LogRegModel:
    """Minimize ``sum_i s_i NLL_i + lam/2 ||w||^2`` (bias unpenalized) by damped Newton.

    ``class_weights`` is ``None`` (unit), ``"balanced"`` or a
    ``(w_neg, w_pos)`` pair.  Iterates until the gradient norm drops below
    ``tol``; otherwise the returned model is flagged ``converged=False``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"X must be [n, d] and y [n]; got {X.shape}, {y.shape}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if class_weights is None:
        cw = (1.0, 1.0)
    elif isinstance(class_weights, str):
        if class_weights != "balanced":
            raise ValueError(f"unknown class weighting {class_weights!r}")
        cw = balanced_weights(y.astype(int))
    else:
        cw = tuple(float(v) for v in class_weights)
    if y.min() == y.max():
        raise ValueError("both classes must be present")

    if standardize:
        stats = fit_standardizer(X)
    else:
        stats = StandardizerStats(np.zeros(X.shape[1]), np.ones(X.shape[1]))
    Z = (X - stats.mean) / stats.std
    n, d = Z.shape
    Xa = np.hstack([Z, np.ones((n, 1))])
    s = np.where(y == 1, cw[1], cw[0])
    reg = np.full(d + 1, lam)
    reg[-1] = 0.0

    theta = np.zeros(d + 1)
    f = _objective(theta, Xa, y, s, lam)
    converged = False
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(Xa @ theta)
        grad = Xa.T @ (s * (p - y)) + reg * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            converged = True
            it -= 1
            break
        H = (Xa * (s * p * (1 - p))[:, None]).T @ Xa + np.diag(reg)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta - t * step
            fc = _objective(cand, Xa, y, s, lam)
            if fc <= f - 1e-4 * t * (grad @ step) or t < 1e-10:
                break
            t *= 0.5
        if fc > f:
            break
        theta, f = cand, fc
    if not converged:
        log.warning("fit_logreg: gradient norm %.3g after %d iterations", gnorm, it)
    return LogRegModel(theta[:-1].copy(), float(theta[-1]), float(lam), stats.mean, stats.std,
                       converged, it, gnorm)


def decide(probability, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probability) >= threshold).astype(int)


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-feature z-scoring with a floored standard deviation."""

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        self.stats_ = fit_standardizer(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return apply_standardizer(self.stats_, validate_data(self, X, dtype=np.float64, reset=False))


class L2LogisticRegression(ClassifierMixin, BaseEstimator):
    """Class-weighted, L2-penalized logistic regression on standardized features.

    Parameters
    ----------
    l2 : float
        Penalty strength on the weights (the bias is not penalized).
    class_weight : {"balanced", None}, dict or (w_neg, w_pos)
        A dict maps class labels to sample weights.
    standardize : bool
        Z-score features with training statistics before fitting.
    threshold : float
        Decision threshold used by :meth:`predict`.
    """

    def __init__(self, l2=1.0, class_weight="balanced", standardize=True, tol=1e-6, max_iter=100, threshold=0.5):
        self.l2 = l2
        self.class_weight = class_weight
        self.standardize = standardize
        self.tol = tol
        self.max_iter = max_iter
        self.threshold = threshold

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.classifier_tags.multi_class = False
        return tags

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if self.classes_.size == 1:
            raise ValueError("both classes must be present; one class cannot be fitted")
        y_type = type_of_target(y, input_name="y")
        if y_type != "binary":
            raise ValueError(f"Only binary classification is supported. The type of the target is {y_type}.")
        yb = (y == self.classes_[1]).astype(int)
        cw = self.class_weight
        if isinstance(cw, dict):
            cw = (float(cw.get(self.classes_[0], 1.0)), float(cw.get(self.classes_[1], 1.0)))
        self.model_ = fit_logreg(X, yb, self.l2, cw, self.standardize, self.tol, self.max_iter)
        self.n_iter_ = self.model_.n_iter
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision(validate_data(self, X, dtype=np.float64, reset=False))

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[decide(self.predict_proba(X)[:, 1], self.threshold)]
