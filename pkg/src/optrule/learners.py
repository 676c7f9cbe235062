"""Candidate regression learners for the stacking ensemble.

Four self-contained algorithms spanning the bias-variance range: a constant
mean, ridge-able linear least squares via the normal equations, k-nearest
neighbors, and a depth-limited regression tree grown on variance reduction.
All follow the scikit-learn estimator API (fit/predict/get_params) so they
compose with the wider ecosystem; hyperparameters are validated at fit time.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import as_float_array
from .errors import ValidationError

logger = logging.getLogger(__name__)


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = as_float_array(X, "X", ndim=2)
    y = as_float_array(y, "y", ndim=1)
    if X.shape[0] != y.shape[0]:
        raise ValidationError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if X.shape[0] == 0:
        raise ValidationError("cannot fit on an empty sample")
    return X, y


def _check_dim(X, dim: int) -> np.ndarray:
    X = as_float_array(X, "X", ndim=2)
    if X.shape[1] != dim:
        raise ValidationError(f"X has {X.shape[1]} columns, expected {dim}")
    return X


class ConstantMeanRegressor(BaseEstimator, RegressorMixin):
    """Predicts the training mean everywhere."""

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        self.n_features_in_ = X.shape[1]
        self.mean_ = float(y.mean())
        return self

    def predict(self, X):
        X = _check_dim(X, self.n_features_in_)
        return np.full(X.shape[0], self.mean_)

    def to_state(self) -> dict:
        return {"n_features": self.n_features_in_, "mean": self.mean_}

    @classmethod
    def from_state(cls, state: dict) -> "ConstantMeanRegressor":
        out = cls()
        out.n_features_in_ = int(state["n_features"])
        out.mean_ = float(state["mean"])
        return out


class LinearLeastSquaresRegressor(BaseEstimator, RegressorMixin):
    """Linear least squares via the normal equations, with an optional ridge
    penalty on the non-intercept coefficients.

    ridge=None (default) applies a trace-scaled jitter of 1e-8 to keep the
    system well posed; an explicit ridge of exactly 0 is permitted but falls
    back to the constant mean on a singular system instead of failing.
    """

    def __init__(self, ridge: float | None = None):
        self.ridge = ridge

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        if self.ridge is not None and self.ridge < 0:
            raise ValidationError(f"ridge must be nonnegative, got {self.ridge!r}")
        self.n_features_in_ = X.shape[1]
        n, p = X.shape
        Z = np.column_stack([np.ones(n), X])
        G = Z.T @ Z
        if self.ridge is None:
            lam = 1e-8 * (np.trace(G) - n) / max(p, 1)  # trace of X'X, scaled
        else:
            lam = float(self.ridge)
        G[1:, 1:] += lam * np.eye(p)
        self.fallback_ = False
        try:
            beta = np.linalg.solve(G, Z.T @ y)
        except np.linalg.LinAlgError:
            beta = None
        if beta is None or not np.all(np.isfinite(beta)):
            logger.warning(
                "singular linear system with ridge=%r; falling back to the constant mean",
                self.ridge,
            )
            self.fallback_ = True
            beta = np.zeros(p + 1)
            beta[0] = y.mean()
        self.intercept_ = float(beta[0])
        self.coef_ = beta[1:].copy()
        return self

    def predict(self, X):
        X = _check_dim(X, self.n_features_in_)
        return self.intercept_ + X @ self.coef_

    def to_state(self) -> dict:
        return {
            "n_features": self.n_features_in_,
            "intercept": self.intercept_,
            "coef": self.coef_.tolist(),
            "fallback": self.fallback_,
        }

    @classmethod
    def from_state(cls, state: dict) -> "LinearLeastSquaresRegressor":
        out = cls()
        out.n_features_in_ = int(state["n_features"])
        out.intercept_ = float(state["intercept"])
        out.coef_ = np.asarray(state["coef"], dtype=float)
        out.fallback_ = bool(state["fallback"])
        return out


class KNearestNeighborsRegressor(BaseEstimator, RegressorMixin):
    """Mean of the k nearest training points (Euclidean distance, distance
    ties broken by training index). k=None defaults to ceil(sqrt(n)) of the
    fit sample."""

    _CHUNK = 256  # query rows per distance block, bounds memory at large n

    def __init__(self, k: int | None = None):
        self.k = k

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        n = X.shape[0]
        if self.k is None:
            k = math.isqrt(n)
            if k * k < n:
                k += 1
        else:
            k = int(self.k)
            if k < 1:
                raise ValidationError(f"k must be a positive integer, got {self.k!r}")
            if k > n:
                raise ValidationError(f"k={k} exceeds the fit sample size {n}")
        self.n_features_in_ = X.shape[1]
        self.k_ = k
        self.train_x_ = X.copy()
        self.train_y_ = y.copy()
        return self

    def predict(self, X):
        X = _check_dim(X, self.n_features_in_)
        out = np.empty(X.shape[0])
        k = self.k_
        n_train = self.train_x_.shape[0]
        idx_key = np.arange(n_train)
        for start in range(0, X.shape[0], self._CHUNK):
            block = X[start : start + self._CHUNK]
            d2 = ((block[:, None, :] - self.train_x_[None, :, :]) ** 2).sum(axis=2)
            keys = np.broadcast_to(idx_key, d2.shape)
            nearest = np.lexsort((keys, d2), axis=1)[:, :k]
            out[start : start + self._CHUNK] = self.train_y_[nearest].mean(axis=1)
        return out

    def to_state(self) -> dict:
        return {
            "n_features": self.n_features_in_,
            "k": self.k_,
            "train_x": self.train_x_.tolist(),
            "train_y": self.train_y_.tolist(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "KNearestNeighborsRegressor":
        out = cls(k=int(state["k"]))
        out.n_features_in_ = int(state["n_features"])
        out.k_ = int(state["k"])
        out.train_x_ = np.asarray(state["train_x"], dtype=float).reshape(
            -1, int(state["n_features"])
        )
        out.train_y_ = np.asarray(state["train_y"], dtype=float)
        return out


class TreeStumpRegressor(BaseEstimator, RegressorMixin):
    """Depth-limited regression tree grown greedily on variance reduction.

    Splits are exact: every midpoint between consecutive distinct feature
    values is scored, and the first best (feature order, then threshold
    order) wins. Depth must lie in 1..4.
    """

    def __init__(self, depth: int = 2):
        self.depth = depth

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        if not 1 <= int(self.depth) <= 4:
            raise ValidationError(f"depth must lie in 1..4, got {self.depth!r}")
        self.n_features_in_ = X.shape[1]
        self.tree_ = self._grow(X, y, int(self.depth))
        return self

    def _grow(self, X, y, depth: int):
        node = {"value": float(y.mean())}
        if depth == 0 or y.shape[0] < 2:
            return node
        best = self._best_split(X, y)
        if best is None:
            return node
        feature, threshold = best
        left = X[:, feature] <= threshold
        node["feature"] = feature
        node["threshold"] = threshold
        node["left"] = self._grow(X[left], y[left], depth - 1)
        node["right"] = self._grow(X[~left], y[~left], depth - 1)
        return node

    @staticmethod
    def _best_split(X, y):
        n = y.shape[0]
        total = y.sum()
        best_gain = 0.0
        best = None
        for feature in range(X.shape[1]):
            order = np.argsort(X[:, feature], kind="stable")
            xs = X[order, feature]
            ys = y[order]
            cum = np.cumsum(ys)[:-1]
            counts = np.arange(1, n)
            # SSE reduction is maximal where sum_left^2/n_left + sum_right^2/n_right is
            gain = cum**2 / counts + (total - cum) ** 2 / (n - counts) - total**2 / n
            valid = xs[:-1] < xs[1:]
            if not valid.any():
                continue
            gain = np.where(valid, gain, -np.inf)
            idx = int(np.argmax(gain))
            if gain[idx] > best_gain:
                best_gain = float(gain[idx])
                best = (feature, float(0.5 * (xs[idx] + xs[idx + 1])))
        return best

    def predict(self, X):
        X = _check_dim(X, self.n_features_in_)
        out = np.empty(X.shape[0])
        for i, row in enumerate(X):
            node = self.tree_
            while "feature" in node:
                node = node["left"] if row[node["feature"]] <= node["threshold"] else node["right"]
            out[i] = node["value"]
        return out

    def to_state(self) -> dict:
        return {"n_features": self.n_features_in_, "depth": int(self.depth), "tree": self.tree_}

    @classmethod
    def from_state(cls, state: dict) -> "TreeStumpRegressor":
        out = cls(depth=int(state["depth"]))
        out.n_features_in_ = int(state["n_features"])
        out.tree_ = state["tree"]
        return out


LEARNER_KINDS = {
    "constant_mean": ConstantMeanRegressor,
    "linear_least_squares": LinearLeastSquaresRegressor,
    "k_nearest": KNearestNeighborsRegressor,
    "tree_stump": TreeStumpRegressor,
}

_CLI_ALIASES = {
    "constant": "constant_mean",
    "linear": "linear_least_squares",
    "knn": "k_nearest",
    "stump": "tree_stump",
}


def learner_kind(estimator) -> str:
    for kind, cls in LEARNER_KINDS.items():
        if type(estimator) is cls:
            return kind
    raise ValidationError(f"unknown learner type {type(estimator).__name__}")


def parse_learners(names: str) -> list:
    """Build learner instances from a comma-separated list of CLI names
    (constant, linear, knn, stump)."""
    items = [tok.strip() for tok in names.split(",") if tok.strip()]
    if not items:
        raise ValidationError("at least one learner is required")
    out = []
    for tok in items:
        kind = _CLI_ALIASES.get(tok, tok)
        if kind not in LEARNER_KINDS:
            raise ValidationError(
                f"unknown learner {tok!r}; choose from {', '.join(sorted(_CLI_ALIASES))}"
            )
        out.append(LEARNER_KINDS[kind]())
    return out
