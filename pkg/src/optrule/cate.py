"""Conditional-average-treatment-effect estimation from trial data.

The estimation target is the function mapping covariates c to
E[Y | A=1, c] - E[Y | A=0, c]. Each observation is transformed into a
pseudo-outcome whose conditional mean given covariates equals that function
for any fixed centering function f, and the pseudo-outcomes are regressed on
covariates by a cross-validated convex stacking ensemble: candidate learners
are fit per training fold, their held-out predictions are combined with
simplex-constrained least-squares weights, and the weights are applied to
full-data fits of the same candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone

from ._validation import as_float_array
from .data import Design, TrialDataset, TrialRecord
from .errors import ValidationError
from .learners import LinearLeastSquaresRegressor, learner_kind, LEARNER_KINDS, parse_learners
from .rng import generator

F_MODES = ("zero", "outcome")


def pseudo_outcome(record: TrialRecord, f) -> float:
    """Transformed outcome for one record: with a = record.treatment,

        (2a - 1) / P(A = a | c) * (y - f(a, c)) + f(1, c) - f(0, c)

    ``f`` maps (a, covariates) to a real; its output must be finite.
    """
    c = np.asarray(record.covariates, dtype=float)
    f_obs = float(f(record.treatment, c))
    f1 = float(f(1, c))
    f0 = float(f(0, c))
    if not (np.isfinite(f_obs) and np.isfinite(f1) and np.isfinite(f0)):
        raise ValidationError("centering function returned a non-finite value")
    sign = 2 * record.treatment - 1
    return sign / record.propensity * (record.outcome - f_obs) + f1 - f0


def _pseudo_values(
    y: np.ndarray, a: np.ndarray, propensity: np.ndarray,
    f_obs: np.ndarray, f1: np.ndarray, f0: np.ndarray,
) -> np.ndarray:
    return (2 * a - 1) / propensity * (y - f_obs) + f1 - f0


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Record-to-fold map with fold ids 1..k and sizes differing by at most 1."""

    fold_of: np.ndarray
    k: int

    def __post_init__(self):
        fold_of = np.asarray(self.fold_of, dtype=np.int64)
        if fold_of.ndim != 1:
            raise ValidationError("fold_of must be one-dimensional")
        if self.k < 1 or fold_of.min(initial=1) < 1 or fold_of.max(initial=self.k) > self.k:
            raise ValidationError("fold ids must lie in 1..k")
        sizes = np.bincount(fold_of, minlength=self.k + 1)[1:]
        if sizes.max() - sizes.min() > 1:
            raise ValidationError("fold sizes may differ by at most 1")
        object.__setattr__(self, "fold_of", fold_of.copy())
        self.fold_of.setflags(write=False)

    @property
    def n(self) -> int:
        return self.fold_of.shape[0]

    def train_indices(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != v)

    def heldout_indices(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == v)


def assign_folds(n: int, k: int = 10, seed=0) -> FoldAssignment:
    """Random balanced fold assignment, deterministic given (n, k, seed)."""
    if k < 2:
        raise ValidationError(f"fold count must be at least 2, got {k}")
    if n < k:
        raise ValidationError(f"n={n} is smaller than the fold count k={k}")
    quot, rem = divmod(n, k)
    labels = np.repeat(np.arange(1, k + 1), quot)
    labels = np.concatenate([np.arange(1, rem + 1), labels])
    labels.sort()
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[generator(seed).permutation(n)] = labels
    return FoldAssignment(fold_of=fold_of, k=k)


# ---------------------------------------------------------------------------
# Simplex-constrained least squares
# ---------------------------------------------------------------------------


def _project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, y.shape[0] + 1)
    rho = int(np.flatnonzero(u * j > css - 1.0)[-1])
    tau = (css[rho] - 1.0) / (rho + 1)
    x = np.maximum(y - tau, 0.0)
    s = x.sum()
    return x / s if s > 0 else np.full_like(y, 1.0 / y.shape[0])


def simplex_least_squares(
    targets, columns, tol: float = 1e-10, max_iter: int = 10_000
) -> np.ndarray:
    """Weights on the probability simplex minimizing the mean squared error
    between ``targets`` and ``columns @ weights``.

    Projected gradient descent with step 1/L (L from the Gram matrix), run
    from the uniform start and from every vertex; the best run wins, with
    exact ties broken toward the lexicographically smallest weight vector.
    """
    t = as_float_array(targets, "targets", ndim=1)
    cols = as_float_array(columns, "columns", ndim=2)
    n, m = cols.shape
    if t.shape[0] != n:
        raise ValidationError("targets length does not match columns")
    if m < 1:
        raise ValidationError("at least one column is required")
    if m == 1:
        return np.ones(1)
    G = cols.T @ cols / n
    b = cols.T @ t / n
    const = float(t @ t) / n

    def objective(alpha: np.ndarray) -> float:
        return float(alpha @ G @ alpha - 2.0 * b @ alpha + const)

    lip = 2.0 * float(np.linalg.eigvalsh(G)[-1])
    starts = [np.full(m, 1.0 / m)] + [np.eye(m)[j] for j in range(m)]
    finishers: list[tuple[float, tuple[float, ...]]] = []
    for start in starts:
        alpha = start.copy()
        current = objective(alpha)
        if lip > 0.0:
            step = 1.0 / lip
            for _ in range(max_iter):
                alpha_new = _project_simplex(alpha - step * 2.0 * (G @ alpha - b))
                new = objective(alpha_new)
                if new <= current:
                    alpha = alpha_new
                if current - new < tol:
                    current = min(current, new)
                    break
                current = new
        finishers.append((current, tuple(alpha)))
    best_obj = min(obj for obj, _ in finishers)
    atol = 1e-14 * max(1.0, abs(const))
    tied = sorted(a for obj, a in finishers if obj <= best_obj + atol)
    return np.asarray(tied[0])


# ---------------------------------------------------------------------------
# Stacking core shared by the CATE and outcome regressions
# ---------------------------------------------------------------------------


def _stack_fit(features, learners, folds: FoldAssignment, fold_targets, full_targets):
    """Cross-validated convex stacking over candidate learners.

    ``fold_targets(v, train_idx, heldout_idx)`` returns the regression targets
    for the training and held-out rows of fold v (they may depend on the fold
    when the centering function is refit per training split); ``full_targets()``
    returns the targets for the final full-data fits.
    """
    features = as_float_array(features, "features", ndim=2)
    n = features.shape[0]
    if folds.n != n:
        raise ValidationError("fold assignment does not match the sample size")
    if not learners:
        raise ValidationError("at least one learner is required")
    m = len(learners)
    cv_columns = np.empty((n, m))
    cv_targets = np.empty(n)
    for v in range(1, folds.k + 1):
        tr = folds.train_indices(v)
        te = folds.heldout_indices(v)
        t_tr, t_te = fold_targets(v, tr, te)
        cv_targets[te] = t_te
        for j, proto in enumerate(learners):
            est = clone(proto).fit(features[tr], t_tr)
            cv_columns[te, j] = est.predict(features[te])
    weights = simplex_least_squares(cv_targets, cv_columns)
    by_learner = np.mean((cv_targets[:, None] - cv_columns) ** 2, axis=0)
    ensemble = float(np.mean((cv_targets - cv_columns @ weights) ** 2))
    t_all = full_targets()
    fitted = tuple(clone(proto).fit(features, t_all) for proto in learners)
    return fitted, weights, ensemble, tuple(float(x) for x in by_learner)


@dataclass(frozen=True, eq=False)
class CateModel:
    """Fitted ensemble mapping covariates to estimated conditional effects."""

    learners: tuple
    weights: np.ndarray
    cv_mse_ensemble: float
    cv_mse_by_learner: tuple[float, ...]
    folds: FoldAssignment | None  # None on models restored from disk
    f_used: str
    covariate_dim: int

    def predict(self, covariates) -> np.ndarray:
        X = as_float_array(covariates, "covariates", ndim=2)
        if X.shape[1] != self.covariate_dim:
            raise ValidationError(
                f"covariates have dimension {X.shape[1]}, model expects {self.covariate_dim}"
            )
        preds = np.column_stack([est.predict(X) for est in self.learners])
        return preds @ self.weights

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "f_used": self.f_used,
            "covariate_dim": self.covariate_dim,
            "cv_mse_ensemble": self.cv_mse_ensemble,
            "cv_mse_by_learner": list(self.cv_mse_by_learner),
            "learners": [
                {"kind": learner_kind(est), "state": est.to_state()} for est in self.learners
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CateModel":
        learners = tuple(
            LEARNER_KINDS[item["kind"]].from_state(item["state"])
            for item in payload["learners"]
        )
        return cls(
            learners=learners,
            weights=np.asarray(payload["weights"], dtype=float),
            cv_mse_ensemble=float(payload["cv_mse_ensemble"]),
            cv_mse_by_learner=tuple(payload["cv_mse_by_learner"]),
            folds=None,
            f_used=payload["f_used"],
            covariate_dim=int(payload["covariate_dim"]),
        )


def predict_cate(model: CateModel, c) -> float:
    """Estimated conditional effect at a single covariate vector."""
    c = as_float_array(c, "covariate vector", ndim=1)
    return float(model.predict(c[None, :])[0])


# ---------------------------------------------------------------------------
# Outcome regression E[Y | a, c]
# ---------------------------------------------------------------------------


def _augmented(a: np.ndarray, X: np.ndarray) -> np.ndarray:
    # treatment, covariates, and their interaction, so linear candidates can
    # express arm-specific slopes
    a = np.asarray(a, dtype=float)
    return np.column_stack([a, X, a[:, None] * X])


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """Fitted regression of the outcome on (treatment, covariates)."""

    learners: tuple
    weights: np.ndarray
    covariate_dim: int
    cv_mse_ensemble: float | None = None
    cv_mse_by_learner: tuple[float, ...] | None = None

    def predict(self, a, covariates) -> np.ndarray:
        X = as_float_array(covariates, "covariates", ndim=2)
        if X.shape[1] != self.covariate_dim:
            raise ValidationError(
                f"covariates have dimension {X.shape[1]}, model expects {self.covariate_dim}"
            )
        a_arr = np.broadcast_to(np.asarray(a, dtype=float), (X.shape[0],))
        Z = _augmented(a_arr, X)
        preds = np.column_stack([est.predict(Z) for est in self.learners])
        return preds @ self.weights

    def as_centering(self):
        """Adapt to the (a, c) -> real signature used by ``pseudo_outcome``."""

        def f(a, c):
            return float(self.predict(a, np.asarray(c, dtype=float)[None, :])[0])

        return f


def fit_outcome_linear(X, a, y) -> OutcomeModel:
    """Single linear least-squares outcome regression (used as the pseudo-
    outcome centering function)."""
    X = as_float_array(X, "X", ndim=2)
    est = LinearLeastSquaresRegressor().fit(_augmented(np.asarray(a), X), np.asarray(y, dtype=float))
    return OutcomeModel(learners=(est,), weights=np.ones(1), covariate_dim=X.shape[1])


def fit_outcome_super_learner(
    data: TrialDataset, learners, folds: FoldAssignment
) -> OutcomeModel:
    """Stacked outcome regression of Y on (A, C) with simplex weights chosen
    by cross-validated mean squared error."""
    Z = _augmented(data.treatment, data.covariates)
    y = data.outcome

    def fold_targets(v, tr, te):
        return y[tr], y[te]

    fitted, weights, ens, by = _stack_fit(Z, learners, folds, fold_targets, lambda: y)
    return OutcomeModel(
        learners=fitted,
        weights=weights,
        covariate_dim=data.covariate_dim,
        cv_mse_ensemble=ens,
        cv_mse_by_learner=by,
    )


# ---------------------------------------------------------------------------
# The CATE super-learner
# ---------------------------------------------------------------------------


def fit_super_learner(
    data: TrialDataset, learners, f_mode: str, folds: FoldAssignment
) -> CateModel:
    """Fit the convex stacking ensemble for the conditional effect.

    ``f_mode`` selects the pseudo-outcome centering: "zero" uses f = 0;
    "outcome" refits a linear outcome regression on each training split (and
    once on the full data for the final fits), which reduces the conditional
    variance of the pseudo-outcomes without changing their conditional mean.
    """
    if f_mode not in F_MODES:
        raise ValidationError(f"f_mode must be one of {F_MODES}, got {f_mode!r}")
    if folds.n != data.n:
        raise ValidationError("fold assignment does not match the dataset")
    X = data.covariates
    y = data.outcome
    a = data.treatment
    prop = data.propensity

    def pseudo_for(rows: np.ndarray, model: OutcomeModel | None) -> np.ndarray:
        if model is None:
            zero = np.zeros(rows.shape[0])
            return _pseudo_values(y[rows], a[rows], prop[rows], zero, zero, zero)
        f1 = model.predict(1, X[rows])
        f0 = model.predict(0, X[rows])
        f_obs = np.where(a[rows] == 1, f1, f0)
        return _pseudo_values(y[rows], a[rows], prop[rows], f_obs, f1, f0)

    def fold_targets(v, tr, te):
        model = fit_outcome_linear(X[tr], a[tr], y[tr]) if f_mode == "outcome" else None
        return pseudo_for(tr, model), pseudo_for(te, model)

    def full_targets():
        model = fit_outcome_linear(X, a, y) if f_mode == "outcome" else None
        return pseudo_for(np.arange(data.n), model)

    fitted, weights, ens, by = _stack_fit(X, learners, folds, fold_targets, full_targets)
    return CateModel(
        learners=fitted,
        weights=weights,
        cv_mse_ensemble=ens,
        cv_mse_by_learner=by,
        folds=folds,
        f_used=f_mode,
        covariate_dim=data.covariate_dim,
    )


class SuperLearnerCate(BaseEstimator, RegressorMixin):
    """scikit-learn estimator facade over :func:`fit_super_learner`.

    Example
    -------
    >>> est = SuperLearnerCate(learners="constant,linear", seed=3)
    >>> est.fit(X, y, treatment=a, propensity=p).predict(X)
    """

    def __init__(
        self,
        learners: str = "constant,linear,knn,stump",
        f_mode: str = "outcome",
        n_folds: int = 10,
        seed: int = 0,
    ):
        self.learners = learners
        self.f_mode = f_mode
        self.n_folds = n_folds
        self.seed = seed

    def fit(self, X, y, *, treatment, propensity):
        X = as_float_array(X, "X", ndim=2)
        data = TrialDataset(
            covariates=X,
            treatment=np.asarray(treatment),
            outcome=np.asarray(y, dtype=float),
            propensity=np.asarray(propensity, dtype=float),
            covariate_names=tuple(f"c{j + 1}" for j in range(X.shape[1])),
            design=Design.observational(),
        )
        folds = assign_folds(data.n, self.n_folds, self.seed)
        self.model_ = fit_super_learner(data, parse_learners(self.learners), self.f_mode, folds)
        self.weights_ = self.model_.weights
        self.cv_mse_ensemble_ = self.model_.cv_mse_ensemble
        self.cv_mse_by_learner_ = self.model_.cv_mse_by_learner
        return self

    def predict(self, X):
        return self.model_.predict(X)
