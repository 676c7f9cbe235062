"""Cross-validated targeted minimum loss-based estimation of the mean gain
from following an estimated treatment rule versus treating no one.

The estimand is E[1(rule treats at c) * (E[Y|A=1,c] - E[Y|A=0,c])]. The
estimator cross-fits an outcome regression and a conditional-effect model on
training folds, thresholds the cross-fitted effect scores (a q-quantile
cutoff in the resource-constrained context, zero otherwise), debiases the
outcome regression with a one-parameter intercept-free logistic fluctuation
along the signed inverse-propensity covariate, and builds a Wald interval
from the influence values. Outcomes are affinely scaled into [0, 1] first
and every reported quantity is mapped back to the original scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from ._validation import as_float_array
from .cate import assign_folds, fit_outcome_super_learner, fit_super_learner
from .data import TrialDataset
from .errors import ConvergenceError, ValidationError
from .rng import children
from .rules import RuleContext, constrained_cutoff

MIN_SAMPLE = 50
Z_95 = 1.96  # multiplier of the 95% Wald interval


@dataclass(frozen=True, eq=False)
class OutcomeScale:
    """Affine map of the outcome into [0, 1]; retains the inverse for reports."""

    lo: float
    hi: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValidationError(f"scale requires hi > lo, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def forward(self, y: np.ndarray) -> np.ndarray:
        return (y - self.lo) / self.width


def scale_outcomes(
    data: TrialDataset, bounds: tuple[float, float] | None = None
) -> tuple[np.ndarray, OutcomeScale]:
    """Scaled outcomes plus the scale used.

    Without explicit bounds the observed min/max are taken; a constant
    outcome yields a degenerate scale (widened by a tiny relative margin so
    the map stays defined) that callers should fast-path.
    """
    y = data.outcome
    if bounds is not None:
        lo, hi = float(bounds[0]), float(bounds[1])
        if not hi > lo:
            raise ValidationError("bounds must satisfy hi > lo")
        if y.min() < lo or y.max() > hi:
            raise ValidationError(
                f"observed outcomes [{float(y.min())!r}, {float(y.max())!r}] fall "
                f"outside the supplied bounds [{lo!r}, {hi!r}]"
            )
        scale = OutcomeScale(lo, hi)
    else:
        lo = float(y.min())
        hi = float(y.max())
        if hi == lo:
            hi = lo + 1e-9 * max(1.0, abs(lo))
            scale = OutcomeScale(lo, hi, degenerate=True)
        else:
            scale = OutcomeScale(lo, hi)
    return scale.forward(y), scale


def weighted_offset_logistic(y, h, offset, w, max_iter: int = 50, tol: float = 1e-10):
    """Slope of an intercept-free offset logistic regression.

    Maximizes the weighted Bernoulli log-likelihood (valid for fractional
    outcomes in [0, 1]) in the single slope on covariate ``h`` with fixed
    ``offset``, by Newton iteration with step halving. Returns 0 when all
    weights vanish or the score is already zero; raises ConvergenceError on
    separation (|slope| beyond 20 after halving).
    """
    y = as_float_array(y, "y", ndim=1)
    h = as_float_array(h, "h", ndim=1)
    offset = as_float_array(offset, "offset", ndim=1)
    w = as_float_array(w, "w", ndim=1)
    if np.any(w < 0):
        raise ValidationError("weights must be nonnegative")
    if np.any(y < 0) or np.any(y > 1):
        raise ValidationError("outcomes must lie in [0, 1]")
    total_w = float(w.sum())
    if total_w == 0.0:
        return 0.0

    def loglik(eps: float) -> float:
        eta = offset + eps * h
        return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))

    def score_info(eps: float) -> tuple[float, float]:
        mu = expit(offset + eps * h)
        return float(np.sum(w * h * (y - mu))), float(np.sum(w * h * h * mu * (1.0 - mu)))

    eps = 0.0
    ll = loglik(eps)
    score_tol = tol * max(1.0, total_w)
    for _ in range(max_iter):
        score, info = score_info(eps)
        if abs(score) <= score_tol:
            return eps
        if info <= 0.0:
            break
        direction = score / info
        step = 1.0
        while step > 1e-12:
            candidate = eps + step * direction
            if abs(candidate) > 20.0:
                step *= 0.5
                continue
            ll_new = loglik(candidate)
            if ll_new >= ll:
                eps, ll = candidate, ll_new
                break
            step *= 0.5
        else:
            break
    score, _ = score_info(eps)
    if abs(score) <= max(score_tol, 1e-8 * max(1.0, total_w)):
        return eps
    raise ConvergenceError(
        "offset logistic fluctuation did not converge; the weighted outcomes "
        "appear separated along the fluctuation covariate"
    )


@dataclass(frozen=True, eq=False)
class TmleReport:
    """Targeted estimate with its fluctuation, cutoff, variance, and interval.

    All reported values live on the original outcome scale. ``psi_hat`` is
    the mean gain versus treating no one; the mean outcome under the rule is
    in diagnostics (``value_under_rule``) as psi_hat plus the treat-none
    estimate.
    """

    psi_hat: float
    epsilon_n: float
    delta_n: float
    sigma_hat: float
    ci_lo: float
    ci_hi: float
    context: RuleContext
    n: int
    warnings: tuple[str, ...]
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "psi_hat": self.psi_hat,
            "epsilon_n": self.epsilon_n,
            "delta_n": self.delta_n,
            "sigma_hat": self.sigma_hat,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "context": self.context.to_dict(),
            "n": self.n,
            "warnings": list(self.warnings),
            "diagnostics": self.diagnostics,
        }


def influence_values(
    y: np.ndarray,
    clever: np.ndarray,
    q_obs: np.ndarray,
    q1: np.ndarray,
    q0: np.ndarray,
    psi_hat: float,
) -> np.ndarray:
    """Per-observation influence values of the targeted estimator:

        clever * (y - q_obs) + q1 - q0 - psi_hat

    where ``clever`` is the signed inverse propensity of the observed arm and
    the q's are fluctuated outcome-regression values.
    """
    return clever * (y - q_obs) + q1 - q0 - psi_hat


def cv_tmle(
    data: TrialDataset,
    context: RuleContext,
    *,
    learners,
    f_mode: str = "outcome",
    n_folds: int = 10,
    seed: int = 0,
    clamp: float = 1e-6,
    alt_variance: bool = False,
    bounds: tuple[float, float] | None = None,
) -> TmleReport:
    """Cross-validated targeted estimate of the rule's mean gain.

    Per fold: fit the outcome regression and the conditional-effect model on
    the training split, score the held-out rows with both. The cross-fitted
    effect scores set the cutoff (zero when unconstrained, else the positive
    part of the smallest value keeping the treated fraction at most q); rows
    above the cutoff weight the logistic fluctuation; fluctuated regressions
    give the plug-in, influence values give the variance, and the 95% Wald
    interval is psi_hat +/- 1.96 sigma_hat / sqrt(n).
    """
    if context.kind not in ("constrained", "unconstrained"):
        raise ValidationError(
            "targeted inference covers the constrained and unconstrained "
            f"contexts only, got {context.kind!r}"
        )
    if context.kind == "constrained" and context.q is None:
        raise ValidationError("constrained context requires q")
    if data.n < MIN_SAMPLE:
        raise ValidationError(f"need at least {MIN_SAMPLE} records, got {data.n}")
    if not 0.0 < clamp < 0.5:
        raise ValidationError(f"clamp must lie in (0, 0.5), got {clamp!r}")

    warnings: list[str] = []
    y_scaled, scale = scale_outcomes(data, bounds)
    if scale.degenerate:
        warnings.append("constant outcome: degenerate scale, estimate pinned at 0")
        return _degenerate_report(data, context, scale, warnings)

    seeds = children(seed, 1 + 2 * n_folds)
    folds = assign_folds(data.n, n_folds, seeds[0])
    scaled_data = TrialDataset(
        covariates=data.covariates,
        treatment=data.treatment,
        outcome=y_scaled,
        propensity=data.propensity,
        covariate_names=data.covariate_names,
        design=data.design,
        cost=data.cost,
    )

    n = data.n
    scores = np.empty(n)
    q_obs = np.empty(n)
    q1 = np.empty(n)
    q0 = np.empty(n)
    per_fold = []
    for v in range(1, n_folds + 1):
        tr = folds.train_indices(v)
        te = folds.heldout_indices(v)
        train = scaled_data.subset(tr)
        inner_outcome = assign_folds(tr.shape[0], n_folds, seeds[2 * v - 1])
        inner_cate = assign_folds(tr.shape[0], n_folds, seeds[2 * v])
        outcome_model = fit_outcome_super_learner(train, learners, inner_outcome)
        cate_model = fit_super_learner(train, learners, f_mode, inner_cate)
        scores[te] = cate_model.predict(data.covariates[te])
        q1[te] = outcome_model.predict(1, data.covariates[te])
        q0[te] = outcome_model.predict(0, data.covariates[te])
        per_fold.append(
            {
                "fold": v,
                "cate_weights": [float(x) for x in cate_model.weights],
                "cate_cv_mse": cate_model.cv_mse_ensemble,
                "outcome_cv_mse": outcome_model.cv_mse_ensemble,
            }
        )
    q_obs = np.where(data.treatment == 1, q1, q0)

    if context.kind == "unconstrained":
        delta_n = 0.0
    else:
        delta_n = constrained_cutoff(scores, context.q)
    treat_w = (scores > delta_n).astype(float)
    for row, v in zip(per_fold, range(1, n_folds + 1)):
        row["treated"] = int(treat_w[folds.heldout_indices(v)].sum())

    p_obs = data.propensity
    clever = (2 * data.treatment - 1) / p_obs
    lo_c, hi_c = clamp, 1.0 - clamp
    offset = logit(np.clip(q_obs, lo_c, hi_c))
    if treat_w.sum() == 0.0:
        warnings.append("the rule treats no unit in any fold; estimate pinned at 0")
        eps = 0.0
    else:
        eps = weighted_offset_logistic(y_scaled, clever, offset, treat_w)

    p1 = np.where(data.treatment == 1, p_obs, 1.0 - p_obs)
    p0 = 1.0 - p1
    q1_star = expit(logit(np.clip(q1, lo_c, hi_c)) + eps / p1)
    q0_star = expit(logit(np.clip(q0, lo_c, hi_c)) - eps / p0)
    q_obs_star = np.where(data.treatment == 1, q1_star, q0_star)

    psi = float(np.mean(treat_w * (q1_star - q0_star)))
    d_vals = influence_values(y_scaled, clever, q_obs_star, q1_star, q0_star, psi)
    q_for_var = 1.0 if context.kind == "unconstrained" else float(context.q)
    sigma2 = float(np.mean((treat_w * (d_vals - delta_n) + delta_n * q_for_var) ** 2))
    sigma = float(np.sqrt(sigma2))
    half = Z_95 * sigma / np.sqrt(n)
    score_residual = float(np.mean(treat_w * clever * (y_scaled - q_obs_star)))

    width = scale.width
    diagnostics = {
        "scale": {"lo": scale.lo, "hi": scale.hi, "degenerate": False},
        "folds": n_folds,
        "f_mode": f_mode,
        "treated_fraction": float(treat_w.mean()),
        "delta_n_scaled": delta_n,
        "score_equation_residual": score_residual,
        "value_under_rule": float(psi * width + scale.lo + width * np.mean(q0_star)),
        "per_fold": per_fold,
    }
    if alt_variance:
        alt = float(np.sqrt(np.mean((treat_w * d_vals) ** 2)))
        diagnostics["alt_sigma_hat"] = alt * width
    return TmleReport(
        psi_hat=psi * width,
        epsilon_n=eps,
        delta_n=delta_n * width,
        sigma_hat=sigma * width,
        ci_lo=(psi - half) * width,
        ci_hi=(psi + half) * width,
        context=context,
        n=n,
        warnings=tuple(warnings),
        diagnostics=diagnostics,
    )


def _degenerate_report(
    data: TrialDataset, context: RuleContext, scale: OutcomeScale, warnings: list[str]
) -> TmleReport:
    diagnostics = {
        "scale": {"lo": scale.lo, "hi": scale.hi, "degenerate": True},
        "folds": 0,
        "treated_fraction": 0.0,
        "delta_n_scaled": 0.0,
        "score_equation_residual": 0.0,
        "value_under_rule": scale.lo,
        "per_fold": [],
    }
    return TmleReport(
        psi_hat=0.0,
        epsilon_n=0.0,
        delta_n=0.0,
        sigma_hat=0.0,
        ci_lo=0.0,
        ci_hi=0.0,
        context=context,
        n=data.n,
        warnings=tuple(warnings),
        diagnostics=diagnostics,
    )
