"""Treatment-rule construction from an estimated conditional effect, and rule
evaluation against finite-population truth or observed-sample plug-ins.

Every rule thresholds a score: the estimated conditional effect itself, the
effect minus a per-covariate bar (cost context with an explicit bar), or the
effect divided by per-unit cost (cost context under a budget). Membership is
strict (score > threshold) everywhere, so threshold ties stay untreated.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array, check_positive, check_probability
from .cate import CateModel, OutcomeModel
from .data import PotentialPopulation, TrialDataset
from .errors import ValidationError
from .oracle import threshold_split_scan

CONTEXTS = ("constrained", "unconstrained", "cost", "heterogeneity")

RULE_SCHEMA_VERSION = 1

#: Sentinel for conditional effects on an empty treated/untreated side.
UNDEFINED = float("nan")


@dataclass(frozen=True)
class RuleContext:
    """Which decision setting produced a rule, with its parameters."""

    kind: str
    q: float | None = None
    budget: float | None = None
    delta_const: float | None = None
    delta_column: str | None = None

    def __post_init__(self):
        if self.kind not in CONTEXTS:
            raise ValidationError(f"unknown context {self.kind!r}; choose from {CONTEXTS}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "q": self.q,
            "budget": self.budget,
            "delta_const": self.delta_const,
            "delta_column": self.delta_column,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RuleContext":
        return cls(
            kind=payload["kind"],
            q=payload.get("q"),
            budget=payload.get("budget"),
            delta_const=payload.get("delta_const"),
            delta_column=payload.get("delta_column"),
        )


@dataclass(frozen=True, eq=False)
class TreatmentRule:
    """Deterministic thresholded score rule: treat iff score(c) > threshold.

    ``cost_scaled`` rules score effect-per-cost and need per-unit costs at
    application time. ``threshold`` may be +inf (treat nobody) or -inf (treat
    everybody), both documented sentinels.
    """

    model: CateModel
    threshold: float
    context: RuleContext
    cost_scaled: bool = False
    degenerate: bool = False
    delta_index: int | None = None  # covariate position of a per-unit treat-bar

    def score(self, covariates) -> np.ndarray:
        """Rule score before any cost scaling: the estimated conditional
        effect, minus the treat-bar when one is configured."""
        X = as_float_array(covariates, "covariates", ndim=2)
        s = self.model.predict(X)
        if self.context.delta_const is not None:
            s = s - self.context.delta_const
        if self.context.delta_column is not None:
            if self.delta_index is None:
                raise ValidationError("delta_column rule is missing its column position")
            s = s - X[:, self.delta_index]
        return s

    def treat(self, covariates, cost=None) -> np.ndarray:
        """Boolean treat mask. Cost-scaled rules require ``cost``."""
        s = self.score(covariates)
        if self.cost_scaled:
            if cost is None:
                raise ValidationError("this rule scores effect per cost; pass per-unit costs")
            c = as_float_array(cost, "cost", ndim=1)
            if np.any(c <= 0.0):
                raise ValidationError("costs must be strictly positive")
            s = s / c
        return s > self.threshold

    def to_dict(self) -> dict:
        return {
            "schema_version": RULE_SCHEMA_VERSION,
            "kind": "treatment_rule",
            "context": self.context.to_dict(),
            "threshold": self.threshold,
            "cost_scaled": self.cost_scaled,
            "degenerate": self.degenerate,
            "delta_index": self.delta_index,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TreatmentRule":
        if payload.get("kind") != "treatment_rule":
            raise ValidationError("not a treatment-rule file")
        delta_index = payload.get("delta_index")
        return cls(
            model=CateModel.from_dict(payload["model"]),
            threshold=float(payload["threshold"]),
            context=RuleContext.from_dict(payload["context"]),
            cost_scaled=bool(payload["cost_scaled"]),
            degenerate=bool(payload["degenerate"]),
            delta_index=None if delta_index is None else int(delta_index),
        )


def save_rule(rule: TreatmentRule, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(rule.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def load_rule(path) -> TreatmentRule:
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    with fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"malformed rule file {path}: {exc}") from None
    return TreatmentRule.from_dict(payload)


# ---------------------------------------------------------------------------
# Rule construction
# ---------------------------------------------------------------------------


def constrained_cutoff(scores: np.ndarray, q: float) -> float:
    """Positive part of the smallest cutoff d such that the fraction of
    scores strictly above d is at most q.

    With scores sorted descending and m = floor(q n), the smallest solution
    is the (m+1)-th largest score (or -inf when m = n), clamped at zero so a
    budget never forces treating units with nonpositive estimated effect.
    """
    scores = as_float_array(scores, "scores", ndim=1)
    n = scores.shape[0]
    m = int(np.floor(q * n))
    if m >= n:
        raw = float("-inf")
    else:
        raw = float(np.sort(scores)[::-1][m])
    return max(0.0, raw)


def rule_constrained(model: CateModel, data: TrialDataset, q: float) -> TreatmentRule:
    """Resource-constrained rule: treat scores above the q-quantile cutoff
    (at most a fraction q treated; threshold ties stay untreated)."""
    q = check_probability(q, "q")
    cutoff = constrained_cutoff(model.predict(data.covariates), q)
    return TreatmentRule(model=model, threshold=cutoff, context=RuleContext("constrained", q=q))


def rule_unconstrained(model: CateModel) -> TreatmentRule:
    """Treat whenever the estimated conditional effect is strictly positive."""
    return TreatmentRule(model=model, threshold=0.0, context=RuleContext("unconstrained"))


def rule_cost(
    model: CateModel,
    data: TrialDataset,
    *,
    budget: float | None = None,
    delta_const: float | None = None,
    delta_column: str | None = None,
) -> TreatmentRule:
    """Cost/side-effect rule, in one of two modes.

    Bar mode (``delta_const`` or ``delta_column``): treat when the estimated
    effect exceeds the per-unit bar; realized as score-minus-bar > 0.

    Budget mode (``budget``, per-capita): sort units by estimated effect per
    cost, keep the largest positive-effect prefix whose summed cost fits
    budget * n, and report the threshold as the ratio at the cut (the first
    excluded unit's ratio, or 0 when every positive-effect unit fits).
    """
    modes = sum(x is not None for x in (budget, delta_const, delta_column))
    if modes != 1:
        raise ValidationError("pass exactly one of budget, delta_const, delta_column")
    if delta_const is not None:
        context = RuleContext("cost", delta_const=float(delta_const))
        return TreatmentRule(model=model, threshold=0.0, context=context)
    if delta_column is not None:
        if delta_column not in data.covariate_names:
            raise ValidationError(f"delta column {delta_column!r} is not a covariate")
        context = RuleContext("cost", delta_column=delta_column)
        idx = data.covariate_names.index(delta_column)
        return TreatmentRule(model=model, threshold=0.0, context=context, delta_index=idx)
    check_positive(budget, "budget")
    if data.cost is None:
        raise ValidationError("budget mode requires a cost column in the dataset")
    scores = model.predict(data.covariates)
    ratios = scores / data.cost
    positive = scores > 0.0
    order = np.lexsort((np.arange(data.n), -ratios))
    order = order[positive[order]]
    total_allowed = budget * data.n
    spent = np.cumsum(data.cost[order])
    fits = spent <= total_allowed
    n_in = int(fits.sum()) if fits.size else 0
    if n_in < order.shape[0]:
        k = float(ratios[order[n_in]])
    else:
        k = 0.0
    context = RuleContext("cost", budget=float(budget))
    return TreatmentRule(model=model, threshold=k, context=context, cost_scaled=True)


def rule_heterogeneity(model: CateModel, data: TrialDataset) -> TreatmentRule:
    """Split the score distribution to maximize the mean-score gap between
    treated and untreated; ties prefer the smaller treated set."""
    scores = model.predict(data.covariates)
    threshold, _, _, degenerate = threshold_split_scan(scores)
    return TreatmentRule(
        model=model,
        threshold=threshold,
        context=RuleContext("heterogeneity"),
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Rule evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RuleEvaluation:
    """Population or plug-in summary of a rule's performance.

    ``effect_in_treated``/``effect_in_rest`` are NaN sentinels when the
    corresponding side is empty (never silently zero); ``heterogeneity`` is
    their difference. ``plugin`` marks sample plug-in estimates, which are
    biased for the rule's impact; use the targeted estimator for inference.
    """

    value: float
    treated_fraction: float
    effect_in_treated: float
    effect_in_rest: float
    heterogeneity: float
    treat_all: float
    treat_none: float
    random_q: float
    plugin: bool = False

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "treated_fraction": self.treated_fraction,
            "effect_in_treated": self.effect_in_treated,
            "effect_in_rest": self.effect_in_rest,
            "heterogeneity": self.heterogeneity,
            "baselines": {
                "treat_all": self.treat_all,
                "treat_none": self.treat_none,
                "random_q": self.random_q,
            },
            "plugin": self.plugin,
        }


def _evaluation(
    treated: np.ndarray,
    gain: np.ndarray,
    value: float,
    treat_all: float,
    treat_none: float,
    weights: np.ndarray,
    plugin: bool,
) -> RuleEvaluation:
    w_t = float(weights[treated].sum())
    w_s = float(weights[~treated].sum())
    total = float(weights.sum())
    frac = w_t / total
    eff_t = float(np.sum(weights[treated] * gain[treated]) / w_t) if w_t > 0 else UNDEFINED
    eff_s = float(np.sum(weights[~treated] * gain[~treated]) / w_s) if w_s > 0 else UNDEFINED
    het = eff_t - eff_s  # NaN propagates from an empty side
    random_q = frac * treat_all + (1.0 - frac) * treat_none
    return RuleEvaluation(
        value=value,
        treated_fraction=frac,
        effect_in_treated=eff_t,
        effect_in_rest=eff_s,
        heterogeneity=het,
        treat_all=treat_all,
        treat_none=treat_none,
        random_q=random_q,
        plugin=plugin,
    )


def evaluate_on_truth(
    rule: TreatmentRule, pop: PotentialPopulation, cost=None
) -> RuleEvaluation:
    """Exact population evaluation of a rule against known potential outcomes."""
    treated = rule.treat(pop.covariates, cost=cost)
    w = pop.mass
    total = w.sum()
    value = float(np.sum(w * np.where(treated, pop.y1, pop.y0)) / total)
    treat_all = float(np.sum(w * pop.y1) / total)
    treat_none = float(np.sum(w * pop.y0) / total)
    return _evaluation(treated, pop.effects, value, treat_all, treat_none, w, plugin=False)


def evaluate_on_sample(
    rule: TreatmentRule, outcome_model: OutcomeModel, data: TrialDataset
) -> RuleEvaluation:
    """Plug-in evaluation replacing population integrals with sample averages
    of outcome-regression predictions. Biased for the rule's impact (the rule
    and the evaluation share the data); flagged via ``plugin``."""
    treated = rule.treat(data.covariates, cost=data.cost)
    q1 = outcome_model.predict(1, data.covariates)
    q0 = outcome_model.predict(0, data.covariates)
    value = float(np.mean(np.where(treated, q1, q0)))
    weights = np.ones(data.n)
    return _evaluation(
        treated, q1 - q0, value, float(q1.mean()), float(q0.mean()), weights, plugin=True
    )


def adjusted_baselines(data: TrialDataset, outcome_model: OutcomeModel) -> dict:
    """Covariate-standardized baselines: sample averages of the outcome
    regression at each arm replace marginal arm means (needed whenever
    treatment was not marginally randomized)."""
    q1 = outcome_model.predict(1, data.covariates)
    q0 = outcome_model.predict(0, data.covariates)
    treat_all = float(q1.mean())
    treat_none = float(q0.mean())
    return {"treat_all": treat_all, "treat_none": treat_none, "ate": treat_all - treat_none}
