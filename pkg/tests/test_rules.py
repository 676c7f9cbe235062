import math

import numpy as np
import pytest

from optrule import (
    CateModel,
    Design,
    DgpSpec,
    PotentialPopulation,
    RuleContext,
    TreatmentRule,
    TrialDataset,
    adjusted_baselines,
    assign_folds,
    constrained_cutoff,
    evaluate_on_sample,
    evaluate_on_truth,
    fit_super_learner,
    load_rule,
    parse_learners,
    rule_constrained,
    rule_cost,
    rule_heterogeneity,
    rule_unconstrained,
    save_rule,
    simulate,
    solve_cost_constrained,
    solve_constrained,
    solve_heterogeneity,
    solve_unconstrained,
)
from optrule.cate import OutcomeModel, fit_outcome_linear
from optrule.errors import ValidationError
from optrule.learners import (
    ConstantMeanRegressor,
    KNearestNeighborsRegressor,
    LinearLeastSquaresRegressor,
)
from optrule.rng import generator


def wrap_model(est, dim):
    """A single fitted learner as a full ensemble model."""
    return CateModel(
        learners=(est,),
        weights=np.ones(1),
        cv_mse_ensemble=0.0,
        cv_mse_by_learner=(0.0,),
        folds=None,
        f_used="zero",
        covariate_dim=dim,
    )


def identity_model(dim=1, slope=1.0):
    """Model whose score is slope * first covariate."""
    est = LinearLeastSquaresRegressor.from_state(
        {
            "n_features": dim,
            "intercept": 0.0,
            "coef": [slope] + [0.0] * (dim - 1),
            "fallback": False,
        }
    )
    return wrap_model(est, dim)


def constant_model(value, dim=1):
    est = ConstantMeanRegressor.from_state({"n_features": dim, "mean": value})
    return wrap_model(est, dim)


def memorizing_model(X, values):
    """Exact lookup: a 1-nearest-neighbor fit on the supplied table."""
    return wrap_model(KNearestNeighborsRegressor(k=1).fit(X, values), X.shape[1])


def dataset_with_scores(scores, cost=None):
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    return TrialDataset(
        covariates=scores[:, None],
        treatment=np.zeros(n, dtype=int),
        outcome=np.zeros(n),
        propensity=np.full(n, 0.5),
        covariate_names=("c1",),
        design=Design.observational(),
        cost=cost,
    )


class TestConstrainedCutoff:
    def test_order_statistic(self):
        assert constrained_cutoff(np.array([5.0, 4.0, 3.0, 2.0, 1.0]), 0.4) == 3.0

    def test_positive_part_clamp(self):
        assert constrained_cutoff(np.array([-1.0, -2.0, -3.0]), 0.33) == 0.0

    def test_tie_at_threshold(self):
        assert constrained_cutoff(np.array([1.0, 1.0, 1.0, 1.0]), 0.5) == 1.0


class TestRuleConstrained:
    def test_exact_quota(self):
        data = dataset_with_scores([5.0, 4.0, 3.0, 2.0, 1.0])
        rule = rule_constrained(identity_model(), data, 0.4)
        assert rule.threshold == 3.0
        assert rule.treat(data.covariates).sum() == 2

    def test_negative_scores_treat_nobody(self):
        data = dataset_with_scores([-1.0, -2.0, -3.0])
        rule = rule_constrained(identity_model(), data, 0.33)
        assert rule.threshold == 0.0
        assert rule.treat(data.covariates).sum() == 0

    def test_ties_stay_untreated(self):
        data = dataset_with_scores([1.0, 1.0, 1.0, 1.0])
        rule = rule_constrained(identity_model(), data, 0.5)
        assert rule.treat(data.covariates).sum() == 0

    @pytest.mark.parametrize("seed", range(10))
    def test_budget_compliance(self, seed):
        rng = generator(seed)
        n = int(rng.integers(5, 60))
        q = float(rng.uniform(0.05, 0.95))
        data = dataset_with_scores(rng.normal(size=n))
        rule = rule_constrained(identity_model(), data, q)
        assert rule.treat(data.covariates).mean() <= q

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_in_q(self, seed):
        rng = generator(50 + seed)
        data = dataset_with_scores(rng.normal(size=40))
        t1 = rule_constrained(identity_model(), data, 0.2).treat(data.covariates)
        t2 = rule_constrained(identity_model(), data, 0.6).treat(data.covariates)
        assert np.all(t2[t1])  # the tighter budget's treated set is nested


class TestRuleUnconstrained:
    def test_zero_scores_treat_nobody(self):
        rule = rule_unconstrained(constant_model(0.0))
        assert rule.treat(np.zeros((5, 1))).sum() == 0

    def test_sign_flip_complements(self):
        rng = generator(3)
        X = rng.normal(size=(30, 1))
        pos = rule_unconstrained(identity_model()).treat(X)
        neg = rule_unconstrained(identity_model(slope=-1.0)).treat(X)
        # complementary up to exact zeros, absent here almost surely
        assert np.array_equal(pos, ~neg)

    def test_treated_fraction_approaches_half(self):
        rng = generator(4)
        X = rng.random((100_000, 1))
        shifted = wrap_model(
            LinearLeastSquaresRegressor.from_state(
                {"n_features": 1, "intercept": -0.5, "coef": [1.0], "fallback": False}
            ),
            1,
        )
        frac = rule_unconstrained(shifted).treat(X).mean()
        assert abs(frac - 0.5) <= 0.01


class TestRuleCost:
    def test_zero_bar_reduces_to_unconstrained(self):
        data = dataset_with_scores([0.5, -0.5, 1.5])
        rule = rule_cost(identity_model(), data, delta_const=0.0)
        plain = rule_unconstrained(identity_model())
        assert np.array_equal(rule.treat(data.covariates), plain.treat(data.covariates))

    def test_constant_bar(self):
        data = dataset_with_scores([0.5, 1.5, 2.5])
        rule = rule_cost(identity_model(), data, delta_const=1.0)
        assert rule.treat(data.covariates).tolist() == [False, True, True]

    def test_delta_column(self):
        X = np.array([[1.0, 0.5], [1.0, 2.0]])
        data = TrialDataset(
            covariates=X,
            treatment=np.array([0, 1]),
            outcome=np.zeros(2),
            propensity=np.full(2, 0.5),
            covariate_names=("c1", "bar"),
            design=Design.observational(),
        )
        rule = rule_cost(identity_model(2), data, delta_column="bar")
        assert rule.treat(X).tolist() == [True, False]

    def test_unit_costs_match_constrained(self):
        rng = generator(9)
        scores = rng.uniform(0.1, 2.0, size=10)
        data = dataset_with_scores(scores, cost=np.ones(10))
        budget_rule = rule_cost(identity_model(), data, budget=0.3)
        quota_rule = rule_constrained(identity_model(), data, 0.3)
        assert np.array_equal(
            budget_rule.treat(data.covariates, cost=data.cost),
            quota_rule.treat(data.covariates),
        )

    def test_two_strata_matches_oracle(self):
        # same stratified setup as the exact solver: pick the effect-4 stratum
        pop = PotentialPopulation(
            covariates=np.array([[4.0], [1.0]]),
            y0=np.zeros(2),
            y1=np.array([4.0, 1.0]),
            mass=np.array([0.5, 0.5]),
        )
        costs = np.array([1.0, 1.0])
        oracle_sol = solve_cost_constrained(pop, costs, budget=0.5)
        data = dataset_with_scores([4.0, 1.0], cost=costs)
        rule = rule_cost(identity_model(), data, budget=0.5)
        treated = rule.treat(pop.covariates, cost=costs)
        assert tuple(np.flatnonzero(treated)) == oracle_sol.partition.treated_indices
        assert rule.threshold == oracle_sol.threshold

    def test_budget_requires_costs(self):
        data = dataset_with_scores([1.0, 2.0])
        with pytest.raises(ValidationError, match="cost column"):
            rule_cost(identity_model(), data, budget=1.0)

    def test_exactly_one_mode(self):
        data = dataset_with_scores([1.0])
        with pytest.raises(ValidationError, match="exactly one"):
            rule_cost(identity_model(), data, budget=1.0, delta_const=0.0)

    @pytest.mark.parametrize("seed", range(8))
    def test_budget_never_exceeded(self, seed):
        rng = generator(70 + seed)
        n = 30
        cost = rng.uniform(0.2, 3.0, size=n)
        data = dataset_with_scores(rng.normal(size=n), cost=cost)
        budget = float(rng.uniform(0.2, 1.0))
        rule = rule_cost(identity_model(), data, budget=budget)
        treated = rule.treat(data.covariates, cost=cost)
        assert cost[treated].sum() <= budget * n + 1e-9


class TestRuleHeterogeneity:
    def test_known_split(self):
        data = dataset_with_scores([-1.0, 0.0, 2.0, 5.0])
        rule = rule_heterogeneity(identity_model(), data)
        assert rule.threshold == 2.0
        assert rule.treat(data.covariates).tolist() == [False, False, False, True]

    def test_two_scores(self):
        data = dataset_with_scores([-1.0, 1.0])
        rule = rule_heterogeneity(identity_model(), data)
        assert rule.treat(data.covariates).tolist() == [False, True]

    def test_constant_scores_degenerate(self):
        data = dataset_with_scores([2.0, 2.0, 2.0])
        rule = rule_heterogeneity(identity_model(), data)
        assert rule.degenerate
        assert rule.threshold == 2.0
        assert rule.treat(data.covariates).sum() == 0  # strict inequality


class TestOracleEquivalence:
    """With the true per-unit effect as the score, empirical rules reproduce
    the exact solver partitions (tie-free populations with enough benefit)."""

    @pytest.mark.parametrize("seed", range(10))
    def test_all_contexts(self, seed):
        rng = generator(900 + seed)
        n = 20
        effects = rng.normal(loc=0.4, size=n)
        q = 0.25
        assert (effects > 0).sum() > q * n
        y0 = rng.normal(size=n)
        pop = PotentialPopulation(covariates=effects[:, None], y0=y0, y1=y0 + effects)
        data = dataset_with_scores(effects)
        model = identity_model()

        constrained = rule_constrained(model, data, q).treat(pop.covariates)
        assert tuple(np.flatnonzero(constrained)) == solve_constrained(
            pop, q
        ).partition.treated_indices

        unconstrained = rule_unconstrained(model).treat(pop.covariates)
        assert tuple(np.flatnonzero(unconstrained)) == solve_unconstrained(
            pop
        ).partition.treated_indices

        het = rule_heterogeneity(model, data).treat(pop.covariates)
        assert tuple(np.flatnonzero(het)) == solve_heterogeneity(
            pop
        ).partition.treated_indices


class TestEvaluateOnTruth:
    @pytest.fixture
    def pop(self):
        rng = generator(17)
        n = 50
        y0 = rng.normal(size=n)
        effects = rng.normal(scale=0.5, size=n)
        return PotentialPopulation(
            covariates=effects[:, None], y0=y0, y1=y0 + effects
        )

    def test_treat_nobody_gives_control_mean(self, pop):
        rule = TreatmentRule(
            model=identity_model(),
            threshold=float("inf"),
            context=RuleContext("unconstrained"),
        )
        ev = evaluate_on_truth(rule, pop)
        assert ev.value == pytest.approx(pop.y0.mean(), abs=1e-12)
        assert math.isnan(ev.effect_in_treated)
        assert math.isnan(ev.heterogeneity)
        assert ev.treated_fraction == 0.0

    def test_oracle_rule_beats_baselines(self, pop):
        ev = evaluate_on_truth(rule_unconstrained(identity_model()), pop)
        assert ev.value >= ev.treat_all - 1e-12
        assert ev.value >= ev.treat_none - 1e-12
        assert ev.value >= ev.random_q - 1e-12

    def test_heterogeneity_identity(self, pop):
        ev = evaluate_on_truth(rule_unconstrained(identity_model()), pop)
        assert ev.heterogeneity == ev.effect_in_treated - ev.effect_in_rest

    def test_random_rules_average_zero_heterogeneity(self, pop):
        rng = generator(23)
        data = dataset_with_scores(pop.covariates[:, 0])
        hets = []
        for _ in range(1000):
            scores = rng.normal(size=pop.n)  # random score, independent of effects
            model = memorizing_model(pop.covariates, scores)
            rule = rule_constrained(model, data, 0.5)
            ev = evaluate_on_truth(rule, pop)
            if not math.isnan(ev.heterogeneity):
                hets.append(ev.heterogeneity)
        hets = np.asarray(hets)
        se = hets.std(ddof=1) / np.sqrt(hets.size)
        assert abs(hets.mean()) <= 3 * se


class TestEvaluateOnSample:
    def test_constant_regression_gives_constant_value(self):
        data = dataset_with_scores([1.0, -1.0, 2.0])
        est = ConstantMeanRegressor().fit(np.zeros((3, 3)), np.array([4.0, 4.0, 4.0]))
        om = OutcomeModel(learners=(est,), weights=np.ones(1), covariate_dim=1)
        ev = evaluate_on_sample(rule_unconstrained(identity_model()), om, data)
        assert ev.value == 4.0
        assert ev.plugin

    def test_treat_everyone_averages_treated_predictions(self):
        data, _ = simulate(DgpSpec("linear_cate", n=200, noise_sd=0.1, seed=71))
        om = fit_outcome_linear(data.covariates, data.treatment, data.outcome)
        rule = TreatmentRule(
            model=identity_model(),
            threshold=float("-inf"),
            context=RuleContext("unconstrained"),
        )
        ev = evaluate_on_sample(rule, om, data)
        assert ev.value == pytest.approx(om.predict(1, data.covariates).mean(), abs=1e-12)

    def test_plugin_close_to_truth_at_large_n(self):
        data, pop = simulate(DgpSpec("linear_cate", n=20_000, noise_sd=0.2, seed=73))
        om = fit_outcome_linear(data.covariates, data.treatment, data.outcome)
        true_cate_model = wrap_model(
            LinearLeastSquaresRegressor.from_state(
                {"n_features": 1, "intercept": -0.5, "coef": [1.0], "fallback": False}
            ),
            1,
        )
        rule = rule_unconstrained(true_cate_model)
        plug = evaluate_on_sample(rule, om, data)
        truth = evaluate_on_truth(rule, pop)
        assert abs(plug.value - truth.value) <= 0.01


class TestAdjustedBaselines:
    def test_randomized_close_to_arm_means(self):
        data, _ = simulate(DgpSpec("linear_cate", n=5000, noise_sd=0.1, seed=81))
        om = fit_outcome_linear(data.covariates, data.treatment, data.outcome)
        adj = adjusted_baselines(data, om)
        assert adj["treat_all"] == pytest.approx(
            data.outcome[data.treatment == 1].mean(), abs=0.02
        )
        assert adj["treat_none"] == pytest.approx(
            data.outcome[data.treatment == 0].mean(), abs=0.02
        )

    def test_confounded_two_by_two_matches_hand_gformula(self):
        # stratum z=0: P(A=1)=0.8, E[Y|a,z] = 1 + a;  z=1: P(A=1)=0.2, E[Y|a,z] = 3 + 2a
        rows = []
        for z, p1, base, eff, count in [(0.0, 0.8, 1.0, 1.0, 100), (1.0, 0.2, 3.0, 2.0, 100)]:
            treated = int(round(p1 * count))
            for i in range(count):
                a = 1 if i < treated else 0
                rows.append((z, a, base + eff * a, p1 if a == 1 else 1 - p1))
        z, a, y, p = (np.array(col) for col in zip(*rows))
        data = TrialDataset(
            covariates=z[:, None],
            treatment=a.astype(int),
            outcome=y,
            propensity=p,
            covariate_names=("z",),
            design=Design.observational(),
        )
        # saturated fit: linear in (a, z, a*z) reproduces the strata exactly
        om = fit_outcome_linear(data.covariates, data.treatment, data.outcome)
        adj = adjusted_baselines(data, om)
        # hand G-formula: E[Y1] = 0.5*(1+1) + 0.5*(3+2) = 3.5; E[Y0] = 0.5*1 + 0.5*3 = 2
        assert adj["treat_all"] == pytest.approx(3.5, abs=1e-6)
        assert adj["treat_none"] == pytest.approx(2.0, abs=1e-6)
        assert adj["ate"] == pytest.approx(1.5, abs=1e-6)
        # while the confounded arm means are biased off those targets
        assert abs(data.outcome[data.treatment == 1].mean() - 3.5) > 0.5

    def test_constant_regression_gives_zero_ate(self):
        data = dataset_with_scores([0.5, 1.5])
        est = ConstantMeanRegressor().fit(np.zeros((2, 3)), np.array([2.0, 2.0]))
        om = OutcomeModel(learners=(est,), weights=np.ones(1), covariate_dim=1)
        adj = adjusted_baselines(data, om)
        assert adj["treat_all"] == adj["treat_none"] == 2.0
        assert adj["ate"] == 0.0


class TestRulePersistence:
    def test_round_trip_predictions(self, tmp_path):
        data, _ = simulate(DgpSpec("crossover_cate", n=300, noise_sd=0.2, seed=91))
        folds = assign_folds(data.n, 10, seed=2)
        model = fit_super_learner(data, parse_learners("constant,linear,stump"), "outcome", folds)
        rule = rule_constrained(model, data, 0.3)
        path = tmp_path / "rule.json"
        save_rule(rule, path)
        back = load_rule(path)
        assert back.threshold == rule.threshold
        assert back.context == rule.context
        assert np.array_equal(back.treat(data.covariates), rule.treat(data.covariates))
        assert np.allclose(back.score(data.covariates), rule.score(data.covariates), atol=0)
