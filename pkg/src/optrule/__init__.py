"""optrule: optimal treatment-rule estimation from randomized or
observational trial data, with an exact finite-population oracle.

The pipeline estimates the conditional average treatment effect by a
pseudo-outcome regression stacked over candidate learners, thresholds it
into a treatment rule for four decision contexts (budget-constrained,
unconstrained, cost-penalized, heterogeneity-maximizing), and reports
targeted (CV-TMLE) inference for the rule's mean gain in the first two
contexts. Everything is seedable and deterministic.
"""

import os as _os

# Honor the documented thread cap before any numerical library spins up.
if "OPTRULE_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["OPTRULE_THREADS"])

__version__ = "0.1.0"

from .data import (  # noqa: E402
    Design,
    Dgp,
    DGP_REGISTRY,
    DgpSpec,
    PotentialPopulation,
    PotentialUnit,
    TrialDataset,
    TrialRecord,
    load_csv,
    load_truth_csv,
    reveal,
    simulate,
    write_dataset_csv,
    write_truth_csv,
)
from .oracle import (  # noqa: E402
    OracleSolution,
    Partition,
    TabulatedDensity,
    constrained_value,
    enumerate_best_heterogeneity,
    enumerate_best_value,
    heterogeneity_objective,
    iter_partitions,
    kappa_stationarity_residual,
    locate_kappa_roots,
    random_allocation_value,
    solve_constrained,
    solve_cost_constrained,
    solve_heterogeneity,
    solve_unconstrained,
    threshold_split_scan,
)
from .learners import (  # noqa: E402
    ConstantMeanRegressor,
    KNearestNeighborsRegressor,
    LinearLeastSquaresRegressor,
    TreeStumpRegressor,
    parse_learners,
)
from .cate import (  # noqa: E402
    CateModel,
    FoldAssignment,
    OutcomeModel,
    SuperLearnerCate,
    assign_folds,
    fit_outcome_super_learner,
    fit_super_learner,
    predict_cate,
    pseudo_outcome,
    simplex_least_squares,
)
from .rules import (  # noqa: E402
    RuleContext,
    RuleEvaluation,
    TreatmentRule,
    adjusted_baselines,
    constrained_cutoff,
    evaluate_on_sample,
    evaluate_on_truth,
    load_rule,
    rule_constrained,
    rule_cost,
    rule_heterogeneity,
    rule_unconstrained,
    save_rule,
)
from .tmle import (  # noqa: E402
    OutcomeScale,
    TmleReport,
    cv_tmle,
    influence_values,
    scale_outcomes,
    weighted_offset_logistic,
)
from .report import parse_report, serialize_report, write_report  # noqa: E402
