"""Command-line front end: simulate, fit, oracle, evaluate, compare.

Every command validates its configuration up front, writes outputs
atomically, and exits 0 on success or 1 with a single-line JSON error record
on stderr for any validation failure. Reports embed the full configuration
and seed, so a run is reproducible from its report alone; the timing field
stays null unless requested, keeping rerun outputs byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import __version__
from .data import (
    DGP_REGISTRY,
    DgpSpec,
    load_csv,
    load_truth_csv,
    simulate,
    write_dataset_csv,
    write_truth_csv,
)
from .cate import assign_folds, fit_outcome_super_learner, fit_super_learner
from .errors import OptruleError, ValidationError
from .learners import parse_learners
from .oracle import (
    solve_constrained,
    solve_cost_constrained,
    solve_heterogeneity,
    solve_unconstrained,
)
from .report import SCHEMA_VERSION, serialize_report, write_report
from .rng import children
from .rules import (
    RuleContext,
    TreatmentRule,
    adjusted_baselines,
    evaluate_on_truth,
    evaluate_on_sample,
    load_rule,
    rule_constrained,
    rule_cost,
    rule_heterogeneity,
    rule_unconstrained,
    save_rule,
)
from .tmle import cv_tmle


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through the JSON path
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="optrule", description=__doc__)
    parser.add_argument("--version", action="version", version=f"optrule {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a simulated trial dataset and its truth file")
    sim.add_argument("--dgp", required=True, choices=sorted(DGP_REGISTRY))
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--dim", type=int, default=1, help="covariate dimension")
    sim.add_argument("--noise-sd", type=float, default=0.1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--randomized", type=float, default=0.5, help="treatment probability")
    sim.add_argument("--out-data", required=True)
    sim.add_argument("--out-truth", required=True)
    sim.add_argument("--report", default=None)
    sim.add_argument("--timing", action="store_true")

    fit = sub.add_parser("fit", help="estimate the conditional effect and a treatment rule")
    fit.add_argument("--data", required=True)
    fit.add_argument("--context", required=True,
                     choices=["constrained", "unconstrained", "cost", "heterogeneity"])
    fit.add_argument("--q", type=float, default=None, help="treated fraction cap (constrained)")
    fit.add_argument("--budget", type=float, default=None, help="per-capita cost budget")
    fit.add_argument("--delta-const", type=float, default=None, help="constant treat-bar")
    fit.add_argument("--delta-col", default=None, help="covariate column holding the treat-bar")
    fit.add_argument("--learners", default="constant,linear,knn,stump")
    fit.add_argument("--f-mode", default="outcome", choices=["zero", "outcome"])
    fit.add_argument("--folds", type=int, default=10)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--randomized", type=float, default=None,
                     help="randomization probability for files without a p column")
    fit.add_argument("--clamp", type=float, default=1e-6)
    fit.add_argument("--alt-variance", action="store_true",
                     help="also report the plain influence-function variance")
    fit.add_argument("--scale-lo", type=float, default=None)
    fit.add_argument("--scale-hi", type=float, default=None)
    fit.add_argument("--rule-out", default=None, help="write the fitted rule to this path")
    fit.add_argument("--report", required=True)
    fit.add_argument("--timing", action="store_true")

    orc = sub.add_parser("oracle", help="exact optimal rules on a truth file")
    orc.add_argument("--truth", required=True)
    orc.add_argument("--q", type=float, default=None)
    orc.add_argument("--budget", type=float, default=None, help="per-capita cost budget")
    orc.add_argument("--report", required=True)
    orc.add_argument("--timing", action="store_true")

    ev = sub.add_parser("evaluate", help="score a saved rule against a truth file")
    ev.add_argument("--rule", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--timing", action="store_true")

    cmp_ = sub.add_parser("compare", help="simulate, fit, and report regret against the oracle")
    cmp_.add_argument("--dgp", required=True, choices=sorted(DGP_REGISTRY))
    cmp_.add_argument("--n", type=int, required=True)
    cmp_.add_argument("--dim", type=int, default=1)
    cmp_.add_argument("--noise-sd", type=float, default=0.1)
    cmp_.add_argument("--seed", type=int, default=0)
    cmp_.add_argument("--randomized", type=float, default=0.5)
    cmp_.add_argument("--context", default="unconstrained",
                      choices=["constrained", "unconstrained", "heterogeneity"])
    cmp_.add_argument("--q", type=float, default=None)
    cmp_.add_argument("--learners", default="constant,linear,knn,stump")
    cmp_.add_argument("--f-mode", default="outcome", choices=["zero", "outcome"])
    cmp_.add_argument("--folds", type=int, default=10)
    cmp_.add_argument("--report", required=True)
    cmp_.add_argument("--timing", action="store_true")
    return parser


def _config_echo(ns: argparse.Namespace) -> dict:
    return {key: getattr(ns, key) for key in sorted(vars(ns))}


def _report_shell(ns: argparse.Namespace) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": ns.command,
        "config": _config_echo(ns),
        "warnings": [],
        "timing": None,
        "results": {},
    }


def _rule_summary(rule: TreatmentRule, treated_fraction: float | None) -> dict:
    return {
        "context": rule.context.to_dict(),
        "threshold": rule.threshold,
        "cost_scaled": rule.cost_scaled,
        "degenerate": rule.degenerate,
        "treated_fraction": treated_fraction,
    }


def _oracle_summary(solution, pop) -> dict:
    mass = pop.mass
    treated = list(solution.partition.treated_indices)
    return {
        "objective": solution.objective,
        "threshold": solution.threshold,
        "value": solution.objective_value,
        "treated_count": solution.partition.treated_count,
        "treated_mass_fraction": float(mass[treated].sum() / mass.sum()) if treated else 0.0,
        "degenerate": solution.degenerate,
    }


def _make_rule(model, data, context_kind, ns) -> TreatmentRule:
    if context_kind == "constrained":
        if ns.q is None:
            raise ValidationError("--context constrained requires --q")
        return rule_constrained(model, data, ns.q)
    if context_kind == "unconstrained":
        return rule_unconstrained(model)
    if context_kind == "cost":
        return rule_cost(
            model,
            data,
            budget=ns.budget,
            delta_const=ns.delta_const,
            delta_column=ns.delta_col,
        )
    return rule_heterogeneity(model, data)


def cmd_simulate(ns: argparse.Namespace) -> dict:
    spec = DgpSpec(
        name=ns.dgp, n=ns.n, covariate_dim=ns.dim, noise_sd=ns.noise_sd, seed=ns.seed
    )
    data, pop = simulate(spec, p=ns.randomized)
    cate = DGP_REGISTRY[ns.dgp].true_cate(pop.covariates)
    write_dataset_csv(data, ns.out_data)
    write_truth_csv(pop, ns.out_truth, cate=cate)
    report = _report_shell(ns)
    report["results"] = {
        "n": data.n,
        "covariate_dim": data.covariate_dim,
        "true_psi_unconstrained": DGP_REGISTRY[ns.dgp].true_psi,
        "data_path": ns.out_data,
        "truth_path": ns.out_truth,
    }
    print(f"wrote {ns.out_data} and {ns.out_truth}")
    return report


def cmd_fit(ns: argparse.Namespace) -> dict:
    data = load_csv(ns.data, randomized=ns.randomized)
    learners = parse_learners(ns.learners)
    sl_seed, outcome_seed, tmle_seed = children(ns.seed, 3)
    folds = assign_folds(data.n, ns.folds, sl_seed)
    model = fit_super_learner(data, learners, ns.f_mode, folds)
    rule = _make_rule(model, data, ns.context, ns)
    treated = rule.treat(data.covariates, cost=data.cost)

    outcome_model = fit_outcome_super_learner(
        data, learners, assign_folds(data.n, ns.folds, outcome_seed)
    )
    evaluation = evaluate_on_sample(rule, outcome_model, data)

    report = _report_shell(ns)
    arm_means = {
        "treated": float(data.outcome[data.treatment == 1].mean())
        if (data.treatment == 1).any() else None,
        "control": float(data.outcome[data.treatment == 0].mean())
        if (data.treatment == 0).any() else None,
    }
    baselines = {
        "arm_means": arm_means,
        "adjusted": adjusted_baselines(data, outcome_model),
        "design": data.design.kind,
    }
    if data.design.kind == "observational":
        report["warnings"].append(
            "observational design: marginal arm means are unadjusted, use the "
            "covariate-standardized baselines"
        )

    tmle_payload = None
    if ns.context in ("constrained", "unconstrained"):
        bounds = None
        if (ns.scale_lo is None) != (ns.scale_hi is None):
            raise ValidationError("pass both --scale-lo and --scale-hi or neither")
        if ns.scale_lo is not None:
            bounds = (ns.scale_lo, ns.scale_hi)
        context = RuleContext(ns.context, q=ns.q)
        tmle_report = cv_tmle(
            data,
            context,
            learners=learners,
            f_mode=ns.f_mode,
            n_folds=ns.folds,
            seed=tmle_seed,
            clamp=ns.clamp,
            alt_variance=ns.alt_variance,
            bounds=bounds,
        )
        tmle_payload = tmle_report.to_dict()
        report["warnings"].extend(tmle_report.warnings)
    else:
        report["warnings"].append(
            "point estimates only: targeted inference covers the constrained "
            "and unconstrained contexts"
        )

    if ns.rule_out:
        save_rule(rule, ns.rule_out)
    report["results"] = {
        "rule": _rule_summary(rule, float(treated.mean())),
        "tmle": tmle_payload,
        "evaluation": evaluation.to_dict(),
        "baselines": baselines,
        "oracle_comparison": None,
        "rule_path": ns.rule_out,
    }
    if tmle_payload is not None:
        print(
            f"psi_hat={tmle_payload['psi_hat']:.6g} "
            f"ci=[{tmle_payload['ci_lo']:.6g}, {tmle_payload['ci_hi']:.6g}]"
        )
    return report


def cmd_oracle(ns: argparse.Namespace) -> dict:
    pop, extras = load_truth_csv(ns.truth)
    report = _report_shell(ns)
    results = {
        "n": pop.n,
        "constrained": None,
        "unconstrained": _oracle_summary(solve_unconstrained(pop), pop),
        "cost": None,
        "heterogeneity": None,
    }
    if ns.q is not None:
        results["constrained"] = _oracle_summary(solve_constrained(pop, ns.q), pop)
    if pop.n >= 2:
        results["heterogeneity"] = _oracle_summary(solve_heterogeneity(pop), pop)
    else:
        report["warnings"].append("single-unit population: no heterogeneity split exists")
    if ns.budget is not None:
        if extras["cost"] is None:
            raise ValidationError("--budget requires a cost column in the truth file")
        total_budget = ns.budget * pop.total_mass
        results["cost"] = _oracle_summary(
            solve_cost_constrained(pop, extras["cost"], total_budget), pop
        )
    elif extras["cost"] is not None:
        report["warnings"].append("cost column present but no --budget given; cost context skipped")
    report["results"] = results
    return report


def cmd_evaluate(ns: argparse.Namespace) -> dict:
    rule = load_rule(ns.rule)
    pop, extras = load_truth_csv(ns.truth)
    evaluation = evaluate_on_truth(rule, pop, cost=extras["cost"])
    report = _report_shell(ns)
    report["results"] = {
        "rule": _rule_summary(rule, evaluation.treated_fraction),
        "evaluation": evaluation.to_dict(),
    }
    return report


def cmd_compare(ns: argparse.Namespace) -> dict:
    if ns.context == "constrained" and ns.q is None:
        raise ValidationError("--context constrained requires --q")
    root = np.random.SeedSequence(ns.seed)
    sim_seed, fit_seed = (int(s) for s in root.generate_state(2))
    spec = DgpSpec(
        name=ns.dgp, n=ns.n, covariate_dim=ns.dim, noise_sd=ns.noise_sd, seed=sim_seed
    )
    data, pop = simulate(spec, p=ns.randomized)
    learners = parse_learners(ns.learners)
    folds = assign_folds(data.n, ns.folds, fit_seed)
    model = fit_super_learner(data, learners, ns.f_mode, folds)
    rule = _make_rule(model, data, ns.context, ns)
    achieved = evaluate_on_truth(rule, pop)

    if ns.context == "constrained":
        solution = solve_constrained(pop, ns.q)
        regret = solution.objective_value - achieved.value
    elif ns.context == "unconstrained":
        solution = solve_unconstrained(pop)
        regret = solution.objective_value - achieved.value
    else:
        solution = solve_heterogeneity(pop)
        regret = solution.objective_value - achieved.heterogeneity

    report = _report_shell(ns)
    report["results"] = {
        "rule": _rule_summary(rule, achieved.treated_fraction),
        "oracle": _oracle_summary(solution, pop),
        "achieved": achieved.to_dict(),
        "regret": regret,
    }
    print(f"regret={regret:.6g}")
    return report


_HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "oracle": cmd_oracle,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def run(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    started = time.perf_counter()
    report = _HANDLERS[ns.command](ns)
    if getattr(ns, "timing", False):
        report["timing"] = {"seconds": time.perf_counter() - started}
    if getattr(ns, "report", None):
        write_report(report, ns.report)
        print(f"report: {ns.report}")
    elif ns.command not in ("simulate",):
        sys.stdout.write(serialize_report(report))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except OptruleError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
