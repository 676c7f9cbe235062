"""Exact brute-force ground truth on finite populations with known potential
outcomes: optimal partitions for the four decision contexts, their objective
values, and the stationarity equation for the heterogeneity threshold on a
tabulated effect density.

Conventions shared with the rule-construction module:

* Treatment-set membership is strict (effect > threshold); units exactly at
  the threshold stay untreated. Exact-cardinality constraints are met by
  promoting threshold-tied units in ascending index order.
* Heterogeneity split ties break toward the smaller treated set.
* All conditional means are mass-weighted.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array, check_positive
from .data import PotentialPopulation
from .errors import ValidationError

ENUMERATION_CAP = 20  # 2^n partitions beyond this are refused outright

CONSTRAINED = "constrained_value"
UNCONSTRAINED = "unconstrained_value"
COST = "cost_value"
HETEROGENEITY = "heterogeneity"


@dataclass(frozen=True)
class Partition:
    """A treated set T over unit indices; the complement S is implicit."""

    treated_indices: tuple[int, ...]
    n: int

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.treated_indices))
        if idx and (idx[0] < 0 or idx[-1] >= self.n):
            raise ValidationError("treated indices out of range for the population")
        if len(set(idx)) != len(idx):
            raise ValidationError("treated indices contain duplicates")
        object.__setattr__(self, "treated_indices", idx)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "Partition":
        mask = np.asarray(mask, dtype=bool)
        return cls(tuple(np.flatnonzero(mask).tolist()), mask.shape[0])

    def mask(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        out[list(self.treated_indices)] = True
        return out

    @property
    def treated_count(self) -> int:
        return len(self.treated_indices)


@dataclass(frozen=True)
class OracleSolution:
    """An optimal partition together with the threshold that reproduces it."""

    partition: Partition
    threshold: float
    objective_value: float
    objective: str
    degenerate: bool = False


def _population_value(pop: PotentialPopulation, mask: np.ndarray) -> float:
    """Mass-normalized mean outcome when exactly the masked units are treated."""
    w = pop.mass
    return float(np.sum(w * np.where(mask, pop.y1, pop.y0)) / w.sum())


def constrained_value(pop: PotentialPopulation, part: Partition, q: float) -> float:
    """q * E[Y1 | T] + (1 - q) * E[Y0 | S], mass-weighted.

    Requires mass(T)/mass(population) to equal ``q`` within 1e-12.
    """
    if not 0.0 < q < 1.0:
        raise ValidationError(f"q must lie strictly inside (0, 1), got {q!r}")
    mask = part.mask()
    w = pop.mass
    total = w.sum()
    frac = float(w[mask].sum() / total)
    if abs(frac - q) > 1e-12:
        raise ValidationError(
            f"partition treats mass fraction {frac!r}, which differs from q={q!r}"
        )
    mean_t = float(np.sum(w[mask] * pop.y1[mask]) / w[mask].sum())
    mean_s = float(np.sum(w[~mask] * pop.y0[~mask]) / w[~mask].sum())
    return q * mean_t + (1.0 - q) * mean_s


def random_allocation_value(pop: PotentialPopulation, q: float) -> float:
    """Expected outcome when a random mass fraction ``q`` is treated:
    q * E[Y1] + (1 - q) * E[Y0]."""
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"q must lie in [0, 1], got {q!r}")
    w = pop.mass
    total = w.sum()
    return q * float(np.sum(w * pop.y1) / total) + (1.0 - q) * float(np.sum(w * pop.y0) / total)


def _effect_order(pop: PotentialPopulation) -> np.ndarray:
    """Indices sorted by effect descending, ties by ascending index."""
    v = pop.effects
    return np.lexsort((np.arange(pop.n), -v))


def solve_constrained(pop: PotentialPopulation, q: float) -> OracleSolution:
    """Optimal partition treating exactly a mass fraction ``q``: the largest
    effects first, threshold-tied units promoted in index order.

    The threshold is the largest effect left untreated (-inf when everyone is
    treated), so ``effect > threshold`` plus index-ordered tie promotion
    reproduces the partition.
    """
    if not 0.0 < q <= 1.0:
        raise ValidationError(f"q must lie in (0, 1], got {q!r}")
    order = _effect_order(pop)
    w = pop.mass
    total = w.sum()
    target = q * total
    cum = np.cumsum(w[order])
    hits = np.flatnonzero(np.abs(cum - target) <= 1e-12 * max(1.0, total))
    if hits.size == 0:
        below = float(cum[cum < target].max(initial=0.0) / total)
        above = float(cum[cum > target].min(initial=total) / total)
        raise ValidationError(
            f"treated fraction q={q!r} is not attainable by an effect-ordered prefix; "
            f"nearest attainable proportions are {below!r} and {above!r}"
        )
    m = int(hits[0]) + 1
    treated = order[:m]
    v = pop.effects
    threshold = float(v[order[m]]) if m < pop.n else float("-inf")
    part = Partition(tuple(treated.tolist()), pop.n)
    if m == pop.n:
        value = float(np.sum(w * pop.y1) / total)
    else:
        value = constrained_value(pop, part, q)
    return OracleSolution(part, threshold, value, CONSTRAINED)


def solve_unconstrained(pop: PotentialPopulation) -> OracleSolution:
    """Treat exactly the units with strictly positive effect."""
    mask = pop.effects > 0.0
    part = Partition.from_mask(mask)
    return OracleSolution(part, 0.0, _population_value(pop, mask), UNCONSTRAINED)


def solve_cost_constrained(
    pop: PotentialPopulation, costs, budget: float
) -> OracleSolution:
    """Best feasible effect-per-cost threshold rule under a total-cost budget.

    ``budget`` bounds the mass-weighted total cost of the treated set. When
    the whole population is affordable the constraint is inactive and the
    unconstrained solution is returned. Otherwise thresholds k are scanned
    over the effect/cost ratios of positive-effect units (plus k = 0); among
    the rules ``effect/cost > k`` whose treated cost fits the budget, the
    value-maximizing one is returned with k at its smallest feasible cutoff.
    """
    check_positive(budget, "budget")
    costs = as_float_array(costs, "costs", ndim=1)
    if costs.shape[0] != pop.n:
        raise ValidationError("costs length does not match the population")
    if np.any(costs <= 0.0):
        raise ValidationError("costs must be strictly positive")
    w = pop.mass
    if float(np.sum(w * costs)) <= budget:
        best = solve_unconstrained(pop)
        return OracleSolution(best.partition, best.threshold, best.objective_value, COST)

    v = pop.effects
    ratios = v / costs
    candidates = np.unique(ratios[v > 0.0])[::-1]  # descending
    best_value = _population_value(pop, np.zeros(pop.n, dtype=bool))
    best_mask = np.zeros(pop.n, dtype=bool)
    best_k = float(candidates[0]) if candidates.size else 0.0
    for k in list(candidates) + [0.0]:
        mask = ratios > k
        if float(np.sum(w[mask] * costs[mask])) > budget:
            continue
        value = _population_value(pop, mask)
        if value > best_value or (value == best_value and k < best_k):
            best_value, best_mask, best_k = value, mask, float(k)
    return OracleSolution(Partition.from_mask(best_mask), best_k, best_value, COST)


def heterogeneity_objective(pop: PotentialPopulation, part: Partition) -> float:
    """Mass-weighted mean effect in T minus mean effect in S (both nonempty)."""
    mask = part.mask()
    if not mask.any() or mask.all():
        raise ValidationError("heterogeneity requires both T and S to be nonempty")
    v = pop.effects
    w = pop.mass
    mean_t = float(np.sum(w[mask] * v[mask]) / w[mask].sum())
    mean_s = float(np.sum(w[~mask] * v[~mask]) / w[~mask].sum())
    return mean_t - mean_s


def threshold_split_scan(
    values: np.ndarray, weights: np.ndarray | None = None
) -> tuple[float, np.ndarray, float, bool]:
    """Scan every split of the value-sorted units into a low set S and a high
    set T, maximizing mean(T) - mean(S) (weighted when weights are given).

    Returns ``(threshold, treated_mask, objective, degenerate)`` where the
    threshold is the largest value in S and ties break toward the smaller
    treated set. With all values equal the scan is degenerate: objective 0
    and T holding only the unit sorted last (the highest index).
    """
    values = as_float_array(values, "values", ndim=1)
    n = values.shape[0]
    if n < 2:
        raise ValidationError("a split needs at least 2 units")
    w = np.ones(n) if weights is None else as_float_array(weights, "weights", ndim=1)
    order = np.lexsort((np.arange(n), values))
    sv = values[order]
    sw = w[order]
    degenerate = bool(sv[0] == sv[-1])
    if degenerate:
        mask = np.zeros(n, dtype=bool)
        mask[order[-1]] = True
        return float(sv[-1]), mask, 0.0, True
    cum_w = np.cumsum(sw)
    cum_vw = np.cumsum(sv * sw)
    total_w = cum_w[-1]
    total_vw = cum_vw[-1]
    # split j: S = sorted[:j], T = sorted[j:], j = 1..n-1
    j = np.arange(1, n)
    mean_s = cum_vw[:-1] / cum_w[:-1]
    mean_t = (total_vw - cum_vw[:-1]) / (total_w - cum_w[:-1])
    het = mean_t - mean_s
    best = int(np.flatnonzero(het >= het.max())[-1])  # last max: smallest T
    split = int(j[best])
    mask = np.zeros(n, dtype=bool)
    mask[order[split:]] = True
    return float(sv[split - 1]), mask, float(het[best]), False


def solve_heterogeneity(pop: PotentialPopulation) -> OracleSolution:
    """Partition maximizing the effect-heterogeneity objective by scanning all
    splits of the effect-sorted units."""
    if pop.n < 2:
        raise ValidationError("heterogeneity needs at least 2 units (no nonempty split)")
    threshold, mask, het, degenerate = threshold_split_scan(pop.effects, pop.mass)
    return OracleSolution(Partition.from_mask(mask), threshold, het, HETEROGENEITY, degenerate)


# ---------------------------------------------------------------------------
# Exhaustive enumeration (the independent ground truth for the solvers above)
# ---------------------------------------------------------------------------


def iter_partitions(n: int, size: int | None = None):
    """Yield treated-index tuples: all subsets of a given size, or every one
    of the 2^n subsets when size is None. Hard-capped at n = 20."""
    if n > ENUMERATION_CAP:
        raise ValidationError(
            f"refusing to enumerate 2^{n} partitions (cap is n = {ENUMERATION_CAP})"
        )
    if size is not None:
        yield from itertools.combinations(range(n), size)
        return
    for m in range(n + 1):
        yield from itertools.combinations(range(n), m)


def enumerate_best_value(pop: PotentialPopulation, size: int | None = None):
    """Exhaustive maximum of the population value over partitions (optionally
    of fixed treated count). Returns (best_value, best_treated_tuple)."""
    best_value = -np.inf
    best = None
    y0, y1 = pop.y0, pop.y1
    w = pop.mass
    total = w.sum()
    base = float(np.sum(w * y0))
    gain = w * (y1 - y0)
    for treated in iter_partitions(pop.n, size):
        value = (base + float(gain[list(treated)].sum())) / total
        if value > best_value:
            best_value, best = value, treated
    return best_value, best


def enumerate_best_heterogeneity(pop: PotentialPopulation):
    """Exhaustive maximum of the heterogeneity objective over all partitions
    with both sides nonempty. Returns (best_het, best_treated_tuple)."""
    best_het = -np.inf
    best = None
    for treated in iter_partitions(pop.n):
        if len(treated) in (0, pop.n):
            continue
        het = heterogeneity_objective(pop, Partition(treated, pop.n))
        if het > best_het:
            best_het, best = het, treated
    return best_het, best


# ---------------------------------------------------------------------------
# Stationarity equation for the heterogeneity threshold on a tabulated density
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabulatedDensity:
    """A density of unit-level effects tabulated on an increasing grid,
    integrating to 1 under the trapezoid rule (tolerance 1e-6)."""

    grid: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        g = as_float_array(self.grid, "grid", ndim=1)
        d = as_float_array(self.density, "density", ndim=1)
        if g.shape[0] < 16:
            raise ValidationError("grid too coarse: at least 16 points required")
        if d.shape[0] != g.shape[0]:
            raise ValidationError("density length does not match the grid")
        if np.any(np.diff(g) <= 0.0):
            raise ValidationError("grid must be strictly increasing")
        if np.any(d < 0.0):
            raise ValidationError("density must be nonnegative")
        mass = float(np.trapezoid(d, g))
        if abs(mass - 1.0) > 1e-6:
            raise ValidationError(f"density integrates to {mass!r}, expected 1 within 1e-6")
        object.__setattr__(self, "grid", g.copy())
        object.__setattr__(self, "density", d.copy())
        self.grid.setflags(write=False)
        self.density.setflags(write=False)

    def _split_moments(self, kappa: float) -> tuple[float, float, float, float]:
        """Trapezoid (P(V<=k), P(V>k), int_{v<=k} v p dv, int_{v>k} v p dv),
        interpolating the density linearly at an off-grid kappa."""
        g, d = self.grid, self.density
        if kappa <= g[0]:
            lo_p = lo_m = 0.0
        elif kappa >= g[-1]:
            lo_p = float(np.trapezoid(d, g))
            lo_m = float(np.trapezoid(d * g, g))
        else:
            dk = float(np.interp(kappa, g, d))
            keep = g <= kappa
            gl = np.append(g[keep], kappa)
            dl = np.append(d[keep], dk)
            lo_p = float(np.trapezoid(dl, gl))
            lo_m = float(np.trapezoid(dl * gl, gl))
        tot_p = float(np.trapezoid(d, g))
        tot_m = float(np.trapezoid(d * g, g))
        return lo_p, tot_p - lo_p, lo_m, tot_m - lo_m


def kappa_stationarity_residual(kappa: float, density: TabulatedDensity) -> float:
    """Residual of the first-order condition for the heterogeneity-maximizing
    threshold on a continuous effect distribution:

        P(V<=k)^2 * (-k P(V>k) + E[V; V>k]) + P(V>k)^2 * (-k P(V<=k) + E[V; V<=k])
    """
    p_lo, p_hi, m_lo, m_hi = density._split_moments(float(kappa))
    return p_lo**2 * (-kappa * p_hi + m_hi) + p_hi**2 * (-kappa * p_lo + m_lo)


def locate_kappa_roots(density: TabulatedDensity, tol: float = 1e-10) -> list[float]:
    """Bracket sign changes of the stationarity residual on the grid and
    bisect each to ``tol`` in kappa. An empty list means no bracketed root
    (e.g. unbounded-tail effect distributions admit no interior maximum)."""
    g = density.grid
    res = np.array([kappa_stationarity_residual(k, density) for k in g])
    roots = []
    for i in range(len(g) - 1):
        a, b = float(g[i]), float(g[i + 1])
        fa, fb = float(res[i]), float(res[i + 1])
        if fa == 0.0:
            roots.append(a)
            continue
        if fa * fb < 0.0:
            while b - a > tol:
                mid = 0.5 * (a + b)
                fm = kappa_stationarity_residual(mid, density)
                if fm == 0.0:
                    a = b = mid
                    break
                if fa * fm < 0.0:
                    b = mid
                else:
                    a, fa = mid, fm
            roots.append(0.5 * (a + b))
    if len(g) and float(res[-1]) == 0.0:
        roots.append(float(g[-1]))
    return roots
