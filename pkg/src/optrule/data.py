"""Trial datasets, potential-outcome populations, CSV input/output, and
seedable synthetic data-generating processes with known ground truth.

CSV schema (observed data): UTF-8 with a header row; required columns ``y``
(real outcome) and ``a`` (integer 0/1 treatment); optional ``p`` (propensity
of the observed arm, strictly inside (0, 1)) and ``cost`` (strictly positive
real); every other column is a covariate, order significant. No NA tokens:
any missing or non-finite field is a hard error naming the 1-based data row.

Truth schema (potential outcomes): required ``y0`` and ``y1``; optional
``mass``, ``cost`` and ``cate``; every other column is a covariate.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from ._validation import as_float_array, check_probability, readonly
from .errors import CsvParseError, ValidationError
from .rng import children, generator

RESERVED_DATA_COLUMNS = ("y", "a", "p", "cost")
RESERVED_TRUTH_COLUMNS = ("y0", "y1", "mass", "cost", "cate")


@dataclass(frozen=True)
class Design:
    """Study design: randomized with known assignment probability, or observational."""

    kind: str  # "randomized" | "observational"
    p: float | None = None

    @classmethod
    def randomized(cls, p: float) -> "Design":
        return cls("randomized", check_probability(p, "randomization probability"))

    @classmethod
    def observational(cls) -> "Design":
        return cls("observational", None)

    def __post_init__(self):
        if self.kind not in ("randomized", "observational"):
            raise ValidationError(f"unknown design kind {self.kind!r}")
        if self.kind == "randomized" and self.p is None:
            raise ValidationError("randomized design requires an assignment probability")


@dataclass(frozen=True)
class TrialRecord:
    """One observed trial participant."""

    covariates: tuple
    treatment: int
    outcome: float
    propensity: float
    cost: float | None = None


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Observed records stored column-wise; immutable after construction.

    ``propensity[i]`` is always P(A = a_i | C = c_i) for the *observed* arm.
    """

    covariates: np.ndarray  # (n, p)
    treatment: np.ndarray  # (n,) of 0/1
    outcome: np.ndarray  # (n,)
    propensity: np.ndarray  # (n,) in (0, 1)
    covariate_names: tuple[str, ...]
    design: Design
    cost: np.ndarray | None = None  # (n,) positive, optional

    def __post_init__(self):
        x = as_float_array(self.covariates, "covariates", ndim=2)
        n = x.shape[0]
        a = np.asarray(self.treatment)
        if a.shape != (n,):
            raise ValidationError(f"treatment has shape {a.shape}, expected ({n},)")
        if not np.isin(a, (0, 1)).all():
            raise ValidationError("treatment must be 0 or 1 for every record")
        y = as_float_array(self.outcome, "outcome", ndim=1)
        p = as_float_array(self.propensity, "propensity", ndim=1)
        if y.shape[0] != n or p.shape[0] != n:
            raise ValidationError("outcome/propensity length does not match covariates")
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise ValidationError("propensity must lie strictly inside (0, 1) for every record")
        if len(self.covariate_names) != x.shape[1]:
            raise ValidationError("covariate_names length does not match covariate dimension")
        c = self.cost
        if c is not None:
            c = as_float_array(c, "cost", ndim=1)
            if c.shape[0] != n:
                raise ValidationError("cost length does not match covariates")
            if np.any(c <= 0.0):
                raise ValidationError("cost must be strictly positive for every record")
        if self.design.kind == "randomized":
            expected = np.where(a == 1, self.design.p, 1.0 - self.design.p)
            if not np.allclose(p, expected, rtol=0.0, atol=1e-12):
                raise ValidationError(
                    "randomized design requires every propensity to equal the "
                    "assignment probability (treated) or its complement (controls)"
                )
        object.__setattr__(self, "covariates", readonly(x))
        object.__setattr__(self, "treatment", readonly(a.astype(np.int64)))
        object.__setattr__(self, "outcome", readonly(y))
        object.__setattr__(self, "propensity", readonly(p))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "cost", None if c is None else readonly(c))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def covariate_dim(self) -> int:
        return self.covariates.shape[1]

    def record(self, i: int) -> TrialRecord:
        return TrialRecord(
            covariates=tuple(self.covariates[i]),
            treatment=int(self.treatment[i]),
            outcome=float(self.outcome[i]),
            propensity=float(self.propensity[i]),
            cost=None if self.cost is None else float(self.cost[i]),
        )

    def records(self) -> Iterator[TrialRecord]:
        return (self.record(i) for i in range(self.n))

    def subset(self, indices) -> "TrialDataset":
        """Row subset sharing names and design (propensities are per-row, so any
        design remains valid on a subset)."""
        idx = np.asarray(indices)
        return TrialDataset(
            covariates=self.covariates[idx],
            treatment=self.treatment[idx],
            outcome=self.outcome[idx],
            propensity=self.propensity[idx],
            covariate_names=self.covariate_names,
            design=self.design,
            cost=None if self.cost is None else self.cost[idx],
        )


@dataclass(frozen=True)
class PotentialUnit:
    """One unit with both potential outcomes known (the effect y1 - y0 is
    always derived, never stored)."""

    covariates: tuple
    y0: float
    y1: float
    mass: float = 1.0


@dataclass(frozen=True, eq=False)
class PotentialPopulation:
    """Finite population with both potential outcomes known for every unit."""

    covariates: np.ndarray  # (n, p)
    y0: np.ndarray  # (n,)
    y1: np.ndarray  # (n,)
    mass: np.ndarray | None = None  # (n,) positive; default all-ones
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = as_float_array(self.covariates, "covariates", ndim=2)
        n = x.shape[0]
        if n == 0:
            raise ValidationError("population must be nonempty")
        y0 = as_float_array(self.y0, "y0", ndim=1)
        y1 = as_float_array(self.y1, "y1", ndim=1)
        if y0.shape[0] != n or y1.shape[0] != n:
            raise ValidationError("y0/y1 length does not match covariates")
        m = self.mass
        if m is None:
            m = np.ones(n)
        else:
            m = as_float_array(m, "mass", ndim=1)
            if m.shape[0] != n:
                raise ValidationError("mass length does not match covariates")
            if np.any(m <= 0.0):
                raise ValidationError("mass must be strictly positive for every unit")
        names = self.covariate_names or tuple(f"c{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValidationError("covariate_names length does not match covariate dimension")
        object.__setattr__(self, "covariates", readonly(x))
        object.__setattr__(self, "y0", readonly(y0))
        object.__setattr__(self, "y1", readonly(y1))
        object.__setattr__(self, "mass", readonly(m))
        object.__setattr__(self, "covariate_names", tuple(names))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def effects(self) -> np.ndarray:
        """Per-unit treatment effects y1 - y0 (derived on demand)."""
        return self.y1 - self.y0

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    def unit(self, i: int) -> PotentialUnit:
        return PotentialUnit(
            covariates=tuple(self.covariates[i]),
            y0=float(self.y0[i]),
            y1=float(self.y1[i]),
            mass=float(self.mass[i]),
        )


# ---------------------------------------------------------------------------
# Synthetic data-generating processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DgpSpec:
    """Configuration of a named synthetic data-generating process."""

    name: str
    n: int
    covariate_dim: int = 1
    noise_sd: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.name not in DGP_REGISTRY:
            raise ValidationError(
                f"unknown DGP {self.name!r}; known: {', '.join(sorted(DGP_REGISTRY))}"
            )
        if self.n < 1:
            raise ValidationError("n must be a positive integer")
        if self.covariate_dim < 1:
            raise ValidationError("covariate_dim must be a positive integer")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be nonnegative")


@dataclass(frozen=True)
class Dgp:
    """A named process: covariates are iid Uniform(0,1)^dim, outcomes follow
    ``mu0``/``effect`` with Gaussian noise.

    ``shared_noise`` processes add one noise draw to both arms, so the
    per-unit effect equals the documented conditional effect at every noise
    level; otherwise each arm gets an independent draw and the equality holds
    only at noise_sd = 0.
    """

    name: str
    mu0: Callable[[np.ndarray], np.ndarray]
    effect: Callable[[np.ndarray], np.ndarray]
    true_psi: float  # mean gain of the treat-if-beneficial rule over treating no one
    shared_noise: bool

    def true_cate(self, covariates: np.ndarray) -> np.ndarray:
        """Conditional effect evaluated exactly as the potential outcomes are
        built (mu1 - mu0 in floating point), so it matches y1 - y0 bit-for-bit
        at noise_sd = 0."""
        x = np.asarray(covariates, dtype=float)
        base = self.mu0(x)
        return (base + self.effect(x)) - base


def _mu0(x: np.ndarray) -> np.ndarray:
    return 0.2 + 0.5 * x[:, 0]


DGP_REGISTRY: dict[str, Dgp] = {
    # effect tau(c) = 0.3 for everyone; psi = 0.3
    "constant_effect": Dgp(
        "constant_effect", _mu0, lambda x: np.full(x.shape[0], 0.3), 0.3, True
    ),
    # tau(c) = c1 - 0.5; psi = integral of (c - 0.5) over c in (0.5, 1) = 0.125
    "linear_cate": Dgp("linear_cate", _mu0, lambda x: x[:, 0] - 0.5, 0.125, True),
    # tau(c) = c1^2 - 0.25, sign crossover at c1 = 0.5; psi = 1/6
    "crossover_cate": Dgp(
        "crossover_cate", _mu0, lambda x: x[:, 0] ** 2 - 0.25, 1.0 / 6.0, False
    ),
    # y1 = y0 for every unit; psi = 0
    "null_effect": Dgp("null_effect", _mu0, lambda x: np.zeros(x.shape[0]), 0.0, True),
}


def build_population(spec: DgpSpec) -> PotentialPopulation:
    """Draw a finite population (both potential outcomes) for a DGP spec."""
    dgp = DGP_REGISTRY[spec.name]
    ss_x, ss_e0, ss_e1, _ = children(spec.seed, 4)
    x = generator(ss_x).random((spec.n, spec.covariate_dim))
    base = dgp.mu0(x)
    cate = dgp.true_cate(x)
    noise0 = spec.noise_sd * generator(ss_e0).standard_normal(spec.n)
    y0 = base + noise0
    if dgp.shared_noise:
        y1 = y0 + cate
    else:
        y1 = (base + dgp.effect(x)) + spec.noise_sd * generator(ss_e1).standard_normal(spec.n)
    names = tuple(f"c{j + 1}" for j in range(spec.covariate_dim))
    return PotentialPopulation(covariates=x, y0=y0, y1=y1, covariate_names=names)


def reveal(pop: PotentialPopulation, p: float, seed) -> TrialDataset:
    """Randomize each unit to an arm with treatment probability ``p`` and
    reveal the corresponding potential outcome.

    Each unit contributes one unweighted record; oracle-side masses do not
    carry over to the trial sample.
    """
    p = check_probability(p, "treatment probability")
    a = (generator(seed).random(pop.n) < p).astype(np.int64)
    return TrialDataset(
        covariates=pop.covariates,
        treatment=a,
        outcome=np.where(a == 1, pop.y1, pop.y0),
        propensity=np.where(a == 1, p, 1.0 - p),
        covariate_names=pop.covariate_names,
        design=Design.randomized(p),
    )


def simulate(spec: DgpSpec, p: float = 0.5) -> tuple[TrialDataset, PotentialPopulation]:
    """Simulate a randomized trial: build the population, then reveal one arm
    per unit at treatment probability ``p``. Deterministic given the seed."""
    pop = build_population(spec)
    _, _, _, ss_reveal = children(spec.seed, 4)
    return reveal(pop, p, ss_reveal), pop


# ---------------------------------------------------------------------------
# CSV input/output
# ---------------------------------------------------------------------------


def _parse_real(token: str, column: str, row: int, *, integer: bool = False) -> float:
    token = token.strip()
    if token == "":
        raise CsvParseError(f"missing value in column {column!r}", row)
    try:
        value = float(token)
    except ValueError:
        raise CsvParseError(f"malformed number {token!r} in column {column!r}", row) from None
    if not np.isfinite(value):
        raise CsvParseError(f"non-finite value {token!r} in column {column!r}", row)
    if integer and value != int(value):
        raise CsvParseError(f"non-integer value {token!r} in column {column!r}", row)
    return value


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError("file is empty, expected a header row") from None
        header = [h.strip() for h in header]
        rows = []
        for i, cells in enumerate(reader, start=1):
            if not cells:
                continue
            if len(cells) != len(header):
                raise CsvParseError(
                    f"expected {len(header)} fields, found {len(cells)}", i
                )
            rows.append(cells)
    if len(set(header)) != len(header):
        raise CsvParseError("duplicate column names in header")
    return header, rows


def load_csv(path, randomized: float | None = None) -> TrialDataset:
    """Load an observed-data CSV.

    ``randomized`` supplies the randomization probability when the file has
    no ``p`` column (propensities become ``randomized`` for treated rows and
    its complement for controls). With an explicit ``p`` column the design is
    observational unless ``randomized`` is also given, in which case the
    column is validated against it and the randomized design retained.
    """
    header, rows = _read_table(path)
    missing = [name for name in ("y", "a") if name not in header]
    if missing:
        raise CsvParseError(f"required column(s) {', '.join(repr(m) for m in missing)} missing")
    col = {name: j for j, name in enumerate(header)}
    cov_names = [h for h in header if h not in RESERVED_DATA_COLUMNS]
    has_p = "p" in col
    has_cost = "cost" in col
    if not has_p and randomized is None:
        raise ValidationError(
            "file has no 'p' column; pass the randomization probability "
            "(flag --randomized) or add a propensity column"
        )
    r = None if randomized is None else check_probability(randomized, "randomization probability")

    n = len(rows)
    if n == 0:
        raise CsvParseError("file contains a header but no data rows")
    y = np.empty(n)
    a = np.empty(n, dtype=np.int64)
    p = np.empty(n)
    cost = np.empty(n) if has_cost else None
    x = np.empty((n, len(cov_names)))
    for i, cells in enumerate(rows, start=1):
        y[i - 1] = _parse_real(cells[col["y"]], "y", i)
        aval = _parse_real(cells[col["a"]], "a", i, integer=True)
        if aval not in (0.0, 1.0):
            raise CsvParseError(f"treatment must be 0 or 1, got {int(aval)}", i)
        a[i - 1] = int(aval)
        if has_p:
            pval = _parse_real(cells[col["p"]], "p", i)
            if not 0.0 < pval < 1.0:
                raise CsvParseError(f"propensity must lie strictly inside (0, 1), got {pval}", i)
            p[i - 1] = pval
        else:
            p[i - 1] = r if a[i - 1] == 1 else 1.0 - r
        if has_cost:
            cval = _parse_real(cells[col["cost"]], "cost", i)
            if cval <= 0.0:
                raise CsvParseError(f"cost must be strictly positive, got {cval}", i)
            cost[i - 1] = cval
        for j, name in enumerate(cov_names):
            x[i - 1, j] = _parse_real(cells[col[name]], name, i)

    if has_p and r is not None:
        expected = np.where(a == 1, r, 1.0 - r)
        if not np.allclose(p, expected, rtol=0.0, atol=1e-12):
            raise ValidationError(
                "propensity column is inconsistent with the supplied randomization probability"
            )
        design = Design.randomized(r)
    elif has_p:
        design = Design.observational()
    else:
        design = Design.randomized(r)
    return TrialDataset(
        covariates=x,
        treatment=a,
        outcome=y,
        propensity=p,
        covariate_names=tuple(cov_names),
        design=design,
        cost=cost,
    )


def load_truth_csv(path) -> tuple[PotentialPopulation, dict]:
    """Load a potential-outcome CSV.

    Returns the population plus an ``extras`` dict with optional per-unit
    ``cost`` and ``cate`` arrays (None when the column is absent). Propensity
    columns have no meaning here and are rejected to keep the oracle side
    free of observed-data inputs.
    """
    header, rows = _read_table(path)
    for required in ("y0", "y1"):
        if required not in header:
            raise CsvParseError(f"required column {required!r} is missing")
    if "p" in header or "a" in header or "y" in header:
        raise CsvParseError("columns 'y', 'a' and 'p' do not belong in a truth file")
    col = {name: j for j, name in enumerate(header)}
    cov_names = [h for h in header if h not in RESERVED_TRUTH_COLUMNS]
    n = len(rows)
    if n == 0:
        raise CsvParseError("file contains a header but no data rows")
    y0 = np.empty(n)
    y1 = np.empty(n)
    mass = np.empty(n) if "mass" in col else None
    cost = np.empty(n) if "cost" in col else None
    cate = np.empty(n) if "cate" in col else None
    x = np.empty((n, len(cov_names)))
    for i, cells in enumerate(rows, start=1):
        y0[i - 1] = _parse_real(cells[col["y0"]], "y0", i)
        y1[i - 1] = _parse_real(cells[col["y1"]], "y1", i)
        if mass is not None:
            mval = _parse_real(cells[col["mass"]], "mass", i)
            if mval <= 0.0:
                raise CsvParseError(f"mass must be strictly positive, got {mval}", i)
            mass[i - 1] = mval
        if cost is not None:
            cval = _parse_real(cells[col["cost"]], "cost", i)
            if cval <= 0.0:
                raise CsvParseError(f"cost must be strictly positive, got {cval}", i)
            cost[i - 1] = cval
        if cate is not None:
            cate[i - 1] = _parse_real(cells[col["cate"]], "cate", i)
        for j, name in enumerate(cov_names):
            x[i - 1, j] = _parse_real(cells[col[name]], name, i)
    pop = PotentialPopulation(
        covariates=x, y0=y0, y1=y1, mass=mass, covariate_names=tuple(cov_names)
    )
    return pop, {"cost": cost, "cate": cate}


def _fmt(value: float) -> str:
    # repr of a float is the shortest decimal that round-trips exactly
    return repr(float(value))


def _write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dataset_csv(dataset: TrialDataset, path) -> None:
    """Write an observed dataset in the loadable schema (always includes ``p``)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["y", "a", "p"]
    if dataset.cost is not None:
        header.append("cost")
    header.extend(dataset.covariate_names)
    writer.writerow(header)
    for i in range(dataset.n):
        row = [_fmt(dataset.outcome[i]), str(int(dataset.treatment[i])), _fmt(dataset.propensity[i])]
        if dataset.cost is not None:
            row.append(_fmt(dataset.cost[i]))
        row.extend(_fmt(v) for v in dataset.covariates[i])
        writer.writerow(row)
    _write_atomic(path, buf.getvalue())


def write_truth_csv(
    pop: PotentialPopulation,
    path,
    cate: np.ndarray | None = None,
    cost: np.ndarray | None = None,
    include_mass: bool = False,
) -> None:
    """Write a potential-outcome CSV (columns y0, y1[, cate][, mass][, cost], covariates)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["y0", "y1"]
    if cate is not None:
        header.append("cate")
    if include_mass:
        header.append("mass")
    if cost is not None:
        header.append("cost")
    header.extend(pop.covariate_names)
    writer.writerow(header)
    for i in range(pop.n):
        row = [_fmt(pop.y0[i]), _fmt(pop.y1[i])]
        if cate is not None:
            row.append(_fmt(cate[i]))
        if include_mass:
            row.append(_fmt(pop.mass[i]))
        if cost is not None:
            row.append(_fmt(cost[i]))
        row.extend(_fmt(v) for v in pop.covariates[i])
        writer.writerow(row)
    _write_atomic(path, buf.getvalue())
