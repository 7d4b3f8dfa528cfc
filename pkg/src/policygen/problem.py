"""Synt-ND benchmark: discretized domains, quartic test function, reward,
octant regions and an exhaustive solution oracle."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

ENUMERATION_BUDGET = 10**8
OCTANT_ENCODING = "bit-t-set-iff-variable-t-positive"


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class DiscreteDomain:
    lower: float = -5.0
    upper: float = 5.0
    cardinality: int = 100

    def __post_init__(self):
        if self.cardinality < 2:
            raise ValueError("cardinality must be at least 2")
        if not self.upper > self.lower:
            raise ValueError("upper must exceed lower")

    def value(self, j: int) -> float:
        return domain_value(self, j)

    @property
    def values(self) -> np.ndarray:
        j = np.arange(self.cardinality, dtype=np.float64)
        return self.lower + (self.upper - self.lower) * j / (self.cardinality - 1)


def domain_value(domain: DiscreteDomain, j: int) -> float:
    if not 0 <= j < domain.cardinality:
        raise IndexError(f"index {j} outside domain of size {domain.cardinality}")
    return domain.lower + (domain.upper - domain.lower) * j / (domain.cardinality - 1)


@dataclass(frozen=True)
class SyntProblem:
    domains: tuple[DiscreteDomain, ...]
    threshold: float = 1.2

    @classmethod
    def synt(cls, dim: int = 3, cardinality: int = 100, threshold: float = 1.2,
             lower: float = -5.0, upper: float = 5.0) -> "SyntProblem":
        if dim < 1:
            raise ValueError("dim must be a positive integer")
        return cls(tuple(DiscreteDomain(lower, upper, cardinality) for _ in range(dim)), threshold)

    @property
    def dim(self) -> int:
        return len(self.domains)

    @property
    def cardinalities(self) -> list[int]:
        return [d.cardinality for d in self.domains]

    def grid_size(self) -> int:
        return int(np.prod(self.cardinalities, dtype=object))

    def values_of(self, indices) -> np.ndarray:
        """Map an index array of shape (..., T) to grid values."""
        idx = np.asarray(indices)
        if idx.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} indices, got {idx.shape[-1]}")
        out = np.empty(idx.shape, dtype=np.float64)
        for t, d in enumerate(self.domains):
            col = idx[..., t]
            if (col < 0).any() or (col >= d.cardinality).any():
                raise IndexError(f"index out of range for variable {t}")
            out[..., t] = d.values[col]
        return out

    def assignment(self, indices) -> "Assignment":
        idx = tuple(int(i) for i in indices)
        return Assignment(idx, tuple(float(v) for v in self.values_of(idx)))


@dataclass(frozen=True)
class Assignment:
    indices: tuple[int, ...]
    values: tuple[float, ...]


def per_variable_term(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    return 0.25 * x2 * x2 - 2.0 * x2 + 5.0


def f_values(values) -> np.ndarray:
    """Quartic test function on raw values of shape (..., T)."""
    return per_variable_term(values).mean(axis=-1)


def f_test(problem: SyntProblem, x: Assignment) -> float:
    _check_assignment(problem, x)
    return float(f_values(np.asarray(x.values)))


def reward_from_f(f, threshold: float = 1.2) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if (f <= -threshold).any():
        raise ValueError("reward undefined for f <= -threshold")
    return np.minimum((threshold - f) / (threshold + f), 0.0)


def reward(problem: SyntProblem, x: Assignment) -> float:
    return float(reward_from_f(f_test(problem, x), problem.threshold))


def batch_reward(problem: SyntProblem, indices) -> tuple[np.ndarray, np.ndarray]:
    """(f_test, reward) for an index array of shape (N, T)."""
    f = f_values(problem.values_of(indices))
    return f, reward_from_f(f, problem.threshold)


def _check_assignment(problem: SyntProblem, x: Assignment) -> None:
    if len(x.indices) != problem.dim:
        raise ValueError(f"assignment has {len(x.indices)} variables, problem has {problem.dim}")
    for t, (j, d) in enumerate(zip(x.indices, problem.domains)):
        if not 0 <= j < d.cardinality:
            raise IndexError(f"index {j} out of range for variable {t}")


# ---------------------------------------------------------------------------
# octants and regions
# ---------------------------------------------------------------------------


def octant_labels(values) -> np.ndarray:
    """Vectorized octant label for values of shape (..., T)."""
    v = np.asarray(values, dtype=np.float64)
    if (v == 0.0).any():
        raise ValueError("octant undefined: a coordinate is exactly zero")
    weights = 1 << np.arange(v.shape[-1], dtype=np.int64)
    return ((v > 0).astype(np.int64) * weights).sum(axis=-1)


def octant_of(x: Assignment) -> int:
    return int(octant_labels(np.asarray(x.values)))


@dataclass(frozen=True)
class RegionSpec:
    """Cartesian product of per-variable allowed index sets."""

    allowed: tuple[frozenset[int], ...]

    def __post_init__(self):
        if any(len(s) == 0 for s in self.allowed):
            raise ValueError("every per-variable allowed set must be non-empty")
        if any(j < 0 for s in self.allowed for j in s):
            raise ValueError("negative index in region")

    @classmethod
    def from_sets(cls, sets) -> "RegionSpec":
        return cls(tuple(frozenset(int(j) for j in s) for s in sets))

    @classmethod
    def full(cls, cardinalities) -> "RegionSpec":
        return cls.from_sets(range(c) for c in cardinalities)

    @property
    def dim(self) -> int:
        return len(self.allowed)

    @property
    def size(self) -> int:
        return int(np.prod([len(s) for s in self.allowed], dtype=object))

    def masks(self, cardinalities) -> list[np.ndarray]:
        if len(cardinalities) != self.dim:
            raise ValueError(f"region has {self.dim} variables, expected {len(cardinalities)}")
        out = []
        for t, (s, card) in enumerate(zip(self.allowed, cardinalities)):
            if max(s) >= card:
                raise ValueError(f"region index {max(s)} outside domain {t} of size {card}")
            m = np.zeros(card, dtype=bool)
            m[sorted(s)] = True
            out.append(m)
        return out

    def intersects(self, other: "RegionSpec") -> bool:
        return all(a & b for a, b in zip(self.allowed, other.allowed))


def region_membership(x: Assignment, region: RegionSpec) -> bool:
    if len(x.indices) != region.dim:
        raise ValueError(f"assignment has {len(x.indices)} variables, region has {region.dim}")
    return all(j in s for j, s in zip(x.indices, region.allowed))


@dataclass(frozen=True)
class ConditionSet:
    labels: tuple[int, ...]
    regions: tuple[RegionSpec, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.regions) or not self.labels:
            raise ValueError("need one region per label and at least one label")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @classmethod
    def trivial(cls, problem: SyntProblem) -> "ConditionSet":
        """Single label whose region is the whole grid (unconditional runs)."""
        return cls((0,), (RegionSpec.full(problem.cardinalities),))

    def is_disjoint(self) -> bool:
        return not any(
            a.intersects(b) for a, b in itertools.combinations(self.regions, 2)
        )

    def mask_table(self, cardinalities) -> list[np.ndarray]:
        """Per variable, a (L, card) boolean table of allowed indices."""
        per_region = [r.masks(cardinalities) for r in self.regions]
        return [np.stack([pr[t] for pr in per_region]) for t in range(len(cardinalities))]


def octant_regions(problem: SyntProblem) -> ConditionSet:
    halves = []
    for t, d in enumerate(problem.domains):
        vals = d.values
        if (vals == 0.0).any():
            raise ValueError(f"domain {t} has a grid point at exactly 0")
        halves.append((frozenset(np.flatnonzero(vals < 0).tolist()),
                       frozenset(np.flatnonzero(vals > 0).tolist())))
    n = 1 << problem.dim
    regions = tuple(
        RegionSpec(tuple(halves[t][(label >> t) & 1] for t in range(problem.dim)))
        for label in range(n)
    )
    return ConditionSet(tuple(range(n)), regions)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    solutions: np.ndarray  # (S, T) index rows, lexicographically sorted
    per_octant_counts: list[int]
    total_count: int
    threshold: float
    problem: SyntProblem = field(repr=False)

    def assignments(self) -> list[Assignment]:
        return [self.problem.assignment(row) for row in self.solutions]

    def solution_set(self) -> set[tuple[int, ...]]:
        return {tuple(int(i) for i in row) for row in self.solutions}

    def summary(self) -> dict:
        d0 = self.problem.domains[0]
        return {
            "dim": self.problem.dim,
            "cardinality": self.problem.cardinalities,
            "lower": [d.lower for d in self.problem.domains],
            "upper": [d.upper for d in self.problem.domains],
            "threshold": self.threshold,
            "octant_encoding": OCTANT_ENCODING,
            "per_octant_counts": list(self.per_octant_counts),
            "total_count": self.total_count,
            "grid_size": self.problem.grid_size(),
            "grid_step": (d0.upper - d0.lower) / (d0.cardinality - 1),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        T = self.problem.dim
        w.writerow([f"idx_{t + 1}" for t in range(T)] + [f"x_{t + 1}" for t in range(T)]
                   + ["f_test", "octant"])
        if len(self.solutions):
            vals = self.problem.values_of(self.solutions)
            f = f_values(vals)
            octs = octant_labels(vals)
            for row, v, fv, o in zip(self.solutions, vals, f, octs):
                w.writerow([int(i) for i in row] + [repr(float(x)) for x in v]
                           + [repr(float(fv)), int(o)])
        return buf.getvalue()


def enumerate_solutions(problem: SyntProblem, budget: int = ENUMERATION_BUDGET) -> OracleResult:
    """Exhaustive scan of the grid for assignments with f_test < threshold.

    Since f is a mean of per-variable terms, the scan works on the term
    table: the last (up to) three variables are broadcast, the leading ones
    iterated.
    """
    size = problem.grid_size()
    if size > budget:
        raise BudgetExceeded(
            f"grid has {size} points, above the enumeration budget of {budget}; "
            "use sampling-based estimation for this instance"
        )
    T = problem.dim
    terms = [per_variable_term(d.values) for d in problem.domains]
    limit = problem.threshold * T  # sum of terms must stay strictly below
    n_inner = min(T, 3)
    inner = np.zeros((), dtype=np.float64)
    for t in range(T - n_inner, T):
        inner = np.add.outer(inner, terms[t])
    found = []
    lead_cards = problem.cardinalities[: T - n_inner]
    for lead in itertools.product(*(range(c) for c in lead_cards)):
        base = sum(terms[t][j] for t, j in enumerate(lead))
        hits = np.argwhere(base + inner < limit)
        if len(hits):
            prefix = np.broadcast_to(np.asarray(lead, dtype=np.int64), (len(hits), len(lead)))
            found.append(np.hstack([prefix, hits.astype(np.int64)]))
    sols = np.vstack(found) if found else np.zeros((0, T), dtype=np.int64)
    sols = sols[np.lexsort(sols.T[::-1])] if len(sols) else sols
    counts = np.zeros(1 << T, dtype=np.int64)
    if len(sols) and all(not (d.values == 0.0).any() for d in problem.domains):
        np.add.at(counts, octant_labels(problem.values_of(sols)), 1)
    return OracleResult(sols, counts.tolist(), int(len(sols)), problem.threshold, problem)


def enumerate_by_reflection(problem: SyntProblem) -> set[tuple[int, ...]]:
    """Independent oracle: scan only the all-negative octant in pure Python,
    then mirror every hit through j -> card-1-j on each coordinate subset.

    Requires identical, sign-symmetric, zero-free domains.
    """
    d = problem.domains[0]
    if any(dd != d for dd in problem.domains) or d.lower != -d.upper or d.cardinality % 2:
        raise ValueError("reflection oracle needs identical symmetric even-cardinality domains")
    card, T = d.cardinality, problem.dim
    half = card // 2
    step = (d.upper - d.lower) / (card - 1)
    term = []
    for j in range(half):
        x = d.lower + step * j
        term.append(x**4 / 4 - 2 * x**2 + 5)
    limit = problem.threshold * T
    base = []
    for idx in itertools.product(range(half), repeat=T):
        if sum(term[j] for j in idx) < limit:
            base.append(idx)
    out = set()
    for idx in base:
        for flips in itertools.product((False, True), repeat=T):
            out.add(tuple(card - 1 - j if f else j for j, f in zip(idx, flips)))
    return out
