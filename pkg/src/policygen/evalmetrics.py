"""Sampling-based evaluation of a generator: recovery, mode coverage,
uniformity, diversity against the oracle, and the per-class confusion matrix."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .policy import ActionDistribution, PolicyGenerator, sample_indices
from .problem import ConditionSet, OracleResult, SyntProblem, batch_reward, octant_labels

CHUNK = 4096


@dataclass
class SampleTable:
    """One row per generated sample."""

    class_label: np.ndarray  # (n,)
    indices: np.ndarray  # (n, T)
    values: np.ndarray  # (n, T)
    f_test: np.ndarray
    reward: np.ndarray
    octant: np.ndarray
    satisfied: np.ndarray

    def __len__(self) -> int:
        return int(self.class_label.shape[0])

    def to_csv(self) -> str:
        T = self.indices.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "class_label"] + [f"idx_{t + 1}" for t in range(T)]
                   + [f"x_{t + 1}" for t in range(T)]
                   + ["f_test", "reward", "octant", "satisfied"])
        for i in range(len(self)):
            w.writerow([i, int(self.class_label[i])]
                       + [int(j) for j in self.indices[i]]
                       + [repr(float(x)) for x in self.values[i]]
                       + [repr(float(self.f_test[i])), repr(float(self.reward[i])),
                          int(self.octant[i]), int(bool(self.satisfied[i]))])
        return buf.getvalue()


@dataclass
class EvalReport:
    n_samples: int
    label: int | None
    recovery_rate: float
    mean_reward: float
    per_octant_counts: list[int]
    satisfied_per_octant: list[int]
    mode_coverage: int
    coverage_threshold: float
    uniformity: float
    distinct_solutions: int
    oracle_total: int | None
    oracle_coverage: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConfusionMatrix:
    counts: list[list[int]]  # rows: conditioned class, columns: octant of the sample
    per_class_accuracy: list[float]
    overall_accuracy: float
    joint_rate: list[float]  # in-octant and satisfying, per class
    n_per_class: int

    def to_dict(self) -> dict:
        return asdict(self)


def draw_samples(gen: PolicyGenerator, problem: SyntProblem, n: int, labels,
                 rng: np.random.Generator) -> SampleTable:
    """``labels`` is an int or an array of n labels. Noise and uniforms are
    drawn chunk by chunk in a fixed order."""
    if gen.cardinalities != problem.cardinalities:
        raise ValueError(
            f"generator cardinalities {gen.cardinalities} do not match problem {problem.cardinalities}"
        )
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
    idx_parts = []
    for start in range(0, n, CHUNK):
        stop = min(n, start + CHUNK)
        noise = rng.standard_normal((stop - start, gen.dim, gen.noise_dim))
        logits, _ = gen.forward(noise, labels[start:stop])
        dist = ActionDistribution([z - _logsumexp(z) for z in logits])
        idx_parts.append(sample_indices(rng, dist))
    idx = np.concatenate(idx_parts) if idx_parts else np.zeros((0, gen.dim), dtype=np.int64)
    values = problem.values_of(idx)
    f, r = batch_reward(problem, idx)
    return SampleTable(labels.copy(), idx, values, f, r, octant_labels(values), f < problem.threshold)


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def normalized_entropy(counts) -> float:
    """Entropy of a histogram divided by log(number of bins); 0 for empty."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total == 0 or len(c) < 2:
        return 0.0
    p = c[c > 0] / total
    return float(-(p * np.log(p)).sum() / np.log(len(c)))


def summarize(table: SampleTable, problem: SyntProblem, label=None,
              oracle: OracleResult | None = None, coverage_threshold: float = 0.02) -> EvalReport:
    n = len(table)
    n_oct = 1 << problem.dim
    counts = np.bincount(table.octant, minlength=n_oct)
    sat_counts = np.bincount(table.octant[table.satisfied], minlength=n_oct)
    n_sat = int(sat_counts.sum())
    covered = int((sat_counts >= coverage_threshold * n_sat).sum()) if n_sat else 0
    distinct = len({tuple(row) for row in table.indices[table.satisfied].tolist()})
    return EvalReport(
        n_samples=n,
        label=None if label is None else int(label),
        recovery_rate=float(table.satisfied.mean()) if n else 0.0,
        mean_reward=float(table.reward.mean()) if n else 0.0,
        per_octant_counts=counts.tolist(),
        satisfied_per_octant=sat_counts.tolist(),
        mode_coverage=covered,
        coverage_threshold=coverage_threshold,
        uniformity=normalized_entropy(sat_counts),
        distinct_solutions=distinct,
        oracle_total=None if oracle is None else oracle.total_count,
        oracle_coverage=(None if oracle is None or oracle.total_count == 0
                         else distinct / oracle.total_count),
    )


def evaluate(gen: PolicyGenerator, problem: SyntProblem, n: int = 5000, label: int | None = None,
             rng: np.random.Generator | None = None, oracle: OracleResult | None = None,
             coverage_threshold: float = 0.02) -> tuple[EvalReport, SampleTable]:
    """Sample ``n`` actions and score them.

    Without ``label`` a conditional generator draws labels uniformly (one per
    sample, before the noise); an unconditional one always uses label 0.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if rng is None:
        raise ValueError("an explicit rng is required for reproducible evaluation")
    if label is not None:
        if not gen.conditional:
            raise ValueError("class label given to an unconditional generator")
        if not 0 <= label < gen.n_classes:
            raise ValueError(f"class label {label} out of range [0, {gen.n_classes})")
        labels = label
    elif gen.conditional:
        labels = rng.integers(gen.n_classes, size=n)
    else:
        labels = 0
    table = draw_samples(gen, problem, n, labels, rng)
    return summarize(table, problem, label, oracle, coverage_threshold), table


def confusion(gen: PolicyGenerator, problem: SyntProblem, conditions: ConditionSet,
              n_per_class: int, rng: np.random.Generator) -> tuple[ConfusionMatrix, SampleTable]:
    """Class-by-octant counts; classes are sampled in label order."""
    L = conditions.n_classes
    if gen.n_classes != L:
        raise ValueError(f"generator has {gen.n_classes} classes, conditions have {L}")
    n_oct = 1 << problem.dim
    if L != n_oct:
        raise ValueError(f"confusion over octants needs {n_oct} classes, got {L}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    counts = np.zeros((L, n_oct), dtype=np.int64)
    joint = []
    tables = []
    for c in range(L):
        t = draw_samples(gen, problem, n_per_class, c, rng)
        tables.append(t)
        counts[c] = np.bincount(t.octant, minlength=n_oct)
        joint.append(float(((t.octant == c) & t.satisfied).mean()))
    diag = np.diag(counts).astype(np.float64)
    merged = SampleTable(*(np.concatenate([getattr(t, f) for t in tables])
                           for f in SampleTable.__dataclass_fields__))
    return ConfusionMatrix(
        counts=counts.tolist(),
        per_class_accuracy=(diag / n_per_class).tolist(),
        overall_accuracy=float(diag.sum() / (n_per_class * L)),
        joint_rate=joint,
        n_per_class=n_per_class,
    ), merged


def reward_histogram(table: SampleTable, bins: int = 20) -> dict:
    """Equal-width histogram of rewards over [-1, 0]."""
    if len(table) == 0:
        raise ValueError("empty sample table")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, edges = np.histogram(table.reward, bins=bins, range=(-1.0, 0.0))
    return {"edges": edges.tolist(), "counts": counts.tolist()}
