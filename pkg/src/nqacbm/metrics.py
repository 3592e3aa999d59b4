"""Effective-temperature fits, distribution distances, and scoring.

All distances are computed between *energy-binned* distributions: states are
mapped to their energy under a reference model and levels closer than
ENERGY_TOL are merged. Binning by energy instead of by state keeps the cost
proportional to the number of distinct levels and matches how the estimates
are defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapacityError, DimensionError, DomainError
from .ising import (
    ENERGY_TOL,
    ENUMERATION_CAP,
    IsingProblem,
    SampleSet,
    enumerate_energies,
    group_energy_levels,
    operator_norm,
)

BETA_GRID_LO = 1e-3
BETA_GRID_HI = 1e2
BETA_GRID_POINTS = 200
_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class EnergyHistogram:
    """Normalized weights over merged energy levels, sorted ascending."""

    energies: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        es = np.asarray(self.energies, dtype=np.float64)
        ws = np.asarray(self.weights, dtype=np.float64)
        if es.shape != ws.shape or es.ndim != 1:
            raise DimensionError("energies and weights must be matching 1-d arrays")
        if len(ws) == 0:
            raise DomainError("empty histogram")
        if np.any(ws < 0):
            raise DomainError("weights must be non-negative")
        total = ws.sum()
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise DomainError(f"weights must sum to 1, got {total}")
        es, ws = group_energy_levels(es, ws)
        object.__setattr__(self, "energies", es)
        object.__setattr__(self, "weights", ws)
        self.energies.setflags(write=False)
        self.weights.setflags(write=False)

    @classmethod
    def from_sampleset(cls, samples: SampleSet, problem: IsingProblem) -> "EnergyHistogram":
        if samples.width != problem.n:
            raise DimensionError(
                f"sample width {samples.width} != problem size {problem.n}"
            )
        if samples.n_total == 0:
            raise DomainError("cannot histogram an empty sample set")
        es = problem.energies(samples.states)
        return cls(energies=es, weights=samples.frequencies())

    @classmethod
    def from_states(
        cls,
        states: np.ndarray,
        problem: IsingProblem,
        weights: Sequence[float] | np.ndarray | None = None,
    ) -> "EnergyHistogram":
        states = np.asarray(states)
        if states.ndim != 2 or states.shape[1] != problem.n:
            raise DimensionError(
                f"states must be (m, {problem.n}), got {states.shape}"
            )
        if len(states) == 0:
            raise DomainError("cannot histogram zero states")
        es = problem.energies(states)
        if weights is None:
            ws = np.full(len(states), 1.0 / len(states))
        else:
            ws = np.asarray(weights, dtype=np.float64)
            ws = ws / ws.sum()
        return cls(energies=es, weights=ws)

    @classmethod
    def from_gibbs(cls, problem: IsingProblem, beta: float) -> "EnergyHistogram":
        if problem.n > ENUMERATION_CAP:
            raise CapacityError(
                f"n={problem.n} exceeds the enumeration cap {ENUMERATION_CAP}"
            )
        es = enumerate_energies(problem)
        level_e, level_n = group_energy_levels(es, np.ones(len(es)))
        probs = _level_gibbs(level_e, level_n, beta)
        return cls(energies=level_e, weights=probs)


def _level_gibbs(level_e: np.ndarray, level_n: np.ndarray, beta: float) -> np.ndarray:
    """Gibbs weights per level from level energies and degeneracies."""
    logw = -beta * (level_e - level_e.min()) + np.log(level_n)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def _merge_levels(
    q: EnergyHistogram, p: EnergyHistogram, tol: float = ENERGY_TOL
) -> tuple[np.ndarray, np.ndarray]:
    """Align two histograms on the union of their levels."""
    es = np.concatenate([q.energies, p.energies])
    wq = np.concatenate([q.weights, np.zeros(len(p.weights))])
    wp = np.concatenate([np.zeros(len(q.weights)), p.weights])
    order = np.argsort(es, kind="stable")
    es = es[order]
    new_level = np.empty(len(es), dtype=bool)
    new_level[0] = True
    np.greater(np.diff(es), tol, out=new_level[1:])
    ids = np.cumsum(new_level) - 1
    sq = np.zeros(ids[-1] + 1)
    sp = np.zeros(ids[-1] + 1)
    np.add.at(sq, ids, wq[order])
    np.add.at(sp, ids, wp[order])
    return sq, sp


def tvd_energy(q: EnergyHistogram, p: EnergyHistogram, tol: float = ENERGY_TOL) -> float:
    """Total variation distance over the union of (merged) energy levels."""
    sq, sp = _merge_levels(q, p, tol)
    return float(0.5 * np.abs(sq - sp).sum())


# -- effective inverse temperature ---------------------------------------------


@dataclass(frozen=True)
class BetaEstimate:
    """Result of fitting beta to a sample set.

    ``dimensionless`` is beta_eff times the model's operator norm, which makes
    estimates comparable across rescaled models. ``trace`` records every
    (beta, distance) pair the search evaluated, grid and refinement both.
    """

    beta_eff: float
    distance_at_min: float
    dimensionless: float
    trace: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.beta_eff < 0:
            raise DomainError("beta_eff must be >= 0")
        if not 0.0 <= self.distance_at_min <= 1.0 + 1e-12:
            raise DomainError("distance_at_min must lie in [0, 1]")


def estimate_beta_eff(
    samples: SampleSet,
    model: IsingProblem,
    lo: float = BETA_GRID_LO,
    hi: float = BETA_GRID_HI,
    grid_points: int = BETA_GRID_POINTS,
) -> BetaEstimate:
    """Fit the inverse temperature that best explains the samples.

    d(beta) = TVD between the sample energy histogram and the model Gibbs
    histogram at beta, evaluated on a log-spaced grid, then refined by a
    golden-section search on the bracket around the grid minimum. Grid ties
    break toward the lowest beta.
    """
    if model.n > ENUMERATION_CAP:
        raise CapacityError(
            f"n={model.n} exceeds the enumeration cap {ENUMERATION_CAP}"
        )
    if samples.n_total == 0:
        raise DomainError("cannot fit beta to an empty sample set")

    # spectrum once; every d(beta) evaluation is then O(levels)
    es = enumerate_energies(model)
    level_e, level_n = group_energy_levels(es, np.ones(len(es)))
    sample_hist = EnergyHistogram.from_sampleset(samples, model)
    # sample energies were produced by the same arithmetic as the spectrum,
    # so each sample level matches a spectrum level within tolerance
    pos = np.searchsorted(level_e, sample_hist.energies)
    pos = np.clip(pos, 0, len(level_e) - 1)
    left = np.clip(pos - 1, 0, len(level_e) - 1)
    use_left = np.abs(level_e[left] - sample_hist.energies) <= np.abs(
        level_e[pos] - sample_hist.energies
    )
    idx = np.where(use_left, left, pos)
    if np.any(np.abs(level_e[idx] - sample_hist.energies) > ENERGY_TOL * 10):
        raise DomainError("sample energies do not match the model spectrum")
    q = np.zeros(len(level_e))
    np.add.at(q, idx, sample_hist.weights)

    def d(beta: float) -> float:
        p = _level_gibbs(level_e, level_n, beta)
        return float(0.5 * np.abs(q - p).sum())

    trace: list[tuple[float, float]] = []
    grid = np.geomspace(lo, hi, grid_points)
    vals = np.empty(grid_points)
    for i, b in enumerate(grid):
        vals[i] = d(b)
        trace.append((float(b), float(vals[i])))
    best = int(np.argmin(vals))  # argmin takes the first hit: lowest beta

    # golden-section refinement on the enclosing bracket
    a = grid[max(best - 1, 0)]
    b = grid[min(best + 1, grid_points - 1)]
    x1 = b - _INV_GOLDEN * (b - a)
    x2 = a + _INV_GOLDEN * (b - a)
    f1, f2 = d(x1), d(x2)
    trace.extend([(float(x1), f1), (float(x2), f2)])
    while (b - a) > 1e-6 * max(1.0, a):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INV_GOLDEN * (b - a)
            f1 = d(x1)
            trace.append((float(x1), f1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INV_GOLDEN * (b - a)
            f2 = d(x2)
            trace.append((float(x2), f2))
    candidates = [(vals[best], grid[best]), (f1, x1), (f2, x2)]
    dist, beta_star = min(candidates, key=lambda t: (t[0], t[1]))
    norm = operator_norm(model)
    return BetaEstimate(
        beta_eff=float(beta_star),
        distance_at_min=float(dist),
        dimensionless=float(beta_star * norm),
        trace=tuple(trace),
    )


# -- likelihood and distances ----------------------------------------------------


def empirical_log_likelihood(samples: SampleSet, data_vectors: np.ndarray) -> float:
    """Mean log model probability of the data, with model probabilities read
    off sample frequencies.

    Unseen data states get the floor 1/(10 * n_total) so the result stays
    finite at any sample budget.
    """
    data = np.asarray(data_vectors)
    if data.ndim != 2:
        raise DimensionError("data must be a 2-d array of vectors")
    if samples.n_total == 0:
        raise DomainError("cannot score against an empty sample set")
    if data.shape[1] != samples.width:
        raise DimensionError(
            f"data width {data.shape[1]} != sample width {samples.width}"
        )
    if len(data) == 0:
        raise DomainError("empty dataset")
    n_total = samples.n_total
    floor = 1.0 / (10.0 * n_total)
    # frequency lookup keyed by state bytes
    freq = {
        s.tobytes(): c / n_total
        for s, c in zip(samples.states, samples.counts)
    }
    data8 = data.astype(np.int8)
    total = 0.0
    for row in data8:
        total += math.log(max(freq.get(row.tobytes(), 0.0), floor))
    return total / len(data)


def distance_from_data(
    samples: SampleSet, data_vectors: np.ndarray, model: IsingProblem
) -> float:
    """TVD between sample and data energy histograms under the given model."""
    data = np.asarray(data_vectors)
    if data.ndim != 2 or data.shape[1] != samples.width:
        raise DimensionError("data and samples must share one width")
    if data.shape[1] != model.n:
        raise DimensionError(
            f"width {data.shape[1]} != model size {model.n}"
        )
    q = EnergyHistogram.from_sampleset(samples, model)
    r = EnergyHistogram.from_states(data, model)
    return tvd_energy(q, r)


def classification_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact label matches."""
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise DimensionError(
            f"predictions {preds.shape} and labels {labs.shape} must be equal-length vectors"
        )
    if len(preds) == 0:
        raise DomainError("cannot score zero predictions")
    return float(np.mean(preds == labs))
