"""Exact Ising-problem representation and brute-force Gibbs oracle.

States are ±1 spin vectors. A problem holds local fields h and pairwise
couplers J with energyize E(x) = sum_i h_i x_i + sum_{i<j} J_ij x_i x_j.
Everything here is exact: problems small enough to enumerate (N <= 24 by
default) get their full Gibbs table, which the rest of the package uses as
the sampling oracle and as the reference for effective-temperature fits.

Enumeration order convention: state index k encodes spin i as +1 when bit i
of k is set, -1 otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, DimensionError, DomainError
from . import rng as _rng

ENUMERATION_CAP = 24
ENERGY_TOL = 1e-9  # energies closer than this are treated as one level

H_LIMIT = 2.0  # hardware bound on |h|
J_LIMIT = 1.0  # hardware bound on |J|

_CHUNK = 1 << 18  # states per enumeration chunk, bounds peak memory


def as_spins(x, n: int | None = None) -> np.ndarray:
    """Validate and convert one ±1 vector to an int8 array."""
    arr = np.asarray(x, dtype=np.int8)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-d spin vector, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DimensionError(f"spin vector has length {arr.shape[0]}, expected {n}")
    if not np.all(np.abs(arr) == 1):
        raise DomainError("spin vectors must contain only +1 and -1")
    return arr


def all_pairs(n: int) -> list[tuple[int, int]]:
    """Canonical (i < j) pair order used for complete models: lexicographic."""
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


@dataclass(frozen=True)
class IsingProblem:
    """Immutable Ising instance: n variables, fields h, couplers J.

    ``h`` maps variable -> field; ``j`` maps (i, j) with i < j -> coupler.
    Construction canonicalizes pair order and rejects self-pairs, duplicates
    and out-of-range indices. When ``hardware_limits`` is set the instance
    is a physical-layer problem and |h| <= 2, |J| <= 1 are enforced.
    """

    n: int
    h: Mapping[int, float] = field(default_factory=dict)
    j: Mapping[tuple[int, int], float] = field(default_factory=dict)
    hardware_limits: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("need at least one variable")
        hh: dict[int, float] = {}
        for i, v in dict(self.h).items():
            i = int(i)
            if not 0 <= i < self.n:
                raise DomainError(f"field index {i} out of range for n={self.n}")
            hh[i] = float(v)
        jj: dict[tuple[int, int], float] = {}
        for (a, b), v in dict(self.j).items():
            a, b = int(a), int(b)
            if a == b:
                raise DomainError(f"self-pair ({a},{b}) is not allowed")
            if not (0 <= a < self.n and 0 <= b < self.n):
                raise DomainError(f"coupler ({a},{b}) out of range for n={self.n}")
            key = (a, b) if a < b else (b, a)
            if key in jj:
                raise DomainError(f"duplicate coupler for pair {key}")
            jj[key] = float(v)
        if self.hardware_limits:
            bad_h = [i for i, v in hh.items() if abs(v) > H_LIMIT + 1e-12]
            bad_j = [p for p, v in jj.items() if abs(v) > J_LIMIT + 1e-12]
            if bad_h or bad_j:
                raise DomainError(
                    f"hardware limits violated: |h|>{H_LIMIT} at {bad_h[:4]}, "
                    f"|J|>{J_LIMIT} at {bad_j[:4]}"
                )
        object.__setattr__(self, "h", MappingProxyType(dict(sorted(hh.items()))))
        object.__setattr__(self, "j", MappingProxyType(dict(sorted(jj.items()))))

    # -- dense views (cached; the dicts stay the source of truth) --

    @cached_property
    def h_vec(self) -> np.ndarray:
        v = np.zeros(self.n)
        for i, x in self.h.items():
            v[i] = x
        v.setflags(write=False)
        return v

    @cached_property
    def pair_index(self) -> np.ndarray:
        if not self.j:
            return np.zeros((0, 2), dtype=np.int64)
        arr = np.array(list(self.j.keys()), dtype=np.int64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def j_vec(self) -> np.ndarray:
        v = np.array(list(self.j.values()), dtype=np.float64)
        v.setflags(write=False)
        return v

    def energy(self, x) -> float:
        return float(self.energies(np.asarray(x, dtype=np.int8)[None, :])[0])

    def energies(self, states: np.ndarray) -> np.ndarray:
        """Energies of a (m, n) ±1 matrix, vectorized."""
        if states.ndim != 2 or states.shape[1] != self.n:
            raise DimensionError(
                f"state matrix has shape {states.shape}, expected (*, {self.n})"
            )
        xs = states.astype(np.float64, copy=False)
        e = xs @ self.h_vec
        if len(self.j):
            a, b = self.pair_index[:, 0], self.pair_index[:, 1]
            e = e + (xs[:, a] * xs[:, b]) @ self.j_vec
        return e

    def scaled(self, alpha: float) -> "IsingProblem":
        """Multiply every field and coupler by alpha (structure unchanged)."""
        if alpha <= 0:
            raise DomainError(f"alpha must be positive, got {alpha}")
        return IsingProblem(
            n=self.n,
            h={i: alpha * v for i, v in self.h.items()},
            j={p: alpha * v for p, v in self.j.items()},
            hardware_limits=self.hardware_limits,
        )


# module-level aliases matching the operation names used elsewhere

def energy(problem: IsingProblem, x) -> float:
    """E(x) = sum h_i x_i + sum J_ij x_i x_j."""
    return problem.energy(as_spins(x, problem.n))


def scale(problem: IsingProblem, alpha: float) -> IsingProblem:
    return problem.scaled(alpha)


def _check_cap(problem: IsingProblem, what: str):
    if problem.n > ENUMERATION_CAP:
        raise CapacityError(
            f"{what} needs enumeration of 2^{problem.n} states; cap is"
            f" 2^{ENUMERATION_CAP}"
        )


def _state_chunk(lo: int, hi: int, n: int) -> np.ndarray:
    """±1 matrix for state indices [lo, hi): bit i set -> spin +1."""
    ks = np.arange(lo, hi, dtype=np.int64)
    bits = (ks[:, None] >> np.arange(n, dtype=np.int64)[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def state_index(x: np.ndarray) -> int:
    """Inverse of the enumeration convention (spin +1 -> bit set)."""
    bits = (np.asarray(x) > 0).astype(np.int64)
    return int(bits @ (1 << np.arange(len(bits), dtype=np.int64)))


def states_to_indices(states: np.ndarray) -> np.ndarray:
    bits = (states > 0).astype(np.int64)
    return bits @ (1 << np.arange(states.shape[1], dtype=np.int64))


def enumerate_energies(problem: IsingProblem) -> np.ndarray:
    """Energy of every state, indexed by the enumeration convention."""
    _check_cap(problem, "enumerate_energies")
    total = 1 << problem.n
    out = np.empty(total)
    for lo in range(0, total, _CHUNK):
        hi = min(lo + _CHUNK, total)
        out[lo:hi] = problem.energies(_state_chunk(lo, hi, problem.n))
    return out


def group_energy_levels(
    energies: np.ndarray, weights: np.ndarray, tol: float = ENERGY_TOL
) -> tuple[np.ndarray, np.ndarray]:
    """Sort energies and merge values closer than tol; weights are summed.

    Greedy left-to-right grouping on the sorted list: a new level starts when
    the gap to the previous *member* exceeds tol.
    """
    order = np.argsort(energies, kind="stable")
    es = energies[order]
    ws = weights[order]
    if len(es) == 0:
        return es, ws
    new_level = np.empty(len(es), dtype=bool)
    new_level[0] = True
    np.greater(np.diff(es), tol, out=new_level[1:])
    ids = np.cumsum(new_level) - 1
    level_w = np.zeros(ids[-1] + 1)
    np.add.at(level_w, ids, ws)
    # representative energy: first member of each level
    return es[new_level], level_w


@dataclass(frozen=True)
class GibbsTable:
    """Exact Gibbs distribution of a small problem at inverse temperature beta.

    ``probabilities[k]`` follows the state-index convention. ``log_z`` is the
    exact log partition function; ``z`` may overflow to inf at extreme beta,
    log_z never does. ``level_energies``/``level_probs``/``level_counts`` give
    the spectrum aggregated with the package energy tolerance.
    """

    problem: IsingProblem
    beta: float
    probabilities: np.ndarray
    log_z: float
    level_energies: np.ndarray
    level_probs: np.ndarray
    level_counts: np.ndarray

    @property
    def z(self) -> float:
        try:
            return math.exp(self.log_z)
        except OverflowError:
            return math.inf

    def probability(self, x) -> float:
        return float(self.probabilities[state_index(as_spins(x, self.problem.n))])

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact first moments and pair moments (in problem pair order)."""
        n = self.problem.n
        total = 1 << n
        m1 = np.zeros(n)
        pairs = self.problem.pair_index
        m2 = np.zeros(len(pairs))
        for lo in range(0, total, _CHUNK):
            hi = min(lo + _CHUNK, total)
            xs = _state_chunk(lo, hi, n).astype(np.float64)
            p = self.probabilities[lo:hi]
            m1 += p @ xs
            if len(pairs):
                m2 += p @ (xs[:, pairs[:, 0]] * xs[:, pairs[:, 1]])
        return m1, m2


def enumerate_gibbs(problem: IsingProblem, beta: float) -> GibbsTable:
    """Exact probabilities over all 2^N states at the given beta."""
    if beta < 0:
        raise DomainError(f"beta must be >= 0, got {beta}")
    _check_cap(problem, "enumerate_gibbs")
    e = enumerate_energies(problem)
    e_min = e.min()
    shifted = np.exp(-beta * (e - e_min))
    norm = shifted.sum()
    probs = shifted / norm
    log_z = math.log(norm) - beta * e_min
    level_e, level_p = group_energy_levels(e, probs)
    _, level_c = group_energy_levels(e, np.ones_like(e))
    return GibbsTable(
        problem=problem,
        beta=float(beta),
        probabilities=probs,
        log_z=log_z,
        level_energies=level_e,
        level_probs=level_p,
        level_counts=level_c.astype(np.int64),
    )


def operator_norm(problem: IsingProblem) -> float:
    """Largest |E(x)| over all states (the problem is diagonal)."""
    _check_cap(problem, "operator_norm")
    worst = 0.0
    total = 1 << problem.n
    for lo in range(0, total, _CHUNK):
        hi = min(lo + _CHUNK, total)
        chunk = problem.energies(_state_chunk(lo, hi, problem.n))
        worst = max(worst, float(np.abs(chunk).max()))
    return worst


@dataclass(frozen=True)
class SampleSet:
    """Multiset of ±1 configurations with counts.

    ``states`` holds the distinct rows in lexicographic order (the canonical
    rank used to derive per-state decode streams), ``counts`` the
    multiplicities. ``level`` tags which layer the samples live on.
    """

    states: np.ndarray
    counts: np.ndarray
    level: str = "logical"

    LEVELS = ("physical", "code", "logical")

    def __post_init__(self):
        if self.level not in self.LEVELS:
            raise DomainError(f"level must be one of {self.LEVELS}")
        if self.states.ndim != 2:
            raise DimensionError("states must be a 2-d array")
        if len(self.counts) != len(self.states):
            raise DimensionError("counts and states disagree")
        if len(self.counts) and self.counts.min() <= 0:
            raise DomainError("counts must be positive")

    @classmethod
    def from_rows(cls, rows: np.ndarray, level: str = "logical") -> "SampleSet":
        rows = np.asarray(rows, dtype=np.int8)
        if rows.ndim != 2:
            raise DimensionError("rows must be a 2-d array")
        if rows.size and not np.all(np.abs(rows) == 1):
            raise DomainError("samples must be ±1")
        states, counts = np.unique(rows, axis=0, return_counts=True)
        return cls(states=states, counts=counts.astype(np.int64), level=level)

    @classmethod
    def from_counts(cls, states: np.ndarray, counts, level: str = "logical") -> "SampleSet":
        """Build from (possibly duplicated) rows with multiplicities; rows are
        merged and stored in canonical lexicographic order."""
        states = np.asarray(states, dtype=np.int8)
        counts = np.asarray(counts, dtype=np.int64)
        if states.ndim != 2 or len(counts) != len(states):
            raise DimensionError("states/counts shape mismatch")
        if states.size and not np.all(np.abs(states) == 1):
            raise DomainError("samples must be ±1")
        uniq, inverse = np.unique(states, axis=0, return_inverse=True)
        agg = np.zeros(len(uniq), dtype=np.int64)
        np.add.at(agg, inverse, counts)
        return cls(states=uniq, counts=agg, level=level)

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())

    @property
    def width(self) -> int:
        return self.states.shape[1]

    def frequencies(self) -> np.ndarray:
        return self.counts / self.n_total

    def count_of(self, x) -> int:
        x = as_spins(x, self.width)
        idx = np.where((self.states == x).all(axis=1))[0]
        return int(self.counts[idx[0]]) if len(idx) else 0

    def moments(self, pairs: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Weighted first moments and pair moments over the multiset."""
        w = self.frequencies()
        xs = self.states.astype(np.float64)
        m1 = w @ xs
        if pairs is None or len(pairs) == 0:
            return m1, np.zeros(0)
        pairs = np.asarray(pairs, dtype=np.int64)
        m2 = w @ (xs[:, pairs[:, 0]] * xs[:, pairs[:, 1]])
        return m1, m2

    def mean_energy(self, problem: IsingProblem) -> float:
        return float(self.frequencies() @ problem.energies(self.states))


def exact_sample(
    problem: IsingProblem, beta: float, n_samples: int, rng_seed: int
) -> SampleSet:
    """I.i.d. draws from the exact Gibbs distribution. Deterministic per seed."""
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    table = enumerate_gibbs(problem, beta)
    gen = _rng.spawn(rng_seed, "exact_sample")
    ks = gen.choice(len(table.probabilities), size=n_samples, p=table.probabilities)
    hit = np.bincount(ks, minlength=len(table.probabilities))
    nz = np.nonzero(hit)[0]
    bits = (nz[:, None] >> np.arange(problem.n, dtype=np.int64)[None, :]) & 1
    states = (2 * bits - 1).astype(np.int8)
    return SampleSet.from_counts(states, hit[nz], level="logical")


def exact_log_likelihood(problem: IsingProblem, beta: float, dataset) -> float:
    """Mean log P(x) over the dataset under the exact Gibbs distribution."""
    _check_cap(problem, "exact_log_likelihood")
    rows = np.asarray(dataset, dtype=np.int8)
    if rows.ndim != 2 or rows.shape[1] != problem.n:
        raise DimensionError(
            f"dataset has shape {rows.shape}, expected (*, {problem.n})"
        )
    table = enumerate_gibbs(problem, beta)
    e = problem.energies(rows)
    return float(np.mean(-beta * e - table.log_z))


@dataclass(frozen=True)
class ClampResult:
    """Reduced problem after fixing some variables, plus the constant offset.

    ``kept`` lists the original ids of the surviving variables in ascending
    order; variable k of the reduced problem is kept[k].
    """

    problem: IsingProblem
    offset: float
    kept: tuple[int, ...]


def clamp(problem: IsingProblem, assignment: Mapping[int, int]) -> ClampResult:
    """Fix variables to ±1: couplers to clamped spins fold into fields,
    clamped-only terms fold into a constant."""
    fixed: dict[int, int] = {}
    for i, v in dict(assignment).items():
        i = int(i)
        if not 0 <= i < problem.n:
            raise DomainError(f"clamped variable {i} out of range")
        if v not in (-1, 1):
            raise DomainError(f"clamp value for {i} must be ±1, got {v}")
        fixed[i] = int(v)
    kept = tuple(i for i in range(problem.n) if i not in fixed)
    remap = {orig: k for k, orig in enumerate(kept)}
    offset = sum(problem.h.get(i, 0.0) * v for i, v in fixed.items())
    new_h = {remap[i]: v for i, v in problem.h.items() if i in remap}
    new_j: dict[tuple[int, int], float] = {}
    for (a, b), v in problem.j.items():
        a_fixed, b_fixed = a in fixed, b in fixed
        if a_fixed and b_fixed:
            offset += v * fixed[a] * fixed[b]
        elif a_fixed:
            new_h[remap[b]] = new_h.get(remap[b], 0.0) + v * fixed[a]
        elif b_fixed:
            new_h[remap[a]] = new_h.get(remap[a], 0.0) + v * fixed[b]
        else:
            new_j[(remap[a], remap[b])] = v
    if not kept:
        raise DomainError("clamping every variable leaves nothing to sample")
    reduced = IsingProblem(n=len(kept), h=new_h, j=new_j)
    return ClampResult(problem=reduced, offset=offset, kept=kept)


# -- text format --------------------------------------------------------------
#
# header line: N
# field lines: "i i h_i", coupler lines: "i j J_ij" with i < j, 0-based,
# whitespace separated. Floats are written with repr so the round trip is
# bit exact.


def problem_to_text(problem: IsingProblem) -> str:
    lines = [str(problem.n)]
    for i, v in problem.h.items():
        lines.append(f"{i} {i} {v!r}")
    for (a, b), v in problem.j.items():
        lines.append(f"{a} {b} {v!r}")
    return "\n".join(lines) + "\n"


def problem_from_text(text: str, hardware_limits: bool = False) -> IsingProblem:
    rows = [ln.strip() for ln in text.splitlines()]
    rows = [ln for ln in rows if ln and not ln.startswith("#")]
    if not rows:
        raise DomainError("empty problem text")
    try:
        n = int(rows[0])
    except ValueError as exc:
        raise DomainError(f"bad header line {rows[0]!r}") from exc
    h: dict[int, float] = {}
    j: dict[tuple[int, int], float] = {}
    for ln in rows[1:]:
        parts = ln.split()
        if len(parts) != 3:
            raise DomainError(f"bad problem line {ln!r}")
        a, b, v = int(parts[0]), int(parts[1]), float(parts[2])
        if a == b:
            if a in h:
                raise DomainError(f"duplicate field for variable {a}")
            h[a] = v
        else:
            if a > b:
                raise DomainError(f"coupler line must have i < j: {ln!r}")
            if (a, b) in j:
                raise DomainError(f"duplicate coupler for pair ({a},{b})")
            j[(a, b)] = v
    return IsingProblem(n=n, h=h, j=j, hardware_limits=hardware_limits)


def write_problem(problem: IsingProblem, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(problem_to_text(problem))


def read_problem(path, hardware_limits: bool = False) -> IsingProblem:
    with open(path, "r", encoding="utf-8") as fh:
        return problem_from_text(fh.read(), hardware_limits=hardware_limits)
