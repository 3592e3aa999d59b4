"""Annealing-style samplers: SVMC rotors, SQA path-integral Monte Carlo,
schedules and quenches, control noise, sweep calibration, and an optional
remote backend client.

Both samplers walk an annealing parameter s from ~0 up to quench.s_int over
cfg.sweeps, then from s_int to 1 over quench.quench_sweeps, reading the
transverse/longitudinal weights A(s), B(s) off a schedule. Equilibrium
behaviour (for tests and calibration) comes from a constant schedule with
A=0, B=1, which turns both samplers into plain Metropolis dynamics at the
bath temperature.
"""

from __future__ import annotations

import csv
import json
import math
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels, rng as _rng
from .errors import (
    ConfigError,
    DomainError,
    RemoteAuthError,
    RemoteNetworkError,
    RemoteProtocolError,
)
from .ising import IsingProblem, SampleSet

# k_B/h: kelvin -> GHz conversion for schedules tabulated in GHz
KB_GHZ_PER_K = 20.836619

DEFAULT_QUENCH_SWEEPS = 500
DEFAULT_N_SLICES = 32

# log-spaced sweep ladder used for beta matching
DEFAULT_SWEEP_GRID = tuple(
    int(round(x)) for x in np.geomspace(2500, 1e7, 19)
)

# bond-breaking acceptance below exp(-38) cannot beat the smallest uniform
# 2^-53, so local moves are skipped exactly (see sqa_kernel)
_LOCK_MARGIN = 38.0


def beta_from_bath(bath_temp: float, units: str) -> float:
    """Inverse temperature in the schedule's energy units.

    dimensionless: bath_temp IS the temperature in coupler units.
    ghz: bath_temp is kelvin; thermal energy k_B T / h expressed in GHz.
    """
    if bath_temp <= 0:
        raise DomainError(f"bath temperature must be > 0, got {bath_temp}")
    if units == "dimensionless":
        return 1.0 / bath_temp
    if units == "ghz":
        return 1.0 / (KB_GHZ_PER_K * bath_temp)
    raise ConfigError(f"unknown schedule units {units!r}")


@dataclass(frozen=True)
class AnnealSchedule:
    """Piecewise-linear (s, A, B) table.

    s must increase strictly from 0 to 1. A is expected non-increasing and B
    non-decreasing; pass monotone=False to admit exotic tables deliberately.
    """

    table: tuple[tuple[float, float, float], ...]
    units: str = "dimensionless"
    monotone: bool = True

    def __post_init__(self):
        rows = tuple((float(s), float(a), float(b)) for s, a, b in self.table)
        if len(rows) < 2:
            raise ConfigError("schedule needs at least two rows")
        ss = [r[0] for r in rows]
        if ss[0] != 0.0 or ss[-1] != 1.0:
            raise ConfigError("schedule must span s=0 to s=1")
        if any(b <= a for a, b in zip(ss, ss[1:])):
            raise ConfigError("s must be strictly increasing")
        if any(r[1] < 0 or r[2] < 0 for r in rows):
            raise ConfigError("A and B must be non-negative")
        if self.monotone:
            avals = [r[1] for r in rows]
            bvals = [r[2] for r in rows]
            if any(b > a for a, b in zip(avals, avals[1:])):
                raise ConfigError("A must be non-increasing (monotone=False to override)")
            if any(b < a for a, b in zip(bvals, bvals[1:])):
                raise ConfigError("B must be non-decreasing (monotone=False to override)")
        if self.units not in ("dimensionless", "ghz"):
            raise ConfigError(f"unknown schedule units {self.units!r}")
        object.__setattr__(self, "table", rows)

    @classmethod
    def default(cls) -> "AnnealSchedule":
        """Dimensionless linear ramp A = 1 - s, B = s."""
        return cls(table=((0.0, 1.0, 0.0), (1.0, 0.0, 1.0)))

    @classmethod
    def flat(cls, a: float = 0.0, b: float = 1.0) -> "AnnealSchedule":
        """Constant-coefficient schedule; A=0, B=1 gives plain Metropolis."""
        return cls(table=((0.0, a, b), (1.0, a, b)))

    def coefficients(self, s) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=np.float64)
        ss = np.array([r[0] for r in self.table])
        return (
            np.interp(s, ss, np.array([r[1] for r in self.table])),
            np.interp(s, ss, np.array([r[2] for r in self.table])),
        )

    def a_of(self, s: float) -> float:
        return float(self.coefficients(s)[0])

    def b_of(self, s: float) -> float:
        return float(self.coefficients(s)[1])

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "A_GHz", "B_GHz"])
            for s, a, b in self.table:
                w.writerow([repr(s), repr(a), repr(b)])

    @classmethod
    def from_csv(cls, path, monotone: bool = True) -> "AnnealSchedule":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [c.strip() for c in header] != ["s", "A_GHz", "B_GHz"]:
                raise ConfigError(
                    f"{path}: expected header 's,A_GHz,B_GHz', got {header}"
                )
            rows = []
            for line in reader:
                if not line or all(not c.strip() for c in line):
                    continue
                if len(line) != 3:
                    raise ConfigError(f"{path}: bad row {line}")
                rows.append(tuple(float(c) for c in line))
        return cls(table=tuple(rows), units="ghz", monotone=monotone)


@dataclass(frozen=True)
class QuenchSpec:
    """Freeze point s_int and the sweep count of the final ramp to s=1."""

    s_int: float = 1.0
    quench_sweeps: int = DEFAULT_QUENCH_SWEEPS

    def __post_init__(self):
        if not 0.0 < self.s_int <= 1.0:
            raise DomainError(f"s_int must lie in (0, 1], got {self.s_int}")
        if self.quench_sweeps < 0:
            raise DomainError("quench_sweeps must be >= 0")


@dataclass(frozen=True)
class SvmcConfig:
    bath_temp: float
    sweeps: int
    proposal: str = "uniform_angle"
    seed: int = 0

    def __post_init__(self):
        if self.bath_temp <= 0:
            raise DomainError("bath_temp must be > 0")
        if self.sweeps < 1:
            raise DomainError("sweeps must be >= 1")
        if self.proposal != "uniform_angle":
            raise ConfigError(f"unsupported proposal {self.proposal!r}")


@dataclass(frozen=True)
class SqaConfig:
    bath_temp: float
    sweeps: int
    n_slices: int = DEFAULT_N_SLICES
    readout: str = "single_random_slice"
    seed: int = 0

    def __post_init__(self):
        if self.bath_temp <= 0:
            raise DomainError("bath_temp must be > 0")
        if self.sweeps < 1:
            raise DomainError("sweeps must be >= 1")
        # n_slices=1 is deliberately admitted: it degenerates to classical
        # Metropolis, which the test suite leans on as an oracle
        if self.n_slices < 1:
            raise DomainError("n_slices must be >= 1")
        if self.readout != "single_random_slice":
            raise ConfigError(f"unsupported readout {self.readout!r}")


def _s_path(sweeps: int, quench: QuenchSpec) -> np.ndarray:
    """s value at each sweep: linear to s_int, then linear to 1."""
    main = quench.s_int * np.arange(1, sweeps + 1) / sweeps
    if quench.quench_sweeps == 0 or quench.s_int == 1.0:
        tail = np.array([])
    else:
        q = quench.quench_sweeps
        tail = quench.s_int + (1.0 - quench.s_int) * np.arange(1, q + 1) / q
    return np.concatenate([main, tail])


def _csr(problem: IsingProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = problem.n
    counts = np.zeros(n + 1, dtype=np.int64)
    pairs = problem.pair_index
    for a, b in pairs:
        counts[a + 1] += 1
        counts[b + 1] += 1
    ptr = np.cumsum(counts)
    idx = np.zeros(ptr[-1], dtype=np.int64)
    val = np.zeros(ptr[-1], dtype=np.float64)
    cursor = ptr[:-1].copy()
    jv = problem.j_vec
    for k, (a, b) in enumerate(pairs):
        idx[cursor[a]] = b
        val[cursor[a]] = jv[k]
        cursor[a] += 1
        idx[cursor[b]] = a
        val[cursor[b]] = jv[k]
        cursor[b] += 1
    return ptr, idx, val


def _base_keys(seed: int, lane: str, n_reads: int) -> np.ndarray:
    return np.array(
        [_rng.hash_words(int(seed) & ((1 << 64) - 1), lane, r) for r in range(n_reads)],
        dtype=np.uint64,
    )


def _spins_from_cos(cos_rows: np.ndarray, seed: int, read_offset: int = 0) -> np.ndarray:
    """sign(cos theta) readout; an exact zero becomes a fair seeded coin.

    The coin stream is keyed by the absolute read index so sharded runs
    stay identical to unsharded ones.
    """
    spins = np.sign(cos_rows).astype(np.int8)
    zero_reads = np.nonzero((spins == 0).any(axis=1))[0]
    for r in zero_reads:
        cols = np.nonzero(spins[r] == 0)[0]
        gen = _rng.spawn(seed, "svmc_zero", int(r) + read_offset)
        spins[r, cols] = gen.choice(np.array([-1, 1], dtype=np.int8), size=len(cols))
    return spins


def svmc_sample(
    physical: IsingProblem,
    sched: AnnealSchedule,
    quench: QuenchSpec,
    cfg: SvmcConfig,
    n_reads: int,
    read_range: tuple[int, int] | None = None,
) -> SampleSet:
    """Semiclassical rotor sampling; one Markov chain per read.

    read_range restricts which reads are computed (for sharding across
    workers); the states of read r are identical whatever the range, so any
    partition of [0, n_reads) concatenates to the same multiset.
    """
    if n_reads < 1:
        raise DomainError("n_reads must be >= 1")
    beta = beta_from_bath(cfg.bath_temp, sched.units)
    s_vals = _s_path(cfg.sweeps, quench)
    a_arr, b_arr = sched.coefficients(s_vals)
    ptr, idx, val = _csr(physical)
    keys = _base_keys(cfg.seed, "svmc", n_reads)
    lo, hi = read_range if read_range is not None else (0, n_reads)
    if not 0 <= lo < hi <= n_reads:
        raise DomainError(f"bad read range {(lo, hi)} for {n_reads} reads")
    out = np.zeros((n_reads, physical.n), dtype=np.float64)
    _kernels.svmc_kernel(
        physical.n, physical.h_vec, ptr, idx, val,
        a_arr, b_arr, beta, keys, lo, hi, out,
    )
    spins = _spins_from_cos(out[lo:hi], cfg.seed, read_offset=lo)
    return SampleSet.from_rows(spins, level="physical")


def _sqa_lock_profile(
    problem: IsingProblem, beta_slice: float, a_arr: np.ndarray, b_arr: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sweep slice coupling (as a log-weight coefficient) and lock flags.

    The coupling enters acceptance as J_perp = -0.5 ln tanh(beta_slice A);
    a sweep is locked when the best-case bond-breaking move has log-weight
    below -_LOCK_MARGIN, where exp() already rounds under the smallest
    uniform the kernels can draw.
    """
    with np.errstate(divide="ignore"):
        jperp = -0.5 * np.log(np.tanh(beta_slice * a_arr))
    jperp = np.where(a_arr <= 0.0, np.inf, jperp)
    coupling = np.zeros(problem.n)
    if len(problem.pair_index):
        absj = np.abs(problem.j_vec)
        np.add.at(coupling, problem.pair_index[:, 0], absj)
        np.add.at(coupling, problem.pair_index[:, 1], absj)
    habs = np.abs(problem.h_vec) if problem.n else np.zeros(0)
    lmax = float((habs + coupling).max(initial=0.0))
    slack = 4.0 * jperp - 2.0 * beta_slice * b_arr * lmax
    locked = np.isinf(jperp) | (slack >= _LOCK_MARGIN)
    jperp_finite = np.where(np.isinf(jperp), 0.0, jperp)  # unused when locked
    return jperp_finite, locked


def sqa_sample(
    physical: IsingProblem,
    sched: AnnealSchedule,
    quench: QuenchSpec,
    cfg: SqaConfig,
    n_reads: int,
    read_range: tuple[int, int] | None = None,
) -> SampleSet:
    """Path-integral Monte Carlo; reads are independent chains.

    Readout returns one uniformly chosen slice per read. In stretches where
    the slice coupling locks (A -> 0), slices are exact copies, so the choice
    is immaterial there.
    """
    if n_reads < 1:
        raise DomainError("n_reads must be >= 1")
    beta = beta_from_bath(cfg.bath_temp, sched.units)
    m = cfg.n_slices
    beta_slice = beta / m
    s_vals = _s_path(cfg.sweeps, quench)
    a_arr, b_arr = sched.coefficients(s_vals)
    jperp, locked = _sqa_lock_profile(physical, beta_slice, a_arr, b_arr)
    if m == 1:
        # single slice: no bonds exist, every sweep is the classical move
        locked = np.ones_like(locked)
    ptr, idx, val = _csr(physical)
    keys = _base_keys(cfg.seed, "sqa", n_reads)
    picks = np.array(
        [int(_rng.spawn(cfg.seed, "sqa_slice", r).integers(0, m)) for r in range(n_reads)],
        dtype=np.int64,
    )
    lo, hi = read_range if read_range is not None else (0, n_reads)
    if not 0 <= lo < hi <= n_reads:
        raise DomainError(f"bad read range {(lo, hi)} for {n_reads} reads")
    out = np.zeros((n_reads, physical.n), dtype=np.int8)
    _kernels.sqa_kernel(
        physical.n, m, physical.h_vec, ptr, idx, val,
        b_arr, jperp, locked, beta_slice, keys, picks, lo, hi, out,
    )
    return SampleSet.from_rows(out[lo:hi], level="physical")


def apply_noise(problem: IsingProblem, sigma: float, seed: int) -> IsingProblem:
    """Add i.i.d. zero-mean Gaussian control noise to every field and coupler.

    Hardware-tagged problems are clipped back into range afterwards.
    """
    if sigma < 0:
        raise DomainError("sigma must be >= 0")
    gen = _rng.spawn(seed, "control_noise")
    n_h = len(problem.h)
    n_j = len(problem.j)
    draws_h = gen.normal(0.0, 1.0, size=n_h)
    draws_j = gen.normal(0.0, 1.0, size=n_j)
    from .ising import H_LIMIT, J_LIMIT  # local import avoids cycle at module load

    h = {}
    for k, (i, v) in enumerate(sorted(problem.h.items())):
        nv = v + sigma * draws_h[k]
        if problem.hardware_limits:
            nv = min(max(nv, -H_LIMIT), H_LIMIT)
        h[i] = nv
    j = {}
    for k, (pair, v) in enumerate(sorted(problem.j.items())):
        nv = v + sigma * draws_j[k]
        if problem.hardware_limits:
            nv = min(max(nv, -J_LIMIT), J_LIMIT)
        j[pair] = nv
    return IsingProblem(
        n=problem.n, h=h, j=j, hardware_limits=problem.hardware_limits
    )


@dataclass(frozen=True)
class SweepSelection:
    """Outcome of matching the sampler's effective temperature to a target."""

    sweeps: int
    beta_eff: float
    target_beta: float
    trace: tuple[tuple[int, float], ...]


def select_sweeps_matching_beta(
    sample_at: Callable[[int], SampleSet],
    model: IsingProblem,
    target_beta: float,
    sweep_grid: Sequence[int] = DEFAULT_SWEEP_GRID,
) -> SweepSelection:
    """Pick the sweep count whose decoded samples fit target_beta best.

    sample_at(sweeps) must return the decoded logical SampleSet for that
    sweep count. Ties go to the smaller sweep count (grid is scanned in
    ascending order with strict improvement).
    """
    from .metrics import estimate_beta_eff

    grid = sorted(int(s) for s in sweep_grid)
    if not grid:
        raise DomainError("sweep grid must be non-empty")
    best: tuple[int, float] | None = None
    trace = []
    for sweeps in grid:
        est = estimate_beta_eff(sample_at(sweeps), model)
        trace.append((sweeps, est.beta_eff))
        gap = abs(est.beta_eff - target_beta)
        if best is None or gap < best[1]:
            best = (sweeps, gap, est.beta_eff)
    return SweepSelection(
        sweeps=best[0],
        beta_eff=best[2],
        target_beta=target_beta,
        trace=tuple(trace),
    )


# -- remote backend -----------------------------------------------------------------


@dataclass(frozen=True)
class RemoteBackendConfig:
    endpoint: str
    auth_token: str = ""
    n_reads: int = 1000
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.endpoint:
            raise ConfigError("endpoint must be non-empty")


def problem_payload(problem: IsingProblem) -> dict:
    return {
        "n": problem.n,
        "h": [[i, v] for i, v in sorted(problem.h.items())],
        "J": [[a, b, v] for (a, b), v in sorted(problem.j.items())],
    }


def remote_sample(
    cfg: RemoteBackendConfig, physical: IsingProblem, n_reads: int | None = None
) -> SampleSet:
    """POST the problem to a remote annealing service and parse its reads.

    Strictly optional plumbing: nothing else in the package depends on it.
    """
    reads = cfg.n_reads if n_reads is None else int(n_reads)
    body = json.dumps(
        {"problem": problem_payload(physical), "n_reads": reads, "params": cfg.params}
    ).encode("utf-8")
    req = urllib.request.Request(
        cfg.endpoint, data=body, headers={"Content-Type": "application/json"}
    )
    if cfg.auth_token:
        req.add_header("Authorization", f"Bearer {cfg.auth_token}")
    try:
        with urllib.request.urlopen(req, timeout=60) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        if exc.code in (401, 403):
            raise RemoteAuthError(f"{cfg.endpoint}: HTTP {exc.code}") from exc
        raise RemoteNetworkError(f"{cfg.endpoint}: HTTP {exc.code}") from exc
    except urllib.error.URLError as exc:
        raise RemoteNetworkError(f"{cfg.endpoint}: {exc.reason}") from exc
    try:
        doc = json.loads(raw.decode("utf-8"))
        rows = []
        counts = []
        for read in doc["reads"]:
            state = [int(v) for v in read["state"]]
            if len(state) != physical.n or any(v not in (-1, 1) for v in state):
                raise ValueError(f"bad state of width {len(state)}")
            rows.append(state)
            counts.append(int(read["count"]))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise RemoteProtocolError(f"{cfg.endpoint}: malformed response: {exc}") from exc
    if not rows:
        raise RemoteProtocolError(f"{cfg.endpoint}: response carried no reads")
    return SampleSet.from_counts(
        np.array(rows, dtype=np.int8), np.array(counts), level="physical"
    )
