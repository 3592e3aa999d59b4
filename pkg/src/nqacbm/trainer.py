"""Fully-visible Boltzmann machine training over the encode/sample/decode stack.

The model is an Ising problem whose fields play the role of biases and whose
couplers play the role of weights, with P(x) proportional to exp(-beta E(x)).
Each gradient step compares exact minibatch moments (positive phase) against
moments of samples drawn through the configured pipeline (negative phase).

Sign convention: the log-likelihood gradient with respect to b_i is
-beta(<x_i>_data - <x_i>_model), so ascent means subtracting
eta * (<x_i>_data - <x_i>_model); beta is absorbed into eta.
"""

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as _rng
from .errors import CapacityError, ConfigError, DimensionError, DomainError
from .ising import (
    GibbsTable,
    IsingProblem,
    SampleSet,
    clamp,
    enumerate_gibbs,
    exact_sample,
    operator_norm,
)
from .metrics import (
    EnergyHistogram,
    classification_accuracy,
    distance_from_data,
    empirical_log_likelihood,
    estimate_beta_eff,
    tvd_energy,
)
from .nqac import (
    ChainBreakStats,
    DecodePolicy,
    HardwareGraph,
    NestingConfig,
    chimera,
    decode,
    minor_embed,
    nest,
)
from .samplers import (
    AnnealSchedule,
    QuenchSpec,
    SqaConfig,
    SvmcConfig,
    apply_noise,
    beta_from_bath,
    sqa_sample,
    svmc_sample,
)

PENALTY_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)

TRACE_COLUMNS = (
    "epoch",
    "update",
    "emp_ll",
    "beta_eff",
    "beta_hat",
    "tvd_gibbs",
    "d_data",
    "chain_break_rate",
)


# -- sampling backends --------------------------------------------------------------


@dataclass(frozen=True)
class ExactGibbsBackend:
    """Enumeration oracle in place of a sampler.

    Negative-phase moments come straight from the exact Gibbs distribution at
    the bath temperature and the encode/decode stages are skipped, so runs
    with this backend isolate the learning rule from sampler error.
    """

    beta: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise DomainError(f"beta must be positive, got {self.beta}")

    @property
    def bath_beta(self) -> float:
        return self.beta

    def describe(self) -> dict:
        return {"kind": "exact", "beta": self.beta}


@dataclass(frozen=True)
class SvmcBackend:
    bath_temp: float
    sweeps: int
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule.default)
    quench: QuenchSpec = field(default_factory=QuenchSpec)

    @property
    def bath_beta(self) -> float:
        return beta_from_bath(self.bath_temp, self.schedule.units)

    def sample_physical(self, problem, n_reads, seed, read_range=None) -> SampleSet:
        cfg = SvmcConfig(bath_temp=self.bath_temp, sweeps=self.sweeps, seed=seed)
        return svmc_sample(
            problem, self.schedule, self.quench, cfg, n_reads, read_range=read_range
        )

    def describe(self) -> dict:
        return {
            "kind": "svmc",
            "bath_temp": self.bath_temp,
            "sweeps": self.sweeps,
            "schedule": [list(row) for row in self.schedule.table],
            "units": self.schedule.units,
            "quench": [self.quench.s_int, self.quench.quench_sweeps],
        }


@dataclass(frozen=True)
class SqaBackend:
    bath_temp: float
    sweeps: int
    n_slices: int = 32
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule.default)
    quench: QuenchSpec = field(default_factory=QuenchSpec)

    @property
    def bath_beta(self) -> float:
        return beta_from_bath(self.bath_temp, self.schedule.units)

    def sample_physical(self, problem, n_reads, seed, read_range=None) -> SampleSet:
        cfg = SqaConfig(
            bath_temp=self.bath_temp,
            sweeps=self.sweeps,
            n_slices=self.n_slices,
            seed=seed,
        )
        return sqa_sample(
            problem, self.schedule, self.quench, cfg, n_reads, read_range=read_range
        )

    def describe(self) -> dict:
        return {
            "kind": "sqa",
            "bath_temp": self.bath_temp,
            "sweeps": self.sweeps,
            "n_slices": self.n_slices,
            "schedule": [list(row) for row in self.schedule.table],
            "units": self.schedule.units,
            "quench": [self.quench.s_int, self.quench.quench_sweeps],
        }


# -- the pipeline -------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the scale -> nest -> embed -> sample -> decode chain."""

    alpha: float = 1.0
    c: int = 1
    gamma1: float = 1.0
    gamma2: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise DomainError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.c < 1:
            raise DomainError(f"code length must be >= 1, got {self.c}")
        for name in ("gamma1", "gamma2"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise DomainError(f"{name} must be in (0, 1], got {v}")
        if self.noise_sigma < 0:
            raise DomainError(f"noise sigma must be >= 0, got {self.noise_sigma}")

    def describe(self) -> dict:
        return {
            "alpha": self.alpha,
            "c": self.c,
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "noise_sigma": self.noise_sigma,
        }


@dataclass(frozen=True)
class PipelineSample:
    """One negative-phase draw: decoded reads, or the exact table instead."""

    sampling_problem: IsingProblem  # the scaled model the backend actually saw
    decoded: SampleSet | None = None
    stats: ChainBreakStats | None = None
    table: GibbsTable | None = None

    @property
    def is_exact(self) -> bool:
        return self.table is not None


class NqacPipeline:
    """Carries a logical model through encoding, sampling, and decoding.

    The clique embedding is computed once per code size and revalidated on
    reuse; only coupler values change between updates. With an
    ExactGibbsBackend the encode/decode stages are bypassed.
    """

    def __init__(
        self,
        config: PipelineConfig,
        backend,
        hardware: HardwareGraph | None = None,
        decode_policy: DecodePolicy | None = None,
    ):
        self.config = config
        self.backend = backend
        self.hardware = hardware if hardware is not None else chimera(16, 16, 4)
        self.decode_policy = decode_policy or DecodePolicy()
        self._chain_cache: dict[int, dict] = {}

    @property
    def is_exact(self) -> bool:
        return isinstance(self.backend, ExactGibbsBackend)

    def _embed(self, nested):
        chains = self._chain_cache.get(nested.base.n)
        physical, emb = minor_embed(nested, self.hardware, self.config.gamma2, chains)
        if chains is None:
            self._chain_cache[nested.base.n] = dict(emb.chains)
        return physical, emb

    def sample(self, model: IsingProblem, n_reads: int, seed: int) -> PipelineSample:
        """Decoded logical reads for the (alpha-scaled) model."""
        scaled = model.scaled(self.config.alpha)
        if self.is_exact:
            ss = exact_sample(scaled, self.backend.beta, n_reads, seed)
            return PipelineSample(sampling_problem=scaled, decoded=ss)
        nested = nest(scaled, NestingConfig(self.config.c, self.config.gamma1))
        physical, emb = self._embed(nested)
        if self.config.noise_sigma > 0:
            physical = apply_noise(
                physical, self.config.noise_sigma, _rng.hash_words(seed, "noise")
            )
        raw = self.backend.sample_physical(physical, n_reads, seed)
        decoded, stats = decode(raw, emb, nested, self.decode_policy)
        return PipelineSample(sampling_problem=scaled, decoded=decoded, stats=stats)

    def moments(self, model: IsingProblem, n_reads: int, seed: int):
        """Negative-phase moments (first, pair) plus the draw they came from.

        Pair moments follow the model's canonical pair order.
        """
        if self.is_exact:
            scaled = model.scaled(self.config.alpha)
            table = enumerate_gibbs(scaled, self.backend.beta)
            m1, m2 = table.moments()
            return m1, m2, PipelineSample(sampling_problem=scaled, table=table)
        ps = self.sample(model, n_reads, seed)
        if ps.decoded.width != model.n:
            raise DimensionError(
                f"decoded width {ps.decoded.width} != model size {model.n}"
            )
        m1, m2 = ps.decoded.moments(pairs=model.pair_index)
        return m1, m2, ps


# -- configuration and state --------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.01
    epochs: int = 10
    batch_size: int = 50
    samples_per_update: int = 10_000
    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        if self.eta <= 0:
            raise DomainError(f"eta must be positive, got {self.eta}")
        if self.epochs < 0:
            raise DomainError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise DomainError(f"batch size must be >= 1, got {self.batch_size}")
        if self.samples_per_update < 1:
            raise DomainError(
                f"samples_per_update must be >= 1, got {self.samples_per_update}"
            )

    def describe(self) -> dict:
        return {
            "eta": self.eta,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "samples_per_update": self.samples_per_update,
            "seed": self.seed,
            "pipeline": self.pipeline.describe(),
        }


def config_hash(payload) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


@dataclass
class TrainState:
    """Model plus progress counters; the trace is append-only."""

    model: IsingProblem
    epoch: int = 0
    update: int = 0
    seed: int = 0
    trace: list = field(default_factory=list)


def init_model(n: int, seed: int) -> IsingProblem:
    """Biases and weights i.i.d. uniform in [-0.1, 0.1]."""
    if n < 1:
        raise DomainError(f"model needs at least one variable, got {n}")
    gen = _rng.spawn(seed, "init")
    b = gen.uniform(-0.1, 0.1, size=n)
    pairs = [(i, k) for i in range(n) for k in range(i + 1, n)]
    w = gen.uniform(-0.1, 0.1, size=len(pairs))
    return IsingProblem(
        n=n,
        h={i: float(b[i]) for i in range(n)},
        j={p: float(v) for p, v in zip(pairs, w)},
    )


def data_moments(batch: np.ndarray, pairs: np.ndarray):
    """Exact empirical first/pair moments of a +-1 batch (positive phase)."""
    rows = np.asarray(batch, dtype=np.float64)
    if rows.ndim != 2 or len(rows) == 0:
        raise DomainError("batch must be a non-empty 2-d array")
    m1 = rows.mean(axis=0)
    pairs = np.asarray(pairs, dtype=np.int64)
    if len(pairs) == 0:
        return m1, np.zeros(0)
    m2 = (rows[:, pairs[:, 0]] * rows[:, pairs[:, 1]]).mean(axis=0)
    return m1, m2


def update_params(state: TrainState, data_m, model_m, eta: float) -> TrainState:
    """One ascent step: parameters move against the moment mismatch."""
    d1, d2 = data_m
    m1, m2 = model_m
    model = state.model
    if np.shape(d1) != (model.n,) or np.shape(m1) != (model.n,):
        raise DimensionError("first-moment shape does not match the model")
    if np.shape(d2) != np.shape(m2) or len(d2) != len(model.pair_index):
        raise DimensionError("pair-moment shape does not match the model")
    b = model.h_vec - eta * (np.asarray(d1) - np.asarray(m1))
    w = model.j_vec - eta * (np.asarray(d2) - np.asarray(m2))
    new_model = IsingProblem(
        n=model.n,
        h={i: float(b[i]) for i in range(model.n)},
        j={(int(i), int(k)): float(v) for (i, k), v in zip(model.pair_index, w)},
    )
    return TrainState(
        model=new_model,
        epoch=state.epoch,
        update=state.update + 1,
        seed=state.seed,
        trace=state.trace,
    )


def _exact_metric_row(model, bath_beta, alpha, data_vectors) -> dict:
    """Closed-form diagnostics of the current model under the exact backend.

    The sampling distribution is exactly Gibbs(alpha * model, beta), so the
    row describes the model as it stands after the update.
    """
    scaled = model.scaled(alpha)
    table = enumerate_gibbs(scaled, bath_beta)
    e = scaled.energies(np.asarray(data_vectors, dtype=np.int8))
    beta_eff = alpha * bath_beta
    return {
        "emp_ll": float(np.mean(-bath_beta * e) - table.log_z),
        "beta_eff": beta_eff,
        "beta_hat": beta_eff * operator_norm(model),
        "tvd_gibbs": 0.0,
        "d_data": tvd_energy(
            EnergyHistogram.from_gibbs(model, beta_eff),
            EnergyHistogram.from_states(np.asarray(data_vectors), model),
        ),
        "chain_break_rate": 0.0,
    }


def sample_metrics(ps: PipelineSample, generating_model, data_vectors=None) -> dict:
    """Diagnostics from the decoded reads of one negative phase.

    The beta fit references the (unscaled) model the samples were drawn
    from, i.e. the parameters before the update they fed. Data-relative
    entries are NaN when no dataset is supplied.
    """
    if data_vectors is None:
        emp_ll = d_data = math.nan
    else:
        data_vectors = np.asarray(data_vectors)
        emp_ll = empirical_log_likelihood(ps.decoded, data_vectors)
        d_data = distance_from_data(ps.decoded, data_vectors, generating_model)
    try:
        est = estimate_beta_eff(ps.decoded, generating_model)
        beta_eff, beta_hat, tvd = est.beta_eff, est.dimensionless, est.distance_at_min
    except CapacityError:
        beta_eff = beta_hat = tvd = math.nan
    rate = ps.stats.broken_chain_rate if ps.stats is not None else 0.0
    return {
        "emp_ll": emp_ll,
        "beta_eff": beta_eff,
        "beta_hat": beta_hat,
        "tvd_gibbs": tvd,
        "d_data": d_data,
        "chain_break_rate": rate,
    }


def _metric_row(ps: PipelineSample, pre_model, post_model, bath_beta, alpha, data):
    if ps.is_exact:
        return _exact_metric_row(post_model, bath_beta, alpha, data)
    return sample_metrics(ps, pre_model, data)


def _as_dataset(dataset):
    from .datasets import BinaryDataset

    if isinstance(dataset, BinaryDataset):
        return dataset
    return BinaryDataset(vectors=np.asarray(dataset, dtype=np.int8))


def negative_seed(master: int, update: int, lane: int = 0) -> int:
    """Seed lane for one negative-phase draw; lane separates replicas."""
    return _rng.hash_words(master, "negative", update, lane)


def train(
    config: TrainConfig,
    dataset,
    backend,
    *,
    full_batch: bool = False,
    pipeline: NqacPipeline | None = None,
    record_metrics: bool = True,
) -> TrainState:
    """Epoch/minibatch gradient-ascent loop.

    Metrics after every update are computed from the same decoded sample set
    the update used (closed forms with the exact backend). ``full_batch``
    treats the whole dataset as one batch per epoch.
    """
    from .datasets import minibatches

    data = _as_dataset(dataset)
    pipe = pipeline or NqacPipeline(config.pipeline, backend)
    state = TrainState(model=init_model(data.width, config.seed), seed=config.seed)
    alpha = pipe.config.alpha
    for epoch in range(1, config.epochs + 1):
        if full_batch:
            batches = [data]
        else:
            batches = minibatches(
                data, config.batch_size, epoch_seed=config.seed, epoch=epoch
            )
        for batch in batches:
            d_m = data_moments(batch.vectors, state.model.pair_index)
            seed_k = negative_seed(config.seed, state.update)
            pre_model = state.model
            m1, m2, ps = pipe.moments(
                state.model, config.samples_per_update, seed_k
            )
            state = update_params(state, d_m, (m1, m2), config.eta)
            state.epoch = epoch
            if record_metrics:
                row = {"epoch": epoch, "update": state.update}
                row.update(
                    _metric_row(
                        ps,
                        pre_model,
                        state.model,
                        pipe.backend.bath_beta,
                        alpha,
                        data.vectors,
                    )
                )
                state.trace.append(row)
    return state


# -- penalty grid search ------------------------------------------------------------


@dataclass(frozen=True)
class GridSearchResult:
    gamma1: float
    gamma2: float
    best_score: float
    heatmap: tuple  # rows (gamma1, gamma2, score)


def grid_search_penalties(
    config: TrainConfig,
    dataset,
    backend,
    grid=PENALTY_GRID,
    probe_epochs: int = 5,
    scorer=None,
    hardware: HardwareGraph | None = None,
    decode_policy: DecodePolicy | None = None,
) -> GridSearchResult:
    """Short probe runs over the penalty grid from one fixed initialization.

    The score is the final recorded empirical log-likelihood unless a custom
    ``scorer(state, pipeline) -> float`` is given (e.g. classification
    accuracy for supervised tasks). Ties prefer smaller gamma1, then smaller
    gamma2. With C=1 there is no code penalty; only gamma2 is scanned.
    """
    grid = tuple(grid)
    if not grid:
        raise DomainError("penalty grid must be non-empty")
    g1_axis = grid if config.pipeline.c > 1 else (config.pipeline.gamma1,)
    best = None
    heatmap = []
    for g1 in g1_axis:
        for g2 in grid:
            cell = replace(
                config,
                epochs=probe_epochs,
                pipeline=replace(config.pipeline, gamma1=g1, gamma2=g2),
            )
            pipe = NqacPipeline(cell.pipeline, backend, hardware, decode_policy)
            st = train(cell, dataset, backend, pipeline=pipe)
            if scorer is not None:
                score = float(scorer(st, pipe))
            elif st.trace:
                score = float(st.trace[-1]["emp_ll"])
            else:
                raise DomainError("no trace to score; probe_epochs must be >= 1")
            heatmap.append((g1, g2, score))
            if best is None or score > best[0]:
                best = (score, g1, g2)
    return GridSearchResult(
        gamma1=best[1], gamma2=best[2], best_score=best[0], heatmap=tuple(heatmap)
    )


# -- classical repetition baseline --------------------------------------------------


def classical_repetition_train(
    config: TrainConfig,
    dataset,
    backend,
    m_replicas: int,
    *,
    replica_lanes=None,
    pipeline: NqacPipeline | None = None,
) -> TrainState:
    """Unencoded baseline: per update, race m independent sample-and-update
    rounds from the shared parameters and keep the round whose decoded
    samples score the best empirical log-likelihood (ties: lowest lane).

    With lane list (0,) this is exactly ``train``; the exact backend makes
    every round identical, so selection only matters for sampled backends.
    """
    from .datasets import minibatches

    if m_replicas < 1:
        raise DomainError(f"m_replicas must be >= 1, got {m_replicas}")
    lanes = tuple(replica_lanes) if replica_lanes is not None else tuple(
        range(m_replicas)
    )
    if len(lanes) != m_replicas:
        raise DimensionError("replica_lanes length must equal m_replicas")
    data = _as_dataset(dataset)
    pipe = pipeline or NqacPipeline(config.pipeline, backend)
    state = TrainState(model=init_model(data.width, config.seed), seed=config.seed)
    alpha = pipe.config.alpha
    for epoch in range(1, config.epochs + 1):
        batches = minibatches(
            data, config.batch_size, epoch_seed=config.seed, epoch=epoch
        )
        for batch in batches:
            d_m = data_moments(batch.vectors, state.model.pair_index)
            pre_model = state.model
            best = None
            for lane in lanes:
                seed_k = negative_seed(config.seed, state.update, lane)
                m1, m2, ps = pipe.moments(
                    state.model, config.samples_per_update, seed_k
                )
                cand = update_params(state, d_m, (m1, m2), config.eta)
                if ps.is_exact:
                    ll = 0.0  # identical rounds; any pick is the same model
                else:
                    ll = empirical_log_likelihood(ps.decoded, data.vectors)
                if best is None or ll > best[0]:
                    best = (ll, cand, ps)
            _, state, ps_best = best
            state.epoch = epoch
            row = {"epoch": epoch, "update": state.update}
            row.update(
                _metric_row(
                    ps_best,
                    pre_model,
                    state.model,
                    pipe.backend.bath_beta,
                    alpha,
                    data.vectors,
                )
            )
            state.trace.append(row)
    return state


# -- supervised prediction ----------------------------------------------------------


def predict_label(
    model: IsingProblem,
    pipeline: NqacPipeline,
    pixels,
    n_labels: int,
    k: int = 100,
    seed: int = 0,
) -> int:
    """Clamp the pixel block, read the label block k times, report the class.

    Returns the 1-based class whose label position is most often +1; ties go
    to the lowest position.
    """
    pixels = np.asarray(pixels).ravel()
    n_pixels = model.n - n_labels
    if n_labels < 1 or n_pixels < 1:
        raise DomainError("model must carry at least one pixel and one label var")
    if len(pixels) != n_pixels:
        raise DimensionError(
            f"expected {n_pixels} pixels for a {model.n}-var model, got {len(pixels)}"
        )
    if k < 1:
        raise DomainError(f"read budget must be >= 1, got {k}")
    reduced = clamp(model, {i: int(pixels[i]) for i in range(n_pixels)})
    ps = pipeline.sample(reduced.problem, k, seed)
    freqs = ps.decoded.frequencies()
    plus = freqs @ (ps.decoded.states == 1)
    return int(np.argmax(plus)) + 1


def evaluate_accuracy(
    model: IsingProblem,
    pipeline: NqacPipeline,
    dataset,
    n_labels: int,
    k: int = 100,
    seed: int = 0,
) -> float:
    """Accuracy of predict_label over a labeled dataset's pixel blocks."""
    data = _as_dataset(dataset)
    if data.labels is None:
        raise DomainError("dataset carries no labels")
    n_pixels = model.n - n_labels
    preds = [
        predict_label(
            model,
            pipeline,
            data.vectors[i, :n_pixels],
            n_labels,
            k=k,
            seed=_rng.hash_words(seed, "predict", i),
        )
        for i in range(len(data))
    ]
    return classification_accuracy(preds, data.labels)


# -- persistence --------------------------------------------------------------------


def save_checkpoint(state: TrainState, config: TrainConfig, backend, path) -> None:
    """Atomic JSON checkpoint: parameters, counters, seed lineage, config hash."""
    model = state.model
    payload = {
        "epoch": state.epoch,
        "update": state.update,
        "seed": state.seed,
        "b": [model.h.get(i, 0.0) for i in range(model.n)],
        "w": [[int(i), int(k), v] for (i, k), v in sorted(model.j.items())],
        "n": model.n,
        "config": config.describe(),
        "backend": backend.describe(),
        "config_hash": config_hash(
            {"train": config.describe(), "backend": backend.describe()}
        ),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[IsingProblem, dict]:
    """Rebuild the model; the raw payload rides along as metadata."""
    with open(path) as fh:
        payload = json.load(fh)
    try:
        model = IsingProblem(
            n=payload["n"],
            h={i: v for i, v in enumerate(payload["b"])},
            j={(int(i), int(k)): v for i, k, v in payload["w"]},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed checkpoint {path}: {exc}") from exc
    return model, payload


def write_trace(trace, path) -> None:
    """One CSV row per update; floats via repr so rereads are exact."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow(
                [
                    row["epoch"],
                    row["update"],
                    *(repr(float(row[c])) for c in TRACE_COLUMNS[2:]),
                ]
            )
    os.replace(tmp, path)


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ConfigError(f"unexpected trace header in {path}")
        out = []
        for rec in reader:
            row = {"epoch": int(rec["epoch"]), "update": int(rec["update"])}
            for c in TRACE_COLUMNS[2:]:
                row[c] = float(rec[c])
            out.append(row)
    return out
