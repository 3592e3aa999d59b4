"""Training-loop contracts: gradients vs finite differences, pipeline wiring,
grid search, repetition baseline, prediction, persistence."""

import json
import math

import numpy as np
import pytest

from nqacbm import rng as _rng
from nqacbm.datasets import BasSpec, BinaryDataset, generate_bas
from nqacbm.errors import ConfigError, DimensionError, DomainError
from nqacbm.ising import IsingProblem, enumerate_gibbs, exact_log_likelihood
from nqacbm.nqac import chimera
from nqacbm.samplers import AnnealSchedule, QuenchSpec
from nqacbm.trainer import (
    ExactGibbsBackend,
    GridSearchResult,
    NqacPipeline,
    PipelineConfig,
    SqaBackend,
    SvmcBackend,
    TrainConfig,
    TrainState,
    classical_repetition_train,
    config_hash,
    data_moments,
    evaluate_accuracy,
    grid_search_penalties,
    init_model,
    load_checkpoint,
    negative_seed,
    predict_label,
    read_trace,
    save_checkpoint,
    train,
    update_params,
    write_trace,
)

FLAT = AnnealSchedule.flat(a=0.0, b=1.0)
NO_QUENCH = QuenchSpec(s_int=1.0, quench_sweeps=0)


def random_model(n, seed, scale=0.5):
    gen = _rng.spawn(seed, "model")
    return IsingProblem(
        n=n,
        h={i: float(gen.uniform(-scale, scale)) for i in range(n)},
        j={
            (i, k): float(gen.uniform(-scale, scale))
            for i in range(n)
            for k in range(i + 1, n)
        },
    )


def random_batch(n, rows, seed):
    gen = _rng.spawn(seed, "batch")
    return (2 * gen.integers(0, 2, size=(rows, n)) - 1).astype(np.int8)


class TestDataMoments:
    def test_all_plus_batch(self):
        batch = np.ones((1, 4), dtype=np.int8)
        pairs = random_model(4, 0).pair_index
        m1, m2 = data_moments(batch, pairs)
        assert np.all(m1 == 1.0)
        assert np.all(m2 == 1.0)

    def test_antipodal_pair(self):
        x = np.array([[1, -1, 1, 1]], dtype=np.int8)
        batch = np.vstack([x, -x])
        pairs = random_model(4, 0).pair_index
        m1, m2 = data_moments(batch, pairs)
        assert np.all(m1 == 0.0)
        expect = (x[0, pairs[:, 0]] * x[0, pairs[:, 1]]).astype(float)
        assert np.array_equal(m2, expect)

    def test_matches_accumulation_oracle(self):
        batch = random_batch(5, 40, 3)
        pairs = random_model(5, 1).pair_index
        m1, m2 = data_moments(batch, pairs)
        acc1 = np.zeros(5)
        acc2 = np.zeros(len(pairs))
        for row in batch:
            acc1 += row
            for p, (i, k) in enumerate(pairs):
                acc2[p] += row[i] * row[k]
        assert np.allclose(m1, acc1 / 40, atol=1e-12)
        assert np.allclose(m2, acc2 / 40, atol=1e-12)

    def test_empty_batch(self):
        with pytest.raises(DomainError):
            data_moments(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))


class TestUpdateParams:
    def test_zero_gradient_is_identity(self):
        model = random_model(4, 7)
        state = TrainState(model=model)
        m = (np.full(4, 0.25), np.full(len(model.pair_index), -0.5))
        out = update_params(state, m, m, eta=0.05)
        assert dict(out.model.h) == dict(model.h)
        assert dict(out.model.j) == dict(model.j)
        assert out.update == 1

    def test_eta_zero_is_identity(self):
        model = random_model(3, 8)
        state = TrainState(model=model)
        d = (np.ones(3), np.ones(3))
        m = (np.zeros(3), np.zeros(3))
        out = update_params(state, d, m, eta=0.0)
        assert dict(out.model.h) == dict(model.h)

    def test_one_spin_worked_example(self):
        model = IsingProblem(n=1, h={0: 0.0}, j={})
        state = TrainState(model=model)
        out = update_params(state, (np.ones(1), np.zeros(0)), (np.zeros(1), np.zeros(0)), 0.01)
        assert out.model.h[0] == pytest.approx(-0.01)
        data = np.ones((1, 1), dtype=np.int8)
        before = exact_log_likelihood(model, 1.0, data)
        after = exact_log_likelihood(out.model, 1.0, data)
        assert after > before  # the step must raise the likelihood

    def test_gradient_matches_finite_difference(self):
        # central differences of the exact log-likelihood, several models
        beta = 1.0
        eps = 1e-5
        for trial in range(5):
            n = 3 + trial % 4
            model = random_model(n, 100 + trial)
            data = random_batch(n, 25, 200 + trial)
            table = enumerate_gibbs(model, beta)
            d1, d2 = data_moments(data, model.pair_index)
            m1, m2 = table.moments()
            grad_b = -beta * (d1 - m1)
            grad_w = -beta * (d2 - m2)
            for i in range(n):
                up = dict(model.h)
                dn = dict(model.h)
                up[i] = up[i] + eps
                dn[i] = dn[i] - eps
                fd = (
                    exact_log_likelihood(IsingProblem(n, up, dict(model.j)), beta, data)
                    - exact_log_likelihood(IsingProblem(n, dn, dict(model.j)), beta, data)
                ) / (2 * eps)
                assert abs(fd - grad_b[i]) <= 1e-3 * max(1e-6, abs(grad_b[i]))
            for p, pair in enumerate(map(tuple, model.pair_index)):
                up = dict(model.j)
                dn = dict(model.j)
                up[pair] = up[pair] + eps
                dn[pair] = dn[pair] - eps
                fd = (
                    exact_log_likelihood(IsingProblem(n, dict(model.h), up), beta, data)
                    - exact_log_likelihood(IsingProblem(n, dict(model.h), dn), beta, data)
                ) / (2 * eps)
                assert abs(fd - grad_w[p]) <= 1e-3 * max(1e-6, abs(grad_w[p]))

    def test_shape_mismatch(self):
        model = random_model(3, 1)
        state = TrainState(model=model)
        good = (np.zeros(3), np.zeros(3))
        with pytest.raises(DimensionError):
            update_params(state, (np.zeros(4), np.zeros(3)), good, 0.01)
        with pytest.raises(DimensionError):
            update_params(state, (np.zeros(3), np.zeros(2)), good, 0.01)


class TestInitAndConfig:
    def test_init_model_range_and_shape(self):
        model = init_model(5, seed=3)
        assert model.n == 5
        assert len(model.j) == 10
        assert all(-0.1 <= v <= 0.1 for v in model.h.values())
        assert all(-0.1 <= v <= 0.1 for v in model.j.values())
        again = init_model(5, seed=3)
        assert dict(again.h) == dict(model.h)
        assert dict(init_model(5, seed=4).h) != dict(model.h)

    def test_config_validation(self):
        with pytest.raises(DomainError):
            TrainConfig(eta=0.0)
        with pytest.raises(DomainError):
            TrainConfig(batch_size=0)
        with pytest.raises(DomainError):
            TrainConfig(samples_per_update=0)
        with pytest.raises(DomainError):
            PipelineConfig(alpha=0.0)
        with pytest.raises(DomainError):
            PipelineConfig(alpha=1.5)
        with pytest.raises(DomainError):
            PipelineConfig(c=0)
        with pytest.raises(DomainError):
            PipelineConfig(gamma2=0.0)
        with pytest.raises(DomainError):
            PipelineConfig(noise_sigma=-1.0)

    def test_config_hash_stability(self):
        a = TrainConfig(seed=1).describe()
        b = TrainConfig(seed=1).describe()
        c = TrainConfig(seed=2).describe()
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)
        assert len(config_hash(a)) == 12

    def test_negative_seed_lanes(self):
        seen = {
            negative_seed(9, u, lane) for u in range(3) for lane in range(3)
        }
        assert len(seen) == 9


class TestPipeline:
    def test_exact_uniform_model_has_zero_moments(self):
        model = IsingProblem(n=4, h={i: 0.0 for i in range(4)},
                             j={(i, k): 0.0 for i in range(4) for k in range(i + 1, 4)})
        pipe = NqacPipeline(PipelineConfig(), ExactGibbsBackend(beta=1.0))
        m1, m2, ps = pipe.moments(model, 10, seed=0)
        assert np.allclose(m1, 0.0, atol=1e-12)
        assert np.allclose(m2, 0.0, atol=1e-12)
        assert ps.is_exact

    def test_exact_moments_match_gibbs_table(self):
        model = random_model(5, 17)
        beta = 1.3
        pipe = NqacPipeline(PipelineConfig(alpha=0.5), ExactGibbsBackend(beta=beta))
        m1, m2, _ = pipe.moments(model, 10, seed=0)
        t1, t2 = enumerate_gibbs(model.scaled(0.5), beta).moments()
        assert np.allclose(m1, t1, atol=1e-12)
        assert np.allclose(m2, t2, atol=1e-12)

    def test_svmc_pipeline_matches_gibbs_moments(self):
        # deep-well 2-var model: decoded reads through the full encode/decode
        # chain reproduce the exact Gibbs moments of the logical model
        model = IsingProblem(n=2, h={0: 0.6, 1: 0.5}, j={(0, 1): -1.0})
        beta = 4.0
        backend = SvmcBackend(
            bath_temp=1.0 / beta, sweeps=800, schedule=FLAT, quench=NO_QUENCH
        )
        pipe = NqacPipeline(PipelineConfig(), backend, hardware=chimera(2, 2, 4))
        m1, m2, ps = pipe.moments(model, 5000, seed=42)
        t1, t2 = enumerate_gibbs(model, beta).moments()
        assert np.allclose(m1, t1, atol=0.02)
        assert np.allclose(m2, t2, atol=0.02)
        assert ps.decoded.width == 2
        assert ps.stats.n_samples == 5000

    def test_sqa_nested_pipeline_width_contract(self):
        model = random_model(3, 5, scale=0.3)
        backend = SqaBackend(bath_temp=0.5, sweeps=60, n_slices=4)
        pipe = NqacPipeline(
            PipelineConfig(c=2, gamma1=0.8, gamma2=0.9),
            backend,
            hardware=chimera(4, 4, 4),
        )
        m1, m2, ps = pipe.moments(model, 50, seed=1)
        assert m1.shape == (3,)
        assert m2.shape == (3,)
        assert ps.decoded.width == 3
        assert ps.decoded.level == "logical"
        assert ps.stats.n_samples == 50

    def test_embedding_reused_across_calls(self):
        model = random_model(3, 6, scale=0.2)
        backend = SqaBackend(bath_temp=0.5, sweeps=20, n_slices=2)
        pipe = NqacPipeline(
            PipelineConfig(c=2), backend, hardware=chimera(4, 4, 4)
        )
        pipe.moments(model, 10, seed=0)
        cached = dict(pipe._chain_cache)
        pipe.moments(model, 10, seed=1)
        assert pipe._chain_cache == cached
        assert list(cached) == [6]  # one entry, keyed by code size


class TestTrain:
    def test_full_batch_monotone_exact_backend(self):
        data = generate_bas(BasSpec(2, 64, seed=5))
        cfg = TrainConfig(eta=0.05, epochs=6, batch_size=64, seed=1)
        st = train(cfg, data, ExactGibbsBackend(beta=1.0), full_batch=True)
        lls = [row["emp_ll"] for row in st.trace]
        assert len(lls) == 6
        assert all(b >= a for a, b in zip(lls, lls[1:]))
        assert st.trace[0]["beta_eff"] == 1.0
        assert st.trace[0]["tvd_gibbs"] == 0.0

    def test_minibatch_trace_shape(self):
        data = generate_bas(BasSpec(2, 20, seed=2))
        cfg = TrainConfig(eta=0.01, epochs=2, batch_size=8, seed=3)
        st = train(cfg, data, ExactGibbsBackend(beta=1.0))
        # ceil(20/8) = 3 updates per epoch
        assert st.update == 6
        assert [row["update"] for row in st.trace] == [1, 2, 3, 4, 5, 6]
        assert st.trace[-1]["epoch"] == 2

    def test_deterministic(self):
        data = generate_bas(BasSpec(2, 16, seed=9))
        cfg = TrainConfig(eta=0.02, epochs=2, batch_size=8, seed=11)
        a = train(cfg, data, ExactGibbsBackend(beta=1.0))
        b = train(cfg, data, ExactGibbsBackend(beta=1.0))
        assert dict(a.model.h) == dict(b.model.h)
        assert dict(a.model.j) == dict(b.model.j)
        assert a.trace == b.trace

    def test_sampled_backend_records_chain_stats(self):
        data = generate_bas(BasSpec(2, 12, seed=4))
        backend = SvmcBackend(
            bath_temp=0.5, sweeps=60, schedule=FLAT, quench=NO_QUENCH
        )
        cfg = TrainConfig(
            eta=0.02, epochs=1, batch_size=12, samples_per_update=300, seed=2
        )
        pipe = NqacPipeline(cfg.pipeline, backend, hardware=chimera(4, 4, 4))
        st = train(cfg, data, backend, pipeline=pipe)
        row = st.trace[-1]
        assert 0.0 <= row["chain_break_rate"] <= 1.0
        assert row["beta_eff"] > 0
        assert row["emp_ll"] <= 0

    def test_zero_epochs(self):
        data = generate_bas(BasSpec(2, 8, seed=1))
        cfg = TrainConfig(epochs=0, seed=5)
        st = train(cfg, data, ExactGibbsBackend())
        assert st.update == 0
        assert st.trace == []
        assert dict(st.model.h) == dict(init_model(4, 5).h)


class TestGridSearch:
    def test_c1_scans_gamma2_only(self):
        data = generate_bas(BasSpec(2, 16, seed=6))
        cfg = TrainConfig(eta=0.02, epochs=1, batch_size=16, seed=7)
        res = grid_search_penalties(
            cfg, data, ExactGibbsBackend(), probe_epochs=1
        )
        assert isinstance(res, GridSearchResult)
        assert len(res.heatmap) == 5
        assert {g1 for g1, _, _ in res.heatmap} == {cfg.pipeline.gamma1}

    def test_exact_backend_ties_break_small(self):
        # the exact backend ignores penalties entirely: every cell scores the
        # same, so the tie rule must select the smallest gamma pair
        data = generate_bas(BasSpec(2, 16, seed=6))
        cfg = TrainConfig(eta=0.02, epochs=1, batch_size=16, seed=7,
                          pipeline=PipelineConfig(c=2))
        res = grid_search_penalties(cfg, data, ExactGibbsBackend(), probe_epochs=1)
        assert len(res.heatmap) == 25
        assert res.gamma1 == 0.2
        assert res.gamma2 == 0.2

    def test_single_cell_grid(self):
        data = generate_bas(BasSpec(2, 8, seed=3))
        cfg = TrainConfig(eta=0.02, epochs=1, batch_size=8, seed=1)
        res = grid_search_penalties(
            cfg, data, ExactGibbsBackend(), grid=(0.6,), probe_epochs=1
        )
        assert res.gamma2 == 0.6
        assert len(res.heatmap) == 1

    def test_custom_scorer_wins(self):
        data = generate_bas(BasSpec(2, 8, seed=3))
        cfg = TrainConfig(eta=0.02, epochs=1, batch_size=8, seed=1)
        res = grid_search_penalties(
            cfg,
            data,
            ExactGibbsBackend(),
            grid=(0.2, 0.4, 0.6),
            probe_epochs=1,
            scorer=lambda st, pipe: pipe.config.gamma2,  # prefer the largest
        )
        assert res.gamma2 == 0.6

    def test_empty_grid(self):
        with pytest.raises(DomainError):
            grid_search_penalties(
                TrainConfig(), generate_bas(BasSpec(2, 4, seed=0)), ExactGibbsBackend(), grid=()
            )


class TestClassicalRepetition:
    def test_single_lane_equals_plain_train(self):
        data = generate_bas(BasSpec(2, 12, seed=8))
        backend = SvmcBackend(
            bath_temp=0.5, sweeps=40, schedule=FLAT, quench=NO_QUENCH
        )
        cfg = TrainConfig(
            eta=0.02, epochs=1, batch_size=6, samples_per_update=200, seed=4
        )
        hw = chimera(4, 4, 4)
        plain = train(
            cfg, data, backend, pipeline=NqacPipeline(cfg.pipeline, backend, hw)
        )
        rep = classical_repetition_train(
            cfg, data, backend, m_replicas=1,
            pipeline=NqacPipeline(cfg.pipeline, backend, hw),
        )
        assert dict(plain.model.h) == dict(rep.model.h)
        assert dict(plain.model.j) == dict(rep.model.j)

    def test_identical_lanes_equal_plain_train(self):
        data = generate_bas(BasSpec(2, 12, seed=8))
        backend = SvmcBackend(
            bath_temp=0.5, sweeps=40, schedule=FLAT, quench=NO_QUENCH
        )
        cfg = TrainConfig(
            eta=0.02, epochs=1, batch_size=6, samples_per_update=200, seed=4
        )
        hw = chimera(4, 4, 4)
        plain = train(
            cfg, data, backend, pipeline=NqacPipeline(cfg.pipeline, backend, hw)
        )
        rep = classical_repetition_train(
            cfg, data, backend, m_replicas=3, replica_lanes=(0, 0, 0),
            pipeline=NqacPipeline(cfg.pipeline, backend, hw),
        )
        assert dict(plain.model.h) == dict(rep.model.h)
        assert dict(plain.model.j) == dict(rep.model.j)

    def test_multi_replica_runs_and_traces(self):
        data = generate_bas(BasSpec(2, 8, seed=2))
        backend = SvmcBackend(
            bath_temp=0.5, sweeps=30, schedule=FLAT, quench=NO_QUENCH
        )
        cfg = TrainConfig(
            eta=0.02, epochs=1, batch_size=8, samples_per_update=150, seed=9
        )
        st = classical_repetition_train(
            cfg, data, backend, m_replicas=3,
            pipeline=NqacPipeline(cfg.pipeline, backend, chimera(4, 4, 4)),
        )
        assert st.update == 1
        assert len(st.trace) == 1

    def test_replica_count_validation(self):
        with pytest.raises(DomainError):
            classical_repetition_train(
                TrainConfig(), generate_bas(BasSpec(2, 4, seed=0)), ExactGibbsBackend(), 0
            )


class TestPredict:
    def _steering_model(self, strength=1.0):
        # pixel 0 steers label var 1 toward the pixel value and label var 2
        # away from it; biases zero
        return IsingProblem(
            n=3,
            h={},
            j={(0, 1): -strength, (0, 2): strength},
        )

    def test_predicts_steered_class(self):
        model = self._steering_model()
        pipe = NqacPipeline(PipelineConfig(), ExactGibbsBackend(beta=4.0))
        assert predict_label(model, pipe, [1], n_labels=2, k=100, seed=0) == 1
        assert predict_label(model, pipe, [-1], n_labels=2, k=100, seed=0) == 2

    def test_sharpens_with_beta(self):
        # the steered label frequency approaches 1 as beta grows
        model = self._steering_model(0.6)
        hits = []
        for beta in (0.5, 8.0):
            pipe = NqacPipeline(PipelineConfig(), ExactGibbsBackend(beta=beta))
            preds = [
                predict_label(model, pipe, [1], 2, k=1, seed=s) for s in range(200)
            ]
            hits.append(sum(p == 1 for p in preds) / 200)
        assert hits[1] > hits[0]
        assert hits[1] > 0.95

    def test_k1_single_read(self):
        model = self._steering_model(2.0)
        pipe = NqacPipeline(PipelineConfig(), ExactGibbsBackend(beta=8.0))
        assert predict_label(model, pipe, [1], n_labels=2, k=1, seed=3) == 1

    def test_tie_breaks_to_lowest(self):
        # both labels steered to +1 equally: every read ties, class 1 wins
        model = IsingProblem(n=3, h={}, j={(0, 1): -1.0, (0, 2): -1.0})
        pipe = NqacPipeline(PipelineConfig(), ExactGibbsBackend(beta=8.0))
        assert predict_label(model, pipe, [1], n_labels=2, k=100, seed=1) == 1

    def test_shape_errors(self):
        model = self._steering_model()
        pipe = NqacPipeline(PipelineConfig(), ExactGibbsBackend())
        with pytest.raises(DimensionError):
            predict_label(model, pipe, [1, 1], n_labels=2)
        with pytest.raises(DomainError):
            predict_label(model, pipe, [1], n_labels=2, k=0)
        with pytest.raises(DomainError):
            predict_label(model, pipe, [1], n_labels=3)

    def test_evaluate_accuracy_on_steered_data(self):
        model = self._steering_model()
        pipe = NqacPipeline(PipelineConfig(), ExactGibbsBackend(beta=6.0))
        data = BinaryDataset(
            vectors=np.array(
                [[1, 1, -1], [-1, -1, 1], [1, 1, -1], [-1, -1, 1]], dtype=np.int8
            ),
            labels=np.array([1, 2, 1, 2]),
        )
        acc = evaluate_accuracy(model, pipe, data, n_labels=2, k=50, seed=0)
        assert acc == 1.0

    def test_accuracy_requires_labels(self):
        model = self._steering_model()
        pipe = NqacPipeline(PipelineConfig(), ExactGibbsBackend())
        data = BinaryDataset(vectors=np.ones((2, 3), dtype=np.int8))
        with pytest.raises(DomainError):
            evaluate_accuracy(model, pipe, data, n_labels=2)


class TestPersistence:
    def test_checkpoint_roundtrip(self, tmp_path):
        data = generate_bas(BasSpec(2, 8, seed=1))
        cfg = TrainConfig(eta=0.02, epochs=1, batch_size=8, seed=6)
        backend = ExactGibbsBackend(beta=1.0)
        st = train(cfg, data, backend)
        path = tmp_path / "ckpt.json"
        save_checkpoint(st, cfg, backend, path)
        model, payload = load_checkpoint(path)
        assert dict(model.h) == dict(st.model.h)
        assert dict(model.j) == dict(st.model.j)
        assert payload["epoch"] == st.epoch
        assert payload["update"] == st.update
        assert payload["seed"] == cfg.seed
        assert payload["config_hash"] == config_hash(
            {"train": cfg.describe(), "backend": backend.describe()}
        )

    def test_checkpoint_malformed(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"n": 2, "b": [0.0, 0.1], "w": [[0, 5, 0.3]]}))
        with pytest.raises(ConfigError):
            load_checkpoint(path)
        path.write_text(json.dumps({"b": [0.0]}))  # missing fields
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_trace_roundtrip(self, tmp_path):
        data = generate_bas(BasSpec(2, 8, seed=1))
        cfg = TrainConfig(eta=0.02, epochs=2, batch_size=8, seed=6)
        st = train(cfg, data, ExactGibbsBackend(beta=1.0))
        path = tmp_path / "trace.csv"
        write_trace(st.trace, path)
        back = read_trace(path)
        assert back == st.trace

    def test_trace_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("epoch,update,oops\n1,1,0\n")
        with pytest.raises(ConfigError):
            read_trace(path)

    def test_trace_handles_nan(self, tmp_path):
        rows = [
            {
                "epoch": 1,
                "update": 1,
                "emp_ll": -2.5,
                "beta_eff": math.nan,
                "beta_hat": math.nan,
                "tvd_gibbs": math.nan,
                "d_data": 0.25,
                "chain_break_rate": 0.0,
            }
        ]
        path = tmp_path / "nan.csv"
        write_trace(rows, path)
        back = read_trace(path)
        assert math.isnan(back[0]["beta_eff"])
        assert back[0]["d_data"] == 0.25
