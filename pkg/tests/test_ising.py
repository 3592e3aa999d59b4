import math

import numpy as np
import pytest

from nqacbm import ising
from nqacbm.errors import CapacityError, DimensionError, DomainError
from nqacbm.ising import (
    IsingProblem,
    SampleSet,
    clamp,
    enumerate_gibbs,
    exact_log_likelihood,
    exact_sample,
    group_energy_levels,
    operator_norm,
    problem_from_text,
    problem_to_text,
    scale,
    state_index,
)
from nqacbm.rng import spawn


def random_problem(n, seed, h_scale=1.0, j_scale=1.0, density=1.0):
    gen = spawn(seed, "test_problem")
    h = {i: float(gen.uniform(-h_scale, h_scale)) for i in range(n)}
    j = {}
    for i in range(n):
        for k in range(i + 1, n):
            if gen.random() < density:
                j[(i, k)] = float(gen.uniform(-j_scale, j_scale))
    return IsingProblem(n=n, h=h, j=j)


def oracle_energy(problem, x):
    """Independent double-loop re-implementation of the energy."""
    e = 0.0
    for i in range(problem.n):
        e += problem.h.get(i, 0.0) * x[i]
    for i in range(problem.n):
        for k in range(i + 1, problem.n):
            e += problem.j.get((i, k), 0.0) * x[i] * x[k]
    return e


# -- energy -------------------------------------------------------------------


def test_energy_direct_arithmetic():
    p = IsingProblem(n=2, h={0: 1.0, 1: -1.0}, j={(0, 1): 0.5})
    assert ising.energy(p, [1, 1]) == pytest.approx(0.5)


def test_energy_zero_problem():
    p = IsingProblem(n=4)
    assert ising.energy(p, [1, -1, 1, -1]) == 0.0


def test_energy_matches_double_loop_oracle():
    p = random_problem(16, seed=11)
    gen = spawn(99, "states")
    states = gen.choice([-1, 1], size=(1000, 16)).astype(np.int8)
    fast = p.energies(states)
    for row, e in zip(states, fast):
        assert e == pytest.approx(oracle_energy(p, row), abs=1e-10)


def test_energy_dimension_error():
    p = IsingProblem(n=3)
    with pytest.raises(DimensionError):
        ising.energy(p, [1, 1])


# -- enumerate_gibbs ----------------------------------------------------------


def test_gibbs_infinite_temperature_uniform():
    p = random_problem(6, seed=3)
    t = enumerate_gibbs(p, 0.0)
    assert np.allclose(t.probabilities, 1 / 64)
    assert t.probabilities.sum() == pytest.approx(1.0, abs=1e-12)


def test_gibbs_two_state_closed_form():
    # single spin, h=1, beta=1: P(-1) = e / (e + 1/e)
    p = IsingProblem(n=1, h={0: 1.0})
    t = enumerate_gibbs(p, 1.0)
    expected = math.e / (math.e + 1 / math.e)
    assert t.probability([-1]) == pytest.approx(expected, abs=1e-12)
    assert t.probability([-1]) == pytest.approx(0.88080, abs=5e-6)


def test_gibbs_normalization_and_levels():
    p = random_problem(8, seed=4)
    t = enumerate_gibbs(p, 1.3)
    assert t.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert t.level_probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert t.level_counts.sum() == 256
    assert np.all(np.diff(t.level_energies) > 0)


def test_gibbs_capacity_error():
    with pytest.raises(CapacityError):
        enumerate_gibbs(IsingProblem(n=25), 1.0)


def test_gibbs_scaling_identity():
    # Gibbs(scale(P, a), beta) == Gibbs(P, a*beta) state by state
    p = random_problem(7, seed=5)
    a, beta = 0.37, 1.7
    t1 = enumerate_gibbs(scale(p, a), beta)
    t2 = enumerate_gibbs(p, a * beta)
    assert np.allclose(t1.probabilities, t2.probabilities, atol=1e-12)


def test_gibbs_spin_flip_symmetry_without_fields():
    p = IsingProblem(n=5, j={(i, k): 0.3 * (i - k) for i in range(5) for k in range(i + 1, 5)})
    t = enumerate_gibbs(p, 0.9)
    flipped = np.array([t.probabilities[state_index(-s)] for s in _all_states(5)])
    assert np.allclose(t.probabilities, flipped, atol=1e-14)


def _all_states(n):
    ks = np.arange(1 << n)
    return (2 * ((ks[:, None] >> np.arange(n)) & 1) - 1).astype(np.int8)


def test_large_beta_is_finite_and_normalized():
    p = random_problem(6, seed=6)
    t = enumerate_gibbs(p, 100.0)
    assert np.isfinite(t.probabilities).all()
    assert t.probabilities.sum() == pytest.approx(1.0, abs=1e-12)


# -- exact_sample -------------------------------------------------------------


def test_exact_sample_deterministic():
    p = random_problem(5, seed=7)
    s1 = exact_sample(p, 1.0, 500, rng_seed=21)
    s2 = exact_sample(p, 1.0, 500, rng_seed=21)
    assert np.array_equal(s1.states, s2.states)
    assert np.array_equal(s1.counts, s2.counts)


def test_exact_sample_uniform_within_multinomial_bounds():
    p = IsingProblem(n=4)
    n = 100_000
    s = exact_sample(p, 0.0, n, rng_seed=8)
    expect = n / 16
    sigma = math.sqrt(n * (1 / 16) * (15 / 16))
    assert len(s.counts) == 16
    assert np.all(np.abs(s.counts - expect) < 4 * sigma)


def test_exact_sample_tvd_concentration():
    p = random_problem(8, seed=9)
    n = 100_000
    s = exact_sample(p, 1.0, n, rng_seed=10)
    t = enumerate_gibbs(p, 1.0)
    emp = np.zeros(256)
    emp[ising.states_to_indices(s.states)] = s.counts / n
    tvd = 0.5 * np.abs(emp - t.probabilities).sum()
    assert tvd <= 0.02


# -- operator_norm ------------------------------------------------------------


def test_operator_norm_trivial():
    assert operator_norm(IsingProblem(n=3)) == 0.0
    assert operator_norm(IsingProblem(n=1, h={0: 1.0})) == 1.0


def test_operator_norm_chain_brute_force():
    # 16-spin chain, J=-1, h=0: max |E| over all states is 15 (all aligned)
    p = IsingProblem(n=16, j={(i, i + 1): -1.0 for i in range(15)})
    assert operator_norm(p) == pytest.approx(15.0)


def test_operator_norm_matches_direct_enumeration():
    p = random_problem(10, seed=12)
    direct = np.abs(p.energies(_all_states(10))).max()
    assert operator_norm(p) == pytest.approx(float(direct), abs=1e-12)


# -- scale --------------------------------------------------------------------


def test_scale_identity_and_values():
    p = random_problem(4, seed=13)
    assert scale(p, 1.0) == p
    q = scale(IsingProblem(n=2, h={0: 1.0, 1: 1.0}), 0.03)
    assert q.h[0] == pytest.approx(0.03)


def test_scale_composition():
    p = random_problem(4, seed=14)
    q1 = scale(scale(p, 0.7), 0.3)
    q2 = scale(p, 0.21)
    for i in q1.h:
        assert q1.h[i] == pytest.approx(q2.h[i], rel=1e-12)
    for k in q1.j:
        assert q1.j[k] == pytest.approx(q2.j[k], rel=1e-12)


def test_scale_domain_error():
    with pytest.raises(DomainError):
        scale(IsingProblem(n=1), 0.0)
    with pytest.raises(DomainError):
        scale(IsingProblem(n=1), -0.5)


def test_energy_linearity_under_scale_exhaustive():
    p = random_problem(6, seed=15)
    states = _all_states(6)
    for alpha in (0.2, 0.5, 2.0):
        assert np.allclose(
            scale(p, alpha).energies(states), alpha * p.energies(states), atol=1e-12
        )


# -- exact_log_likelihood -----------------------------------------------------


def test_ll_uniform_model():
    p = IsingProblem(n=16)
    data = spawn(16, "d").choice([-1, 1], size=(10, 16)).astype(np.int8)
    assert exact_log_likelihood(p, 0.0, data) == pytest.approx(-16 * math.log(2))


def test_ll_delta_limit():
    # unique ground state = the single dataset vector; LL -> 0- as beta grows
    p = IsingProblem(n=3, h={0: -1.0, 1: -1.0, 2: -1.0})
    data = np.ones((1, 3), dtype=np.int8)
    ll = exact_log_likelihood(p, 50.0, data)
    assert -1e-10 < ll <= 0.0


def test_ll_maximized_at_generating_beta():
    # cross-entropy of Gibbs(beta0) against Gibbs(beta') peaks at beta'=beta0
    p = random_problem(6, seed=17)
    beta0 = 1.1
    ref = enumerate_gibbs(p, beta0)
    states = _all_states(6)

    def cross_ll(bprime):
        t = enumerate_gibbs(p, bprime)
        return float(ref.probabilities @ np.log(t.probabilities))

    grid = [0.5, 0.8, 1.0, beta0, 1.3, 1.8, 2.5]
    vals = [cross_ll(b) for b in grid]
    assert grid[int(np.argmax(vals))] == beta0


# -- clamp --------------------------------------------------------------------


def test_clamp_nothing():
    p = random_problem(4, seed=18)
    r = clamp(p, {})
    assert r.problem == p
    assert r.offset == 0.0
    assert r.kept == (0, 1, 2, 3)


def test_clamp_two_spin_substitution():
    p = IsingProblem(n=2, h={0: 0.1}, j={(0, 1): 0.7})
    r = clamp(p, {1: +1})
    assert r.problem.n == 1
    assert r.problem.h[0] == pytest.approx(0.8)
    assert r.kept == (0,)


def test_clamp_matches_conditional_gibbs_oracle():
    # Gibbs of the reduced problem == conditional Gibbs of the original
    for seed in (19, 20, 21):
        p = random_problem(6, seed=seed)
        assignment = {1: +1, 4: -1}
        r = clamp(p, assignment)
        beta = 1.2
        t_full = enumerate_gibbs(p, beta)
        t_red = enumerate_gibbs(r.problem, beta)
        states = _all_states(6)
        keepers = np.array(
            [all(s[i] == v for i, v in assignment.items()) for s in states]
        )
        cond = t_full.probabilities[keepers]
        cond = cond / cond.sum()
        # align orderings: reduced state index built from kept columns
        kept_cols = list(r.kept)
        red_idx = ising.states_to_indices(states[keepers][:, kept_cols])
        assert np.allclose(cond, t_red.probabilities[red_idx], atol=1e-12)


def test_clamp_energy_decomposition():
    # E_full(x) = E_reduced(x_kept) + offset when clamped vars match
    p = random_problem(5, seed=22)
    assignment = {0: -1, 3: 1}
    r = clamp(p, assignment)
    gen = spawn(23, "clampfill")
    for _ in range(20):
        free = gen.choice([-1, 1], size=3)
        full = np.zeros(5, dtype=np.int8)
        full[[1, 2, 4]] = free
        full[0], full[3] = -1, 1
        assert ising.energy(p, full) == pytest.approx(
            ising.energy(r.problem, free) + r.offset, abs=1e-12
        )


def test_clamp_invalid_var():
    p = IsingProblem(n=2)
    with pytest.raises(DomainError):
        clamp(p, {5: 1})
    with pytest.raises(DomainError):
        clamp(p, {0: 2})


# -- SampleSet ----------------------------------------------------------------


def test_sampleset_merges_duplicates():
    rows = np.array([[1, -1], [1, -1], [-1, 1]], dtype=np.int8)
    s = SampleSet.from_rows(rows, level="physical")
    assert s.n_total == 3
    assert s.count_of([1, -1]) == 2
    assert s.level == "physical"


def test_sampleset_from_counts_merges():
    states = np.array([[1, 1], [1, 1], [-1, -1]], dtype=np.int8)
    s = SampleSet.from_counts(states, [2, 3, 4])
    assert s.n_total == 9
    assert s.count_of([1, 1]) == 5


def test_sampleset_moments_match_manual():
    rows = np.array([[1, 1, -1], [1, -1, -1], [1, 1, 1], [1, 1, -1]], dtype=np.int8)
    s = SampleSet.from_rows(rows)
    pairs = np.array([(0, 1), (0, 2), (1, 2)])
    m1, m2 = s.moments(pairs)
    assert np.allclose(m1, rows.mean(axis=0))
    man2 = [(rows[:, a] * rows[:, b]).mean() for a, b in pairs]
    assert np.allclose(m2, man2)


def test_sampleset_rejects_bad_values():
    with pytest.raises(DomainError):
        SampleSet.from_rows(np.array([[1, 0]], dtype=np.int8))
    with pytest.raises(DomainError):
        SampleSet.from_rows(np.array([[1, 1]]), level="nonsense")


# -- problem construction and text format -------------------------------------


def test_problem_canonicalizes_pairs():
    p = IsingProblem(n=3, j={(2, 0): 0.5})
    assert (0, 2) in p.j
    with pytest.raises(DomainError):
        IsingProblem(n=3, j={(0, 2): 0.5, (2, 0): 0.5})
    with pytest.raises(DomainError):
        IsingProblem(n=3, j={(1, 1): 0.4})


def test_hardware_limit_validation():
    IsingProblem(n=1, h={0: 2.0}, hardware_limits=True)
    with pytest.raises(DomainError):
        IsingProblem(n=1, h={0: 2.5}, hardware_limits=True)
    with pytest.raises(DomainError):
        IsingProblem(n=2, j={(0, 1): 1.2}, hardware_limits=True)


def test_text_round_trip_bit_exact():
    p = IsingProblem(
        n=4,
        h={0: 0.1, 2: -1 / 3, 3: 1e-17},
        j={(0, 1): math.pi / 7, (1, 3): -0.30000000000000004},
    )
    text = problem_to_text(p)
    q = problem_from_text(text)
    assert q == p
    assert problem_to_text(q) == text


def test_text_format_shape():
    p = IsingProblem(n=2, h={0: 1.5}, j={(0, 1): -0.25})
    lines = problem_to_text(p).strip().splitlines()
    assert lines[0] == "2"
    assert lines[1].split()[:2] == ["0", "0"]
    assert lines[2].split()[:2] == ["0", "1"]


def test_group_energy_levels_tolerance():
    e = np.array([1.0, 1.0 + 4e-10, 2.0, 2.0 + 2e-9])
    w = np.ones(4)
    le, lw = group_energy_levels(e, w)
    assert len(le) == 3  # 2.0 and 2.0+2e-9 split: gap above tolerance
    assert lw[0] == 2.0
