import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corrmatch.errors import ConfigurationError
from corrmatch.population import (
    CouplingSpec,
    DensitySpec,
    Population,
    UserProfile,
    build_group_graph,
    make_population,
    stationary_distribution,
)
from corrmatch.tracegen import (
    Stage,
    TraceMatrix,
    generate_iid_traces,
    generate_markov_traces,
    generate_traces,
)
from corrmatch.adversary import pairwise_covariance, pairwise_mutual_information, transition_counts


def two_state_pair(p_i, p_j, lam_i, lam_j, w):
    graph = build_group_graph([2], "complete")
    profiles = (UserProfile(0, (p_i,)), UserProfile(1, (p_j,)))
    return Population(DensitySpec(), profiles, graph, CouplingSpec((w,), (lam_i, lam_j)))


class TestTraceMatrix:
    def test_symbol_range_checked(self):
        with pytest.raises(ConfigurationError):
            TraceMatrix(np.array([[0, 2]]), r=2)

    def test_read_only(self):
        t = TraceMatrix(np.zeros((2, 2), dtype=int), 2)
        with pytest.raises(ValueError):
            t.data[0, 0] = 1

    def test_stage_transitions(self):
        t = TraceMatrix(np.zeros((2, 2), dtype=int), 2)
        z = t.advance(t.data, Stage.OBFUSCATED)
        y = z.advance(z.data, Stage.ANONYMIZED)
        assert t.advance(t.data, Stage.ANONYMIZED).stage == Stage.ANONYMIZED
        with pytest.raises(ConfigurationError):
            y.advance(y.data, Stage.OBFUSCATED)
        with pytest.raises(ConfigurationError):
            z.advance(z.data, Stage.TRUE)

    def test_csv_header_and_roundtrip(self):
        t = TraceMatrix(np.array([[0, 1, 2], [2, 1, 0]]), 3)
        text = t.to_csv()
        assert text.splitlines()[0] == "k,u0,u1,u2"
        assert text.splitlines()[1] == "0,0,1,2"
        assert TraceMatrix.from_csv(text, 3) == t

    @given(st.integers(0, 6), st.integers(1, 5), st.integers(2, 7), st.sampled_from(list(Stage)),
           st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_binary_roundtrip(self, m, n, r, stage, seed):
        data = np.random.default_rng(seed).integers(0, r, size=(m, n))
        t = TraceMatrix(data, r, stage)
        blob = t.to_bytes()
        assert blob[:4] == b"CMTR"
        assert len(blob) == 14 + m * n
        assert TraceMatrix.from_bytes(blob) == t

    def test_binary_bad_magic(self):
        blob = bytearray(TraceMatrix(np.zeros((1, 1), dtype=int), 2).to_bytes())
        blob[0:4] = b"XXXX"
        with pytest.raises(ConfigurationError):
            TraceMatrix.from_bytes(bytes(blob))


class TestIid:
    def test_identical_when_lambda_one(self):
        x = generate_iid_traces(two_state_pair(0.5, 0.5, 1.0, 1.0, 0.5), 2000, seed=1)
        assert np.array_equal(x.data[:, 0], x.data[:, 1])

    def test_covariance_at_lambda_point_six(self):
        x = generate_iid_traces(two_state_pair(0.5, 0.5, 0.6, 0.6, 0.5), 200_000, seed=2)
        cov = pairwise_covariance(x.data)[0, 1]
        assert cov == pytest.approx(0.09, abs=4 * 0.25 / np.sqrt(200_000) * 2)

    def test_uncoupled_near_zero_covariance(self):
        x = generate_iid_traces(two_state_pair(0.3, 0.6, 0.0, 0.0, 0.45), 100_000, seed=3)
        assert abs(pairwise_covariance(x.data)[0, 1]) < 4 * 0.5 / np.sqrt(100_000)

    @pytest.mark.parametrize("model,r", [("two-state", 2), ("r-state", 3), ("r-state", 4)])
    def test_marginal_fidelity(self, model, r):
        m = 100_000
        pop = make_population(6, DensitySpec(model, r), [3, 2, 1], strength=0.8, seed=5)
        x = generate_iid_traces(pop, m, seed=6)
        marg = pop.marginals()
        for u in range(pop.n):
            freq = np.bincount(x.data[:, u], minlength=r) / m
            sd = np.sqrt(marg[u] * (1 - marg[u]) / m)
            assert np.all(np.abs(freq - marg[u]) <= 4 * sd + 1e-12)

    def test_graph_fidelity_two_state(self):
        m = 10_000
        pop = make_population(12, DensitySpec(), [2, 3, 1, 2, 4], strength=1.0, seed=8)
        x = generate_iid_traces(pop, m, seed=9)
        cov = pairwise_covariance(x.data)
        threshold = 3 * 0.25 / np.sqrt(m)
        group = pop.graph.group_index
        for i in range(pop.n):
            for j in range(i + 1, pop.n):
                if (i, j) in pop.graph.edges:
                    assert cov[i, j] > threshold
                elif group[i] != group[j]:
                    assert abs(cov[i, j]) < threshold

    def test_graph_fidelity_r_state(self):
        m, r = 10_000, 3
        pop = make_population(4, DensitySpec("r-state", r), [2, 2], strength=1.0, seed=2)
        x = generate_iid_traces(pop, m, seed=3)
        mi = pairwise_mutual_information(x.data, r)
        # plug-in MI under independence is about (r-1)^2 / (2 m ln 2) bits
        null = (r - 1) ** 2 / (2 * m * np.log(2))
        group = pop.graph.group_index
        for i in range(4):
            for j in range(i + 1, 4):
                if group[i] == group[j]:
                    assert mi[i, j] > 10 * null
                else:
                    assert mi[i, j] < 10 * null

    def test_deterministic(self):
        pop = make_population(10, DensitySpec(), [2] * 5, strength=0.7, seed=1)
        assert generate_iid_traces(pop, 500, 3) == generate_iid_traces(pop, 500, 3)
        assert generate_iid_traces(pop, 500, 3) != generate_iid_traces(pop, 500, 4)

    def test_rejects_markov(self):
        pop = make_population(2, DensitySpec("markov", 2), [1, 1], seed=1)
        with pytest.raises(ConfigurationError):
            generate_iid_traces(pop, 10, 0)


class TestMarkov:
    def symmetric_pair(self, mu):
        d = DensitySpec("markov", 2)
        P = ((0.7, 0.3), (0.3, 0.7))
        profiles = tuple(UserProfile(u, (0.3, 0.3), P) for u in range(2))
        return Population(d, profiles, build_group_graph([2], "complete"), CouplingSpec((None,), (0.0, 0.0), mu))

    def test_identical_trajectories_at_mu_one(self):
        x = generate_markov_traces(self.symmetric_pair(1.0), 1000, seed=4)
        assert np.array_equal(x.data[:, 0], x.data[:, 1])

    def test_independent_at_mu_zero(self):
        x = generate_markov_traces(self.symmetric_pair(0.0), 50_000, seed=4)
        assert abs(pairwise_covariance(x.data)[0, 1]) < 0.02

    def test_shared_variates_create_dependence(self):
        x = generate_markov_traces(self.symmetric_pair(0.5), 20_000, seed=4)
        mi = pairwise_mutual_information(x.data, 2)[0, 1]
        assert mi > 0.01

    def test_transition_fidelity(self):
        m = 100_000
        pop = make_population(3, DensitySpec("markov", 3), [3], mu=0.4, seed=7)
        x = generate_markov_traces(pop, m, seed=8)
        counts = transition_counts(x.data, 3)
        for u, prof in enumerate(pop.profiles):
            emp = counts[u] / counts[u].sum(axis=1, keepdims=True)
            assert np.max(np.abs(emp - np.array(prof.matrix))) < 0.01

    def test_stationary_start_marginal(self):
        m = 100_000
        pop = make_population(2, DensitySpec("markov", 2), [1, 1], seed=3)
        x = generate_markov_traces(pop, m, seed=5)
        for u, prof in enumerate(pop.profiles):
            pi = stationary_distribution(np.array(prof.matrix))
            # generous bound: autocorrelation inflates the variance
            assert abs(x.data[:, u].mean() - pi[1]) < 0.02

    def test_burn_in_shape_and_determinism(self):
        pop = make_population(4, DensitySpec("markov", 2), [2, 2], mu=0.3, seed=1)
        a = generate_markov_traces(pop, 100, burn_in=50, seed=2)
        assert a.m == 100
        assert a == generate_markov_traces(pop, 100, burn_in=50, seed=2)

    def test_dispatch(self):
        pop = make_population(2, DensitySpec("markov", 2), [2], mu=0.3, seed=1)
        assert generate_traces(pop, 10, 3) == generate_markov_traces(pop, 10, 0, 3)
