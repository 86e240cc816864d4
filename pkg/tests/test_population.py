import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from corrmatch.errors import ConfigurationError, CouplingInfeasibleError
from corrmatch.population import (
    AssociationGraph,
    DensitySpec,
    Population,
    build_group_graph,
    connected_components,
    make_coupling,
    make_population,
    noise_level,
    observation_count,
    pair_covariance,
    residual_distribution,
    sample_profiles,
    stationary_distribution,
)


class TestDensitySpec:
    def test_epsilon_range(self):
        for eps in (0.0, 0.5, -0.1):
            with pytest.raises(ConfigurationError):
                DensitySpec("two-state", 2, eps)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            DensitySpec("gaussian")

    def test_markov_full_structure_dim(self):
        d = DensitySpec("markov", 2)
        assert len(d.structure) == 4
        assert d.dim == 2

    def test_markov_free_index_drops_last_out_edge(self):
        d = DensitySpec("markov", 3, 0.05, ((0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)))
        assert d.free_index() == [(0, 1), (1, 0), (2, 0), (2, 1)]
        assert d.dim == 7 - 3

    def test_reducible_structure_rejected(self):
        with pytest.raises(ConfigurationError):
            DensitySpec("markov", 2, 0.05, ((0, 0), (1, 1)))

    def test_periodic_structure_rejected(self):
        with pytest.raises(ConfigurationError):
            DensitySpec("markov", 2, 0.05, ((0, 1), (1, 0)))

    def test_state_without_exit_rejected(self):
        with pytest.raises(ConfigurationError):
            DensitySpec("markov", 2, 0.05, ((0, 0), (0, 1)))

    def test_roundtrip(self):
        d = DensitySpec("markov", 3, 0.1)
        assert DensitySpec.from_dict(json.loads(json.dumps(d.to_dict()))) == d


class TestSampleProfiles:
    def test_narrow_support(self):
        (prof,) = sample_profiles(1, DensitySpec("two-state", 2, 0.49), seed=1)
        assert 0.49 < prof.p < 0.51

    def test_r_state_inside_open_simplex(self):
        profs = sample_profiles(3, DensitySpec("r-state", 3), seed=2)
        for prof in profs:
            p1, p2 = prof.params
            assert p1 > 0 and p2 > 0 and p1 + p2 < 1

    def test_markov_rows_stochastic(self):
        d = DensitySpec("markov", 3)
        for prof in sample_profiles(20, d, seed=3):
            P = np.array(prof.matrix)
            assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
            assert len(prof.params) == d.dim
            assert prof.params == tuple(P[i, j] for i, j in d.free_index())

    def test_reproducible(self):
        d = DensitySpec("r-state", 4)
        assert sample_profiles(10, d, 5) == sample_profiles(10, d, 5)
        assert sample_profiles(10, d, 5) != sample_profiles(10, d, 6)

    def test_uniform_on_truncated_interval(self):
        eps = 0.05
        ps = np.array([p.p for p in sample_profiles(100_000, DensitySpec("two-state", 2, eps), 11)])
        ks = stats.kstest(ps, stats.uniform(loc=eps, scale=1 - 2 * eps).cdf).statistic
        assert ks < 0.01

    def test_n_zero_rejected(self):
        with pytest.raises(ConfigurationError):
            sample_profiles(0, DensitySpec(), 0)


class TestGraph:
    def test_singletons(self):
        g = build_group_graph([1, 1, 1])
        assert g.edges == frozenset()
        assert sorted(g.groups) == [(0,), (1,), (2,)]

    def test_complete_pair(self):
        g = build_group_graph([2], "complete")
        assert g.edges == frozenset({(0, 1)})

    def test_chain_of_three(self):
        g = build_group_graph([3], "chain", seed=4)
        assert len(g.edges) == 2
        assert connected_components(3, g.edges) == [(0, 1, 2)]

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            build_group_graph([])

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=12), st.sampled_from(["chain", "complete"]),
           st.integers(0, 1000))
    @settings(max_examples=60, deadline=None)
    def test_components_match_partition(self, sizes, topology, seed):
        g = build_group_graph(sizes, topology, seed)
        assert sorted(connected_components(g.n, g.edges)) == sorted(g.groups)
        assert sorted(g.sizes) == sorted(sizes)

    def test_cross_group_edge_rejected(self):
        with pytest.raises(ConfigurationError):
            AssociationGraph(3, frozenset({(0, 2)}), ((0, 1), (2,)))


class TestCoupling:
    def test_pair_covariance_examples(self):
        assert pair_covariance(0.0, 0.7, 0.4) == 0.0
        assert pair_covariance(1.0, 1.0, 0.5) == 0.25
        assert pair_covariance(0.5, 0.8, 0.25) == pytest.approx(0.075, abs=1e-15)

    @pytest.mark.parametrize("lam_i,lam_j,w", [(1.0, 1.0, 0.5), (0.6, 0.6, 0.5), (0.5, 0.8, 0.25)])
    def test_covariance_matches_latent_enumeration(self, lam_i, lam_j, w):
        # enumerate latent bit, copy decisions and residual draws at p = w
        p = w
        qi = residual_distribution([1 - p, p], [1 - w, w], lam_i)[1]
        qj = residual_distribution([1 - p, p], [1 - w, w], lam_j)[1]
        e11 = 0.0
        for wbit, pw in ((0, 1 - w), (1, w)):
            for ci, pci in ((1, lam_i), (0, 1 - lam_i)):
                for cj, pcj in ((1, lam_j), (0, 1 - lam_j)):
                    xi = wbit if ci else qi
                    xj = wbit if cj else qj
                    e11 += pw * pci * pcj * xi * xj
        assert e11 - p * p == pytest.approx(pair_covariance(lam_i, lam_j, w), abs=1e-15)

    def test_residual_infeasible_names_user(self):
        with pytest.raises(CouplingInfeasibleError) as info:
            residual_distribution([0.9, 0.1], [0.1, 0.9], 0.5, user=7)
        assert info.value.user == 7

    def test_full_strength_reaches_frechet_bound(self):
        pop = make_population(2, DensitySpec(), [2], strength=1.0, seed=9)
        pi, pj = pop.profiles[0].p, pop.profiles[1].p
        i, j = next(iter(pop.graph.edges))
        assert pop.edge_covariance(i, j) == pytest.approx(min(pi, pj) * (1 - max(pi, pj)), abs=1e-12)

    def test_isolated_users_have_zero_lambda(self):
        pop = make_population(5, DensitySpec(), [1] * 5, strength=1.0, seed=1)
        assert all(pop.lam(u) == 0.0 for u in range(5))

    def test_min_edge_cov_resampling(self):
        pop = make_population(40, DensitySpec(), [2] * 20, strength=1.0, min_edge_cov=0.09, seed=3)
        assert min(pop.edge_covariance(i, j) for i, j in pop.graph.edges) >= 0.09

    def test_min_edge_cov_unreachable(self):
        with pytest.raises(CouplingInfeasibleError):
            make_population(4, DensitySpec(), [2, 2], strength=1.0, min_edge_cov=0.3, seed=3)

    def test_r_state_latent_is_first_member(self):
        d = DensitySpec("r-state", 3)
        profs = sample_profiles(3, d, 2)
        g = build_group_graph([3])
        c = make_coupling(profs, g, d, strength=0.5)
        assert np.allclose(c.w[0], profs[g.groups[0][0]].distribution())


class TestPopulation:
    @pytest.mark.parametrize("model,r", [("two-state", 2), ("r-state", 3), ("markov", 2)])
    def test_json_roundtrip(self, model, r):
        pop = make_population(6, DensitySpec(model, r), [2, 2, 2], strength=0.5, mu=0.3, seed=4)
        doc = json.loads(pop.to_json())
        assert {"n", "model", "r", "profiles", "groups", "edges", "coupling", "schema_version"} <= set(doc)
        assert set(doc["coupling"]) == {"w", "lambda", "mu"}
        back = Population.from_json(pop.to_json())
        assert back.to_json() == pop.to_json()

    def test_group_sizes_must_sum(self):
        with pytest.raises(ConfigurationError):
            make_population(5, DensitySpec(), [2, 2])


def test_stationary_symmetric_chain():
    pi = stationary_distribution(np.array([[0.7, 0.3], [0.3, 0.7]]))
    assert np.allclose(pi, [0.5, 0.5], atol=1e-12)


def test_stationary_is_fixed_point():
    P = np.array([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.25, 0.25, 0.5]])
    pi = stationary_distribution(P)
    assert np.max(np.abs(pi @ P - pi)) < 1e-12


def test_regime_helpers():
    assert noise_level(100, 2, c=0.5, beta=0.1) == pytest.approx(0.5 * 100 ** -0.6)
    assert observation_count(100, 2, c=1.0, alpha=0.0) == 100
