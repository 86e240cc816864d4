import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corrmatch.errors import DomainError, MechanismError, UnsupportedTopologyError
from corrmatch.mechanisms import (
    MechanismRecord,
    anonymize,
    build_pair_channel,
    covariance,
    decorrelation_bound,
    joint_from_marginals,
    measure_noise,
    obfuscate_independent,
    obfuscate_joint,
    obfuscated_marginal,
    protect,
    random_permutation,
)
from corrmatch.population import DensitySpec, build_group_graph, make_population
from corrmatch.seeding import rng_for
from corrmatch.tracegen import Stage, TraceMatrix, generate_traces


def tm(cols, r=2, stage=Stage.TRUE):
    return TraceMatrix(np.array(cols).T, r, stage)


@st.composite
def pair_joints(draw):
    p_i = draw(st.floats(0.01, 0.99))
    p_j = draw(st.floats(0.01, 0.99))
    lo, hi = max(0.0, p_i + p_j - 1), min(p_i, p_j)
    t = draw(st.floats(0.0, 1.0))
    return p_i, p_j, lo + t * (hi - lo)


class TestAnonymize:
    def test_identity(self):
        x = tm([[0, 1, 1], [1, 1, 0]])
        y = anonymize(x, [0, 1])
        assert np.array_equal(y.data, x.data) and y.stage == Stage.ANONYMIZED

    def test_swap(self):
        x = tm([[0, 0, 1], [1, 1, 1]])
        assert np.array_equal(anonymize(x, [1, 0]).data, x.data[:, ::-1])

    def test_three_cycle(self):
        x = tm([[0, 0], [1, 0], [1, 1]])
        y = anonymize(x, [2, 0, 1])
        assert np.array_equal(y.data[:, 2], x.data[:, 0])
        assert np.array_equal(y.data[:, 0], x.data[:, 1])

    def test_not_bijection(self):
        with pytest.raises(MechanismError):
            anonymize(tm([[0], [1]]), [0, 0])

    @given(st.integers(1, 30), st.integers(0, 2**32))
    @settings(max_examples=40, deadline=None)
    def test_inverse_restores(self, n, seed):
        x = TraceMatrix(rng_for(seed, "x").integers(0, 3, size=(5, n)), 3)
        perm = random_permutation(n, seed)
        y = anonymize(x, perm)
        inv = np.argsort(perm)
        back = np.empty_like(y.data)
        back[:, inv] = y.data
        assert np.array_equal(back, x.data)

    def test_twice_rejected(self):
        y = anonymize(tm([[0], [1]]), [1, 0])
        with pytest.raises(MechanismError):
            anonymize(y, [1, 0])


class TestIndependentObfuscation:
    def test_zero_level_is_identity(self):
        x = TraceMatrix(rng_for(1).integers(0, 2, size=(100, 5)), 2)
        z, levels = obfuscate_independent(x, 0.0, seed=3)
        assert np.array_equal(z.data, x.data) and not levels.any()

    def test_marginal_formula_examples(self):
        assert obfuscated_marginal(0.3, 0.1) == pytest.approx(0.34)
        for level in (0.0, 0.2, 0.77, 1.0):
            assert obfuscated_marginal(0.5, level) == 0.5
        assert obfuscated_marginal(0.2, 1.0) == pytest.approx(0.8)

    def test_out_of_range(self):
        x = TraceMatrix(np.zeros((2, 2), dtype=int), 2)
        for a in (-0.1, 1.5):
            with pytest.raises(MechanismError):
                obfuscate_independent(x, a, 0)

    def test_levels_fixed_per_user_and_bounded(self):
        x = TraceMatrix(np.zeros((10, 50), dtype=int), 2)
        _, levels = obfuscate_independent(x, 0.3, seed=2)
        assert levels.shape == (50,) and levels.min() >= 0 and levels.max() <= 0.3

    def test_r_ary_replacement_is_a_different_symbol(self):
        x = TraceMatrix(rng_for(2).integers(0, 4, size=(5000, 3)), 4)
        z, _ = obfuscate_independent(x, 1.0, seed=5)
        hit = z.data != x.data
        assert hit.any()
        diffs = (z.data.astype(int) - x.data.astype(int)) % 4
        assert set(np.unique(diffs[hit])) == {1, 2, 3}

    def test_single_user_flip_rate(self):
        m = 100_000
        x = TraceMatrix(rng_for(4).integers(0, 2, size=(m, 1)), 2)
        from corrmatch.mechanisms import apply_noise_levels

        z = apply_noise_levels(x, [0.2], rng_for(4, "flip"))
        per_user, _ = measure_noise(x, z)
        assert abs(per_user[0] - 0.2) <= 4 * np.sqrt(0.16 / m)


class TestMeasureNoise:
    def test_zero(self):
        x = tm([[0, 1, 1, 0]])
        z = x.advance(x.data, Stage.OBFUSCATED)
        per_user, pooled = measure_noise(x, z)
        assert per_user.tolist() == [0.0] and pooled == 0.0

    def test_quarter(self):
        x = tm([[0, 0, 0, 0]])
        z = x.advance(np.array([[1, 0, 0, 0]]).T, Stage.OBFUSCATED)
        assert measure_noise(x, z)[0][0] == 0.25

    def test_shape_mismatch(self):
        x = tm([[0, 0]])
        with pytest.raises(MechanismError):
            measure_noise(x, TraceMatrix(np.zeros((3, 1), dtype=int), 2, Stage.OBFUSCATED))


class TestPairChannel:
    def test_independent_is_identity(self):
        ch = build_pair_channel(0.3, 0.6, 0.18)
        assert ch.is_identity and ch.flip_rate == 0.0

    def test_fair_pair(self):
        ch = build_pair_channel(0.5, 0.5, 0.3)
        assert ch.flip_rate == pytest.approx(0.1, abs=1e-15)
        assert ch.driven_marginal == pytest.approx(0.6, abs=1e-15)
        J = ch.output_joint(joint_from_marginals(0.5, 0.5, 0.3))
        assert abs(covariance(J)) < 1e-15
        # both conditionals of the driven user equal 0.6
        assert np.allclose(J[:, 1] / J.sum(axis=1), 0.6)

    def test_skewed_pair(self):
        ch = build_pair_channel(0.8, 0.5, 0.45)
        assert ch.driver == 0 and ch.majority == 1
        assert ch.flip_prob[1] == 0.0 and ch.flip_prob[0] > 0 and ch.flip_from[0] == 0
        assert ch.driven_marginal == pytest.approx(0.5625, abs=1e-15)
        assert ch.flip_rate == pytest.approx(0.0625, abs=1e-15)

    def test_driver_tie_prefers_lower_index(self):
        assert build_pair_channel(0.3, 0.7, 0.25).driver == 0

    def test_invalid_joint(self):
        with pytest.raises(DomainError):
            build_pair_channel(0.5, 0.5, 0.6)

    @given(pair_joints())
    @settings(max_examples=300, deadline=None)
    def test_exact_decorrelation_at_bound(self, pj):
        p_i, p_j, p11 = pj
        J = joint_from_marginals(p_i, p_j, p11)
        ch = build_pair_channel(p_i, p_j, p11)
        out = ch.output_joint(J)
        assert abs(covariance(out)) < 1e-12
        assert ch.flip_rate <= decorrelation_bound(J) + 1e-12
        assert ch.flip_rate == pytest.approx(decorrelation_bound(J), abs=1e-12)
        assert ch.driver_flip_rate == 0.0
        assert all(0.0 <= q <= 1.0 for q in ch.flip_prob)

    def test_empirical_decorrelation_of_identical_pair(self):
        m = 200_000
        bits = rng_for(3).integers(0, 2, size=m).astype(np.uint8)
        ch = build_pair_channel(0.5, 0.5, 0.5)
        a, b = ch.apply(bits, bits.copy(), rng_for(3, "ch"))
        assert np.array_equal(a, bits)
        cov = np.mean(a * b) - a.mean() * b.mean()
        assert abs(cov) < 4 * 0.5 / np.sqrt(m)
        # minimal flip rate |Cov| / max = 0.25 / 0.5
        assert np.mean(a != b) == pytest.approx(0.5, abs=0.01)


class TestJointObfuscation:
    def test_edgeless_matches_independent(self):
        pop = make_population(6, DensitySpec(), [1] * 6, seed=1)
        x = generate_traces(pop, 300, 2)
        z1, l1 = obfuscate_joint(x, pop.graph, {}, 0.2, seed=5)
        z2, l2 = obfuscate_independent(x, 0.2, seed=5)
        assert z1 == z2 and np.array_equal(l1, l2)

    def test_independent_pairs_zero_noise_identity(self):
        pop = make_population(4, DensitySpec(), [2, 2], strength=0.0, seed=1)
        x = generate_traces(pop, 300, 2)
        joints = {e: pop.pair_joint(*e) for e in pop.graph.edges}
        z, _ = obfuscate_joint(x, pop.graph, joints, 0.0, seed=5)
        assert np.array_equal(z.data, x.data)

    def test_group_of_three_rejected(self):
        pop = make_population(3, DensitySpec(), [3], strength=0.5, seed=1)
        x = generate_traces(pop, 10, 2)
        with pytest.raises(UnsupportedTopologyError):
            obfuscate_joint(x, pop.graph, {}, 0.0, 0)

    def test_decorrelates_coupled_pairs(self):
        m = 100_000
        pop = make_population(4, DensitySpec(), [2, 2], strength=1.0, seed=2)
        x = generate_traces(pop, m, 3)
        joints = {e: pop.pair_joint(*e) for e in pop.graph.edges}
        z, _ = obfuscate_joint(x, pop.graph, joints, 0.0, seed=4)
        for i, j in pop.graph.edges:
            cov = np.cov(z.data[:, i], z.data[:, j], bias=True)[0, 1]
            assert abs(cov) < 4 * 0.25 / np.sqrt(m) * 2


class TestRecord:
    def test_json_shape(self):
        rec = MechanismRecord((1, 0), (0.1, 0.0), 0.2, "independent")
        assert json.loads(rec.to_json()) == {"pi": [1, 0], "r": [0.1, 0.0], "a_n": 0.2, "scheme": "independent"}
        assert MechanismRecord.from_dict(json.loads(rec.to_json())) == rec

    def test_noise_above_level_rejected(self):
        with pytest.raises(MechanismError):
            MechanismRecord((0,), (0.5,), 0.2)

    def test_protect_none(self):
        x = TraceMatrix(rng_for(1).integers(0, 2, size=(20, 4)), 2)
        prot = protect(x, "none", 0.3, seed=1)
        assert prot.obfuscated is None and prot.record.a_n == 0.0
        assert prot.observed.stage == Stage.ANONYMIZED
