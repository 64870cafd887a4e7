"""Exact MI oracles, InfoNCE arithmetic, and the optimal-view enumeration."""

import math

import numpy as np
import pytest
import torch

from viewmi.mi_core import (
    CriticConfig,
    JointTable,
    MIEstimate,
    critic_score,
    estimate_table_mi_nce,
    exact_conditional_mi,
    exact_entropy,
    exact_mi,
    i_nce_estimate,
    independent_bits_world,
    info_nce_loss,
    noisy_channel_table,
    random_joint_table,
    score_matrix,
    verify_mi_identities,
    verify_optimal_views,
)

LN2 = math.log(2.0)


class TestJointTable:
    def test_validation(self):
        with pytest.raises(ValueError):
            JointTable(np.array([[0.5, 0.6], [0.0, 0.0]]))  # sums to 1.1
        with pytest.raises(ValueError):
            JointTable(np.array([[1.5, -0.5], [0.0, 0.0]]))  # negative cell
        with pytest.raises(ValueError):
            JointTable(np.full((2,) * 5, 1 / 32.0))  # too many axes

    def test_probs_frozen(self):
        t = JointTable(np.array([[0.5, 0.5]]))
        with pytest.raises(ValueError):
            t.probs[0, 0] = 0.0

    def test_json_round_trip(self):
        rng = np.random.default_rng(0)
        t = random_joint_table(rng, (3, 4, 2))
        t2 = JointTable.from_json(t.to_json())
        np.testing.assert_allclose(t2.probs, t.probs, rtol=0, atol=1e-15)
        assert t2.dims == t.dims

    def test_marginal_order(self):
        p = np.array([[0.1, 0.2], [0.3, 0.4]])
        t = JointTable(p)
        np.testing.assert_allclose(t.marginal((1, 0)), p.T)


class TestExactMI:
    def test_known_2x2_value(self):
        # hand-computed: 0.25*ln2 + 0.25*ln(2/3) + 0 + 0.5*ln(4/3)
        t = JointTable(np.array([[0.25, 0.25], [0.0, 0.5]]))
        assert exact_mi(t, (0,), (1,)) == pytest.approx(0.2157615543388171, abs=1e-12)

    def test_independent_is_zero(self):
        t = JointTable(np.outer([0.3, 0.7], [0.2, 0.5, 0.3]))
        assert abs(exact_mi(t, (0,), (1,))) < 1e-15

    def test_perfect_copy_is_entropy(self):
        t = JointTable(np.diag([0.2, 0.3, 0.5]))
        h = -sum(p * math.log(p) for p in (0.2, 0.3, 0.5))
        assert exact_mi(t, (0,), (1,)) == pytest.approx(h, abs=1e-14)

    def test_xor_world(self):
        # z = x xor y with independent uniform bits: I(x;z)=0 but I(x;z|y)=ln2
        p = np.zeros((2, 2, 2))
        for x in range(2):
            for y in range(2):
                p[x, y, x ^ y] = 0.25
        t = JointTable(p)
        assert abs(exact_mi(t, (0,), (2,))) < 1e-15
        assert exact_conditional_mi(t, (0,), (2,), (1,)) == pytest.approx(LN2, abs=1e-12)

    def test_group_arguments(self):
        t = JointTable(np.full((2, 2, 2), 0.125))
        with pytest.raises(ValueError):
            exact_mi(t, (0, 1), (1,))  # overlap
        with pytest.raises(ValueError):
            exact_mi(t, (), (1,))  # empty
        with pytest.raises(ValueError):
            exact_conditional_mi(t, (0,), (1,), (1,))

    def test_entropy_of_group(self):
        t = JointTable(np.full((2, 2, 2), 0.125))
        assert exact_entropy(t, (0, 1)) == pytest.approx(2 * LN2, abs=1e-14)


class TestIdentities:
    def test_residuals_small_over_random_tables(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(50):
            dims = tuple(rng.integers(2, 5, size=3))
            t = random_joint_table(rng, dims, zero_fraction=0.3)
            worst = max(worst, verify_mi_identities(t)["max_residual"])
        assert worst < 1e-10

    def test_four_axis_table(self):
        rng = np.random.default_rng(7)
        t = random_joint_table(rng, (2, 3, 2, 2), zero_fraction=0.2)
        assert verify_mi_identities(t)["max_residual"] < 1e-10

    def test_needs_three_axes(self):
        with pytest.raises(ValueError):
            verify_mi_identities(JointTable(np.full((2, 2), 0.25)))


class TestOptimalViews:
    def test_three_bit_world(self):
        report = verify_optimal_views(independent_bits_world(2))
        assert report.v1_axes == (0,)
        assert report.v2_axes == (0,)
        assert report.mi == pytest.approx(LN2, abs=1e-9)
        assert report.mi_given_label < 1e-9
        assert report.unique
        # raw objective ties: any pair of label-keeping views with disjoint
        # noise coordinates sits at ln 2; entropy tie-break resolves them
        assert report.mi_tie_count == 9
        assert report.entropy_tie_count == 1

    def test_feasible_views_contain_label(self):
        report = verify_optimal_views(independent_bits_world(2))
        # views keeping I(v;y)=I(x;y) are exactly the subsets containing y
        assert report.feasible_count == 16
        assert report.label_mi == pytest.approx(LN2, abs=1e-12)

    def test_rejects_dependent_world(self):
        p = np.zeros((2, 2, 2))
        for x in range(2):
            for y in range(2):
                p[x, y, x ^ y] = 0.25
        with pytest.raises(ValueError):
            verify_optimal_views(JointTable(p))


class TestInfoNCE:
    def test_two_sample_frozen_value(self):
        # identity score matrix at tau=1: loss = ln(1 + e^-1)
        cfg = CriticConfig(embed_dim=2, temperature=1.0, normalize=False)
        z = torch.eye(2)
        loss = info_nce_loss(z, z, cfg)
        assert float(loss) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)

    def test_matched_unit_vectors_score(self):
        cfg = CriticConfig(embed_dim=4, temperature=0.07)
        z = torch.zeros(4)
        z[0] = 1.0
        assert critic_score(z, z, cfg) == pytest.approx(1 / 0.07, rel=1e-6)

    def test_score_matrix_shape_and_dim_check(self):
        cfg = CriticConfig(embed_dim=3)
        s = score_matrix(torch.randn(5, 3), torch.randn(7, 3), cfg)
        assert s.shape == (5, 7)
        with pytest.raises(ValueError):
            score_matrix(torch.randn(5, 4), torch.randn(5, 3), cfg)

    def test_loss_nonnegative_and_bounded_estimate(self):
        cfg = CriticConfig(embed_dim=8)
        rng = np.random.default_rng(3)
        for _ in range(20):
            z1 = torch.as_tensor(rng.normal(size=(16, 8)), dtype=torch.float32)
            z2 = torch.as_tensor(rng.normal(size=(16, 8)), dtype=torch.float32)
            loss = float(info_nce_loss(z1, z2, cfg))
            assert loss >= 0.0
            est = i_nce_estimate(loss, 16)
            assert est.value <= math.log(16)

    def test_batch_size_floor(self):
        cfg = CriticConfig(embed_dim=2)
        with pytest.raises(ValueError):
            info_nce_loss(torch.randn(1, 2), torch.randn(1, 2), cfg)

    def test_estimate_arithmetic(self):
        est = i_nce_estimate(2.0, 128)
        assert est.value == pytest.approx(math.log(128) - 2.0, abs=1e-12)
        assert not est.below_zero

    def test_below_zero_flagged_not_clamped(self):
        est = i_nce_estimate(math.log(64) + 0.5, 64)
        assert est.below_zero
        assert est.value == pytest.approx(-0.5, abs=1e-12)

    def test_rejects_negative_loss(self):
        with pytest.raises(ValueError):
            i_nce_estimate(-0.01, 64)
        with pytest.raises(ValueError):
            MIEstimate(value=5.0, loss=0.0, batch_size=64, train_steps=0, protocol_id="x")

    def test_critic_config_validation(self):
        with pytest.raises(ValueError):
            CriticConfig(head_kind="bilinear")
        with pytest.raises(ValueError):
            CriticConfig(temperature=0.0)


class TestTableNCE:
    def test_channel_table_exact_mi(self):
        t = noisy_channel_table(8, stay_prob=0.8)
        h_noise = -(0.8 * math.log(0.8) + 0.2 * math.log(0.2 / 7))
        assert exact_mi(t, (0,), (1,)) == pytest.approx(math.log(8) - h_noise, abs=1e-12)

    def test_short_run_respects_bound(self):
        t = noisy_channel_table(8, stay_prob=0.8)
        est = estimate_table_mi_nce(t, batch_size=32, train_steps=40, eval_batches=8, seed=0)
        assert est.value <= math.log(32)
        assert math.isfinite(est.loss)

    def test_deterministic_given_seed(self):
        t = noisy_channel_table(4, stay_prob=0.7)
        a = estimate_table_mi_nce(t, batch_size=16, train_steps=30, eval_batches=4, seed=5)
        b = estimate_table_mi_nce(t, batch_size=16, train_steps=30, eval_batches=4, seed=5)
        assert a.value == b.value
        assert a.protocol_id == b.protocol_id
