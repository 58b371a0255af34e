"""Closed-form weight recursion against the truncated-sum oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twbc.data import RunConfig, Trajectory, new_dataset
from twbc.discriminator import RewardField
from twbc.weights import (
    WeightTable,
    brute_force_weights,
    build_weight_table,
    compute_weights,
    compute_weights_from_terms,
    horizon_for,
)


class TestClosedForm:
    def test_constant_rewards_geometric(self):
        r = np.full(5, 0.7)
        w = compute_weights(r, alpha=1.1, gamma=0.9)
        expected = np.exp(1.1 * 0.7) / (1.0 - 0.9)
        np.testing.assert_allclose(w, expected, rtol=1e-12)

    def test_gamma_zero_is_pointwise(self):
        r = np.array([0.3, -1.0, 2.0])
        w = compute_weights(r, alpha=1.25, gamma=0.0)
        np.testing.assert_allclose(w, np.exp(1.25 * r), rtol=0)

    def test_two_step_hand_value(self):
        # e = (1, 2); W_1 = 2 / 0.5 = 4; W_0 = 1 + 0.5 * 4 = 3.
        w = compute_weights(np.array([0.0, np.log(2.0)]), alpha=1.0, gamma=0.5)
        np.testing.assert_allclose(w, [3.0, 4.0], rtol=1e-12)

    def test_gamma_one_rejected(self):
        with pytest.raises(ValueError, match="gamma"):
            compute_weights(np.zeros(3), 1.0, 1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            compute_weights(np.array([]), 1.0, 0.5)


class TestOracle:
    def test_brute_force_horizon_zero_is_terms(self):
        r = np.array([0.1, -0.5, 1.0])
        w = brute_force_weights(r, alpha=2.0, gamma=0.9, horizon=0)
        np.testing.assert_allclose(w, np.exp(2.0 * r), rtol=0)

    def test_brute_force_single_state(self):
        gamma = 0.9
        w = brute_force_weights(np.array([0.5]), 1.0, gamma, horizon=400)
        np.testing.assert_allclose(w, np.exp(0.5) / (1 - gamma), rtol=1e-12)

    def test_against_oracle_random_instances(self):
        rng = np.random.default_rng(2024)
        for trial in range(100):
            n = int(rng.integers(1, 51))
            r = rng.uniform(-2.0, 2.0, size=n)
            gamma = float(rng.choice([0.0, 0.9, 0.99, 0.998]))
            alpha = float(rng.choice([0.5, 1.25]))
            closed = compute_weights(r, alpha, gamma)
            max_term = np.exp(alpha * r.max()) / (1.0 - gamma)
            h = horizon_for(gamma, max_term, tol=1e-12)
            brute = brute_force_weights(r, alpha, gamma, h)
            rel = np.max(np.abs(closed - brute) / np.abs(brute))
            assert rel < 1e-9, f"trial {trial}: rel error {rel}"


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), j=st.integers(0, 7),
           gamma=st.sampled_from([0.0, 0.5, 0.95]))
    def test_raising_one_reward_raises_only_earlier_weights(self, seed, j, gamma):
        rng = np.random.default_rng(seed)
        r = rng.uniform(-1, 1, size=8)
        w0 = compute_weights(r, 1.0, gamma)
        r2 = r.copy()
        r2[j] += 0.5
        w1 = compute_weights(r2, 1.0, gamma)
        assert np.all(w1[: j + 1] >= w0[: j + 1])
        np.testing.assert_array_equal(w1[j + 1:], w0[j + 1:])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), gamma=st.sampled_from([0.0, 0.9, 0.998]))
    def test_bounds(self, seed, gamma):
        rng = np.random.default_rng(seed)
        r = rng.uniform(-2, 2, size=12)
        w = compute_weights(r, 1.25, gamma)
        e = np.exp(1.25 * r)
        assert np.all(w >= e.min() / (1 - gamma) - 1e-9)
        assert np.all(w <= e.max() / (1 - gamma) + 1e-9)

    def test_terminal_spike_propagates_backward(self):
        # High score only at the last state still lifts every earlier weight
        # through the discounted tail, growing toward the end.
        n, gamma, high = 20, 0.9, 4.0
        r = np.zeros(n)
        r[-1] = high
        w = compute_weights(r, 1.0, gamma)
        floor = gamma ** (n - 1) * np.exp(high) / (1 - gamma)
        assert w[0] >= floor
        assert np.all(np.diff(w) > 0)

    def test_uniformly_better_trajectory_dominates(self):
        rng = np.random.default_rng(5)
        base = rng.uniform(-1, 1, size=15)
        w_lo = compute_weights(base, 1.25, 0.95)
        w_hi = compute_weights(base + 0.3, 1.25, 0.95)
        assert np.all(w_hi > w_lo)


def make_field_and_dataset(reward_rows):
    trajs = []
    rewards = {}
    for i, r in enumerate(reward_rows):
        r = np.asarray(r, dtype=np.float64)
        trajs.append(Trajectory(
            id=i,
            states=np.zeros((len(r), 2)),
            actions=np.zeros((len(r), 1)),
        ))
        rewards[i] = r
    ds = new_dataset("task_agnostic", trajs, state_dim=2, action_dim=1)
    return RewardField(rewards=rewards, clamp=10.0), ds


class TestWeightTable:
    def test_z_is_mean_raw_weight(self):
        field, ds = make_field_and_dataset([[0.0, 1.0], [2.0]])
        cfg = RunConfig(alpha=1.0, gamma=0.5)
        table = build_weight_table(field, ds, cfg)
        raw_all = np.concatenate([table.raw[0], table.raw[1]])
        assert table.z == pytest.approx(raw_all.mean(), rel=1e-15)

    def test_normalized_mean_is_one(self):
        rng = np.random.default_rng(1)
        field, ds = make_field_and_dataset([rng.uniform(-2, 2, size=9),
                                            rng.uniform(-2, 2, size=4)])
        table = build_weight_table(field, ds, RunConfig(gamma=0.9))
        flat = table.flat_weights(ds)
        assert flat.mean() == pytest.approx(1.0, abs=1e-12)

    def test_normalize_flag_keeps_raw(self):
        field, ds = make_field_and_dataset([[1.0, 1.0]])
        table = build_weight_table(field, ds, RunConfig(gamma=0.5),
                                   normalize=False)
        np.testing.assert_array_equal(table.weights_for(0), table.raw[0])

    def test_scaled_prob_term(self):
        field, ds = make_field_and_dataset([[0.0, 2.0]])
        cfg = RunConfig(gamma=0.5)
        table = build_weight_table(field, ds, cfg, term="scaled_prob")
        e = 10.0 / (1.0 + np.exp(-np.array([0.0, 2.0])))
        np.testing.assert_allclose(
            table.raw[0], compute_weights_from_terms(e, 0.5), rtol=1e-15
        )

    def test_unknown_term_rejected(self):
        field, ds = make_field_and_dataset([[0.0]])
        with pytest.raises(ValueError, match="weight term"):
            build_weight_table(field, ds, RunConfig(), term="linear")

    def test_missing_trajectory_named(self):
        field, ds = make_field_and_dataset([[0.0], [0.0]])
        del field.rewards[1]
        with pytest.raises(KeyError, match="trajectory 1"):
            build_weight_table(field, ds, RunConfig())

    def test_length_mismatch_named(self):
        field, ds = make_field_and_dataset([[0.0, 0.0]])
        field.rewards[0] = np.array([0.0])
        with pytest.raises(ValueError, match="trajectory 0"):
            build_weight_table(field, ds, RunConfig())

    def test_flat_weights_alignment(self):
        field, ds = make_field_and_dataset([[0.0, 1.0], [2.0]])
        table = build_weight_table(field, ds, RunConfig(gamma=0.5))
        flat = table.flat_weights(ds)
        expected = np.concatenate([table.weights_for(0), table.weights_for(1)])
        np.testing.assert_array_equal(flat, expected)

    def test_csv_export(self, tmp_path):
        field, ds = make_field_and_dataset([[0.0, 1.0]])
        table = build_weight_table(field, ds, RunConfig(gamma=0.5))
        path = tmp_path / "weights.csv"
        table.to_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "trajectory_id,step,raw_W,normalized_W"
        assert len(lines) == 3
        cols = lines[1].split(",")
        assert float(cols[3]) == pytest.approx(float(cols[2]) / table.z)

    def test_alpha_scaling_preserves_ranking(self):
        rng = np.random.default_rng(7)
        base = rng.uniform(-1, 1, size=10)
        lo = compute_weights(np.sort(base), 0.6, 0.9)
        hi = compute_weights(np.sort(base), 1.2, 0.9)
        assert np.all(np.argsort(lo) == np.argsort(hi))
