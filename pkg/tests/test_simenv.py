"""Tests for the synthetic environment: landscape, sampling, delays, snapshots."""

import json
import math

import numpy as np
import pytest

from zotune.deltastats import TaylorMode, hourly_delta_stat
from zotune.scheduler import RoundPlan
from zotune.simenv import CONTROL_ID, PERIOD, EnvSpec, SimEnv

SEEDS = (0, 1, 7, 42, 131)


def single_candidate_plan(cid=1, frac=0.4, rnd=0):
    """One candidate at ``frac``; the control absorbs the remainder."""
    return RoundPlan(
        round=rnd,
        control_fraction=1.0 - frac,
        assignments=((cid, frac),),
    )


class TestLandscape:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_delta_fields_span_unit_interval(self, seed):
        env = SimEnv.build(seed)
        axis = np.linspace(0.0, 1.0, 201)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        grid = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        d = env.delta(grid)
        assert d.min() == 0.0
        assert d.max() == 1.0
        assert np.all(d >= 0.0) and np.all(d <= 1.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_daily_patterns_anticorrelated(self, seed):
        env = SimEnv.build(seed)
        corr = float(np.corrcoef(env.w1_values, env.w2_values)[0, 1])
        assert corr <= -0.5

    @pytest.mark.parametrize("seed", SEEDS)
    def test_daily_patterns_strictly_positive(self, seed):
        env = SimEnv.build(seed)
        assert np.all(env.w1_values > 0.0)
        assert np.all(env.w2_values > 0.0)

    def test_defaults(self):
        env = SimEnv.build(3)
        s = env.spec
        assert s.sigma == 0.6
        assert s.users == 1_000_000
        assert s.draws_per_step == 50
        assert s.weights == (0.296, 1.165, 0.149, 0.703)
        assert s.threshold == 0.6036
        assert s.fixed_delay == 3
        assert s.base_theta == (0.011, 0.985)

    def test_period_is_24_exactly(self):
        env = SimEnv.build(5)
        theta = (0.3, 0.7)
        for t in range(5):
            np.testing.assert_array_equal(
                env.hourly_means(theta, t), env.hourly_means(theta, t + PERIOD)
            )

    def test_overrides_never_touch_generation(self):
        a = SimEnv.build(9)
        b = SimEnv.build(9, sigma=0.05, fixed_delay=6, users=1000)
        probe = np.random.default_rng(0).uniform(0, 1, size=(50, 2))
        np.testing.assert_array_equal(a.delta(probe), b.delta(probe))
        np.testing.assert_array_equal(a.w1_values, b.w1_values)
        np.testing.assert_array_equal(a.w2_values, b.w2_values)

    def test_unknown_override_rejected(self):
        with pytest.raises(TypeError):
            SimEnv.build(1, gravity=9.8)

    def test_same_seed_bitwise_identical(self):
        a = SimEnv.build(77)
        b = SimEnv.build(77)
        assert a.spec.to_dict() == b.spec.to_dict()
        plan = single_candidate_plan()
        thetas = {1: (0.25, 0.5)}
        batch_a = a.step(plan, 0, thetas)[0]
        batch_b = b.step(plan, 0, thetas)[0]
        assert batch_a == batch_b


class TestGroundTruth:
    def test_base_gain_zero(self):
        env = SimEnv.build(13)
        g, v = env.true_gain_violation(env.spec.base_theta)
        assert g == 0.0
        assert v >= 0.0

    def test_grid_scan_dominates_grid_points(self):
        env = SimEnv.build(17)
        _, best_gain, _ = env.grid_scan(nodes=200)
        axis = np.linspace(0.0, 1.0, 200)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        thetas = np.stack([gx.ravel(), gy.ravel()], axis=-1)
        f, g = env.true_f_g(thetas)
        f_base, _ = env.true_f_g(np.asarray(env.spec.base_theta))
        feasible_gains = f[g >= env.spec.threshold] / float(f_base) - 1.0
        if feasible_gains.size:
            assert best_gain >= feasible_gains.max() - 1e-15

    def test_monte_carlo_agreement(self):
        """Exact ground truth matches simulation within 3 standard errors."""
        env = SimEnv.build(23)
        rng = np.random.default_rng(99)
        thetas = rng.uniform(0.0, 1.0, size=(20, 2))
        w1, w2, _, _ = env.spec.weights
        sigma = env.spec.sigma
        draws_per_hour = 42_000  # about 1e6 per metric across 24 hours
        f_base, _ = env.true_f_g(np.asarray(env.spec.base_theta))
        for theta in thetas:
            totals = np.zeros(2)
            n_total = 0
            for t in range(PERIOD):
                mu = env.hourly_means(theta, t)
                x1 = rng.normal(mu[0], sigma, size=draws_per_hour)
                x2 = rng.normal(mu[1], sigma, size=draws_per_hour)
                totals += np.array([x1.sum(), x2.sum()])
                n_total += draws_per_hour
            means = totals / n_total
            f_hat = w1 * means[0] + w2 * means[1]
            se_f = sigma * math.hypot(w1, w2) / math.sqrt(n_total)
            f_true, _ = env.true_f_g(np.asarray(theta))
            assert abs(f_hat - float(f_true)) <= 3.0 * se_f
            gain_hat = f_hat / float(f_base) - 1.0
            gain_true, _ = env.true_gain_violation(theta)
            assert abs(gain_hat - gain_true) <= 3.0 * se_f / float(f_base)

    def test_constant_field_flattens_gain(self):
        """With both effect fields constant, gain is zero everywhere."""
        env = SimEnv.build(31)
        from dataclasses import replace
        from zotune.simenv import RadialBumpField

        flat = RadialBumpField(centers=(), widths=(), lo=-0.5, span=1.0)
        spec = replace(env.spec, delta1=flat, delta2=flat)
        flat_env = SimEnv(spec)
        for theta in ((0.0, 0.0), (0.3, 0.9), (1.0, 1.0)):
            g, _ = flat_env.true_gain_violation(theta)
            assert g == pytest.approx(0.0, abs=1e-12)


class TestStep:
    def test_zero_sigma_gives_exact_means(self):
        env = SimEnv.build(3, sigma=0.0, users=1000)
        plan = single_candidate_plan(frac=0.5)
        theta = (0.2, 0.8)
        batch = env.step(plan, 4, {1: theta})[0]
        mu = env.hourly_means(theta, 4)
        base_mu = env.hourly_means(env.spec.base_theta, 4)
        for k, (test, ctrl) in enumerate(batch.readings):
            assert test.sample_mean == float(mu[k])
            assert test.sample_var == 0.0
            assert ctrl.sample_mean == float(base_mu[k])
            assert ctrl.sample_var == 0.0

    def test_group_sizes_round_with_floor(self):
        env = SimEnv.build(3, users=1000)
        plan = RoundPlan(
            round=0, control_fraction=0.2,
            assignments=((1, 0.7995), (2, 1e-4 if False else 0.0005)),
        )
        batches = env.step(plan, 0, {1: (0.5, 0.5), 2: (0.1, 0.1)})
        sizes = {b.readings[0][0].candidate_id: b.readings[0][0].group_size for b in batches}
        assert sizes[1] == round(0.7995 * 1000)
        assert sizes[2] == 1  # floor for tiny but positive share
        ctrl = batches[0].readings[0][1]
        assert ctrl.group_size == round(0.2 * 1000)

    def test_fixed_delay_only(self):
        env = SimEnv.build(3, xi_mean=0.0, xi_sd=0.0, fixed_delay=3, users=1000)
        batch = env.step(single_candidate_plan(rnd=5), 5, {1: (0.4, 0.4)})[0]
        assert batch.origin_round == 5
        assert batch.arrival_round == 8

    def test_arrival_never_precedes_fixed_delay(self):
        env = SimEnv.build(8, users=1000)
        for t in range(40):
            batch = env.step(single_candidate_plan(rnd=t), t, {1: (0.4, 0.4)})[0]
            assert batch.arrival_round >= t + env.spec.fixed_delay

    def test_control_readings_shared_within_hour(self):
        env = SimEnv.build(11, users=1000)
        plan = RoundPlan(
            round=0, control_fraction=0.2, assignments=((1, 0.4), (2, 0.4))
        )
        batches = env.step(plan, 0, {1: (0.1, 0.1), 2: (0.9, 0.9)})
        ctrl_a = batches[0].readings[0][1]
        ctrl_b = batches[1].readings[0][1]
        assert ctrl_a == ctrl_b
        assert ctrl_a.candidate_id == CONTROL_ID

    def test_empty_plan_emits_nothing(self):
        env = SimEnv.build(3)
        plan = RoundPlan(round=0, control_fraction=0.2, assignments=())
        assert env.step(plan, 0, {}) == []

    def test_null_candidate_at_base_unbiased(self):
        """Candidate pinned at the base shows no lift, within 3 sigma."""
        env = SimEnv.build(19, users=10_000)
        theta0 = env.spec.base_theta
        plan = single_candidate_plan(frac=0.4)
        means = []
        for t in range(1000):
            batch = env.step(plan, t, {1: theta0})[0]
            test, ctrl = batch.readings[0]
            stat = hourly_delta_stat(test, ctrl, TaylorMode.DELTA_METHOD)
            means.append(stat.mean)
        means = np.asarray(means)
        se = means.std(ddof=1) / math.sqrt(len(means))
        assert abs(means.mean()) <= 3.0 * se


class TestSnapshot:
    def test_roundtrip_spec_and_stream(self, tmp_path):
        env = SimEnv.build(29, users=1000)
        plan = single_candidate_plan()
        env.step(plan, 0, {1: (0.3, 0.3)})  # advance the stream first
        path = tmp_path / "env.json"
        env.save(str(path))
        clone = SimEnv.load(str(path))
        assert clone.spec.to_dict() == env.spec.to_dict()
        a = env.step(plan, 1, {1: (0.3, 0.3)})
        b = clone.step(plan, 1, {1: (0.3, 0.3)})
        assert a == b

    def test_snapshot_is_json(self, tmp_path):
        env = SimEnv.build(2)
        path = tmp_path / "env.json"
        env.save(str(path))
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["seed"] == 2
        assert "rng_state" in data

    def test_version_check(self, tmp_path):
        env = SimEnv.build(2)
        d = env.spec.to_dict()
        d["format_version"] = 999
        with pytest.raises(ValueError):
            EnvSpec.from_dict(d)

    def test_draws_per_step_floor(self):
        with pytest.raises(ValueError):
            SimEnv.build(1, draws_per_step=1)
