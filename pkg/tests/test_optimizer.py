import itertools

import numpy as np
import pytest

from selquant.estimator import MseEvaluator, SelectionPlan
from selquant.field import CorrelationSpec, FieldModel, build_prior_cov, place_sensors
from selquant.link import CodingModel, SlotConfig, build_link_profile, channel_gain
from selquant.optimizer import (InfeasiblePowerError, InfeasibleSelectionError,
                                OptimizerConfig, baseline_channel_gain,
                                baseline_error_free, baseline_random,
                                optimize_joint, optimize_rows_only,
                                optimize_separate)


def scenario(seed, m=6, varphi=0.9, tx_dbm=-73.0):
    rng = np.random.default_rng(seed)
    layout = place_sensors(m, 50.0, int(rng.integers(2**32)))
    prior = build_prior_cov(layout, CorrelationSpec(np.full(m, 10.0), varphi))
    noise = np.diag(rng.uniform(1, 10, m) ** 2)
    model = FieldModel(np.zeros(m), prior, noise)
    gains = channel_gain(layout.distances_to_cn(), 3.0)
    link = build_link_profile(gains, 10 ** (tx_dbm / 10) * 1e-3)
    return model, link


def exhaustive_best(model, link, n, k, max_bits):
    ev = MseEvaluator(model.prior_cov, model.noise_cov, per_table=link.per_table,
                      max_bits=max_bits)
    best = np.inf
    for sel in itertools.combinations(range(model.size), n):
        for bits in itertools.product(range(1, max_bits + 1), repeat=n):
            best = min(best, ev.bounded_mse(np.array(sel), np.array(bits), k))
    return best


class TestSeparate:
    def test_full_selection_only_tunes_bits(self):
        model, link = scenario(0, m=4)
        cfg = OptimizerConfig(k_max=5, max_bits=8)
        plan, trace = optimize_separate(model, link, 4, cfg, rng_seed=1)
        assert sorted(plan.selected) == [0, 1, 2, 3]
        assert trace.values[-1] <= trace.values[0] + 1e-12

    def test_matches_exhaustive_search_on_small_instance(self):
        hits, gaps = 0, []
        for seed in range(20):
            model, link = scenario(200 + seed, m=5)
            cfg = OptimizerConfig(k_max=1, max_bits=2)
            plan, trace = optimize_separate(model, link, 2, cfg, rng_seed=seed)
            best = exhaustive_best(model, link, 2, 1, 2)
            assert trace.final_value >= best - 1e-12
            gap = (trace.final_value - best) / best
            gaps.append(gap)
            hits += gap < 1e-12
        assert hits >= 18  # local optima are possible but must stay rare
        assert max(gaps) < 0.10

    def test_deterministic_traces(self):
        model, link = scenario(7, m=8)
        cfg = OptimizerConfig()
        _, t1 = optimize_separate(model, link, 3, cfg, rng_seed=42)
        _, t2 = optimize_separate(model, link, 3, cfg, rng_seed=42)
        assert t1.values == t2.values
        assert t1.plans == t2.plans

    def test_trace_nonincreasing(self):
        model, link = scenario(8, m=10)
        plan, trace = optimize_separate(model, link, 4, OptimizerConfig(), rng_seed=3)
        assert all(a >= b - 1e-12 for a, b in zip(trace.values, trace.values[1:]))
        assert trace.termination == "converged"

    def test_separate_trial_counts(self):
        model, link = scenario(9, m=10)
        _, trace = optimize_separate(model, link, 4, OptimizerConfig(), rng_seed=3)
        for stage, trials in zip(trace.stages, trace.trials_per_sweep):
            if stage == "rows":
                assert trials == 4 * (10 - 4 + 1)
            elif stage == "bits":
                assert trials == 8 * 4


class TestJoint:
    def test_single_bit_reduces_to_row_sweep(self):
        model, link = scenario(10, m=7)
        cfg = OptimizerConfig(max_bits=1)
        p_sep, _ = optimize_separate(model, link, 3, cfg, rng_seed=5)
        p_joint, _ = optimize_joint(model, link, 3, cfg, rng_seed=5)
        assert p_sep == p_joint

    def test_joint_not_worse_than_separate_on_paired_seeds(self):
        for seed in range(10):
            model, link = scenario(300 + seed, m=6)
            cfg = OptimizerConfig(k_max=1, max_bits=2)
            _, t_sep = optimize_separate(model, link, 2, cfg, rng_seed=seed)
            _, t_joint = optimize_joint(model, link, 2, cfg, rng_seed=seed)
            assert t_joint.final_value <= t_sep.final_value + 1e-9

    def test_trial_count_formula_per_sweep(self):
        # one sweep over rows costs N * (M - N + 1) * B * N evaluations
        model, link = scenario(11, m=30)
        cfg = OptimizerConfig(k_max=5, max_bits=8, max_sweeps=1)
        _, trace = optimize_joint(model, link, 6, cfg, rng_seed=2)
        assert trace.stages[1] == "joint"
        assert trace.trials_per_sweep[1] == 6 * (30 - 6 + 1) * 8 * 6


class TestConstraints:
    def test_power_cap_respected_throughout(self):
        model, link = scenario(12, m=8)
        link.tx_power[:] = np.linspace(1.0, 2.0, 8)
        cap = float(np.sort(link.tx_power)[:3].sum() * 1.4)
        cfg = OptimizerConfig(power_cap=cap)
        plan, trace = optimize_separate(model, link, 3, cfg, rng_seed=6)
        for p in trace.plans:
            assert link.tx_power[list(p.selected)].sum() <= cap + 1e-9
            assert len(set(p.selected)) == p.n_active

    def test_infeasible_cap_reported_before_search(self):
        model, link = scenario(13, m=5)
        link.tx_power[:] = 1.0
        with pytest.raises(InfeasiblePowerError):
            optimize_separate(model, link, 3, OptimizerConfig(power_cap=2.0), rng_seed=0)

    def test_uniform_powers_with_matching_cap_never_reject(self):
        model, link = scenario(14, m=8)
        link.tx_power[:] = 2.0
        cfg = OptimizerConfig(power_cap=3 * 2.0)
        plan, trace = optimize_separate(model, link, 3, cfg, rng_seed=1)
        assert trace.termination == "converged"


class TestBaselines:
    def test_random_full_selection_deterministic(self):
        model, link = scenario(15, m=5)
        plan = baseline_random(model, link, 5, 4, rng_seed=9)
        assert sorted(plan.selected) == [0, 1, 2, 3, 4]
        assert plan.bits == (4,) * 5

    def test_random_reproducible(self):
        model, link = scenario(16, m=12)
        a = baseline_random(model, link, 4, 4, rng_seed=9)
        b = baseline_random(model, link, 4, 4, rng_seed=9)
        assert a == b

    def test_more_bits_hurt_at_moderate_snr(self):
        # weaker codeword protection raises PER enough to lose despite precision
        vals = {8: [], 4: []}
        for seed in range(10):
            model, link = scenario(500 + seed, m=20, tx_dbm=-73.0)
            ev = MseEvaluator(model.prior_cov, model.noise_cov,
                              per_table=link.per_table, max_bits=8)
            for bits in (8, 4):
                plan = baseline_random(model, link, 6, bits, rng_seed=seed)
                vals[bits].append(ev.exact_mse(np.array(plan.selected), np.array(plan.bits)))
        assert np.mean(vals[8]) > np.mean(vals[4])

    def test_gain_tie_break_and_ordering(self):
        model, link = scenario(17, m=6)
        link.gains[:] = 1.0
        assert baseline_channel_gain(model, link, 3, 4).selected == (0, 1, 2)
        link.gains[:] = np.linspace(6, 1, 6)
        assert baseline_channel_gain(model, link, 4, 4).selected == (0, 1, 2, 3)

    def test_error_free_with_clean_channels_uses_max_bits(self):
        model, link = scenario(18, m=6, tx_dbm=0.0)  # effectively infinite SNR
        plan = baseline_error_free(model, link, 3, OptimizerConfig(), rng_seed=4)
        assert plan.bits == (8, 8, 8)

    def test_error_free_excludes_dead_sensors(self):
        model, link = scenario(19, m=6, tx_dbm=-73.0)
        link.per_table[2, :] = 0.5  # no MCS meets the ceiling for sensor 2
        plan = baseline_error_free(model, link, 4, OptimizerConfig(), rng_seed=4)
        assert 2 not in plan.selected

    def test_error_free_reports_insufficient_candidates(self):
        model, link = scenario(20, m=4, tx_dbm=-73.0)
        link.per_table[:, :] = 0.9
        with pytest.raises(InfeasibleSelectionError):
            baseline_error_free(model, link, 2, OptimizerConfig(), rng_seed=4)


def test_rows_only_keeps_bits_fixed():
    model, link = scenario(21, m=8)
    plan, _ = optimize_rows_only(model, link, 3, OptimizerConfig(), 5, rng_seed=2)
    assert plan.bits == (5, 5, 5)


def test_trace_csv_export(tmp_path):
    model, link = scenario(22, m=6)
    _, trace = optimize_separate(model, link, 2, OptimizerConfig(), rng_seed=1)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,stage,eps_bound,plan_hash,trials,elapsed_s"
    assert len(lines) == len(trace.values) + 1
