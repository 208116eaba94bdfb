import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histqte.estimator import (
    ClusterStats,
    EstimationError,
    ExactData,
    InsufficientSampleError,
    QuantileEstimate,
    QuantileQuery,
    RankBounds,
    cluster_stats,
    clustered_mean_variance,
    estimate_effect,
    exact_quantile_ci,
    histogram_quantile_ci,
    qte_absolute,
    qte_relative,
    rank_bounds,
)
from histqte.histogram import (
    BinSpec,
    HistogramTable,
    UnitHistogram,
    aggregate,
    exact_bins,
    historical_quantile_bins,
)
from histqte.synth import SynthConfig, generate


def nearest_rank_oracle(values, p):
    s = sorted(values)
    n = len(s)
    r = math.floor(Fraction(str(p)) * n)
    return s[min(max(r, 1), n) - 1]


def clustered_groups(rng, k, lam=3.0, law="lognormal"):
    sizes = rng.poisson(lam, k) + 1
    draw = {"lognormal": rng.lognormal, "normal": rng.normal}[law]
    return [draw(size=m) for m in sizes]


def est(q, se):
    b = RankBounds(1, 1, 1, 10)
    return QuantileEstimate(q, se, 1.0, 0.5, b, q, q)


class TestClusterStats:
    def test_hand_computed(self):
        s = cluster_stats([(1, 1), (3, 1)])
        assert s == ClusterStats(K=2, mean_S=2, mean_N=1, var_S=2, var_N=0, cov_SN=0)

    def test_identical_pairs(self):
        s = cluster_stats([(2, 3)] * 5)
        assert (s.var_S, s.var_N, s.cov_SN) == (0, 0, 0)

    def test_covariance(self):
        assert cluster_stats([(1, 2), (2, 4)]).cov_SN == pytest.approx(1.0)

    def test_rejects_single_unit(self):
        with pytest.raises(EstimationError):
            cluster_stats([(1, 1)])


class TestClusteredVariance:
    def test_hand_example(self):
        assert clustered_mean_variance(cluster_stats([(1, 1), (3, 1)])) == pytest.approx(1.0)

    def test_equal_sizes_reduce_to_iid(self):
        rng = np.random.default_rng(0)
        s = rng.binomial(4, 0.3, 50).astype(float)
        stats = cluster_stats(np.column_stack([s, np.full(50, 4.0)]))
        assert clustered_mean_variance(stats) == pytest.approx(s.var(ddof=1) / (50 * 16))

    def test_rejects_zero_mean_size(self):
        with pytest.raises(EstimationError):
            clustered_mean_variance(ClusterStats(2, 0.0, 0.0, 0.0, 0.0, 0.0))

    def test_negative_floored(self, caplog):
        # inconsistent moments drive the quadratic form below zero
        stats = ClusterStats(K=10, mean_S=1.0, mean_N=1.0, var_S=0.1, var_N=0.1, cov_SN=1.0)
        assert clustered_mean_variance(stats) == 0.0
        assert "negative" in caplog.text

    def test_against_cluster_bootstrap(self):
        rng = np.random.default_rng(11)
        groups = clustered_groups(rng, 2000)
        flat = np.concatenate(groups)
        q = nearest_rank_oracle(flat, 0.5)
        s = np.array([(g <= q).sum() for g in groups], float)
        n = np.array([len(g) for g in groups], float)
        analytic = clustered_mean_variance(cluster_stats(np.column_stack([s, n])))
        idx = rng.integers(0, len(groups), (1000, len(groups)))
        boot = s[idx].sum(1) / n[idx].sum(1)
        assert analytic == pytest.approx(boot.var(ddof=1), rel=0.15)


class TestRankBounds:
    def test_median_of_100(self):
        b = rank_bounds(100, QuantileQuery(0.5, 0.05))
        assert (b.r_mid, b.L, b.U) == (50, 40, 60)

    def test_extreme_quantile_rejected(self):
        with pytest.raises(InsufficientSampleError):
            rank_bounds(100, QuantileQuery(0.999))

    def test_extreme_quantile_clamped_when_not_strict(self):
        b = rank_bounds(100, QuantileQuery(0.999), strict=False)
        assert b.U == 100 and b.clamped

    def test_degenerate_z(self):
        b = rank_bounds(100, QuantileQuery(0.5, 1 - 1e-12))
        assert b.L == b.U == b.r_mid == 50

    def test_tiny_n(self):
        with pytest.raises(InsufficientSampleError):
            rank_bounds(1, QuantileQuery(0.5))
        with pytest.raises(InsufficientSampleError):
            rank_bounds(50, QuantileQuery(0.01))

    @given(st.integers(20, 5000), st.floats(0.05, 0.95))
    def test_ordering(self, n, p):
        b = rank_bounds(n, QuantileQuery(p), strict=False)
        assert 1 <= b.L <= b.r_mid <= b.U <= n


class TestExactQuantileCI:
    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=20),
            min_size=2,
            max_size=60,
        ),
        st.sampled_from([0.1, 0.25, 0.5, 0.75, 0.9]),
    )
    def test_point_matches_sort_oracle(self, groups, p):
        flat = [x for g in groups for x in g]
        if len(flat) * p < 1 or len(flat) < 2:
            return
        e = exact_quantile_ci(groups, QuantileQuery(p), strict=False)
        assert e.q == nearest_rank_oracle(flat, p)
        assert e.x_L <= e.q <= e.x_U
        assert e.se >= 0

    def test_constant_data(self):
        e = exact_quantile_ci([[3.0] * 10 for _ in range(10)], QuantileQuery(0.5))
        assert e.q == 3.0 and e.x_U - e.x_L == 0 and e.se == 0

    def test_singleton_clusters_correction_near_one(self):
        rng = np.random.default_rng(2)
        groups = [[x] for x in rng.normal(size=10_000)]
        e = exact_quantile_ci(groups, QuantileQuery(0.5))
        assert 0.9 <= e.c <= 1.1

    def test_rejects_one_unit(self):
        with pytest.raises(EstimationError):
            exact_quantile_ci([list(range(100))], QuantileQuery(0.5))

    def test_se_against_cluster_bootstrap_of_median(self):
        rng = np.random.default_rng(5)
        groups = clustered_groups(rng, 5000, lam=4.0)
        data = ExactData.from_groups(groups)
        e = exact_quantile_ci(data, QuantileQuery(0.5))
        flat = np.concatenate(groups)
        owner = np.repeat(np.arange(len(groups)), [len(g) for g in groups])
        order = np.argsort(owner, kind="stable")
        flat, starts = flat[order], np.r_[0, np.cumsum([len(g) for g in groups])]
        meds = []
        for _ in range(600):
            pick = rng.integers(0, len(groups), len(groups))
            vals = np.concatenate([flat[starts[i]:starts[i + 1]] for i in pick])
            meds.append(nearest_rank_oracle(vals, 0.5))
        assert e.se == pytest.approx(np.std(meds, ddof=1), rel=0.15)

    def test_clustering_widens_interval(self):
        rng = np.random.default_rng(8)
        # strong within-unit correlation: all of a unit's values near a unit mean
        groups = [m + 0.05 * rng.normal(size=8) for m in rng.normal(size=800)]
        e = exact_quantile_ci(groups, QuantileQuery(0.5))
        assert e.c > 2


class TestHistogramQuantileCI:
    def test_exact_bins_reproduce_exact_estimate(self):
        rng = np.random.default_rng(3)
        groups = clustered_groups(rng, 300)
        flat = np.concatenate(groups)
        spec = exact_bins(flat)
        obs = [(f"u{i:04d}", "control", x) for i, g in enumerate(groups) for x in g]
        hists = aggregate(obs, spec)
        for p in (0.1, 0.5, 0.9):
            q = QuantileQuery(p)
            he = histogram_quantile_ci(hists, spec, q)
            ee = exact_quantile_ci(groups, q)
            assert he.q == ee.q
            assert (he.x_L, he.x_U) == (ee.x_L, ee.x_U)
            assert he.c == pytest.approx(ee.c, rel=1e-12)
            assert he.se == pytest.approx(ee.se, rel=1e-12)

    def test_single_unit_rejected(self):
        spec = BinSpec.from_boundaries([0, 1, 2])
        with pytest.raises(EstimationError):
            histogram_quantile_ci([UnitHistogram("u", "control", {0: 50, 1: 50})], spec,
                                  QuantileQuery(0.5))

    def test_all_mass_in_one_bin_flags_low_resolution(self):
        spec = BinSpec.from_boundaries([0, 10, 20])
        hists = [UnitHistogram(f"u{i}", "control", {0: 5}) for i in range(20)]
        e = histogram_quantile_ci(hists, spec, QuantileQuery(0.5))
        assert 0 < e.q < 10
        assert e.q == pytest.approx(5.0)
        assert "low_resolution" in e.flags

    def test_error_bounded_by_containing_bin_width(self):
        rng = np.random.default_rng(9)
        groups = clustered_groups(rng, 1500)
        flat = np.concatenate(groups)
        obs = [(f"u{i:04d}", "control", x) for i, g in enumerate(groups) for x in g]
        for n_bins in (20, 100, 500):
            spec = historical_quantile_bins(flat, n_bins)
            hists = aggregate(obs, spec)
            for p in (0.25, 0.5, 0.75):
                q_exact = exact_quantile_ci(groups, QuantileQuery(p)).q
                q_hist = histogram_quantile_ci(hists, spec, QuantileQuery(p)).q
                j = spec.bin_index([q_exact])[0]
                width = spec.boundaries[j + 1] - spec.boundaries[j]
                assert abs(q_hist - q_exact) <= width + 1e-12


class TestEffects:
    def test_absolute(self):
        q = QuantileQuery(0.5)
        e = qte_absolute(est(5, 0.1), est(3, 0.1), q)
        assert e.tau == 2 and e.se == pytest.approx(math.sqrt(0.02))
        assert e.ci_hi - e.ci_lo == pytest.approx(2 * q.z * e.se)
        assert e.kind == "absolute"

    def test_identical_arms(self):
        e = qte_absolute(est(4, 0.2), est(4, 0.2), QuantileQuery(0.5))
        assert e.tau == 0 and e.p_value == 1.0

    def test_zero_se_p_values(self):
        q = QuantileQuery(0.5)
        assert qte_absolute(est(1, 0), est(1, 0), q).p_value == 1.0
        assert qte_absolute(est(2, 0), est(1, 0), q).p_value == 0.0

    def test_p_value_two_sided_normal(self):
        e = qte_absolute(est(1.96, 0.6), est(0, 0.8), QuantileQuery(0.5))
        assert e.p_value == pytest.approx(0.05, abs=1e-3)

    def test_relative(self):
        e = qte_relative(est(6, 0.2), est(5, 0.1), QuantileQuery(0.5))
        assert e.tau == pytest.approx(0.2)
        assert e.se**2 == pytest.approx((0.04 + 36 / 25 * 0.01) / 25)
        assert e.se**2 == pytest.approx(0.002176)

    def test_relative_zero_control_variance(self):
        e = qte_relative(est(6, 0.2), est(5, 0.0), QuantileQuery(0.5))
        assert e.se**2 == pytest.approx(0.04 / 25)

    def test_relative_symmetric_case(self):
        e = qte_relative(est(5, 0.3), est(5, 0.3), QuantileQuery(0.5))
        assert e.tau == 0 and e.se**2 == pytest.approx(2 * 0.09 / 25)

    def test_relative_rejects_zero_control(self):
        with pytest.raises(EstimationError):
            qte_relative(est(1, 0.1), est(0, 0.1), QuantileQuery(0.5))

    def test_arm_swap_patterns(self):
        q = QuantileQuery(0.5)
        a, b = est(6, 0.2), est(4, 0.1)
        assert qte_absolute(a, b, q).se == qte_absolute(b, a, q).se
        fwd, back = qte_relative(a, b, q).se ** 2, qte_relative(b, a, q).se ** 2
        assert fwd == pytest.approx((0.04 + 36 / 16 * 0.01) / 16)
        assert back == pytest.approx((0.01 + 16 / 36 * 0.04) / 36)
        assert fwd != pytest.approx(back)

    def test_relative_p_value_scale_free(self):
        obs = generate(SynthConfig(n_units=1500, effect="multiplicative", effect_size=1.1,
                                   clip=(0, 1e6), seed=4))
        base = ExactData.from_observations(obs)
        obs.values = obs.values * 7.5
        scaled = ExactData.from_observations(obs)
        for p in (0.25, 0.5, 0.9):
            q = QuantileQuery(p)
            e1 = estimate_effect(base, q, "relative").effect
            e2 = estimate_effect(scaled, q, "relative").effect
            assert e2.tau == pytest.approx(e1.tau, rel=1e-9)
            assert e2.p_value == pytest.approx(e1.p_value, rel=1e-9, abs=1e-300)


def test_estimate_effect_histogram_and_exact_agree_on_exact_bins():
    obs = generate(SynthConfig(n_units=400, effect="additive", effect_size=0.5, seed=12))
    spec = exact_bins(obs.values)
    table = HistogramTable.from_observations(obs, spec)
    exact = ExactData.from_observations(obs)
    for p in (0.25, 0.5, 0.75):
        q = QuantileQuery(p)
        h, e = estimate_effect(table, q), estimate_effect(exact, q)
        assert h.effect.tau == e.effect.tau
        assert h.effect.se == pytest.approx(e.effect.se, rel=1e-12)
        d = h.to_dict()
        assert set(d) == {"p", "arm_t", "arm_c", "effect", "flags"}
        assert set(d["arm_t"]) == {"q", "se", "c", "L", "U", "n"}
        assert set(d["effect"]) == {"kind", "tau", "se", "ci_lo", "ci_hi", "p_value"}
