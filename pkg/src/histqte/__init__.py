"""Quantile treatment effects with cluster-robust CIs from per-unit histograms."""

from .estimator import (
    ClusterStats,
    EffectEstimate,
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
from .histogram import (
    BinSpec,
    HistogramTable,
    RankLocator,
    UnitHistogram,
    aggregate,
    clip,
    exact_bins,
    historical_quantile_bins,
    interpolated_below,
    linear_bins,
    locate_rank,
    log_linear_bins,
    merge,
    pooled_counts,
    value_at_rank,
)
from .privacy import PrivacyParams, privatize_all, privatize_histogram, sample_two_sided_geometric
from .synth import Observations, SynthConfig, generate, generate_historical

__version__ = "0.1.0"
