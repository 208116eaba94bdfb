"""Evaluation harness: full-data baseline comparison, A/A tests and DP sweeps."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .estimator import (
    EstimationError,
    ExactData,
    QuantileQuery,
    _table_quantile_ci,
    estimate_effect,
    qte,
)
from .histogram import (
    BinSpec,
    HistogramTable,
    historical_quantile_bins,
    linear_bins,
    log_linear_bins,
)
from .privacy import DP_MODES, PrivacyParams, privatize_pooled, privatize_table
from .synth import Observations


def _rel_err(value: float, baseline: float) -> Optional[float]:
    if baseline == 0:
        return None
    return 100.0 * (value - baseline) / abs(baseline)


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)

    columns = (
        "strategy",
        "n_bins",
        "p",
        "baseline_tau",
        "baseline_ci_width",
        "hist_tau",
        "hist_ci_width",
        "hist_tau_rel_err",
        "hist_ci_width_rel_err",
        "flags",
    )

    def row(self, p: float, strategy: Optional[str] = None, n_bins: Optional[int] = None) -> dict:
        for r in self.rows:
            if r["p"] == p and strategy in (None, r["strategy"]) and n_bins in (None, r["n_bins"]):
                return r
        raise KeyError((p, strategy, n_bins))

    def extend(self, other: "ComparisonReport") -> None:
        self.rows.extend(other.rows)

    def to_dict(self) -> dict:
        return {"rows": self.rows}

    def csv_rows(self):
        for r in self.rows:
            yield {k: (";".join(r[k]) if k == "flags" else r[k]) for k in self.columns}


def compare_to_baseline(
    observations: Observations,
    spec: BinSpec,
    quantiles: Sequence[float],
    alpha: float = 0.05,
    kind: str = "absolute",
    exact: Optional[ExactData] = None,
) -> ComparisonReport:
    """QTE on raw observations vs on histograms of the same data.

    Relative errors are signed percentages ``100 * (hist - baseline) / |baseline|``;
    they are None (and the row flagged) when the baseline value is 0.
    """
    exact = exact if exact is not None else ExactData.from_observations(observations)
    table = HistogramTable.from_observations(observations, spec)
    report = ComparisonReport()
    for p in quantiles:
        query = QuantileQuery(p, alpha)
        row = {"strategy": spec.strategy, "n_bins": spec.n_bins, "p": p}
        flags = []
        try:
            base = estimate_effect(exact, query, kind).effect
            hist_rep = estimate_effect(table, query, kind)
        except EstimationError as e:
            row.update({k: None for k in ComparisonReport.columns if k not in row})
            row["flags"] = [f"error: {e}"]
            report.rows.append(row)
            continue
        hist = hist_rep.effect
        flags.extend(hist_rep.flags)
        bw, hw = base.ci_hi - base.ci_lo, hist.ci_hi - hist.ci_lo
        tau_err, width_err = _rel_err(hist.tau, base.tau), _rel_err(hw, bw)
        if tau_err is None:
            flags.append("baseline_tau_zero")
        if width_err is None:
            flags.append("baseline_ci_width_zero")
        row.update(
            baseline_tau=base.tau,
            baseline_ci_width=bw,
            hist_tau=hist.tau,
            hist_ci_width=hw,
            hist_tau_rel_err=tau_err,
            hist_ci_width_rel_err=width_err,
            flags=flags,
        )
        report.rows.append(row)
    return report


def make_bins(
    strategy: str,
    n_bins: int,
    historical=None,
    lo: Optional[float] = None,
    hi: Optional[float] = None,
) -> BinSpec:
    if strategy == "historical":
        if historical is None:
            raise ValueError("historical bins need historical values")
        return historical_quantile_bins(historical, n_bins)
    if lo is None or hi is None:
        if historical is None:
            raise ValueError(f"{strategy} bins need lo/hi or historical values")
        h = np.asarray(historical, dtype=float)
        lo = h.min() if lo is None else lo
        hi = h.max() if hi is None else hi
    if strategy == "linear":
        return linear_bins(lo, hi, n_bins)
    if strategy == "loglinear":
        return log_linear_bins(lo, hi, n_bins)
    raise ValueError(f"unknown strategy {strategy!r}")


def compare_grid(
    observations: Observations,
    historical,
    strategies: Sequence[str],
    n_bins_list: Sequence[int],
    quantiles: Sequence[float],
    alpha: float = 0.05,
    kind: str = "absolute",
    lo: Optional[float] = None,
    hi: Optional[float] = None,
) -> ComparisonReport:
    """One comparison row per (strategy, bin count, quantile) cell."""
    exact = ExactData.from_observations(observations)
    report = ComparisonReport()
    for strategy in strategies:
        for nb in n_bins_list:
            spec = make_bins(strategy, nb, historical, lo, hi)
            part = compare_to_baseline(observations, spec, quantiles, alpha, kind, exact)
            for r in part.rows:
                r["n_bins_requested"] = nb
            report.extend(part)
    return report


def permute_arms(arms, rng: np.random.Generator) -> np.ndarray:
    arms = np.asarray(arms, dtype=bool)
    n_t = int(arms.sum())
    if n_t < 2 or arms.size - n_t < 2:
        raise ValueError("each arm needs at least two units")
    return rng.permutation(arms)


def _kolmogorov_sf(lam: float) -> float:
    if lam <= 0:
        return 1.0
    if lam < 0.6:
        # small-argument form of the Kolmogorov CDF; the alternating series
        # converges too slowly here
        j = np.arange(1, 101)
        cdf = math.sqrt(2 * math.pi) / lam * np.exp(
            -((2 * j - 1) ** 2) * math.pi**2 / (8 * lam**2)
        ).sum()
        return float(min(max(1.0 - cdf, 0.0), 1.0))
    j = np.arange(1, 101)
    q = 2 * np.sum((-1.0) ** (j - 1) * np.exp(-2 * j**2 * lam**2))
    return float(min(max(q, 0.0), 1.0))


def ks_uniformity(p_values) -> tuple[float, float]:
    """Two-sided one-sample KS statistic against Uniform(0, 1) and its asymptotic p-value."""
    x = np.sort(np.asarray(p_values, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("empty sample")
    if np.any((x < 0) | (x > 1)) or np.any(np.isnan(x)):
        raise ValueError("p-values must lie in [0, 1]")
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))
    return d, _kolmogorov_sf(math.sqrt(n) * d)


@dataclass
class AATestReport:
    n_permutations: int
    p: float
    p_values: list
    ks_statistic: float
    ks_p_value: float
    cover_95: float
    cover_99: float
    n_failed: int = 0
    trials: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "trials"}
        return d

    def csv_rows(self):
        yield from self.trials


def aa_test(
    data: Union[ExactData, HistogramTable],
    p: float,
    alpha: float = 0.05,
    n_permutations: int = 1000,
    seed: int = 0,
    kind: str = "absolute",
) -> AATestReport:
    """Re-estimate the QTE under unit-level permutations of the arm labels.

    Coverage is the fraction of successful permutations whose 95% (99%) CI
    contains 0; the KS test is run on the p-values at level ``alpha``.
    """
    if n_permutations < 100:
        raise ValueError("need at least 100 permutations")
    if data.arms is None:
        raise ValueError("data carries no arm assignment")
    alphas = {"95": 0.05, "99": 0.01}
    p_values, covered, trials, failed = [], {k: 0 for k in alphas}, [], 0
    for i in range(n_permutations):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        permuted = data.with_arms(permute_arms(data.arms, rng))
        try:
            main = estimate_effect(permuted, QuantileQuery(p, alpha), kind)
            by_level = {}
            for key, a in alphas.items():
                by_level[key] = main if a == alpha else estimate_effect(
                    permuted, QuantileQuery(p, a), kind
                )
        except EstimationError:
            failed += 1
            trials.append({"trial": i, "tau": None, "se": None, "p_value": None,
                           "cover_95": None, "cover_99": None})
            continue
        eff = main.effect
        p_values.append(eff.p_value)
        row = {"trial": i, "tau": eff.tau, "se": eff.se, "p_value": eff.p_value}
        for key, rep in by_level.items():
            hit = rep.effect.ci_lo <= 0 <= rep.effect.ci_hi
            covered[key] += hit
            row[f"cover_{key}"] = bool(hit)
        trials.append(row)
    ok = len(p_values)
    if ok == 0:
        raise EstimationError("every permutation failed to estimate")
    d, ks_p = ks_uniformity(p_values)
    return AATestReport(
        n_permutations=n_permutations,
        p=p,
        p_values=p_values,
        ks_statistic=d,
        ks_p_value=ks_p,
        cover_95=100.0 * covered["95"] / ok,
        cover_99=100.0 * covered["99"] / ok,
        n_failed=failed,
        trials=trials,
    )


def _summary(x: np.ndarray) -> dict:
    if x.size == 0:
        return {"mean": None, "sd": None, "q05": None, "q25": None, "q50": None,
                "q75": None, "q95": None}
    qs = np.quantile(x, [0.05, 0.25, 0.5, 0.75, 0.95])
    return {
        "mean": float(x.mean()),
        "sd": float(x.std(ddof=1)) if x.size > 1 else 0.0,
        "q05": float(qs[0]),
        "q25": float(qs[1]),
        "q50": float(qs[2]),
        "q75": float(qs[3]),
        "q95": float(qs[4]),
    }


@dataclass
class DPSweepReport:
    p: float
    noiseless_tau: float
    noiseless_se: float
    mode: str
    per_epsilon: list
    trials: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "trials"}

    def csv_rows(self):
        yield from self.trials

    def sd_tau(self) -> dict:
        return {row["epsilon"]: row["tau"]["sd"] for row in self.per_epsilon}


def _pooled_noisy_effect(table, query, kind, params, rng, strict):
    ests = []
    for arm in ("treatment", "control"):
        mask = table.arm_mask(arm)
        clean = np.asarray(table.counts[mask].sum(axis=0)).ravel()
        noisy = privatize_pooled(np.round(clean), params, rng).astype(float)
        ests.append(_table_quantile_ci(table, query, mask, strict=strict, pooled=noisy))
    return qte(ests[0], ests[1], query, kind)


def dp_sweep(
    table: HistogramTable,
    p: float,
    epsilons: Sequence[float],
    n_draws: int = 500,
    seed: int = 0,
    alpha: float = 0.05,
    kind: str = "absolute",
    sensitivity: int = 1,
    mode: str = "per-unit",
) -> DPSweepReport:
    """Distribution of the QTE and its standard error over repeated DP noise draws.

    In ``pooled`` mode the noise is added to each arm's pooled histogram,
    which drives the quantile and rank-bound readouts; the per-unit indicator
    sums still come from the noiseless unit histograms.
    """
    if n_draws < 100:
        raise ValueError("need at least 100 draws")
    if mode not in DP_MODES:
        raise ValueError(f"unknown dp mode {mode!r}")
    query = QuantileQuery(p, alpha)
    base = estimate_effect(table, query, kind).effect
    m = table.counts
    dense = table.with_counts(m.toarray() if hasattr(m, "toarray") else np.asarray(m))
    per_eps, trials = [], []
    for ei, eps in enumerate(epsilons):
        params = PrivacyParams(eps, sensitivity, seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, ei]))
        taus, ses, failed = [], [], 0
        for d in range(n_draws):
            try:
                if mode == "per-unit":
                    eff = estimate_effect(privatize_table(dense, params, rng), query, kind,
                                          strict=False).effect
                else:
                    eff = _pooled_noisy_effect(table, query, kind, params, rng, False)
            except EstimationError:
                failed += 1
                trials.append({"epsilon": eps, "draw": d, "tau": None, "se": None})
                continue
            taus.append(eff.tau)
            ses.append(eff.se)
            trials.append({"epsilon": eps, "draw": d, "tau": eff.tau, "se": eff.se})
        ses_a = np.asarray(ses)
        per_eps.append({
            "epsilon": eps,
            "n_draws": n_draws,
            "n_failed": failed,
            "tau": _summary(np.asarray(taus)),
            "se": _summary(ses_a),
            "se_bias": float(ses_a.mean() - base.se) if ses_a.size else None,
        })
    return DPSweepReport(p, base.tau, base.se, mode, per_eps, trials)
