"""Command-line front end; commands compose through files (or stdin/stdout)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional

import numpy as np

from . import formats
from .estimator import EstimationError, ExactData, QuantileQuery, estimate_effect
from .harness import aa_test, compare_grid, dp_sweep, make_bins
from .histogram import (
    AggregationError,
    BinSpecError,
    HistogramTable,
    UnitHistogram,
    aggregate,
    log_linear_bins,
    pooled_counts,
)
from .privacy import DP_MODES, PrivacyParams, privatize_all, privatize_pooled, unit_rng
from .synth import Observations, SynthConfig, generate, generate_historical

log = logging.getLogger("histqte")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _load_input(path: Optional[str], bins: Optional[str]):
    """Observation CSV -> ExactData, histogram JSONL -> HistogramTable."""
    with formats.open_in(path) as f:
        kind, stream = formats.sniff_format(f)
    if kind == "empty":
        raise UsageError(f"input {path or '-'} is empty")
    if kind == "histograms":
        if not bins:
            raise UsageError("histogram input needs --bins")
        spec = formats.read_binspec(bins)
        return HistogramTable.from_histograms(formats.iter_histograms(stream), spec)
    obs = Observations.from_records(formats.iter_observations(stream))
    if bins:
        return HistogramTable.from_observations(obs, formats.read_binspec(bins))
    return ExactData.from_observations(obs)


def cmd_bins(args) -> int:
    historical = None
    if args.strategy == "historical":
        if not args.from_file:
            raise UsageError("--strategy historical needs --from FILE")
        historical = formats.read_values(args.from_file)
    elif args.from_file:
        historical = formats.read_values(args.from_file)
    if args.strategy == "loglinear" and args.log_floor is not None:
        if historical is None and (args.lo is None or args.hi is None):
            raise UsageError("loglinear bins need --lo/--hi or --from FILE")
        lo = args.lo if args.lo is not None else float(np.min(historical))
        hi = args.hi if args.hi is not None else float(np.max(historical))
        spec = log_linear_bins(lo, hi, args.n, args.log_floor)
    else:
        spec = make_bins(args.strategy, args.n, historical, args.lo, args.hi)
    formats.write_json(spec.to_dict(), args.out)
    log.info(
        "%d bins (%d requested, %d duplicate boundaries collapsed)",
        spec.n_bins, args.n, args.n - spec.n_bins,
    )
    return 0


def cmd_aggregate(args) -> int:
    spec = formats.read_binspec(args.bins)
    with formats.open_in(args.input) as f:
        hists = aggregate(formats.iter_observations(f), spec)
    if not hists:
        log.warning("no observations in input; writing an empty histogram file")
    with formats.open_out(args.out) as f:
        formats.write_histograms(hists, f)
    return 0


def cmd_estimate(args) -> int:
    data = _load_input(args.input, args.bins)
    rows, failed = [], 0
    for p in args.p:
        try:
            rows.append(estimate_effect(data, QuantileQuery(p, args.alpha), args.kind).to_dict())
        except (EstimationError, ValueError) as e:
            failed += 1
            log.error("p=%g: %s", p, e)
            rows.append({"p": p, "error": str(e), "flags": ["error"]})
    mode = "histogram" if isinstance(data, HistogramTable) else "exact"
    report = {"mode": mode, "alpha": args.alpha, "kind": args.kind, "estimates": rows}
    formats.write_json(report, args.out)
    return 1 if failed else 0


def cmd_privatize(args) -> int:
    spec = formats.read_binspec(args.bins)
    seed = args.dp_seed if args.dp_seed is not None else (args.seed or 0)
    params = PrivacyParams(args.epsilon, args.sensitivity, seed)
    with formats.open_in(args.input) as f:
        hists = list(formats.iter_histograms(f))
    if args.dp_mode == "per-unit":
        out = privatize_all(hists, params, spec.n_bins)
    else:
        out = []
        for arm in ("treatment", "control"):
            pooled, _ = pooled_counts(hists, arm, spec.n_bins)
            noisy = privatize_pooled(pooled, params, unit_rng(seed, f"pooled:{arm}"))
            out.append(UnitHistogram.from_dense(f"pooled:{arm}", arm, noisy))
    with formats.open_out(args.out) as f:
        formats.write_histograms(out, f)
    return 0


def _write_report(report, args) -> None:
    formats.write_json(report.to_dict(), args.out)
    if args.csv:
        formats.write_csv(report.csv_rows(), args.csv)


def cmd_aa_test(args) -> int:
    data = _load_input(args.input, args.bins)
    report = aa_test(data, args.p, args.alpha, args.perms, args.seed or 0, args.kind)
    _write_report(report, args)
    log.info(
        "KS D=%.4f p=%.3g, 95%% cover %.2f%%, 99%% cover %.2f%%, %d failed",
        report.ks_statistic, report.ks_p_value, report.cover_95, report.cover_99,
        report.n_failed,
    )
    return 0


def cmd_compare(args) -> int:
    with formats.open_in(args.obs) as f:
        obs = Observations.from_records(formats.iter_observations(f))
    historical = formats.read_values(args.historical) if args.historical else None
    report = compare_grid(
        obs, historical, args.strategies.split(","), args.n_bins, args.p,
        args.alpha, args.kind, args.lo, args.hi,
    )
    _write_report(report, args)
    return 0


def cmd_dp_sweep(args) -> int:
    data = _load_input(args.input, args.bins)
    if not isinstance(data, HistogramTable):
        raise UsageError("dp-sweep needs histogram input (or observations with --bins)")
    report = dp_sweep(
        data, args.p, args.epsilons, args.draws, args.seed or 0, args.alpha,
        args.kind, args.sensitivity, args.dp_mode,
    )
    _write_report(report, args)
    return 0


def cmd_simulate(args) -> int:
    with formats.open_in(args.config) as f:
        cfg = SynthConfig.from_dict(json.load(f))
    if args.historical and not args.historical_out:
        raise UsageError("--historical needs --historical-out")
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    with formats.open_out(args.out) as f:
        f.write(generate(cfg).to_csv())
    if args.historical:
        formats.write_values(
            generate_historical(cfg, args.historical, args.historical_shift),
            args.historical_out,
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path (default stdout)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(
        prog="histqte",
        description="Quantile treatment effects from per-unit histograms.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    def quantile_opts(p, multi: bool):
        if multi:
            p.add_argument("--p", type=_floats, default=[0.5, 0.95, 0.99])
        else:
            p.add_argument("--p", type=float, default=0.5)
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--kind", choices=("absolute", "relative"), default="absolute")

    p = add("bins", cmd_bins, "derive a bin spec")
    p.add_argument("--strategy", choices=("linear", "loglinear", "historical"), required=True)
    p.add_argument("--n", type=int, required=True, help="number of bins")
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--log-floor", type=float)
    p.add_argument("--from", dest="from_file", help="historical values file")

    p = add("aggregate", cmd_aggregate, "aggregate observations into unit histograms")
    p.add_argument("input", nargs="?", help="observations CSV (default stdin)")
    p.add_argument("--bins", required=True)

    p = add("estimate", cmd_estimate, "estimate quantile treatment effects")
    p.add_argument("input", nargs="?", help="observations CSV or histogram JSONL")
    p.add_argument("--bins")
    quantile_opts(p, multi=True)

    p = add("privatize", cmd_privatize, "add geometric DP noise to histograms")
    p.add_argument("input", nargs="?")
    p.add_argument("--bins", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--sensitivity", type=int, default=1)
    p.add_argument("--dp-seed", type=_seed)
    p.add_argument("--dp-mode", choices=DP_MODES, default="per-unit")

    p = add("aa-test", cmd_aa_test, "A/A permutation test")
    p.add_argument("input", nargs="?")
    p.add_argument("--bins")
    p.add_argument("--perms", type=int, default=1000)
    p.add_argument("--csv", help="per-permutation CSV output")
    quantile_opts(p, multi=False)

    p = add("compare", cmd_compare, "histogram vs full-data baseline")
    p.add_argument("--obs", required=True)
    p.add_argument("--historical")
    p.add_argument("--strategies", default="linear,loglinear,historical")
    p.add_argument("--n-bins", type=_ints, default=[20, 50, 100, 200, 500, 1000])
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--csv")
    quantile_opts(p, multi=True)

    p = add("dp-sweep", cmd_dp_sweep, "QTE distribution under repeated DP noise")
    p.add_argument("input", nargs="?")
    p.add_argument("--bins")
    p.add_argument("--epsilons", type=_floats, default=[10.0, 5.0, 1.0, 0.5])
    p.add_argument("--draws", type=int, default=500)
    p.add_argument("--sensitivity", type=int, default=1)
    p.add_argument("--dp-mode", choices=DP_MODES, default="per-unit")
    p.add_argument("--csv")
    quantile_opts(p, multi=False)

    p = add("simulate", cmd_simulate, "generate a synthetic experiment")
    p.add_argument("--config", required=True, help="SynthConfig JSON")
    p.add_argument("--historical", type=int, default=0, help="also draw N historical values")
    p.add_argument("--historical-shift", type=float, default=0.0)
    p.add_argument("--historical-out", help="historical values CSV path")
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("out", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.ERROR if args.quiet else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except (UsageError, formats.FormatError, BinSpecError, AggregationError,
            EstimationError, ValueError, OSError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
