"""Command-line entrypoint: one subcommand per analysis stage plus the full report."""

from __future__ import annotations

import argparse
import json
import sys
from collections.abc import Sequence
from pathlib import Path

import structlog

from app import __version__
from app.config import get_settings
from app.errors import (
    EXIT_INTERNAL,
    EXIT_OK,
    EXIT_USAGE,
    DataValidationError,
    MarketDynError,
    exit_code_for,
)
from app.logging_setup import configure_logging
from app.schemas.run_config import load_partition, load_run_config
from app.services import changepoint, cluster, distances, persistence, returns, spectra
from app.services.artifacts import dumps
from app.services.ingest import (
    AlignmentPolicy,
    Calendar,
    align_panels,
    load_panel,
    synth_one_factor,
    write_panel,
)
from app.services.pipeline import run_pipeline, stage_seed
from app.services.thresholds import CalibrationKind, KSStatistic

logger = structlog.get_logger()


def _path(value: str) -> Path:
    return Path(value)


def _add_panel_input(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", type=_path, required=True, help="Price panel CSV (date,<asset>...)")
    parser.add_argument(
        "--policy",
        choices=[p.value for p in AlignmentPolicy],
        default=AlignmentPolicy.FORWARD_FILL.value,
        help="Missing-value policy (default: forward_fill)",
    )
    parser.add_argument("--label", default=None, help="Collection label (default: file stem)")


def _panel(args: argparse.Namespace):
    return load_panel(args.input, args.policy, collection_label=args.label)


def _segment_window(args: argparse.Namespace, surfaces) -> tuple[int, int]:
    """Resolve `--segment` as `lo:hi` window indices or a partition label."""
    if ":" in args.segment:
        lo, _, hi = args.segment.partition(":")
        try:
            return int(lo), int(hi)
        except ValueError as exc:
            raise DataValidationError(f"segment '{args.segment}' is not 'lo:hi'") from exc
    if args.partition is None:
        raise DataValidationError(f"segment label '{args.segment}' needs --partition")
    for seg in load_partition(args.partition):
        if seg.label == args.segment:
            return spectra.window_range_for_dates(surfaces, seg.start, seg.end)
    raise DataValidationError(f"segment '{args.segment}' not found in {args.partition}")


def _merge_report(path: Path, key: str, value) -> None:
    report = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    report[key] = value
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(report), encoding="utf-8")


# --- subcommands ---------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> None:
    panel = _panel(args)
    write_panel(panel, args.output)
    if args.returns is not None:
        returns.write_returns(returns.log_returns(panel), args.returns)
    print(f"{panel.n_dates} dates x {panel.n_assets} assets -> {args.output}")


def cmd_spectra(args: argparse.Namespace) -> None:
    panel = _panel(args)
    if args.align_with is not None:
        panel, _ = align_panels(panel, load_panel(args.align_with, args.policy))
    r = returns.log_returns(panel)
    surface = spectra.explained_variance_surface(r, args.window)
    spectra.write_surface(surface, args.output)
    if args.leading_ratio is not None:
        spectra.write_leading_ratio(surface, args.leading_ratio)
    print(f"{len(surface.window_end_indices)} windows -> {args.output}")


def cmd_dd(args: argparse.Namespace) -> None:
    a = spectra.load_surface(args.a, collection_label=args.a.stem)
    b = spectra.load_surface(args.b, collection_label=args.b.stem)
    window = _segment_window(args, (a, b))
    score = spectra.dynamics_deviation(a, b, window, args.top_k)
    if args.report is not None:
        _merge_report(args.report, f"dynamics_deviation:{args.segment}", score)
    print(repr(score))


def cmd_trajectory(args: argparse.Namespace) -> None:
    matrix = distances.trajectory_matrix(_panel(args))
    distances.write_distance(matrix, args.output)
    print(f"norm {distances.normalized_norm(matrix)!r} -> {args.output}")


def cmd_breaks(args: argparse.Namespace) -> None:
    r = returns.log_returns(_panel(args))
    alpha = 1.0 / args.arl0 if args.arl0 is not None else args.alpha
    table = changepoint.calibrate_thresholds(
        CalibrationKind.PHASE2,
        args.tmax if args.tmax is not None else r.n_times,
        alpha,
        args.replications,
        seed=stage_seed(args.seed, "breaks"),
        min_segment=args.min_segment,
        statistic=args.statistic,
        horizon=args.horizon,
        workers=args.workers,
    )
    sets = changepoint.detect_panel(r, table, args.min_segment, workers=args.workers)
    changepoint.write_break_sets(sets, args.output)
    if args.matrix is not None:
        distances.write_distance(distances.breaks_matrix(sets), args.matrix)
    print(f"{sum(len(s) for s in sets)} breaks over {len(sets)} assets -> {args.output}")


def cmd_extremes(args: argparse.Namespace) -> None:
    r = returns.log_returns(_panel(args))
    measures = [
        distances.tail_measure(r.returns[:, i], args.tail_fraction, asset)
        for i, asset in enumerate(r.asset_ids)
    ]
    matrix = distances.extremes_matrix(measures, renormalize=not args.no_renormalize)
    distances.write_distance(matrix, args.output)
    print(f"norm {distances.normalized_norm(matrix)!r} -> {args.output}")


def cmd_persistence(args: argparse.Namespace) -> None:
    r = returns.log_returns(_panel(args))
    matrix = persistence.persistence_matrix(returns.rolling_risk_adjusted(r, args.ra_window))
    persistence.write_persistence(matrix, args.output, long_format=args.long)
    if args.density is not None:
        x, density = persistence.persistence_element_density(matrix, args.kde_grid)
        spectra.write_density(x, density, args.density)
    print(f"norm {persistence.persistence_norm(matrix)!r} -> {args.output}")


def cmd_cluster(args: argparse.Namespace) -> None:
    matrix = cluster.load_clustering_input(args.matrix)
    den = cluster.agglomerate(matrix, args.linkage)
    cluster.write_dendrogram(den, args.output_json, args.output_newick)
    if args.cut_k is not None or args.cut_height is not None:
        if args.cut_k is not None:
            assignment = cluster.cut(den, cluster.CutMode.K_CLUSTERS, args.cut_k)
        else:
            assignment = cluster.cut(den, cluster.CutMode.HEIGHT, args.cut_height)
        target = args.assignments or args.output_json.with_name(args.output_json.stem + "_clusters.csv")
        cluster.write_assignments(assignment, target)
        print(f"{assignment.n_clusters} clusters -> {target}")
    print(f"{den.n_leaves} leaves -> {args.output_json}")


def cmd_synth(args: argparse.Namespace) -> None:
    panel = synth_one_factor(
        args.assets,
        args.days,
        args.beta,
        args.sigma,
        args.seed,
        collection_label=args.label,
        calendar=args.calendar,
    )
    write_panel(panel, args.output)
    print(f"{panel.n_dates} dates x {panel.n_assets} assets -> {args.output}")


def cmd_report(args: argparse.Namespace) -> None:
    config = load_run_config(args.config)
    if args.workers is not None:
        config = config.model_copy(update={"workers": args.workers})
    manifest = run_pipeline(config)
    print(f"{len(manifest['artifacts'])} artifacts -> {config.output_dir}")


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog="marketdyn",
        description="Collective dynamics of financial price panels.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=settings.log_level, help="Log level (default: %(default)s)")
    parser.add_argument(
        "--log-format",
        choices=["json", "console"],
        default=settings.log_format,
        help="Log renderer (default: %(default)s)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Validate a price CSV and write its canonical form")
    _add_panel_input(p)
    p.add_argument("--output", type=_path, required=True, help="Canonical panel CSV")
    p.add_argument("--returns", type=_path, default=None, help="Also write log returns CSV")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("spectra", help="Rolling explained-variance surface")
    _add_panel_input(p)
    p.add_argument("--window", type=int, default=60, help="Rolling window T1 (default: 60)")
    p.add_argument("--output", type=_path, required=True, help="Surface CSV")
    p.add_argument("--leading-ratio", type=_path, default=None, help="Leading ratio series CSV")
    p.add_argument(
        "--align-with",
        type=_path,
        default=None,
        help="Restrict to the dates shared with this panel CSV before computing",
    )
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("dd", help="Dynamics deviation between two surfaces over one segment")
    p.add_argument("--a", type=_path, required=True, help="First surface CSV")
    p.add_argument("--b", type=_path, required=True, help="Second surface CSV")
    p.add_argument("--segment", required=True, help="Partition label or 'lo:hi' window indices")
    p.add_argument("--partition", type=_path, default=None, help="Partition JSON for label lookup")
    p.add_argument("--top-k", type=int, default=10, help="Ranks compared (default: 10)")
    p.add_argument("--report", type=_path, default=None, help="JSON report to record the score in")
    p.set_defaults(func=cmd_dd)

    p = sub.add_parser("trajectory", help="L1 distance matrix between price trajectories")
    _add_panel_input(p)
    p.add_argument("--output", type=_path, required=True, help="Distance matrix CSV")
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("breaks", help="Sequential change points per asset and the breaks matrix")
    _add_panel_input(p)
    level = p.add_mutually_exclusive_group()
    level.add_argument("--alpha", type=float, default=0.05, help="Per-step false alarm rate")
    level.add_argument("--arl0", type=float, default=None, help="In-control run length (1/alpha)")
    p.add_argument("--min-segment", type=int, default=30, help="Minimum segment length m")
    p.add_argument("--replications", type=int, default=10_000, help="Monte Carlo replications")
    p.add_argument(
        "--statistic",
        choices=[s.value for s in KSStatistic],
        default=KSStatistic.RAW.value,
        help="Split statistic (default: raw)",
    )
    p.add_argument("--horizon", type=int, default=None, help="Calibration horizon")
    p.add_argument("--tmax", type=int, default=None, help="Longest stream the table covers")
    p.add_argument("--seed", type=int, required=True, help="Run seed")
    p.add_argument("--workers", type=int, default=None, help="Worker threads")
    p.add_argument("--output", type=_path, required=True, help="Break sets CSV")
    p.add_argument("--matrix", type=_path, default=None, help="Breaks distance matrix CSV")
    p.set_defaults(func=cmd_breaks)

    p = sub.add_parser("extremes", help="Wasserstein distances between return tails")
    _add_panel_input(p)
    p.add_argument("--tail-fraction", type=float, default=0.1, help="Mass per tail (default: 0.1)")
    p.add_argument("--no-renormalize", action="store_true", help="Keep tails at their raw mass")
    p.add_argument("--output", type=_path, required=True, help="Distance matrix CSV")
    p.set_defaults(func=cmd_extremes)

    p = sub.add_parser("persistence", help="Kendall tau persistence of risk-adjusted ranks")
    _add_panel_input(p)
    p.add_argument("--ra-window", type=int, default=61, help="Risk-adjusted window (default: 61)")
    p.add_argument("--output", type=_path, required=True, help="Persistence matrix CSV")
    p.add_argument("--long", action="store_true", help="Write s,t,tau rows instead of a matrix")
    p.add_argument("--density", type=_path, default=None, help="KDE of matrix elements CSV")
    p.add_argument("--kde-grid", type=int, default=512, help="KDE grid points (default: 512)")
    p.set_defaults(func=cmd_persistence)

    p = sub.add_parser("cluster", help="Hierarchical clustering of a distance or persistence matrix")
    p.add_argument("--matrix", type=_path, required=True, help="Matrix CSV written by another command")
    p.add_argument(
        "--linkage",
        choices=[link.value for link in cluster.Linkage],
        default=cluster.Linkage.AVERAGE.value,
        help="Linkage (default: average)",
    )
    cut = p.add_mutually_exclusive_group()
    cut.add_argument("--cut-k", type=int, default=None, help="Cut into k clusters")
    cut.add_argument("--cut-height", type=float, default=None, help="Cut at a merge height")
    p.add_argument("--output-json", type=_path, required=True, help="Dendrogram JSON")
    p.add_argument("--output-newick", type=_path, default=None, help="Dendrogram Newick")
    p.add_argument("--assignments", type=_path, default=None, help="Cluster assignments CSV")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("synth", help="One-factor synthetic price panel")
    p.add_argument("--assets", type=int, default=20, help="Number of assets M")
    p.add_argument("--days", type=int, default=600, help="Number of dates T")
    p.add_argument("--beta", type=float, default=0.8, help="Factor loading in [0, 1)")
    p.add_argument("--sigma", type=float, default=0.01, help="Return volatility")
    p.add_argument("--seed", type=int, required=True, help="Generator seed")
    p.add_argument(
        "--calendar",
        choices=[c.value for c in Calendar],
        default=Calendar.DAILY.value,
        help="Date calendar (default: daily)",
    )
    p.add_argument("--label", default="synthetic", help="Collection label")
    p.add_argument("--output", type=_path, required=True, help="Panel CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="Run the full pipeline from a JSON config")
    p.add_argument("--config", type=_path, required=True, help="Run config JSON")
    p.add_argument("--workers", type=int, default=None, help="Override config workers")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for bad usage
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    configure_logging(args.log_level, args.log_format)
    try:
        args.func(args)
    except (MarketDynError, FileNotFoundError) as exc:
        logger.error("command failed", command=args.command, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except Exception as exc:
        logger.exception("command crashed", command=args.command, error=repr(exc))
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
