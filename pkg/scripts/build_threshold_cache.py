"""CLI to pre-compute change point threshold tables into the threshold cache."""

import argparse

from app.logging_setup import configure_logging
from app.services.changepoint import calibrate_thresholds
from app.services.pipeline import stage_seed
from app.services.thresholds import CalibrationKind, KSStatistic


def main() -> None:
    parser = argparse.ArgumentParser(description="Warm the threshold cache (MARKETDYN_CACHE).")
    parser.add_argument("--kind", choices=[k.value for k in CalibrationKind], default="phase2")
    parser.add_argument("--n", type=int, required=True, help="Sample length (phase1) or tmax (phase2)")
    parser.add_argument("--alpha", type=float, default=0.05)
    parser.add_argument("--replications", type=int, default=10_000)
    parser.add_argument("--min-segment", type=int, default=30)
    parser.add_argument("--statistic", choices=[s.value for s in KSStatistic], default="raw")
    parser.add_argument("--horizon", type=int, default=None)
    parser.add_argument("--seed", type=int, required=True, help="Run seed (stage sub-stream is derived)")
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()

    configure_logging("INFO", "console")
    table = calibrate_thresholds(
        args.kind,
        args.n,
        args.alpha,
        args.replications,
        seed=stage_seed(args.seed, "breaks"),
        min_segment=args.min_segment,
        statistic=args.statistic,
        horizon=args.horizon,
        workers=args.workers,
    )

    print(f"Cached {table.kind.value} table covering t={table.start}..{table.horizon}.")


if __name__ == "__main__":
    main()
