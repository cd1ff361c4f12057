"""End-to-end pipeline over two collections.

Stages run in dependency order and write plot-ready CSV/JSON artifacts into the
run directory. All randomness derives from the config seed through named
per-stage sub-streams, so a single stage rerun from the CLI reproduces the
pipeline's output for that stage.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
import structlog

from app.schemas.run_config import RunConfig
from app.services import changepoint, cluster, distances, persistence, returns, spectra
from app.services.artifacts import ArtifactRun, config_hash
from app.services.ingest import PricePanel, align_panels, load_panel, make_partition
from app.services.returns import ReturnsPanel
from app.services.tables import write_frame
from app.services.thresholds import CalibrationKind

logger = structlog.get_logger()

ARTIFACT_CLASSES = (
    "returns",
    "surface",
    "leading_ratio",
    "mean_spectrum",
    "dynamics_deviation",
    "correlation_density",
    "trajectory_matrix",
    "break_sets",
    "breaks_matrix",
    "extremes_matrix",
    "returns_matrix",
    "affinity_matrix",
    "persistence_matrix",
    "dendrogram",
)


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic sub-stream seed for a named stage."""
    sequence = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


@dataclass
class _Collection:
    label: str
    panel: PricePanel
    aligned: PricePanel
    returns: ReturnsPanel | None = None
    aligned_returns: ReturnsPanel | None = None
    matrices: dict[str, Any] = field(default_factory=dict)


def _cut(run: ArtifactRun, config: RunConfig, den: cluster.Dendrogram, stem: str, stage: str) -> int | None:
    if config.cut_k is not None:
        k = min(config.cut_k, den.n_leaves)
        assignment = cluster.cut(den, cluster.CutMode.K_CLUSTERS, k)
    elif config.cut_height is not None:
        assignment = cluster.cut(den, cluster.CutMode.HEIGHT, config.cut_height)
    else:
        return None
    target = cluster.write_assignments(assignment, run.path(f"{stem}_clusters.csv"))
    run.record("cluster_assignments", stage, target)
    return assignment.n_clusters


def run_pipeline(config: RunConfig) -> dict[str, Any]:
    """Run every stage and return the finalized manifest."""
    run = ArtifactRun.create(
        config.output_dir,
        seed=config.seed,
        config_sha256=config_hash(config.hash_payload()),
        collections=[c.label for c in config.collections],
    )
    report: dict[str, Any] = {"norms": {}, "dynamics_deviation": {}, "breaks": {}, "clusters": {}}

    with run.stage("ingest"):
        panels = [
            load_panel(c.path, config.alignment_policy, collection_label=c.label)
            for c in config.collections
        ]
        aligned = align_panels(panels[0], panels[1])
        collections = [
            _Collection(label=p.collection_label, panel=p, aligned=a) for p, a in zip(panels, aligned)
        ]
        partition = make_partition(aligned[0], config.partition)

    with run.stage("returns"):
        for c in collections:
            c.returns = returns.log_returns(c.panel)
            c.aligned_returns = returns.log_returns(c.aligned)
            target = run.path(f"returns_{c.label}.csv")
            returns.write_returns(c.returns, target)
            run.record("returns", "returns", target)

    with run.stage("spectra"):
        aligned_surfaces = []
        for c in collections:
            surface = spectra.explained_variance_surface(c.returns, config.spectra_window)
            target = run.path(f"surface_{c.label}.csv")
            spectra.write_surface(surface, target)
            run.record("surface", "spectra", target)
            target = run.path(f"leading_ratio_{c.label}.csv")
            spectra.write_leading_ratio(surface, target)
            run.record("leading_ratio", "spectra", target)
            aligned_surfaces.append(
                spectra.explained_variance_surface(c.aligned_returns, config.spectra_window)
            )

        first = max(s.first for s in aligned_surfaces)
        last = min(s.last for s in aligned_surfaces)
        dd_rows = []
        for segment in partition.segments:
            lo, hi = partition.window_range(segment.label, first, last)
            score = spectra.dynamics_deviation(
                aligned_surfaces[0], aligned_surfaces[1], (lo, hi), config.top_k
            )
            dd_rows.append(
                {"period": segment.label, "start_window": lo, "end_window": hi,
                 "windows": hi - lo + 1, "dynamics_deviation": score}
            )
            report["dynamics_deviation"][segment.label] = score
        target = run.path("dynamics_deviation.csv")
        write_frame(pd.DataFrame(dd_rows), target)
        run.record("dynamics_deviation", "spectra", target)

        for c, surface in zip(collections, aligned_surfaces):
            correlations = spectra.rolling_correlation(c.aligned_returns, config.spectra_window)
            spectrum_rows = []
            for segment in partition.segments:
                window = partition.window_range(segment.label, first, last)
                mean = spectra.mean_spectrum(surface, window)
                spectrum_rows.append(
                    {"period": segment.label, **{f"lambda_{m + 1}": v for m, v in enumerate(mean)}}
                )
                x, density = spectra.correlation_element_density(correlations, window, config.kde_grid)
                target = run.path(f"correlation_density_{c.label}_{segment.label}.csv")
                spectra.write_density(x, density, target)
                run.record("correlation_density", "spectra", target, period=segment.label)
            target = run.path(f"mean_spectrum_{c.label}.csv")
            write_frame(pd.DataFrame(spectrum_rows), target)
            run.record("mean_spectrum", "spectra", target)

    with run.stage("trajectory"):
        for c in collections:
            matrix = distances.trajectory_matrix(c.panel)
            c.matrices["trajectory"] = matrix
            target = distances.write_distance(matrix, run.path(f"trajectory_{c.label}.csv"))
            run.record("trajectory_matrix", "trajectory", target)
            report["norms"][f"trajectory_{c.label}"] = distances.normalized_norm(matrix)

    with run.stage("breaks"):
        cp = config.changepoint
        table = changepoint.calibrate_thresholds(
            CalibrationKind.PHASE2,
            max(c.returns.n_times for c in collections),
            cp.alpha,
            cp.replications,
            seed=stage_seed(config.seed, "breaks"),
            min_segment=cp.min_segment,
            statistic=cp.statistic,
            horizon=cp.horizon,
            workers=config.workers,
        )
        report["calibration"] = {"tmax": table.tmax, "horizon": table.horizon}
        for c in collections:
            sets = changepoint.detect_panel(c.returns, table, cp.min_segment, workers=config.workers)
            target = run.path(f"break_sets_{c.label}.csv")
            changepoint.write_break_sets(sets, target)
            run.record("break_sets", "breaks", target)
            matrix = distances.breaks_matrix(sets)
            c.matrices["breaks"] = matrix
            target = distances.write_distance(matrix, run.path(f"breaks_{c.label}.csv"))
            run.record("breaks_matrix", "breaks", target)
            report["norms"][f"breaks_{c.label}"] = distances.normalized_norm(matrix)
            report["breaks"][c.label] = {s.asset_id: len(s) for s in sets}

    with run.stage("extremes"):
        for c in collections:
            measures = [
                distances.tail_measure(c.returns.returns[:, i], config.tail_fraction, asset)
                for i, asset in enumerate(c.returns.asset_ids)
            ]
            matrix = distances.extremes_matrix(measures, config.renormalize_tails)
            target = distances.write_distance(matrix, run.path(f"extremes_{c.label}.csv"))
            run.record("extremes_matrix", "extremes", target)
            report["norms"][f"extremes_{c.label}"] = distances.normalized_norm(matrix)

    with run.stage("returns_matrix"):
        for c in collections:
            matrix = distances.returns_matrix(returns.total_returns(c.returns), c.returns.asset_ids)
            target = distances.write_distance(matrix, run.path(f"returns_matrix_{c.label}.csv"))
            run.record("returns_matrix", "returns_matrix", target)
            report["norms"][f"returns_{c.label}"] = distances.normalized_norm(matrix)

    with run.stage("affinity"):
        ids: list[str] = []
        totals: list[np.ndarray] = []
        measures: list[distances.TailMeasure] = []
        for c in collections:
            names = distances.combined_ids(c.label, c.aligned_returns.asset_ids)
            ids.extend(names)
            totals.append(returns.total_returns(c.aligned_returns))
            measures.extend(
                distances.tail_measure(c.aligned_returns.returns[:, i], config.tail_fraction, name)
                for i, name in enumerate(names)
            )
        combined = {
            "returns": distances.returns_matrix(np.concatenate(totals), ids),
            "extremes": distances.extremes_matrix(measures, config.renormalize_tails),
        }
        for name, matrix in combined.items():
            affinity = distances.to_affinity(matrix)
            target = distances.write_distance(affinity, run.path(f"affinity_{name}.csv"))
            run.record("affinity_matrix", "affinity", target)

    with run.stage("persistence"):
        for c in collections:
            ra = returns.rolling_risk_adjusted(c.returns, config.ra_window)
            matrix = persistence.persistence_matrix(ra)
            c.matrices["persistence"] = matrix
            target = persistence.write_persistence(matrix, run.path(f"persistence_{c.label}.csv"))
            run.record("persistence_matrix", "persistence", target)
            x, density = persistence.persistence_element_density(matrix, config.kde_grid)
            target = run.path(f"persistence_density_{c.label}.csv")
            spectra.write_density(x, density, target)
            run.record("persistence_density", "persistence", target)
            report["norms"][f"persistence_{c.label}"] = persistence.persistence_norm(matrix)

    with run.stage("cluster"):
        for c in collections:
            for name in ("trajectory", "breaks", "persistence"):
                den = cluster.agglomerate(c.matrices[name], config.linkage)
                stem = f"dendrogram_{name}_{c.label}"
                cluster.write_dendrogram(den, run.path(f"{stem}.json"), run.path(f"{stem}.nwk"))
                run.record("dendrogram", "cluster", run.path(f"{stem}.json"))
                run.record("dendrogram", "cluster", run.path(f"{stem}.nwk"))
                count = _cut(run, config, den, f"{name}_{c.label}", "cluster")
                if count is not None:
                    report["clusters"][f"{name}_{c.label}"] = count

    run.write_json("report", "report", "report.json", report)
    manifest = run.finalize()
    logger.info(
        "pipeline finished",
        output_dir=str(config.output_dir),
        artifacts=len(manifest["artifacts"]),
    )
    return manifest
