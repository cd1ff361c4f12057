"""Persist pipeline artifacts and a content-hashed manifest.

A run directory holds every intermediate output plus `manifest.json`. While a run
is in progress a `.partial` marker sits next to the outputs; it is removed only
when the manifest is finalized, so a failed run leaves it behind.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from time import perf_counter
from typing import Any

import numpy as np
import structlog

from app import __version__
from app.errors import StageError

logger = structlog.get_logger()

MANIFEST_NAME = "manifest.json"
PARTIAL_MARKER = ".partial"


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, list | tuple | set):
        return [_json_safe(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_json_safe(v) for v in value.tolist()]
    return value


def dumps(payload: Any) -> str:
    """Deterministic JSON text (sorted keys, trailing newline)."""
    return json.dumps(_json_safe(payload), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def config_hash(payload: dict) -> str:
    return hashlib.sha256(dumps(payload).encode("utf-8")).hexdigest()


@dataclass
class ArtifactRun:
    """Filesystem-backed artifact recorder for one pipeline run."""

    run_dir: Path
    manifest: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, run_dir: Path, **meta: Any) -> ArtifactRun:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        stale = run_dir / MANIFEST_NAME
        if stale.exists():
            stale.unlink()
        (run_dir / PARTIAL_MARKER).write_text("run in progress\n", encoding="utf-8")
        run = cls(run_dir=run_dir, manifest={"version": __version__, "artifacts": []})
        run.set_meta(**meta)
        return run

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / MANIFEST_NAME

    def path(self, file_name: str) -> Path:
        return self.run_dir / file_name

    def record(self, artifact_class: str, stage: str, target: Path, **meta: Any) -> str:
        """Register a written file under its artifact class with its content hash."""
        target = Path(target)
        entry = {
            "class": artifact_class,
            "stage": stage,
            "file": target.relative_to(self.run_dir).as_posix(),
            "sha256": sha256_file(target),
            "bytes": target.stat().st_size,
        }
        if meta:
            entry["meta"] = _json_safe(meta)
        self.manifest["artifacts"].append(entry)
        return entry["file"]

    def write_json(self, artifact_class: str, stage: str, file_name: str, payload: Any) -> str:
        target = self.path(file_name)
        target.write_text(dumps(payload), encoding="utf-8")
        return self.record(artifact_class, stage, target)

    def set_meta(self, **kwargs: Any) -> None:
        self.manifest.update(_json_safe(kwargs))

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Time a stage; any failure is re-raised as StageError naming it."""
        started = perf_counter()
        logger.info("stage started", stage=name)
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            logger.error("stage failed", stage=name, error=str(exc))
            raise StageError(name, exc) from exc
        logger.info("stage finished", stage=name, seconds=round(perf_counter() - started, 3))

    def artifact_classes(self) -> list[str]:
        return sorted({a["class"] for a in self.manifest["artifacts"]})

    def finalize(self) -> dict[str, Any]:
        self.manifest["artifacts"].sort(key=lambda a: a["file"])
        self.manifest["artifact_classes"] = self.artifact_classes()
        self.manifest_path.write_text(dumps(self.manifest), encoding="utf-8")
        marker = self.run_dir / PARTIAL_MARKER
        if marker.exists():
            marker.unlink()
        return self.manifest
