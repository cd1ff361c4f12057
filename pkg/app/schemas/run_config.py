"""Run configuration schemas."""

from __future__ import annotations

import json
from datetime import date
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import DataValidationError, ParseError
from app.services.cluster import Linkage
from app.services.ingest import AlignmentPolicy
from app.services.thresholds import KSStatistic


class PartitionSegment(BaseModel):
    """One labelled calendar period, inclusive on both ends."""

    label: str = Field(min_length=1)
    start: date
    end: date

    @model_validator(mode="after")
    def _ordered(self) -> PartitionSegment:
        if self.start > self.end:
            raise ValueError(f"segment '{self.label}' starts after it ends")
        return self


class CollectionInput(BaseModel):
    label: str = Field(min_length=1)
    path: Path


class ChangepointConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float | None = None
    arl0: float | None = None
    min_segment: int = Field(30, ge=2)
    replications: int = Field(10_000, ge=1000)
    statistic: KSStatistic = KSStatistic.RAW
    horizon: int | None = Field(None, ge=2)

    @model_validator(mode="after")
    def _alpha_or_arl0(self) -> ChangepointConfig:
        if self.alpha is not None and self.arl0 is not None:
            raise ValueError("set either alpha or arl0, not both")
        if self.arl0 is not None:
            if self.arl0 <= 1:
                raise ValueError(f"arl0 must exceed 1, got {self.arl0}")
            self.alpha = 1.0 / self.arl0
        if self.alpha is None:
            self.alpha = 0.05
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        return self


class RunConfig(BaseModel):
    """Everything a pipeline run needs; the seed is mandatory."""

    model_config = ConfigDict(extra="forbid")

    collections: list[CollectionInput] = Field(min_length=2, max_length=2)
    alignment_policy: AlignmentPolicy = AlignmentPolicy.FORWARD_FILL
    spectra_window: int = Field(60, ge=2)
    top_k: int = Field(10, ge=1)
    ra_window: int = Field(61, ge=2)
    tail_fraction: float = Field(0.1, gt=0.0, lt=0.5)
    renormalize_tails: bool = True
    changepoint: ChangepointConfig = Field(default_factory=ChangepointConfig)
    linkage: Linkage = Linkage.AVERAGE
    cut_k: int | None = Field(None, ge=1)
    cut_height: float | None = Field(None, ge=0.0)
    kde_grid: int = Field(512, ge=2)
    partition: list[PartitionSegment] = Field(min_length=1)
    output_dir: Path
    seed: int = Field(ge=0)
    workers: int = Field(1, ge=1)

    @field_validator("collections")
    @classmethod
    def _unique_labels(cls, value: list[CollectionInput]) -> list[CollectionInput]:
        labels = [c.label for c in value]
        if len(set(labels)) != len(labels):
            raise ValueError(f"collection labels must be unique, got {labels}")
        return value

    @model_validator(mode="after")
    def _inputs_exist(self) -> RunConfig:
        for collection in self.collections:
            if not collection.path.exists():
                raise ValueError(f"input file not found: {collection.path}")
        if self.cut_k is not None and self.cut_height is not None:
            raise ValueError("set either cut_k or cut_height, not both")
        return self

    def hash_payload(self) -> dict:
        """Fields that determine outputs (excludes worker count and output location)."""
        payload = self.model_dump(mode="json", exclude={"workers", "output_dir"})
        for collection in payload["collections"]:
            collection["path"] = Path(collection["path"]).name
        return payload


def load_run_config(path: str | Path) -> RunConfig:
    """Read a JSON run config; relative paths resolve against the config's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=str(path), row=exc.lineno) from exc
    base = path.parent
    for collection in data.get("collections", []):
        if "path" in collection and not Path(collection["path"]).is_absolute():
            collection["path"] = str(base / collection["path"])
    if "output_dir" in data and not Path(data["output_dir"]).is_absolute():
        data["output_dir"] = str(base / data["output_dir"])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise DataValidationError(f"{path}: {exc}") from exc


def load_partition(path: str | Path) -> list[PartitionSegment]:
    """Partition file: a JSON list of {label, start, end} objects."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"partition file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(data, dict):
            data = data.get("partition", [])
        return [PartitionSegment.model_validate(item) for item in data]
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=str(path), row=exc.lineno) from exc
    except ValidationError as exc:
        raise DataValidationError(f"{path}: {exc}") from exc
