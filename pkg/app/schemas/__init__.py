"""Pydantic schemas for run configuration validation."""

from app.schemas.run_config import (
    ChangepointConfig,
    CollectionInput,
    PartitionSegment,
    RunConfig,
    load_partition,
    load_run_config,
)

__all__ = [
    "ChangepointConfig",
    "CollectionInput",
    "PartitionSegment",
    "RunConfig",
    "load_partition",
    "load_run_config",
]
