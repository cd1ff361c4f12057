"""Agglomerative hierarchical clustering with Lance-Williams updates.

Clusters live in slots indexed by their smallest leaf; merging slots i < j keeps
the result in slot i. The closest pair is the lexicographically smallest (i, j)
among equal minima. Node ids follow the usual linkage convention: leaves are
0..n-1 and merge s creates node n+s.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from app.errors import DataValidationError
from app.services.distances import DistanceMatrix, load_distance
from app.services.persistence import PersistenceMatrix, load_persistence
from app.services.tables import format_float, read_frame, write_frame

SYMMETRY_TOLERANCE = 1e-12
_NEWICK_SPECIAL = set("()[]:;,' \t\n")


class Linkage(str, Enum):
    AVERAGE = "average"
    SINGLE = "single"
    COMPLETE = "complete"


class CutMode(str, Enum):
    K_CLUSTERS = "k_clusters"
    HEIGHT = "height"


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    leaves: tuple[str, ...]
    merges: tuple[Merge, ...]
    linkage: Linkage = Linkage.AVERAGE

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])

    def to_dict(self) -> dict:
        return {
            "leaves": list(self.leaves),
            "linkage": self.linkage.value,
            "merges": [asdict(m) for m in self.merges],
        }


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    ids: tuple[str, ...]
    labels: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def blocks(self) -> list[set[str]]:
        return [
            {self.ids[i] for i in np.flatnonzero(self.labels == c)}
            for c in range(1, self.n_clusters + 1)
        ]


def _matrix_input(
    d: DistanceMatrix | PersistenceMatrix | np.ndarray, ids: Sequence[str] | None
) -> tuple[tuple[str, ...], np.ndarray]:
    if isinstance(d, PersistenceMatrix):
        return d.ids, d.dissimilarity()
    if isinstance(d, DistanceMatrix):
        return d.ids, d.values.copy()
    values = np.array(d, dtype=float)
    names = tuple(ids) if ids is not None else tuple(str(i) for i in range(values.shape[0]))
    return names, values


def agglomerate(
    d: DistanceMatrix | PersistenceMatrix | np.ndarray,
    linkage: Linkage | str = Linkage.AVERAGE,
    ids: Sequence[str] | None = None,
) -> Dendrogram:
    """Build the merge tree; persistence matrices cluster on 1 - k(s, t)."""
    linkage = Linkage(linkage)
    names, dist = _matrix_input(d, ids)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1] or dist.shape[0] != len(names):
        raise DataValidationError(f"expected a square matrix matching {len(names)} ids")
    if np.max(np.abs(dist - dist.T), initial=0.0) > SYMMETRY_TOLERANCE:
        raise DataValidationError("clustering input is not symmetric")
    if np.any(np.diag(dist) != 0):
        raise DataValidationError("clustering input must have a zero diagonal")
    n = dist.shape[0]
    if n < 1:
        raise DataValidationError("clustering needs at least one item")

    work = dist.copy()
    work[np.tril_indices(n)] = np.inf
    active = np.ones(n, dtype=bool)
    node = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    merges: list[Merge] = []
    for step in range(n - 1):
        i, j = divmod(int(np.argmin(work)), n)
        height = float(work[i, j])
        merges.append(Merge(a=int(node[i]), b=int(node[j]), height=height, size=int(size[i] + size[j])))

        others = active.copy()
        others[[i, j]] = False
        dik, djk = dist[i, others], dist[j, others]
        if linkage is Linkage.SINGLE:
            updated = np.minimum(dik, djk)
        elif linkage is Linkage.COMPLETE:
            updated = np.maximum(dik, djk)
        else:
            updated = (size[i] * dik + size[j] * djk) / (size[i] + size[j])
        dist[i, others] = updated
        dist[others, i] = updated

        active[j] = False
        work[j, :] = np.inf
        work[:, j] = np.inf
        rest = np.flatnonzero(others)
        work[np.minimum(i, rest), np.maximum(i, rest)] = updated
        node[i] = n + step
        size[i] += size[j]
    return Dendrogram(leaves=names, merges=tuple(merges), linkage=linkage)


def cut(den: Dendrogram, mode: CutMode | str, value: float) -> ClusterAssignment:
    """Flat clusters: keep k subtrees, or drop merges strictly above a height."""
    mode = CutMode(mode)
    n = den.n_leaves
    if mode is CutMode.K_CLUSTERS:
        if int(value) != value or not 1 <= value <= n:
            raise DataValidationError(f"k must be an integer in 1..{n}, got {value}")
        keep = n - int(value)
    else:
        if value < 0:
            raise DataValidationError(f"cut height must be >= 0, got {value}")
        keep = len(den.merges)

    parent = list(range(2 * n - 1))
    for step, merge in enumerate(den.merges[:keep]):
        if mode is CutMode.HEIGHT and merge.height > value:
            continue
        parent[merge.a] = n + step
        parent[merge.b] = n + step

    def root(x: int) -> int:
        while parent[x] != x:
            x = parent[x]
        return x

    labels = np.zeros(n, dtype=np.int64)
    seen: dict[int, int] = {}
    for leaf in range(n):
        r = root(leaf)
        if r not in seen:
            seen[r] = len(seen) + 1
        labels[leaf] = seen[r]
    return ClusterAssignment(ids=den.leaves, labels=labels)


def _newick_label(label: str) -> str:
    if any(ch in _NEWICK_SPECIAL for ch in label):
        return "'" + label.replace("'", "''") + "'"
    return label


def to_newick(den: Dendrogram) -> str:
    """Newick text; branch lengths are height differences between parent and child."""
    n = den.n_leaves
    if n == 1:
        return f"{_newick_label(den.leaves[0])};"
    text = {i: _newick_label(leaf) for i, leaf in enumerate(den.leaves)}
    height = {i: 0.0 for i in range(n)}
    for step, merge in enumerate(den.merges):
        node = n + step
        parts = [f"{text.pop(child)}:{format_float(merge.height - height[child])}" for child in (merge.a, merge.b)]
        text[node] = f"({parts[0]},{parts[1]})"
        height[node] = merge.height
    return text[2 * n - 2] + ";"


def write_dendrogram(den: Dendrogram, json_path: Path, newick_path: Path | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(den.to_dict(), indent=2) + "\n", encoding="utf-8")
    if newick_path is not None:
        Path(newick_path).write_text(to_newick(den) + "\n", encoding="utf-8")


def load_dendrogram(path: Path) -> Dendrogram:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return Dendrogram(
        leaves=tuple(payload["leaves"]),
        merges=tuple(Merge(**m) for m in payload["merges"]),
        linkage=Linkage(payload.get("linkage", Linkage.AVERAGE.value)),
    )


def write_assignments(assignment: ClusterAssignment, path: Path) -> Path:
    frame = pd.DataFrame({"id": list(assignment.ids), "cluster": assignment.labels})
    return write_frame(frame, Path(path))


def load_assignments(path: Path) -> ClusterAssignment:
    frame = read_frame(path, dtype={"id": str})
    return ClusterAssignment(
        ids=tuple(frame["id"]), labels=frame["cluster"].to_numpy(dtype=np.int64)
    )


def load_clustering_input(path: Path) -> DistanceMatrix | PersistenceMatrix:
    """Read any matrix artifact; the `.meta.json` sidecar tells persistence from distances."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".meta.json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    if meta.get("role") == "persistence":
        return load_persistence(path)
    matrix = load_distance(path)
    if not isinstance(matrix, DistanceMatrix):
        raise DataValidationError(f"{path} holds an affinity matrix; cluster a distance matrix")
    return matrix
