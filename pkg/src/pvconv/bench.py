"""Indexed-access accounting for voxel vs. neighbor-gather pipelines.

An indexed access is any read or write at a data-dependent address. Distance
evaluations during brute-force KNN stream through memory and are tallied
separately as sequential reads. Wall times are recorded but never asserted.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .cloud import NormalizedCloud, SyntheticSpec, generate_synthetic, normalize
from .voxel import count_distinguishable, devoxelize_trilinear, voxelize

BENCH_COLUMNS = ["config", "n", "k", "c", "r", "random_gathers", "random_scatters",
                 "sequential_reads", "wall_time_ms", "bytes_estimated"]
SWEEP_COLUMNS = BENCH_COLUMNS + ["distinguishable", "fraction"]
_FLOAT_COLUMNS = {"wall_time_ms", "fraction"}
_STR_COLUMNS = {"config"}
BYTES_PER_SCALAR = 4


@dataclass
class AccessCounter:
    label: str = ""
    random_gathers: int = 0
    random_scatters: int = 0
    sequential_reads: int = 0

    def snapshot(self) -> dict:
        return {"random_gathers": self.random_gathers, "random_scatters": self.random_scatters,
                "sequential_reads": self.sequential_reads}

    @property
    def indexed_accesses(self) -> int:
        return self.random_gathers + self.random_scatters


@dataclass
class KnnIndex:
    k: int
    neighbors: np.ndarray  # n x k


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    columns: list = field(default_factory=lambda: list(BENCH_COLUMNS))
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BenchReport":
        reader = csv.DictReader(io.StringIO(text))
        columns = list(reader.fieldnames or [])
        rows = [{k: _parse_cell(k, v) for k, v in raw.items()} for raw in reader]
        return cls(rows, columns)

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "rows": self.rows, "meta": self.meta},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        d = json.loads(text)
        return cls(d["rows"], d["columns"], d.get("meta", {}))

    def without_timings(self) -> "BenchReport":
        rows = [{k: (0.0 if k == "wall_time_ms" else v) for k, v in row.items()} for row in self.rows]
        return BenchReport(rows, list(self.columns), dict(self.meta))


def _parse_cell(column: str, value: str):
    if column in _STR_COLUMNS:
        return value
    if column in _FLOAT_COLUMNS:
        return float(value)
    return int(value)


def _row(config, n, k, c, r, counter: AccessCounter, wall_ms, nbytes, **extra) -> dict:
    row = {"config": config, "n": n, "k": k, "c": c, "r": r, **counter.snapshot(),
           "wall_time_ms": float(wall_ms), "bytes_estimated": int(nbytes)}
    row.update(extra)
    return row


def knn_bruteforce(nc: NormalizedCloud, k: int, counter: Optional[AccessCounter] = None) -> KnnIndex:
    """Exact k nearest neighbors by Euclidean distance.

    Each point lists itself first; the remaining neighbors follow in order of
    distance, ties going to the lower index. Every pairwise distance evaluation
    counts as one sequential read.
    """
    coords = np.asarray(nc.coords_hat, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, n={n}], got {k}")
    diff = coords[:, None, :] - coords[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    if counter is not None:
        counter.sequential_reads += n * n
    np.fill_diagonal(dist2, -1.0)
    order = np.argsort(dist2, axis=1, kind="stable")[:, :k]
    return KnnIndex(k, order.astype(np.int64))


def gather_neighbors(features: np.ndarray, idx: KnnIndex,
                     counter: Optional[AccessCounter] = None) -> np.ndarray:
    """``out[i, j] = features[neighbors[i, j]]``; one random gather per entry."""
    nb = idx.neighbors
    if nb.shape[0] != features.shape[0]:
        raise ValueError(f"index covers {nb.shape[0]} points, features have {features.shape[0]}")
    if counter is not None:
        counter.random_gathers += nb.size
    return features[nb]


def count_voxel_path(nc: NormalizedCloud, r: int, c: int,
                     counter: Optional[AccessCounter] = None) -> dict:
    """Voxelize then devoxelize ``c``-channel features; returns a report row."""
    counter = counter if counter is not None else AccessCounter("voxel")
    feats = np.random.default_rng(0).standard_normal((nc.n, c))
    start = time.perf_counter()
    grid = voxelize(nc.with_features(feats), r, counter)
    devoxelize_trilinear(grid, nc, counter)
    wall = (time.perf_counter() - start) * 1e3
    return _row("voxel", nc.n, 0, c, r, counter, wall, r ** 3 * c * BYTES_PER_SCALAR)


def count_knn_path(nc: NormalizedCloud, k: int, c: int,
                   counter: Optional[AccessCounter] = None) -> dict:
    counter = counter if counter is not None else AccessCounter("knn")
    feats = np.random.default_rng(0).standard_normal((nc.n, c))
    start = time.perf_counter()
    idx = knn_bruteforce(nc, k, counter)
    gather_neighbors(feats, idx, counter)
    wall = (time.perf_counter() - start) * 1e3
    return _row("knn", nc.n, k, c, 0, counter, wall, nc.n * k * c * BYTES_PER_SCALAR)


def sweep_distinguishable(nc: NormalizedCloud, resolutions: Iterable[int], c: int = 1) -> BenchReport:
    """Distinguishable points and dense-grid memory (r^3 * c * 4 bytes) per resolution."""
    resolutions = list(resolutions)
    if not resolutions:
        raise ValueError("resolution list is empty")
    report = BenchReport(columns=list(SWEEP_COLUMNS))
    for r in resolutions:
        if int(r) != r or r < 1:
            raise ValueError(f"bad resolution {r!r}")
        start = time.perf_counter()
        count = count_distinguishable(nc, int(r))
        wall = (time.perf_counter() - start) * 1e3
        report.rows.append(_row("sweep", nc.n, 0, c, int(r), AccessCounter("sweep"), wall,
                                int(r) ** 3 * c * BYTES_PER_SCALAR,
                                distinguishable=count, fraction=count / nc.n))
    return report


def bench_compare(n: int, k: int, c: int, r: int, seed: int = 0) -> BenchReport:
    """Run both pipelines on a uniform-cube cloud and record the access ratios."""
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, n={n}], got {k}")
    nc = normalize(generate_synthetic(SyntheticSpec("uniform_cube", n, seed)))
    knn = count_knn_path(nc, k, c)
    vox = count_voxel_path(nc, r, c)
    report = BenchReport(rows=[knn, vox])
    report.meta = {
        "seed": seed,
        "gather_ratio": knn["random_gathers"] / (vox["random_gathers"] + vox["random_scatters"]),
        "per_point_ratio": knn["random_gathers"] / vox["random_scatters"],
    }
    return report
