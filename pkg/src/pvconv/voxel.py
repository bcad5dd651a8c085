"""Point <-> voxel bridge.

Average-scatter voxelization, trilinear and nearest devoxelization (each with
the exact transpose as backward), and the distinguishable-point count used to
measure how much information a resolution loses.

Grids are stored channels-last, ``values[u, v, w, c]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import NormalizedCloud

# corner offsets in (du, dv, dw) order; corner j has bits (j>>2, j>>1, j) & 1
CORNERS = np.array([[(j >> 2) & 1, (j >> 1) & 1, j & 1] for j in range(8)], dtype=np.int64)


@dataclass
class VoxelGrid:
    r: int
    values: np.ndarray   # r x r x r x c
    counts: np.ndarray   # r x r x r, integer
    point_index: np.ndarray  # flat voxel index of every source point

    @property
    def c(self) -> int:
        return self.values.shape[-1]


@dataclass
class TrilinearWeights:
    base_index: tuple[int, int, int]
    weights: np.ndarray  # 8 corner weights, CORNERS order


def _check_unit_cube(coords: np.ndarray) -> None:
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"expected n x 3 normalized coordinates, got {coords.shape}")
    if np.any(coords < 0.0) or np.any(coords > 1.0) or not np.all(np.isfinite(coords)):
        raise ValueError("normalized coordinates must lie in [0, 1]^3")


def voxel_coords(coords_hat: np.ndarray, r: int) -> np.ndarray:
    """Integer voxel triple per point: floor(p * r), with 1.0 clamped into the last cell."""
    if r < 1:
        raise ValueError(f"voxel resolution must be >= 1, got {r}")
    idx = np.floor(np.asarray(coords_hat, dtype=np.float64) * r).astype(np.int64)
    return np.clip(idx, 0, r - 1)


def flat_voxel_index(coords_hat: np.ndarray, r: int) -> np.ndarray:
    ijk = voxel_coords(coords_hat, r)
    return (ijk[:, 0] * r + ijk[:, 1]) * r + ijk[:, 2]


def _scatter_sum(index: np.ndarray, rows: np.ndarray, size: int) -> np.ndarray:
    """``out[index[i]] += rows[i]`` in ascending ``i`` order, accumulated in float64."""
    c = rows.shape[1]
    keys = (index[:, None] * c + np.arange(c)).reshape(-1)
    out = np.bincount(keys, weights=rows.reshape(-1), minlength=size * c)
    return out.reshape(size, c)


def voxelize(nc: NormalizedCloud, r: int, counter=None) -> VoxelGrid:
    """Average the features of all points that fall into each voxel.

    Sums are accumulated in ascending point order; empty voxels stay zero.
    """
    if r < 1:
        raise ValueError(f"voxel resolution must be >= 1, got {r}")
    _check_unit_cube(nc.coords_hat)
    feats = np.asarray(nc.features)
    n, c = feats.shape
    flat = flat_voxel_index(nc.coords_hat, r)
    cells = r ** 3
    counts = np.bincount(flat, minlength=cells)
    sums = _scatter_sum(flat, feats, cells)
    if counter is not None:
        counter.random_scatters += flat.size
    occupied = counts > 0
    sums[occupied] /= counts[occupied, None]
    values = sums.astype(feats.dtype, copy=False).reshape(r, r, r, c)
    return VoxelGrid(r, values, counts.reshape(r, r, r), flat)


def voxelize_backward(cotangent: np.ndarray, nc: NormalizedCloud, grid: VoxelGrid) -> np.ndarray:
    """Transpose of average-scatter: each point reads cotangent / count of its voxel."""
    r, c = grid.r, grid.c
    if cotangent.shape != (r, r, r, c):
        raise ValueError(f"cotangent shape {cotangent.shape} does not match grid {(r, r, r, c)}")
    if grid.point_index.shape[0] != nc.n:
        raise ValueError(f"grid built from {grid.point_index.shape[0]} points, cloud has {nc.n}")
    flat_cot = cotangent.reshape(-1, c)
    counts = grid.counts.reshape(-1)[grid.point_index]
    return flat_cot[grid.point_index] / counts[:, None].astype(cotangent.dtype)


def _trilinear_parts(coords_hat: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised corner indices (n x 8, flat) and weights (n x 8).

    Samples sit at voxel centers (u + 0.5) / r. The base cell is clamped to
    [0, r - 2] so points in the outer half-cells extrapolate nothing: their
    fractional offset is clamped to [0, 1] instead.
    """
    p = np.asarray(coords_hat, dtype=np.float64)
    n = p.shape[0]
    if r == 1:
        base = np.zeros((n, 3), dtype=np.int64)
        t = np.zeros((n, 3))
    else:
        q = p * r - 0.5
        base = np.clip(np.floor(q).astype(np.int64), 0, r - 2)
        t = np.clip(q - base, 0.0, 1.0)
    corner = np.minimum(base[:, None, :] + CORNERS[None, :, :], r - 1)
    flat = (corner[..., 0] * r + corner[..., 1]) * r + corner[..., 2]
    factors = np.where(CORNERS[None, :, :] == 1, t[:, None, :], 1.0 - t[:, None, :])
    weights = factors[..., 0] * factors[..., 1] * factors[..., 2]
    return flat, weights


def trilinear_weights(p_hat, r: int) -> TrilinearWeights:
    p = np.asarray(p_hat, dtype=np.float64).reshape(1, 3)
    if r < 1:
        raise ValueError(f"voxel resolution must be >= 1, got {r}")
    _check_unit_cube(p)
    if r == 1:
        base = (0, 0, 0)
    else:
        b = np.clip(np.floor(p[0] * r - 0.5).astype(np.int64), 0, r - 2)
        base = tuple(int(v) for v in b)
    _, w = _trilinear_parts(p, r)
    return TrilinearWeights(base, w[0])


def devoxelize_trilinear(grid: VoxelGrid, nc: NormalizedCloud, counter=None) -> np.ndarray:
    _check_unit_cube(nc.coords_hat)
    flat, weights = _trilinear_parts(nc.coords_hat, grid.r)
    table = grid.values.reshape(-1, grid.c)
    gathered = table[flat]  # n x 8 x c
    if counter is not None:
        counter.random_gathers += flat.size
    weights = weights.astype(table.dtype)
    out = np.zeros((nc.n, grid.c), dtype=table.dtype)
    for j in range(8):
        out += weights[:, j, None] * gathered[:, j, :]
    return out


def devoxelize_trilinear_backward(cotangent: np.ndarray, grid: VoxelGrid,
                                  nc: NormalizedCloud) -> np.ndarray:
    """Scatter ``cotangent * weight`` onto the grid; returns an r x r x r x c gradient."""
    r, c = grid.r, grid.c
    if cotangent.shape != (nc.n, c):
        raise ValueError(f"cotangent shape {cotangent.shape} does not match {(nc.n, c)}")
    flat, weights = _trilinear_parts(nc.coords_hat, r)
    contrib = weights[:, :, None] * cotangent[:, None, :]  # n x 8 x c
    return _scatter_sum(flat.reshape(-1), contrib.reshape(-1, c), r ** 3).astype(
        cotangent.dtype, copy=False).reshape(r, r, r, c)


def devoxelize_nearest(grid: VoxelGrid, nc: NormalizedCloud, counter=None) -> np.ndarray:
    """Copy the containing voxel's feature to each point."""
    flat = flat_voxel_index(nc.coords_hat, grid.r)
    if counter is not None:
        counter.random_gathers += flat.size
    return grid.values.reshape(-1, grid.c)[flat]


def devoxelize_nearest_backward(cotangent: np.ndarray, grid: VoxelGrid,
                                nc: NormalizedCloud) -> np.ndarray:
    r, c = grid.r, grid.c
    if cotangent.shape != (nc.n, c):
        raise ValueError(f"cotangent shape {cotangent.shape} does not match {(nc.n, c)}")
    flat = flat_voxel_index(nc.coords_hat, r)
    return _scatter_sum(flat, cotangent, r ** 3).astype(
        cotangent.dtype, copy=False).reshape(r, r, r, c)


def devoxelize(grid: VoxelGrid, nc: NormalizedCloud, mode: str = "trilinear",
               counter: Optional[object] = None) -> np.ndarray:
    if mode == "trilinear":
        return devoxelize_trilinear(grid, nc, counter)
    if mode == "nearest":
        return devoxelize_nearest(grid, nc, counter)
    raise ValueError(f"unknown devoxelization mode {mode!r}")


def devoxelize_backward(cotangent, grid, nc, mode: str = "trilinear") -> np.ndarray:
    if mode == "trilinear":
        return devoxelize_trilinear_backward(cotangent, grid, nc)
    if mode == "nearest":
        return devoxelize_nearest_backward(cotangent, grid, nc)
    raise ValueError(f"unknown devoxelization mode {mode!r}")


def count_distinguishable(nc: NormalizedCloud, r: int) -> int:
    """Number of points that are the sole occupant of their voxel at resolution ``r``."""
    flat = flat_voxel_index(nc.coords_hat, r)
    _, counts = np.unique(flat, return_counts=True)
    return int(np.sum(counts == 1))
