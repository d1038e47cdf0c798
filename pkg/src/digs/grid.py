"""Hierarchical octree grid of occupied voxel cells.

Level 0 is the coarsest; voxel edges halve with each deeper level
(size(l) = base_size * 2**-l).  Cell coordinates at every level share one
origin, so the children of cell (i, j, k) at level l are the (2i+di, ...)
cells at level l+1.  Cells are created with k Gaussians; pruning may later
shrink a cell below k (see growth.prune).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidLevelError, OutOfBoundsError

DEFAULT_K = 10
OFFSET_SCALE_FRACTION = 0.25

# Corner enumeration order shared by vertex ids and interpolation weights:
# index bit 2 -> dx, bit 1 -> dy, bit 0 -> dz.
CORNER_OFFSETS = np.array(
    [[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.int64
)


def offset_init_pattern(k: int) -> np.ndarray:
    """Deterministic low-discrepancy offsets: 8 cube corners at half scale,
    then +/-x, cycling if k > 10."""
    corners = 0.5 * (2.0 * CORNER_OFFSETS - 1.0)
    extra = np.array([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]])
    pattern = np.vstack([corners, extra])
    reps = int(np.ceil(k / len(pattern)))
    return np.tile(pattern, (reps, 1))[:k].copy()


@dataclass
class VoxelCell:
    level: int
    coord: tuple
    center: np.ndarray
    offsets: np.ndarray  # (k, 3) unitless, pre-scale
    offset_scales: np.ndarray  # (k, 3) world units
    gaussian_ids: list
    vertex_feature_ids: np.ndarray = field(default=None)  # (8,) rows in the vertex table


class LodGrid:
    """Octree of occupied cells plus the shared vertex registry."""

    def __init__(self, base_size, max_level, origin, bounds_hi, k=DEFAULT_K):
        if base_size <= 0:
            raise InvalidInputError("base_size must be positive")
        if max_level < 0:
            raise InvalidInputError("max_level must be >= 0")
        self.base_size = float(base_size)
        self.max_level = int(max_level)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.bounds_hi = np.asarray(bounds_hi, dtype=np.float64)
        self.k = int(k)
        self.levels = [dict() for _ in range(self.max_level + 1)]
        self._vertex_index = {}
        self._vertex_positions = []
        self._vertex_pos_cache = None
        self._next_gaussian_id = 0

    # -- geometry -----------------------------------------------------------

    def voxel_size(self, level: int) -> float:
        self._check_level(level)
        return self.base_size * 2.0 ** (-level)

    def _check_level(self, level):
        if not (0 <= level <= self.max_level):
            raise InvalidLevelError(f"level {level} outside [0, {self.max_level}]")

    def in_bounds(self, point) -> bool:
        point = np.asarray(point, dtype=np.float64)
        return bool(np.all(point >= self.origin) and np.all(point <= self.bounds_hi))

    def cell_of(self, point, level: int) -> tuple:
        self._check_level(level)
        point = np.asarray(point, dtype=np.float64)
        if not self.in_bounds(point):
            raise OutOfBoundsError(f"point {point} outside grid bounds")
        size = self.voxel_size(level)
        return tuple(np.floor((point - self.origin) / size).astype(np.int64))

    def cell_center(self, coord, level: int) -> np.ndarray:
        size = self.voxel_size(level)
        return self.origin + (np.asarray(coord, dtype=np.float64) + 0.5) * size

    # -- occupancy ----------------------------------------------------------

    def get_cell(self, coord, level: int):
        return self.levels[level].get(tuple(coord))

    def cell_containing(self, point, level: int):
        return self.levels[level].get(self.cell_of(point, level))

    def cells(self, level=None):
        if level is not None:
            return list(self.levels[level].values())
        return [c for lvl in self.levels for c in lvl.values()]

    def occupied_count(self, level: int) -> int:
        return len(self.levels[level])

    @property
    def n_gaussians(self) -> int:
        return self._next_gaussian_id

    @property
    def n_vertices(self) -> int:
        return len(self._vertex_positions)

    def vertex_positions(self) -> np.ndarray:
        if self._vertex_pos_cache is None or len(self._vertex_pos_cache) != len(
            self._vertex_positions
        ):
            self._vertex_pos_cache = np.asarray(
                self._vertex_positions, dtype=np.float64
            ).reshape(-1, 3)
        return self._vertex_pos_cache

    # -- construction ---------------------------------------------------------

    def _vertex_rows(self, coord, level):
        rows = np.empty(8, dtype=np.int64)
        size = self.voxel_size(level)
        base = np.asarray(coord, dtype=np.int64)
        for i, d in enumerate(CORNER_OFFSETS):
            key = (level, *(base + d))
            row = self._vertex_index.get(key)
            if row is None:
                row = len(self._vertex_positions)
                self._vertex_index[key] = row
                self._vertex_positions.append(self.origin + (base + d) * size)
            rows[i] = row
        return rows

    def find_or_insert(self, point, level: int, offsets=None, offset_scales=None):
        """Return (cell, was_created); missing cells get k fresh Gaussians.

        New offsets default to zero (all Gaussians at the voxel center) and
        offset scales to 0.25 * voxel_size, matching the growth convention.
        """
        coord = self.cell_of(point, level)
        cell = self.levels[level].get(coord)
        if cell is not None:
            return cell, False
        size = self.voxel_size(level)
        if offsets is None:
            offsets = np.zeros((self.k, 3))
        if offset_scales is None:
            offset_scales = np.full((self.k, 3), OFFSET_SCALE_FRACTION * size)
        ids = list(range(self._next_gaussian_id, self._next_gaussian_id + self.k))
        self._next_gaussian_id += self.k
        cell = VoxelCell(
            level=level,
            coord=coord,
            center=self.cell_center(coord, level),
            offsets=np.asarray(offsets, dtype=np.float64).copy(),
            offset_scales=np.asarray(offset_scales, dtype=np.float64).copy(),
            gaussian_ids=ids,
            vertex_feature_ids=self._vertex_rows(coord, level),
        )
        self.levels[level][coord] = cell
        return cell, True

    def remove_cell(self, cell: VoxelCell):
        self.levels[cell.level].pop(cell.coord, None)


def gaussian_positions(cell: VoxelCell, grid: LodGrid) -> np.ndarray:
    """Decoded positions x_v + C * L (componentwise), clamped to twice the
    cell half-extent.  The tape-side twin lives in model.py; keep in sync."""
    size = grid.voxel_size(cell.level)
    pos = cell.center + cell.offsets * cell.offset_scales
    return np.clip(pos, cell.center - size, cell.center + size)


def init_from_points(points, base_size, max_level, min_points=1, k=DEFAULT_K, bounds=None):
    """Build a grid from a sparse point cloud.

    Every cell holding at least `min_points` points (at each level) is
    occupied and populated with k Gaussians on the deterministic offset
    pattern.  `bounds` is an optional (lo, hi) pair; defaults to the point
    extent padded by half a base voxel.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise InvalidInputError("cannot initialize a grid from an empty point set")
    if min_points < 1:
        raise InvalidInputError("min_points must be >= 1")
    if bounds is None:
        lo = points.min(axis=0) - 0.5 * base_size
        hi = points.max(axis=0) + 0.5 * base_size
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
        if np.any(points < lo) or np.any(points > hi):
            raise OutOfBoundsError("points fall outside the provided bounds")
    grid = LodGrid(base_size, max_level, lo, hi, k=k)

    pattern = offset_init_pattern(k)
    for level in range(max_level + 1):
        size = grid.voxel_size(level)
        coords = np.floor((points - grid.origin) / size).astype(np.int64)
        uniq, counts = np.unique(coords, axis=0, return_counts=True)
        for coord, count in zip(uniq, counts):
            if count < min_points:
                continue
            center = grid.cell_center(coord, level)
            grid.find_or_insert(
                center,
                level,
                offsets=pattern,
                offset_scales=np.full((k, 3), OFFSET_SCALE_FRACTION * size),
            )
    return grid
