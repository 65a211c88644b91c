"""Uniform grids over point clouds: hashing, radius grouping and label voxelization.

This is the bridge from an unordered point set to the ordered volumes the
convolutional layers consume. Cells are numbered in C order over ``(x, y, z)``,
i.e. ``cell = (ix * Y + iy) * Z + iz``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .cloud_io import PointCloud
from .errors import ConfigurationError, CorruptFileError, InputError


def _as_vec3(value, what):
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{what} must be finite, got {value}")
    return arr


def grid_dims(extent, cell_size, tol=1e-9):
    """Integer cell counts per axis; ``extent`` must be a positive multiple of ``cell_size``."""
    extent = _as_vec3(extent, "extent")
    if cell_size <= 0:
        raise ConfigurationError(f"cell size must be positive, got {cell_size}")
    if np.any(extent <= 0):
        raise ConfigurationError(f"extent must be positive on every axis, got {extent.tolist()}")
    dims = np.rint(extent / cell_size).astype(np.int64)
    if np.any(dims < 1) or np.any(np.abs(dims * cell_size - extent) > tol * np.maximum(1.0, extent)):
        raise ConfigurationError(
            f"extent {extent.tolist()} is not a multiple of cell size {cell_size}"
        )
    return tuple(int(d) for d in dims)


@dataclass
class UniformGrid:
    origin: np.ndarray
    cell_size: float
    dims: tuple
    point_cells: np.ndarray  # flat cell id per input point, -1 when out of bounds
    n_out_of_bounds: int

    @property
    def n_cells(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self):
        return np.asarray(self.dims, dtype=np.float64) * self.cell_size

    def cell_index(self, flat):
        return np.stack(np.unravel_index(np.asarray(flat), self.dims), axis=-1)

    def centers(self):
        """Cell-center coordinates, shape ``dims + (3,)``."""
        ijk = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        return self.origin + (ijk + 0.5) * self.cell_size

    def occupied(self):
        """Boolean mask over flat cells containing at least one point."""
        mask = np.zeros(self.n_cells, dtype=bool)
        mask[self.point_cells[self.point_cells >= 0]] = True
        return mask

    def points_in_cell(self, flat):
        return np.flatnonzero(self.point_cells == flat)


def build_grid(cloud, origin, extent, cell_size) -> UniformGrid:
    """Hash every point into its cell; points on a max face belong to the last cell."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    dims = grid_dims(extent, cell_size)
    origin = _as_vec3(origin, "origin")
    upper = origin + np.asarray(dims) * cell_size
    inside = np.all((points >= origin) & (points <= upper), axis=1)
    ijk = np.floor((points[inside] - origin) / cell_size).astype(np.int64)
    ijk = np.minimum(ijk, np.asarray(dims) - 1)
    cells = np.full(points.shape[0], -1, dtype=np.int64)
    cells[inside] = np.ravel_multi_index(ijk.T, dims)
    return UniformGrid(origin, float(cell_size), dims, cells, int((~inside).sum()))


def occupancy_fraction(grid: UniformGrid) -> float:
    return float(grid.occupied().sum()) / grid.n_cells


# ---------------------------------------------------------------------------
# radius search and grouping


@dataclass
class CellGroups:
    centers: np.ndarray      # dims + (3,)
    groups: np.ndarray       # [Ncells, Pmax, 3], offsets from the center divided by radius
    counts: np.ndarray       # [Ncells]
    point_index: np.ndarray  # [Ncells, Pmax], -1 in empty cells
    radius: float

    @property
    def dims(self):
        return self.centers.shape[:3]


def ball_query(points, grid: UniformGrid, radius: float):
    """All (cell, point) pairs with ``|point - center| <= radius``.

    Only in-bounds points take part. Candidate cells are limited to the
    neighborhood a ball of this radius can reach, which is 3x3x3 whenever
    ``radius <= cell_size``. Returns ``(cells, point_ids, offsets)`` with
    ``offsets = point - center``.
    """
    if radius <= 0:
        raise ConfigurationError(f"group radius must be positive, got {radius}")
    points = np.asarray(points, dtype=np.float64)
    ids = np.flatnonzero(grid.point_cells >= 0)
    if ids.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros((0, 3))
    dims = np.asarray(grid.dims)
    home = grid.cell_index(grid.point_cells[ids])
    reach = int(math.floor(radius / grid.cell_size + 0.5))
    span = np.arange(-reach, reach + 1)
    offsets = np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)

    cells, pids, rels = [], [], []
    # chunking bounds peak memory on large scenes
    chunk = max(1, 2_000_000 // len(offsets))
    for start in range(0, ids.size, chunk):
        sel = ids[start : start + chunk]
        cand = home[start : start + chunk, None, :] + offsets[None, :, :]
        valid = np.all((cand >= 0) & (cand < dims), axis=2)
        centers = grid.origin + (cand + 0.5) * grid.cell_size
        rel = points[sel][:, None, :] - centers
        dist = np.sqrt((rel**2).sum(axis=2))
        hit = valid & (dist <= radius)
        rows, cols = np.nonzero(hit)
        cells.append(np.ravel_multi_index(cand[rows, cols].T, grid.dims))
        pids.append(sel[rows])
        rels.append(rel[rows, cols])
    return np.concatenate(cells), np.concatenate(pids), np.concatenate(rels)


def _mix64(x):
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def subsample_keys(seed: int, cells, ranks):
    """Deterministic pseudo-random sort keys seeded from (seed, cell id, rank in cell)."""
    base = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.asarray(cells, dtype=np.uint64))
    return _mix64(base + np.asarray(ranks, dtype=np.uint64))


def radius_group(cloud, grid: UniformGrid, radius: float | None = None, p_max: int = 64,
                 seed: int = 0, rng=None) -> CellGroups:
    """Group points within ``radius`` of every cell center.

    Members of a cell are put in canonical order (lexicographic on their
    offsets), so the result does not depend on input order. Cells with more
    than ``p_max`` members keep a uniformly random subset chosen by keys seeded
    from ``(seed, cell id)``; cells with fewer are padded by repeating their
    first member.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    radius = grid.cell_size if radius is None else float(radius)
    if p_max < 1:
        raise ConfigurationError(f"p_max must be positive, got {p_max}")
    if rng is not None:
        seed = int(rng.integers(0, 2**63))
    cells, pids, rel = ball_query(points, grid, radius)
    rel = rel / radius

    order = np.lexsort((rel[:, 2], rel[:, 1], rel[:, 0], cells))
    cells, pids, rel = cells[order], pids[order], rel[order]
    n = grid.n_cells
    full_counts = np.bincount(cells, minlength=n)
    starts = np.concatenate([[0], np.cumsum(full_counts)[:-1]])
    rank = np.arange(cells.size) - starts[cells]

    if np.any(full_counts > p_max):
        keys = subsample_keys(seed, cells, rank)
        by_key = np.lexsort((keys, cells))
        key_rank = np.empty_like(rank)
        key_rank[by_key] = np.arange(cells.size) - starts[cells[by_key]]
        keep = key_rank < p_max
        cells, pids, rel, rank = cells[keep], pids[keep], rel[keep], rank[keep]
        counts = np.minimum(full_counts, p_max)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(cells.size) - starts[cells]
    else:
        counts = full_counts
        slot = rank

    groups = np.zeros((n, p_max, 3))
    point_index = np.full((n, p_max), -1, dtype=np.int64)
    groups[cells, slot] = rel
    point_index[cells, slot] = pids
    pad = (np.arange(p_max)[None, :] >= counts[:, None]) & (counts[:, None] > 0)
    rows = np.nonzero(pad)[0]
    groups[pad] = groups[rows, 0]
    point_index[pad] = point_index[rows, 0]
    return CellGroups(grid.centers(), groups, counts, point_index, radius)


# ---------------------------------------------------------------------------
# voxel label grids

FCVX_MAGIC = b"FCVX"
FCVX_VERSION = 1


@dataclass
class VoxelLabelGrid:
    origin: np.ndarray
    cell_size: float
    labels: np.ndarray  # [X, Y, Z] uint8 class ids, 0 = unoccupied

    @property
    def dims(self):
        return tuple(int(d) for d in self.labels.shape)

    def __eq__(self, other):
        return (
            isinstance(other, VoxelLabelGrid)
            and np.array_equal(np.float32(self.origin), np.float32(other.origin))
            and np.float32(self.cell_size) == np.float32(other.cell_size)
            and np.array_equal(self.labels, other.labels)
        )


def voxelize_labels(cloud: PointCloud, origin, extent, cell_size=0.05) -> VoxelLabelGrid:
    """Majority vote of point labels per voxel; ties go to the smaller id, empty voxels are 0."""
    if cloud.labels is None:
        raise InputError("voxelize_labels needs a labeled cloud")
    grid = build_grid(cloud, origin, extent, cell_size)
    sel = grid.point_cells >= 0
    labels = np.zeros(grid.n_cells, dtype=np.uint8)
    if sel.any():
        lab = cloud.labels[sel]
        if lab.min() < 0 or lab.max() > 255:
            raise InputError("voxel labels must fit in 0..255")
        k = int(lab.max()) + 1
        votes = np.bincount(grid.point_cells[sel] * k + lab, minlength=grid.n_cells * k)
        votes = votes.reshape(grid.n_cells, k)
        hit = votes.sum(axis=1) > 0
        labels[hit] = votes[hit].argmax(axis=1)
    return VoxelLabelGrid(grid.origin, float(cell_size), labels.reshape(grid.dims))


def encode_fcvx(grid: VoxelLabelGrid) -> bytes:
    head = struct.pack(
        "<4sH3I3ff", FCVX_MAGIC, FCVX_VERSION, *grid.dims,
        *np.float32(grid.origin).tolist(), float(np.float32(grid.cell_size)),
    )
    # x varies fastest on disk
    body = np.ascontiguousarray(grid.labels.astype(np.uint8).transpose(2, 1, 0)).tobytes()
    return head + body


def decode_fcvx(buf: bytes) -> VoxelLabelGrid:
    size = struct.calcsize("<4sH3I3ff")
    if len(buf) < size:
        raise CorruptFileError(f"FCVX header truncated: {len(buf)} of {size} bytes")
    magic, version, dx, dy, dz, ox, oy, oz, cell = struct.unpack("<4sH3I3ff", buf[:size])
    if magic != FCVX_MAGIC:
        raise CorruptFileError("not an FCVX file: bad magic")
    if version != FCVX_VERSION:
        raise CorruptFileError(f"unsupported FCVX version {version}")
    n = dx * dy * dz
    if len(buf) != size + n:
        raise CorruptFileError(f"FCVX payload has {len(buf) - size} bytes, header promises {n}")
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=size).reshape(dz, dy, dx)
    return VoxelLabelGrid(
        np.array([ox, oy, oz], dtype=np.float64), float(cell), labels.transpose(2, 1, 0).copy()
    )


def save_fcvx(path, grid: VoxelLabelGrid):
    with open(path, "wb") as fh:
        fh.write(encode_fcvx(grid))


def load_fcvx(path) -> VoxelLabelGrid:
    with open(path, "rb") as fh:
        return decode_fcvx(fh.read())


# ---------------------------------------------------------------------------
# training volume extraction


def volume_placements(lo, hi, volume, stride):
    """Origins of sliding cubes of side ``volume`` covering the box ``[lo, hi]``.

    Along an axis shorter than ``volume`` a single cube is centered on the box.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    per_axis = []
    for a in range(3):
        length = hi[a] - lo[a]
        if length <= volume:
            per_axis.append([lo[a] + (length - volume) / 2.0])
        else:
            count = int(math.floor((length - volume) / stride + 1e-9)) + 1
            per_axis.append([lo[a] + i * stride for i in range(count)])
    return [np.array([x, y, z]) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]]


def extract_training_volumes(scene: PointCloud, volume=2.4, stride=1.2, min_occupancy=0.02,
                             min_valid_label_fraction=0.7, occupancy_cell=0.15,
                             label_cell=0.05, invalid_label=0):
    """Slide a cube over the scene and keep cutouts passing the occupancy and annotation filters.

    Returns a list of ``(cutout, VoxelLabelGrid)``; cutouts keep world
    coordinates and the grid's origin marks the cube.
    """
    if scene.labels is None:
        raise InputError("extract_training_volumes needs a labeled scene")
    if len(scene) == 0:
        return []
    lo, hi = scene.bounds
    samples = []
    for origin in volume_placements(lo, hi, volume, stride):
        inside = np.all((scene.points >= origin) & (scene.points <= origin + volume), axis=1)
        if not inside.any():
            continue
        cut = scene.subset(np.flatnonzero(inside))
        if np.mean(cut.labels != invalid_label) < min_valid_label_fraction:
            continue
        if occupancy_fraction(build_grid(cut, origin, volume, occupancy_cell)) < min_occupancy:
            continue
        samples.append((cut, voxelize_labels(cut, origin, volume, label_cell)))
    return samples
