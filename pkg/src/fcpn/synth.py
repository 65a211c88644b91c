"""Procedural labeled data: indoor rooms, two-part shapes and captioned frames.

Everything is a pure function of the seed, so generated sets double as
fixed ground truth in tests.
"""

from __future__ import annotations

import math

import numpy as np

from .cloud_io import PointCloud

# semantic classes of the voxel task; 0 is reserved for unoccupied space
CLASS_NAMES = (
    "unoccupied", "floor", "wall", "chair", "sofa", "table", "door", "cabinet", "bed",
    "desk", "toilet", "sink", "window", "picture", "bookshelf", "curtain",
    "shower curtain", "counter", "refrigerator", "bathtub", "other furniture",
)
FLOOR, WALL, CHAIR, TABLE, OTHER = 1, 2, 3, 5, 20

# part ids per object category, in the usual ShapeNet part benchmark layout
PART_CATEGORIES = (
    ("airplane", (0, 1, 2, 3)), ("bag", (4, 5)), ("cap", (6, 7)), ("car", (8, 9, 10, 11)),
    ("chair", (12, 13, 14, 15)), ("earphone", (16, 17, 18)), ("guitar", (19, 20, 21)),
    ("knife", (22, 23)), ("lamp", (24, 25, 26, 27)), ("laptop", (28, 29)),
    ("motorbike", (30, 31, 32, 33, 34, 35)), ("mug", (36, 37)), ("pistol", (38, 39, 40)),
    ("rocket", (41, 42, 43)), ("skateboard", (44, 45, 46)), ("table", (47, 48, 49)),
)


def _rect(origin, u, v, spacing, rng):
    """Lattice samples on the parallelogram ``origin + s*u + t*v`` with a random phase."""
    origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))
    nu = max(1, int(round(np.linalg.norm(u) / spacing)))
    nv = max(1, int(round(np.linalg.norm(v) / spacing)))
    su = (np.arange(nu) + rng.uniform(0.2, 0.8)) / nu
    sv = (np.arange(nv) + rng.uniform(0.2, 0.8)) / nv
    s, t = np.meshgrid(su, sv, indexing="ij")
    return origin + s.reshape(-1, 1) * u + t.reshape(-1, 1) * v


def _box_surface(lo, hi, spacing, rng, bottom=False):
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    dx, dy, dz = hi - lo
    ex, ey, ez = np.eye(3) * np.array([dx, dy, dz])[:, None]
    faces = [
        _rect([lo[0], lo[1], hi[2]], ex, ey, spacing, rng),
        _rect(lo, ex, ez, spacing, rng),
        _rect([lo[0], hi[1], lo[2]], ex, ez, spacing, rng),
        _rect(lo, ey, ez, spacing, rng),
        _rect([hi[0], lo[1], lo[2]], ey, ez, spacing, rng),
    ]
    if bottom:
        faces.append(_rect(lo, ex, ey, spacing, rng))
    return np.concatenate(faces)


def _sphere_surface(center, radius, spacing, rng):
    n = max(8, int(round(4 * math.pi * radius**2 / spacing**2)))
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5**0.5) * i + rng.uniform(0, 2 * math.pi)
    unit = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return np.asarray(center) + radius * unit


def _place(rng, extent, size, taken, margin=0.15, tries=50):
    """Random footprint inside the room not overlapping earlier footprints."""
    hi_x, hi_y = extent[0] - margin - size[0], extent[1] - margin - size[1]
    if hi_x < margin or hi_y < margin:
        return None
    for _ in range(tries):
        x = rng.uniform(margin, hi_x)
        y = rng.uniform(margin, hi_y)
        box = (x, y, x + size[0], y + size[1])
        if all(box[2] < b[0] or box[0] > b[2] or box[3] < b[1] or box[1] > b[3] for b in taken):
            taken.append(box)
            return box
    return None


def synth_scene(rng, extent=(2.4, 2.4, 2.4), spacing=0.05) -> PointCloud:
    ex, ey, ez = extent
    parts, labels = [], []

    def add(points, label):
        points = points[np.all((points >= 0) & (points <= extent), axis=1)]
        parts.append(points)
        labels.append(np.full(len(points), label, dtype=np.int64))

    add(_rect([0, 0, 0.01], [ex, 0, 0], [0, ey, 0], spacing, rng), FLOOR)
    inset = 0.05
    sides = [
        ([inset, 0, 0], [0, ey, 0]), ([ex - inset, 0, 0], [0, ey, 0]),
        ([0, inset, 0], [ex, 0, 0]), ([0, ey - inset, 0], [ex, 0, 0]),
    ]
    for start, along in sides:
        height = rng.uniform(1.0, min(2.2, ez - 0.05))
        add(_rect(start, along, [0, 0, height], spacing, rng), WALL)

    taken = []
    for _ in range(int(rng.integers(1, 3))):
        size = (rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.8))
        box = _place(rng, extent, size, taken, margin=0.3)
        if box is None:
            continue
        height = rng.uniform(0.65, 0.8)
        add(_box_surface([box[0], box[1], 0.0], [box[2], box[3], height], spacing, rng), TABLE)
        for _ in range(int(rng.integers(0, 3))):
            w, d, h = rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.3), rng.uniform(0.1, 0.3)
            x = rng.uniform(box[0], max(box[0], box[2] - w))
            y = rng.uniform(box[1], max(box[1], box[3] - d))
            add(_box_surface([x, y, height], [x + w, y + d, height + h], spacing, rng), OTHER)
    for _ in range(int(rng.integers(1, 3))):
        r = rng.uniform(0.2, 0.3)
        box = _place(rng, extent, (2 * r, 2 * r), taken, margin=0.3)
        if box is None:
            continue
        add(_sphere_surface([box[0] + r, box[1] + r, r], r, spacing, rng), CHAIR)
    return PointCloud(np.concatenate(parts), np.concatenate(labels))


def synth_scenes(seed: int, count: int, extent=(2.4, 2.4, 2.4), spacing=0.05):
    """``count`` labeled rooms spanning ``[0, extent]``: floor, walls, tables, boxes on them, spheres."""
    return [synth_scene(np.random.default_rng([seed, i]), tuple(extent), spacing) for i in range(count)]


def synth_part_shape(rng, category: int, n_points=1024) -> PointCloud:
    """Two-part object: a box base (first part id) carrying a sphere (second part id)."""
    _, parts = PART_CATEGORIES[category % len(PART_CATEGORIES)]
    half = rng.uniform(0.15, 0.3, size=3) * (1.0 + 0.1 * (category % 4))
    base = rng.uniform(-1, 1, size=(n_points, 3))
    axis = rng.integers(0, 3, size=n_points)
    base[np.arange(n_points), axis] = np.sign(base[np.arange(n_points), axis] + 1e-12)
    base *= half
    r = rng.uniform(0.15, 0.3)
    unit = rng.standard_normal((n_points, 3))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    top = unit * r + np.array([0.0, 0.0, half[2] + r + 0.05 * (category % 3)])
    which = rng.random(n_points) < 0.5
    points = np.where(which[:, None], top, base)
    labels = np.where(which, parts[1], parts[0])
    return PointCloud(points, labels, object_class=category % len(PART_CATEGORIES))


def synth_part_shapes(seed: int, count: int, n_points=1024):
    return [synth_part_shape(np.random.default_rng([seed, i]), i, n_points) for i in range(count)]


def synth_caption_frames(seed: int, count: int, caption_count=25, per_frame=3, extent=(2.4, 2.4, 2.4)):
    """Rooms paired with a multi-hot caption vector holding ``per_frame`` positives."""
    scenes = synth_scenes(seed, count, extent)
    rng = np.random.default_rng([seed, 10_007])
    targets = np.zeros((count, caption_count), dtype=np.int64)
    for i in range(count):
        targets[i, rng.choice(caption_count, size=per_frame, replace=False)] = 1
    return [PointCloud(s.points) for s in scenes], targets
