"""Fully-convolutional point network.

Pipeline: points are grouped around the centers of a uniform S1 grid and
summarised by a small PointNet (shared MLP + max pool), giving an ordered
feature volume. Two stride-2 convolutions abstract it to S2 and S3. Every
level emits two skip volumes (a 1x1x1 branch and a 3x3x3 branch), the S3
level is additionally pooled over long range, and the merge stage climbs
back to S1 through deconvolutions. One of three heads finishes the job:
dense voxel logits, per-point logits, or whole-input caption scores.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .checkpoint import decode_checkpoint, encode_checkpoint
from .cloud_io import PointCloud
from .errors import ConfigurationError, CorruptFileError, InputError
from .grid import CellGroups, build_grid, grid_dims, radius_group
from .tensor import Tensor

HEADS = ("voxel", "point", "caption")


@dataclass
class FCPNConfig:
    head: str = "voxel"
    scales: tuple = (0.15, 0.30, 0.60)
    extent: tuple = (2.4, 2.4, 2.4)
    output_cell: float = 0.05
    pointnet_widths: tuple = (32, 64)
    stage_widths: tuple = (64, 128, 256)
    skip_width: int = 64
    merge_width: int = 128
    head_width: int = 32
    pointwise_depth: int = 3
    class_count: int = 21
    object_class_count: int = 16
    point_widths: tuple = (128, 128)
    caption_count: int = 25
    caption_widths: tuple = (256, 128)
    pool_sphere_radius: float = 1.0
    pool_mode: str = "weighted"
    dropout_rate: float = 0.5
    group_radius: float | None = None
    p_max: int = 64
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("scales", "extent", "pointnet_widths", "stage_widths", "point_widths", "caption_widths"):
            value = getattr(self, name)
            if not isinstance(value, tuple):
                setattr(self, name, tuple(value))
        if len(self.extent) == 1:
            self.extent = self.extent * 3
        self.validate()

    @property
    def s1(self):
        return self.scales[0]

    @property
    def s3(self):
        return self.scales[2]

    @property
    def radius(self):
        return self.s1 if self.group_radius is None else self.group_radius

    @property
    def upsample_factor(self):
        return int(round(self.s1 / self.output_cell))

    def validate(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if len(self.scales) != 3 or len(self.stage_widths) != 3:
            raise ConfigurationError("exactly three scales and three stage widths are required")
        s1, s2, s3 = self.scales
        if s1 <= 0 or abs(s2 - 2 * s1) > 1e-9 or abs(s3 - 2 * s2) > 1e-9:
            raise ConfigurationError(f"scales must satisfy S2 = 2*S1 and S3 = 2*S2, got {self.scales}")
        if len(self.extent) != 3:
            raise ConfigurationError(f"extent needs three axes, got {self.extent}")
        grid_dims(self.extent, s3)
        ratio = s1 / self.output_cell
        if self.head == "voxel" and (abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1):
            raise ConfigurationError(
                f"S1 / output cell = {ratio} must be a positive integer for the voxel head"
            )
        if self.pool_mode not in ("weighted", "zero"):
            raise ConfigurationError(f"pool_mode must be 'weighted' or 'zero', got {self.pool_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.pointwise_depth < 1 or self.p_max < 1:
            raise ConfigurationError("pointwise_depth and p_max must be positive")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def voxel_config(**overrides) -> FCPNConfig:
    """Semantic voxel labeling: 15/30/60 cm scales, 2.4 m cube, 5 cm output, 21 classes."""
    return FCPNConfig(**overrides)


def part_config(**overrides) -> FCPNConfig:
    """Part segmentation: 10/20/40 cm scales, 2.8 m cube, 50 part classes, 16 object classes."""
    base = dict(head="point", scales=(0.10, 0.20, 0.40), extent=(2.8, 2.8, 2.8),
                output_cell=0.10, class_count=50)
    base.update(overrides)
    return FCPNConfig(**base)


def caption_config(**overrides) -> FCPNConfig:
    base = dict(head="caption")
    base.update(overrides)
    return FCPNConfig(**base)


@dataclass
class FeatureVolume:
    origin: np.ndarray
    cell_size: float
    tensor: Tensor

    @property
    def dims(self):
        return tuple(self.tensor.shape[:3])

    @property
    def channels(self):
        return self.tensor.shape[3]

    @property
    def extent(self):
        return np.asarray(self.dims, dtype=np.float64) * self.cell_size

    def centers(self):
        ijk = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        return self.origin + (ijk + 0.5) * self.cell_size


# ---------------------------------------------------------------------------
# parameters


def _layer_shapes(config: FCPNConfig):
    """Ordered ``name -> (weight shape, bias shape)`` for every learned layer of the config."""
    c = config
    k = c.pointwise_depth
    shapes = {}

    def pw(prefix, cin, cout, depth):
        for j in range(depth):
            shapes[f"{prefix}.{j}"] = ((cin, cout), (cout,))
            cin = cout
        return cin

    cin = 3
    for j, width in enumerate(c.pointnet_widths):
        shapes[f"pointnet.{j}"] = ((cin, width), (width,))
        cin = width
    w1, w2, w3 = c.stage_widths
    pw("level1.pw", cin, w1, k)
    shapes["level2.conv"] = ((2, 2, 2, w1, w2), (w2,))
    pw("level2.pw", w2, w2, k)
    shapes["level3.conv"] = ((2, 2, 2, w2, w3), (w3,))
    pw("level3.pw", w3, w3, k)
    for level, width in zip((1, 2, 3), c.stage_widths):
        shapes[f"skip{level}.near"] = ((width, c.skip_width), (c.skip_width,))
        shapes[f"skip{level}.wide"] = ((3, 3, 3, width, c.skip_width), (c.skip_width,))
    m = c.merge_width
    pw("merge3.pw", 2 * c.skip_width + w3, m, k)
    if c.head == "caption":
        dims = grid_dims(c.extent, c.s3)
        cin = dims[0] * dims[1] * dims[2] * m
        for j, width in enumerate(c.caption_widths + (c.caption_count,)):
            shapes[f"caption.fc.{j}"] = ((cin, width), (width,))
            cin = width
        return shapes
    shapes["up3"] = ((2, 2, 2, m, m), (m,))
    pw("merge2.pw", m + 2 * c.skip_width, m, k)
    shapes["up2"] = ((2, 2, 2, m, m), (m,))
    pw("merge1.pw", m + 2 * c.skip_width, m, k)
    if c.head == "voxel":
        r = c.upsample_factor
        shapes["head.up"] = ((r, r, r, m, c.head_width), (c.head_width,))
        shapes["head.conv"] = ((3, 3, 3, c.head_width, c.class_count), (c.class_count,))
    else:
        cin = m + c.object_class_count
        for j, width in enumerate(c.point_widths + (c.class_count,)):
            shapes[f"point.fc.{j}"] = ((cin, width), (width,))
            cin = width
    return shapes


def init_params(config: FCPNConfig, rng) -> dict:
    """He-style uniform weights scaled by fan-in, zero biases."""
    dtype = np.dtype(config.dtype)
    params = {}
    for name, (wshape, bshape) in _layer_shapes(config).items():
        fan_in = int(np.prod(wshape[:-1]))
        bound = math.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=wshape).astype(dtype), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(bshape, dtype=dtype), requires_grad=True, name=f"{name}.b")
    return params


def parameter_count(params) -> int:
    return int(sum(p.data.size for p in params.values()))


# ---------------------------------------------------------------------------
# building blocks


def _dense(x, params, name, act=True):
    y = T.pointwise_linear(x, params[name + ".w"], params[name + ".b"])
    return T.relu(y) if act else y


def _numbered(params, prefix):
    count = sum(1 for k in params if k.startswith(prefix + ".") and k.endswith(".w"))
    return [f"{prefix}.{j}" for j in range(count)]


def _pointwise_stack(x, params, prefix, depth):
    for j in range(depth):
        x = _dense(x, params, f"{prefix}.{j}")
    return x


def pointnet_abstraction(groups: CellGroups, params, cell_size, origin, dtype=np.float64) -> FeatureVolume:
    """Shared MLP over every grouped point, then a max over each group.

    Only non-empty cells are pushed through the MLP; empty cells stay zero.
    """
    names = _numbered(params, "pointnet")
    dims = groups.dims
    n_cells = dims[0] * dims[1] * dims[2]
    if groups.groups.shape[0] != n_cells:
        raise ConfigurationError("cell groups do not match the grid dimensions")
    width = params[names[-1] + ".w"].shape[1]
    occupied = np.flatnonzero(groups.counts > 0)
    if occupied.size == 0:
        feats = Tensor(np.zeros((n_cells, width), dtype=dtype))
    else:
        x = Tensor(groups.groups[occupied].astype(dtype, copy=False))
        for name in names:
            x = _dense(x, params, name)
        pooled = T.group_max(x, groups.counts[occupied])
        feats = T.scatter_rows(pooled, occupied, n_cells)
    return FeatureVolume(np.asarray(origin, dtype=np.float64), cell_size,
                         T.reshape(feats, dims + (width,)))


def abstraction_level(volume: FeatureVolume, params, prefix, depth) -> FeatureVolume:
    """Octant abstraction: 2x2x2 stride-2 convolution + ReLU, then a 1x1x1 stack."""
    for axis, d in enumerate(volume.dims):
        if d % 2:
            raise ConfigurationError(f"abstraction needs even spatial dims, axis {'XYZ'[axis]} has {d}")
    x = T.relu(T.conv3d(volume.tensor, params[prefix + ".conv.w"], params[prefix + ".conv.b"], stride=2))
    x = _pointwise_stack(x, params, prefix + ".pw", depth)
    return FeatureVolume(volume.origin, volume.cell_size * 2, x)


def skip_features(volume: FeatureVolume, params, prefix):
    """Two same-size skip volumes: a 1x1x1 branch and a padded 3x3x3 branch (three times the scale)."""
    near = _dense(volume.tensor, params, prefix + ".near")
    wide = T.relu(T.conv3d(volume.tensor, params[prefix + ".wide.w"], params[prefix + ".wide.b"],
                           stride=1, padding="symmetric"))
    return (FeatureVolume(volume.origin, volume.cell_size, near),
            FeatureVolume(volume.origin, volume.cell_size * 3, wide))


def sphere_weight(distance, radius):
    """Triangular kernel peaking on the sphere of the given radius, zero at the center and beyond 2R."""
    return np.maximum(0.0, 1.0 - np.abs(distance - radius) / radius)


@lru_cache(maxsize=32)
def pool_matrix(dims, cell_size, radius):
    """Row-normalized sparse matrix mixing every cell with all other cells by sphere weight."""
    dims = tuple(int(d) for d in dims)
    n = dims[0] * dims[1] * dims[2]
    reach = [min(d - 1, int(math.ceil(2 * radius / cell_size))) for d in dims]
    rows, cols, vals = [], [], []
    ijk = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1).reshape(-1, 3)
    flat = np.arange(n)
    for dx in range(-reach[0], reach[0] + 1):
        for dy in range(-reach[1], reach[1] + 1):
            for dz in range(-reach[2], reach[2] + 1):
                w = sphere_weight(math.sqrt(dx * dx + dy * dy + dz * dz) * cell_size, radius)
                if w <= 0:
                    continue
                nb = ijk + (dx, dy, dz)
                ok = np.all((nb >= 0) & (nb < dims), axis=1)
                rows.append(flat[ok])
                cols.append(np.ravel_multi_index(nb[ok].T, dims))
                vals.append(np.full(ok.sum(), w))
    if rows:
        mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    else:
        mat = sp.csr_matrix((n, n))
    totals = np.asarray(mat.sum(axis=1)).ravel()
    scale = np.divide(1.0, totals, out=np.zeros(n), where=totals > 0)
    mat = sp.diags(scale) @ mat
    lonely = np.flatnonzero(totals <= 0)
    if lonely.size and n > 1:
        r = np.repeat(lonely, n)
        c = np.tile(flat, lonely.size)
        keep = r != c
        fallback = sp.csr_matrix((np.full(keep.sum(), 1.0 / (n - 1)), (r[keep], c[keep])), shape=(n, n))
        mat = mat + fallback
    return mat.tocsr()


def weighted_average_pool(top: FeatureVolume, sphere_radius=1.0) -> FeatureVolume:
    """Parameterless long-range context: each cell averages all other cells, weighted by sphere distance."""
    dims = top.dims
    mat = pool_matrix(dims, float(top.cell_size), float(sphere_radius))
    c = top.channels
    flat = T.reshape(top.tensor, (-1, c))
    pooled = T.linear_rows(mat, flat)
    return FeatureVolume(top.origin, top.cell_size, T.reshape(pooled, dims + (c,)))


def _check_same_dims(a, b, what):
    if a.dims != b.dims:
        raise ConfigurationError(f"merge: {what} dims {b.dims} do not match {a.dims}")


def merge_top(skips3, pooled, params, depth) -> FeatureVolume:
    near, wide = skips3
    _check_same_dims(near, pooled, "pooled volume")
    x = T.concat_channels([near.tensor, wide.tensor, pooled.tensor])
    return FeatureVolume(near.origin, near.cell_size, _pointwise_stack(x, params, "merge3.pw", depth))


def merge(skips, pooled, params, depth) -> FeatureVolume:
    """Climb from S3 to S1: concat skips, 1x1x1 stack, 2x deconvolution, repeat."""
    top = merge_top(skips[2], pooled, params, depth)
    x = top.tensor
    for level, up in ((2, "up3"), (1, "up2")):
        x = T.relu(T.deconv3d(x, params[up + ".w"], params[up + ".b"], stride=2))
        near, wide = skips[level - 1]
        if tuple(x.shape[:3]) != near.dims:
            raise ConfigurationError(
                f"merge: upsampled dims {tuple(x.shape[:3])} do not match level {level} dims {near.dims}"
            )
        x = T.concat_channels([x, near.tensor, wide.tensor])
        x = _pointwise_stack(x, params, f"merge{level}.pw", depth)
    s1 = skips[0][0]
    return FeatureVolume(s1.origin, s1.cell_size, x)


def head_voxel(merged: FeatureVolume, params, factor, dropout_rate=0.5, training=False, rng=None) -> FeatureVolume:
    """Dropout, stride-``factor`` deconvolution to output density, padded 3x3x3 conv to class logits."""
    x = T.dropout(merged.tensor, dropout_rate, training, rng)
    x = T.relu(T.deconv3d(x, params["head.up.w"], params["head.up.b"], stride=factor))
    x = T.conv3d(x, params["head.conv.w"], params["head.conv.b"], stride=1, padding="symmetric")
    return FeatureVolume(merged.origin, merged.cell_size / factor, x)


def three_nn(volume_origin, cell_size, dims, query, k=3):
    """Indices and normalized inverse-distance weights of the ``k`` nearest cell centers.

    Queries outside the volume are clamped onto its boundary; the number of
    clamped queries is returned as the third value. A query closer than 1e-9
    to its nearest center snaps to that center.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    origin = np.asarray(volume_origin, dtype=np.float64)
    dims_a = np.asarray(dims)
    upper = origin + dims_a * cell_size
    clamped = np.clip(query, origin, upper)
    n_clamped = int(np.any(clamped != query, axis=1).sum())
    home = np.minimum(np.floor((clamped - origin) / cell_size).astype(np.int64), dims_a - 1)
    span = np.arange(-1, 2)
    offsets = np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)
    cand = home[:, None, :] + offsets[None]
    valid = np.all((cand >= 0) & (cand < dims_a), axis=2)
    cand = np.clip(cand, 0, dims_a - 1)
    centers = origin + (cand + 0.5) * cell_size
    dist = np.sqrt(((clamped[:, None, :] - centers) ** 2).sum(axis=2))
    dist[~valid] = np.inf
    k = min(k, int(valid.sum(axis=1).min()))
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    d = np.take_along_axis(dist, order, axis=1)
    idx = np.ravel_multi_index(np.take_along_axis(cand, order[:, :, None], axis=1).reshape(-1, 3).T, tuple(dims))
    idx = idx.reshape(-1, k)
    snap = d[:, 0] < 1e-9
    inv = 1.0 / np.where(snap[:, None], 1.0, d)
    weights = inv / inv.sum(axis=1, keepdims=True)
    weights[snap] = 0.0
    weights[snap, 0] = 1.0
    return idx, weights, n_clamped


def head_point(merged: FeatureVolume, params, query_points, object_class, object_class_count,
               dropout_rate=0.5, training=False, rng=None):
    """Latent 3-NN interpolation onto query points, one-hot object class, three 1x1x1 layers.

    Returns ``(logits [N, classes], clamped query count)``.
    """
    c = merged.channels
    idx, weights, n_clamped = three_nn(merged.origin, merged.cell_size, merged.dims, query_points)
    flat = T.reshape(merged.tensor, (-1, c))
    latent = T.interpolate_rows(flat, idx, weights)
    if object_class is None or not 0 <= int(object_class) < object_class_count:
        raise InputError(f"object class must lie in [0, {object_class_count}), got {object_class}")
    onehot = np.zeros((latent.shape[0], object_class_count), dtype=latent.dtype)
    onehot[:, int(object_class)] = 1.0
    x = T.concat_channels([latent, Tensor(onehot)])
    names = _numbered(params, "point.fc")
    for j, name in enumerate(names):
        last = j == len(names) - 1
        x = _dense(x, params, name, act=not last)
        if not last:
            x = T.dropout(x, dropout_rate, training, rng)
    return x, n_clamped


def head_caption(top_merged: FeatureVolume, params, dropout_rate=0.5, training=False, rng=None):
    """Flatten the S3 merged volume, three fully-connected layers, caption logits."""
    x = T.reshape(top_merged.tensor, (1, -1))
    names = _numbered(params, "caption.fc")
    expected = params[names[0] + ".w"].shape[0]
    if x.shape[1] != expected:
        raise ConfigurationError(
            f"caption head expects {expected} flattened features, got {x.shape[1]}; "
            "the caption head only accepts the training extent"
        )
    for j, name in enumerate(names):
        last = j == len(names) - 1
        x = _dense(x, params, name, act=not last)
        if not last:
            x = T.dropout(x, dropout_rate, training, rng)
    return T.reshape(x, (-1,))


def top_k_captions(scores, k=3):
    """Ids of the ``k`` highest scores, best first (ties broken by smaller id)."""
    scores = np.asarray(getattr(scores, "data", scores)).reshape(-1)
    return [int(i) for i in np.argsort(-scores, kind="stable")[:k]]


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardOutput:
    logits: Tensor
    origin: np.ndarray
    extent: np.ndarray
    cell_size: float | None = None
    padded: bool = False
    requested_extent: np.ndarray | None = None
    n_out_of_bounds: int = 0
    n_clamped: int = 0
    extras: dict = field(default_factory=dict)

    def probabilities(self):
        z = self.logits.data
        if z.ndim == 1:
            return 1.0 / (1.0 + np.exp(-z))
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def labels(self):
        return self.logits.data.argmax(axis=-1)


class FCPN:
    """Parameters plus the forward composition for one configuration."""

    def __init__(self, config: FCPNConfig, seed: int = 0, params=None):
        self.config = config
        self.params = init_params(config, np.random.default_rng(seed)) if params is None else params

    # -- volumes ----------------------------------------------------------
    def resolve_volume(self, cloud: PointCloud, origin=None, extent=None):
        """Pick ``(origin, extent, padded, requested)`` for a forward pass.

        Without an explicit extent the configured one is used when the cloud
        fits, otherwise the cloud's bounding box is padded up to a multiple
        of S3. Without an explicit origin the volume is centered on the cloud.
        """
        cfg = self.config
        s3 = cfg.s3
        lo, hi = cloud.bounds
        if extent is None:
            need = hi - lo
            base = np.asarray(cfg.extent, dtype=np.float64)
            requested = np.where(need <= base, base, need) if origin is None else base
        else:
            requested = np.broadcast_to(np.asarray(extent, dtype=np.float64), (3,)).copy()
        cells = np.ceil(requested / s3 - 1e-9)
        cells = np.maximum(cells, 1)
        final = cells * s3
        padded = bool(np.any(np.abs(final - requested) > 1e-9))
        if cfg.head == "caption" and np.any(np.abs(final - np.asarray(cfg.extent)) > 1e-9):
            raise ConfigurationError(
                f"caption head needs the fixed training extent {cfg.extent}, got {final.tolist()}"
            )
        if origin is None:
            origin = (lo + hi) / 2.0 - final / 2.0
        else:
            origin = np.broadcast_to(np.asarray(origin, dtype=np.float64), (3,)).copy()
        return origin, final, padded, requested

    def encode(self, cloud: PointCloud, origin=None, extent=None, seed=0, stop_at_top=False):
        """Backbone: returns ``(merged FeatureVolume, metadata dict)``."""
        cfg = self.config
        if len(cloud) == 0:
            raise InputError("cannot run the network on an empty cloud")
        origin, final, padded, requested = self.resolve_volume(cloud, origin, extent)
        grid = build_grid(cloud, origin, final, cfg.s1)
        groups = radius_group(cloud, grid, cfg.radius, cfg.p_max, seed=seed)
        p = self.params
        depth = cfg.pointwise_depth
        dtype = np.dtype(cfg.dtype)
        lvl = pointnet_abstraction(groups, p, cfg.s1, origin, dtype)
        lvl1 = FeatureVolume(lvl.origin, lvl.cell_size, _pointwise_stack(lvl.tensor, p, "level1.pw", depth))
        lvl2 = abstraction_level(lvl1, p, "level2", depth)
        lvl3 = abstraction_level(lvl2, p, "level3", depth)
        skips = [skip_features(v, p, f"skip{i}") for i, v in enumerate((lvl1, lvl2, lvl3), start=1)]
        if cfg.pool_mode == "weighted":
            pooled = weighted_average_pool(lvl3, cfg.pool_sphere_radius)
        else:
            pooled = FeatureVolume(lvl3.origin, lvl3.cell_size, Tensor(np.zeros(lvl3.tensor.shape, dtype=dtype)))
        meta = dict(origin=origin, extent=final, padded=padded, requested=requested,
                    n_out_of_bounds=grid.n_out_of_bounds)
        if stop_at_top:
            return merge_top(skips[2], pooled, p, depth), meta
        return merge(skips, pooled, p, depth), meta

    def forward(self, cloud: PointCloud, origin=None, extent=None, training=False, rng=None,
                query_points=None, object_class=None, seed=0) -> ForwardOutput:
        cfg = self.config
        if cfg.head == "caption":
            top, meta = self.encode(cloud, origin, extent, seed, stop_at_top=True)
            logits = head_caption(top, self.params, cfg.dropout_rate, training, rng)
            return self._output(logits, meta, None)
        merged, meta = self.encode(cloud, origin, extent, seed)
        if cfg.head == "voxel":
            out = head_voxel(merged, self.params, cfg.upsample_factor, cfg.dropout_rate, training, rng)
            return self._output(out.tensor, meta, out.cell_size)
        query = cloud.points if query_points is None else query_points
        oc = cloud.object_class if object_class is None else object_class
        logits, n_clamped = head_point(merged, self.params, query, oc, cfg.object_class_count,
                                       cfg.dropout_rate, training, rng)
        result = self._output(logits, meta, None)
        result.n_clamped = n_clamped
        return result

    __call__ = forward

    @staticmethod
    def _output(logits, meta, cell_size):
        return ForwardOutput(logits, meta["origin"], meta["extent"], cell_size, meta["padded"],
                             meta["requested"], meta["n_out_of_bounds"])

    # -- parameters -------------------------------------------------------
    def parameters(self):
        return self.params

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state, strict=True):
        missing = [k for k in self.params if k not in state]
        unexpected = [k for k in state if k not in self.params]
        if strict and (missing or unexpected):
            raise ConfigurationError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        dtype = np.dtype(self.config.dtype)
        for k, v in state.items():
            if k not in self.params:
                continue
            if tuple(v.shape) != self.params[k].shape:
                raise ConfigurationError(f"{k}: checkpoint shape {tuple(v.shape)} != model shape {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=dtype)

    def freeze(self, prefixes_to_keep=()):
        """Stop gradients for every parameter not starting with one of ``prefixes_to_keep``."""
        for k, v in self.params.items():
            v.requires_grad = any(k.startswith(p) for p in prefixes_to_keep)
            v.grad = None

    def num_parameters(self):
        return parameter_count(self.params)

    def to_bytes(self, extra=None) -> bytes:
        blob = {"model": self.config.to_dict()}
        if extra:
            blob.update(extra)
        return encode_checkpoint(self.params, blob)

    def save(self, path, extra=None):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(extra))

    @classmethod
    def from_bytes(cls, buf, config_overrides=None):
        blob, state = decode_checkpoint(buf)
        if "model" not in blob:
            raise CorruptFileError("checkpoint config blob has no 'model' section")
        cfg_dict = dict(blob["model"])
        cfg_dict.update(config_overrides or {})
        model = cls(FCPNConfig.from_dict(cfg_dict), params={})
        model.params = {k: Tensor(np.array(v, dtype=model.config.dtype), requires_grad=True, name=k)
                        for k, v in state.items()}
        return model, blob

    @classmethod
    def load(cls, path, config_overrides=None):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), config_overrides)
