"""Point-cloud files, resampling and on-the-fly augmentation."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, ParseError, UnsupportedFormatError


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    object_class: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise InputError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.points.shape[0]:
                raise InputError(
                    f"{self.labels.shape[0]} labels for {self.points.shape[0]} points"
                )

    def __len__(self):
        return self.points.shape[0]

    @property
    def bounds(self):
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.points.min(axis=0), self.points.max(axis=0)

    def subset(self, index) -> "PointCloud":
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.points[index], labels, self.object_class)

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.labels, self.object_class)


# ---------------------------------------------------------------------------
# file formats

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FORMATS = ("ply-ascii", "ply-binary-le", "xyz-text", "xyzl-text")


def _guess_format(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(256).split(b"\n")
        for line in head[:3]:
            if line.startswith(b"format ascii"):
                return "ply-ascii"
            if line.startswith(b"format binary_little_endian"):
                return "ply-binary-le"
        raise UnsupportedFormatError(f"{path}: unknown PLY format line")
    if ext == ".xyzl":
        return "xyzl-text"
    if ext in (".xyz", ".txt"):
        return "xyz-text"
    raise UnsupportedFormatError(f"cannot infer cloud format from extension {ext!r}")


def load_cloud(path, format: str | None = None, class_count: int | None = None) -> PointCloud:
    """Read a cloud. ``class_count`` (if given) bounds the admissible label ids."""
    fmt = format or _guess_format(path)
    if fmt in ("xyz-text", "xyzl-text"):
        with open(path, "r", encoding="utf-8") as fh:
            cloud = parse_xyz(fh.read(), with_labels=fmt == "xyzl-text", source=str(path))
    elif fmt in ("ply-ascii", "ply-binary-le"):
        with open(path, "rb") as fh:
            cloud = parse_ply(fh.read(), source=str(path))
    else:
        raise UnsupportedFormatError(f"unknown cloud format {fmt!r}; expected one of {_FORMATS}")
    if class_count is not None and cloud.labels is not None and len(cloud):
        if cloud.labels.min() < 0 or cloud.labels.max() >= class_count:
            raise InputError(
                f"{path}: label {int(cloud.labels.max())} outside [0, {class_count})"
            )
    return cloud


_OBJECT_CLASS = re.compile(r"#\s*object_class\s*[:=]\s*(-?\d+)")


def parse_xyz(text: str, with_labels: bool, source: str = "<string>") -> PointCloud:
    """Parse ``x y z`` (or ``x y z label``) lines; ``#`` starts a comment.

    A comment of the form ``# object_class: k`` sets the cloud's object class.
    """
    width = 4 if with_labels else 3
    rows, labels = [], []
    object_class = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line, _, comment = raw.partition("#")
        if comment:
            m = _OBJECT_CLASS.match("#" + comment)
            if m:
                object_class = int(m.group(1))
        fields = line.split()
        if not fields:
            continue
        if len(fields) != width:
            raise ParseError(f"{source}:{lineno}: expected {width} fields, found {len(fields)}")
        try:
            xyz = [float(v) for v in fields[:3]]
            lab = int(fields[3]) if with_labels else None
        except ValueError:
            raise ParseError(f"{source}:{lineno}: malformed number in {raw.strip()!r}") from None
        if not all(math.isfinite(v) for v in xyz):
            raise ParseError(f"{source}:{lineno}: non-finite coordinate")
        rows.append(xyz)
        if with_labels:
            labels.append(lab)
    points = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return PointCloud(points, np.array(labels, dtype=np.int64) if with_labels else None, object_class)


def _parse_ply_header(buf, source):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise ParseError(f"{source}: missing 'ply' magic or 'end_header'")
    nl = buf.find(b"\n", end)
    body_offset = len(buf) if nl < 0 else nl + 1
    try:
        lines = buf[:end].decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise ParseError(f"{source}: PLY header is not ASCII") from None
    fmt = None
    elements = []
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3:
                raise ParseError(f"{source}:{lineno}: malformed format line")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(f"{source}:{lineno}: malformed element line")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"{source}:{lineno}: property before any element")
            if len(tok) >= 2 and tok[1] == "list":
                if elements[-1][0] == "vertex":
                    raise UnsupportedFormatError(f"{source}:{lineno}: list properties on vertices")
                elements[-1][2].append(("list", None))
                continue
            if len(tok) != 3:
                raise ParseError(f"{source}:{lineno}: malformed property line")
            if tok[1] not in _PLY_TYPES:
                raise UnsupportedFormatError(f"{source}:{lineno}: property type {tok[1]!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"{source}:{lineno}: unexpected header keyword {tok[0]!r}")
    if fmt is None:
        raise ParseError(f"{source}: missing format line")
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormatError(f"{source}: PLY format {fmt!r} (only ascii and binary_little_endian)")
    if not elements or elements[0][0] != "vertex":
        raise UnsupportedFormatError(f"{source}: first PLY element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"{source}: vertex element lacks property {axis!r}")
        if dict(props)[axis] not in ("f4", "f8"):
            raise UnsupportedFormatError(f"{source}: coordinate {axis!r} must be float32 or float64")
    if "label" in names and dict(props)["label"][0] not in "iu":
        raise UnsupportedFormatError(f"{source}: 'label' property must be an integer type")
    return fmt, count, props, body_offset


def parse_ply(buf: bytes, source: str = "<bytes>") -> PointCloud:
    fmt, count, props, offset = _parse_ply_header(buf, source)
    has_label = any(name == "label" for name, _ in props)
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        need = dtype.itemsize * count
        if len(buf) - offset < need:
            raise ParseError(
                f"{source}: vertex data truncated at byte {len(buf)}, need {offset + need}"
            )
        rec = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
        points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        labels = rec["label"].astype(np.int64) if has_label else None
    else:
        text = buf[offset:].decode("ascii", errors="replace").splitlines()
        header_lines = buf[:offset].count(b"\n")
        names = [n for n, _ in props]
        rows = []
        for i in range(count):
            lineno = header_lines + i + 1
            if i >= len(text):
                raise ParseError(f"{source}:{lineno}: expected {count} vertices, file ends after {i}")
            fields = text[i].split()
            if len(fields) < len(names):
                raise ParseError(f"{source}:{lineno}: expected {len(names)} values, found {len(fields)}")
            try:
                rows.append([float(v) for v in fields[: len(names)]])
            except ValueError:
                raise ParseError(f"{source}:{lineno}: malformed number") from None
        table = np.array(rows, dtype=np.float64).reshape(count, len(names))
        points = table[:, [names.index(a) for a in "xyz"]]
        labels = table[:, names.index("label")].astype(np.int64) if has_label else None
    if not np.all(np.isfinite(points)):
        raise ParseError(f"{source}: non-finite coordinate in vertex data")
    return PointCloud(points, labels)


def save_cloud(path, cloud: PointCloud, format: str | None = None):
    fmt = format or _guess_format_for_write(path, cloud)
    if fmt in ("xyz-text", "xyzl-text"):
        lines = []
        if cloud.object_class is not None:
            lines.append(f"# object_class: {cloud.object_class}")
        if fmt == "xyzl-text":
            if cloud.labels is None:
                raise InputError("xyzl output needs labels")
            for p, lab in zip(cloud.points.tolist(), cloud.labels.tolist()):
                lines.append(f"{p[0]!r} {p[1]!r} {p[2]!r} {lab}")
        else:
            for p in cloud.points.tolist():
                lines.append(f"{p[0]!r} {p[1]!r} {p[2]!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        return
    if fmt not in ("ply-ascii", "ply-binary-le"):
        raise UnsupportedFormatError(f"unknown cloud format {fmt!r}")
    has_label = cloud.labels is not None
    head = ["ply", "format " + ("ascii 1.0" if fmt == "ply-ascii" else "binary_little_endian 1.0"),
            f"element vertex {len(cloud)}",
            "property double x", "property double y", "property double z"]
    if has_label:
        head.append("property int label")
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode("ascii")
    if fmt == "ply-binary-le":
        dtype = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")] + ([("label", "<i4")] if has_label else [])
        rec = np.empty(len(cloud), dtype=dtype)
        rec["x"], rec["y"], rec["z"] = cloud.points.T
        if has_label:
            rec["label"] = cloud.labels
        body = rec.tobytes()
    else:
        rows = []
        for i, p in enumerate(cloud.points.tolist()):
            row = f"{p[0]!r} {p[1]!r} {p[2]!r}"
            if has_label:
                row += f" {int(cloud.labels[i])}"
            rows.append(row)
        body = ("\n".join(rows) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + body)


def _guess_format_for_write(path, cloud):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return "ply-binary-le"
    if ext == ".xyzl":
        return "xyzl-text"
    if ext in (".xyz", ".txt"):
        return "xyzl-text" if cloud.labels is not None and ext == ".txt" else "xyz-text"
    raise UnsupportedFormatError(f"cannot infer cloud format from extension {ext!r}")


# ---------------------------------------------------------------------------
# sampling and augmentation


def resample(cloud: PointCloud, n: int, rng) -> PointCloud:
    """Draw exactly ``n`` points; without replacement when possible."""
    if len(cloud) == 0:
        raise InputError("cannot resample an empty cloud")
    idx = rng.choice(len(cloud), size=n, replace=len(cloud) < n)
    return cloud.subset(idx)


@dataclass
class AugmentParams:
    rotation: bool = False
    jitter: float = 0.0
    dropout_range: tuple | None = None
    shift_range: float = 0.0
    scale_range: float = 0.0
    up_axis: int = 2

    def validate(self):
        if self.jitter < 0 or self.shift_range < 0:
            raise ConfigurationError("jitter and shift ranges must be non-negative")
        if not 0.0 <= self.scale_range < 1.0:
            raise ConfigurationError(f"scale_range must lie in [0, 1), got {self.scale_range}")
        if self.dropout_range is not None:
            lo, hi = self.dropout_range
            if not 0.0 <= lo <= hi < 1.0:
                raise ConfigurationError(f"dropout_range must satisfy 0 <= lo <= hi < 1, got {self.dropout_range}")
        if self.up_axis not in (0, 1, 2):
            raise ConfigurationError(f"up_axis must be 0, 1 or 2, got {self.up_axis}")


def voxel_augment_params() -> AugmentParams:
    """Semantic voxel labeling recipe: up-axis rotation, +-2 cm jitter, 0-80% dropout."""
    return AugmentParams(rotation=True, jitter=0.02, dropout_range=(0.0, 0.8))


def part_augment_params() -> AugmentParams:
    """Part segmentation recipe: the voxel recipe plus +-5 cm shift and +-10% scale, no rotation."""
    return AugmentParams(jitter=0.02, dropout_range=(0.0, 0.8), shift_range=0.05, scale_range=0.1)


def rotate_about_up(points, angle, up_axis=2, center=None):
    a, b = [i for i in range(3) if i != up_axis]
    center = points.mean(axis=0) if center is None else center
    c, s = math.cos(angle), math.sin(angle)
    out = points.copy()
    da = points[:, a] - center[a]
    db = points[:, b] - center[b]
    out[:, a] = center[a] + c * da - s * db
    out[:, b] = center[b] + s * da + c * db
    return out


def augment(cloud: PointCloud, params: AugmentParams, rng, angle: float | None = None) -> PointCloud:
    """Apply rotation, scale, shift, jitter and point dropout, in that order.

    ``angle`` forces the rotation angle instead of drawing it.
    """
    params.validate()
    pts = cloud.points.copy()
    if len(cloud) == 0:
        return cloud.with_points(pts)
    if params.rotation:
        theta = rng.uniform(0.0, 2.0 * math.pi) if angle is None else angle
        pts = rotate_about_up(pts, theta, params.up_axis)
    if params.scale_range > 0:
        factor = rng.uniform(1.0 - params.scale_range, 1.0 + params.scale_range)
        center = pts.mean(axis=0)
        pts = center + (pts - center) * factor
    if params.shift_range > 0:
        pts = pts + rng.uniform(-params.shift_range, params.shift_range, size=3)
    if params.jitter > 0:
        pts = pts + rng.uniform(-params.jitter, params.jitter, size=pts.shape)
    out = cloud.with_points(pts)
    if params.dropout_range is None:
        return out
    lo, hi = params.dropout_range
    for _ in range(10):
        rate = rng.uniform(lo, hi)
        keep = rng.random(len(out)) >= rate
        if keep.any():
            return out.subset(np.flatnonzero(keep))
    raise InputError("point dropout removed every point in 10 consecutive draws")


def normalize_unit_sphere(cloud: PointCloud):
    """Center on the centroid and scale so the farthest point lies at distance 1.

    Returns ``(cloud, scale, center)``; the input is ``points / scale + center``.
    """
    if len(cloud) == 0:
        raise InputError("cannot normalize an empty cloud")
    center = cloud.points.mean(axis=0)
    rel = cloud.points - center
    radius = float(np.sqrt((rel**2).sum(axis=1)).max())
    scale = 1.0 / radius if radius > 0 else 1.0
    return cloud.with_points(rel * scale), scale, center


def denormalize(points, scale, center):
    return np.asarray(points) / scale + center
