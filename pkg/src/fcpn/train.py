"""Training loops for the voxel, point and caption heads, plus prediction helpers."""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .cloud_io import AugmentParams, PointCloud, augment, normalize_unit_sphere, resample
from .errors import ConfigurationError, DivergenceError, InputError
from .grid import VoxelLabelGrid, voxelize_labels
from .model import FCPN, FCPNConfig, head_caption, top_k_captions
from .optim import Adam
from .synth import PART_CATEGORIES


@dataclass
class TrainSchedule:
    epochs: int = 5
    initial_lr: float = 0.01
    decay: float = 0.5
    decay_every: int = 1
    batch_size: int = 4
    seed: int = 0
    resample_points: int = 16000

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError(f"schedule.epochs must be >= 1, got {self.epochs}")
        if not self.initial_lr > 0:
            raise ConfigurationError(f"schedule.initial_lr must be positive, got {self.initial_lr}")
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"schedule.decay must lie in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            raise ConfigurationError(f"schedule.decay_every must be >= 1, got {self.decay_every}")
        if self.batch_size < 1:
            raise ConfigurationError(f"schedule.batch_size must be >= 1, got {self.batch_size}")
        if self.resample_points < 0:
            raise ConfigurationError(f"schedule.resample_points must be >= 0, got {self.resample_points}")
        return self

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.decay ** (epoch // self.decay_every)


@dataclass
class TrainResult:
    model: FCPN
    curve: list = field(default_factory=list)  # (step, lr, loss)
    epoch_losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    def write_curve(self, path):
        write_loss_curve(path, self.curve)


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            w.writerow([step, repr(float(lr)), repr(float(loss))])


def label_histogram(labels, class_count):
    counts = np.zeros(class_count, dtype=np.int64)
    for lab in labels:
        lab = np.asarray(getattr(lab, "labels", lab)).ravel()
        counts += np.bincount(lab.astype(np.int64), minlength=class_count)[:class_count]
    return counts


def class_weights(histogram) -> np.ndarray:
    """``1 / ln(1.2 + f_c)`` with ``f_c`` the class share; absent classes get the rarest present weight."""
    counts = np.asarray(histogram, dtype=np.float64)
    if counts.ndim != 1 or np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise InputError("label histogram must be a 1-D array of non-negative counts")
    total = counts.sum()
    if total <= 0:
        raise InputError("label histogram is all zero")
    f = counts / total
    w = 1.0 / np.log(1.2 + f)
    present = counts > 0
    w[~present] = w[present].max()
    return w


def params_digest(params, prefixes=None) -> str:
    """SHA-256 over parameter names and raw bytes, optionally restricted by name prefix."""
    h = hashlib.sha256()
    for name in sorted(params):
        if prefixes is not None and not any(name.startswith(p) for p in prefixes):
            continue
        data = np.ascontiguousarray(getattr(params[name], "data", params[name]))
        h.update(name.encode())
        h.update(str(data.dtype).encode())
        h.update(data.tobytes())
    return h.hexdigest()


def _check_finite(loss, step, result, what):
    if not math.isfinite(loss):
        last = result.checkpoints[-1] if result.checkpoints else None
        raise DivergenceError(f"{what} loss became {loss} at step {step}", last_checkpoint=last)


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _epoch_checkpoint(model, out_dir, tag, epoch, extra):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{tag}_epoch{epoch + 1:03d}.fcpn")
    model.save(path, dict(extra, epoch=epoch + 1))
    return path


def _run(model, schedule, n_samples, sample_loss, out_dir, tag, extra, log, stop=None):
    """Shared epoch / minibatch / ADAM loop; ``sample_loss(i, rng)`` returns a scalar Tensor."""
    schedule.validate()
    rng = np.random.default_rng(schedule.seed)
    opt = Adam(model.params, lr=schedule.initial_lr)
    result = TrainResult(model)
    step = 0
    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        losses = []
        for batch in _batches(rng.permutation(n_samples), schedule.batch_size):
            opt.zero_grad()
            total = 0.0
            for i in batch:
                loss = sample_loss(int(i), rng)
                loss.backward(np.asarray(1.0 / len(batch), dtype=loss.data.dtype))
                total += float(loss.data) / len(batch)
            _check_finite(total, step, result, tag)
            opt.step()
            result.curve.append((step, opt.lr, total))
            losses.append(total)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)))
        path = _epoch_checkpoint(model, out_dir, tag, epoch, dict(extra, schedule=asdict(schedule)))
        if path:
            result.checkpoints.append(path)
        if log:
            log(f"epoch {epoch + 1}/{schedule.epochs} lr {opt.lr:.6g} loss {result.epoch_losses[-1]:.6f}")
        if stop is not None and stop(epoch, result):
            break
    return result


# ---------------------------------------------------------------------------
# voxel labeling


def _as_model(config_or_model, seed):
    if isinstance(config_or_model, FCPN):
        return config_or_model
    cfg = config_or_model.validate() if isinstance(config_or_model, FCPNConfig) else FCPNConfig.from_dict(config_or_model)
    return FCPN(cfg, seed=seed)


def train_voxel(dataset, config, schedule: TrainSchedule, augment_params: AugmentParams | None = None,
                weights=None, out_dir=None, log=None, stop=None) -> TrainResult:
    """Train the voxel head on ``dataset``, a list of ``(cutout cloud, VoxelLabelGrid)`` pairs.

    Each sample is resampled, augmented and re-voxelized so the targets follow
    the augmented geometry; the loss covers every output voxel, unoccupied
    included. ``stop(epoch, result)`` may end training early.
    """
    model = _as_model(config, schedule.seed)
    cfg = model.config
    if cfg.head != "voxel":
        raise ConfigurationError(f"train_voxel needs a voxel head, got {cfg.head!r}")
    if not dataset:
        raise InputError("training set is empty")
    if weights is None:
        weights = class_weights(label_histogram([g for _, g in dataset], cfg.class_count))
    weights = np.asarray(weights, dtype=np.float64)
    extent = np.asarray(cfg.extent, dtype=np.float64)

    def sample_loss(i, rng):
        cloud, grid = dataset[i]
        if schedule.resample_points:
            cloud = resample(cloud, schedule.resample_points, rng)
        if augment_params is not None:
            cloud = augment(cloud, augment_params, rng)
            grid = voxelize_labels(cloud, grid.origin, extent, cfg.output_cell)
        out = model.forward(cloud, origin=grid.origin, extent=extent, training=True, rng=rng,
                            seed=int(rng.integers(2**31)))
        if out.logits.shape[:3] != grid.labels.shape:
            raise ConfigurationError(f"output dims {out.logits.shape[:3]} differ from label dims {grid.labels.shape}")
        logits = T.reshape(out.logits, (-1, cfg.class_count))
        return T.weighted_softmax_xent(logits, grid.labels.ravel().astype(np.int64), weights)

    return _run(model, schedule, len(dataset), sample_loss, out_dir, "voxel", {}, log, stop)


def predict_voxels(model: FCPN, cloud: PointCloud, origin=None, extent=None, seed=0):
    """Label grid for ``cloud`` plus the forward output it came from."""
    with T.no_grad():
        out = model.forward(cloud, origin=origin, extent=extent, seed=seed)
    labels = out.labels().astype(np.uint8)
    return VoxelLabelGrid(np.asarray(out.origin, dtype=np.float64), float(out.cell_size), labels), out


# ---------------------------------------------------------------------------
# part segmentation


def part_table():
    return {i: parts for i, (_, parts) in enumerate(PART_CATEGORIES)}


def _part_volume(cfg):
    extent = np.asarray(cfg.extent, dtype=np.float64)
    return -extent / 2.0, extent


def train_parts(dataset, config, schedule: TrainSchedule, augment_params: AugmentParams | None = None,
                weights=None, out_dir=None, log=None, stop=None) -> TrainResult:
    """Train the point head on labeled shapes carrying ``object_class``.

    Shapes are scaled into the unit sphere and placed at the center of the
    configured extent.
    """
    model = _as_model(config, schedule.seed)
    cfg = model.config
    if cfg.head != "point":
        raise ConfigurationError(f"train_parts needs a point head, got {cfg.head!r}")
    if not dataset:
        raise InputError("training set is empty")
    for k, shape in enumerate(dataset):
        if shape.labels is None or shape.object_class is None:
            raise InputError(f"shape {k} needs part labels and an object class")
    if weights is None:
        weights = class_weights(label_histogram([s.labels for s in dataset], cfg.class_count))
    weights = np.asarray(weights, dtype=np.float64)
    normalized = [normalize_unit_sphere(s)[0] for s in dataset]
    origin, extent = _part_volume(cfg)

    def sample_loss(i, rng):
        cloud = normalized[i]
        if augment_params is not None:
            cloud = augment(cloud, augment_params, rng)
        out = model.forward(cloud, origin=origin, extent=extent, training=True, rng=rng,
                            seed=int(rng.integers(2**31)))
        return T.weighted_softmax_xent(out.logits, cloud.labels.astype(np.int64), weights)

    return _run(model, schedule, len(dataset), sample_loss, out_dir, "parts", {}, log, stop)


def predict_parts(model: FCPN, shape: PointCloud, seed=0):
    """Per-point part ids, restricted to the part set of the shape's category."""
    if shape.object_class is None:
        raise InputError("part prediction needs the shape's object class")
    cloud, _, _ = normalize_unit_sphere(shape)
    origin, extent = _part_volume(model.config)
    with T.no_grad():
        out = model.forward(cloud, origin=origin, extent=extent, seed=seed)
    parts = np.asarray(part_table()[int(shape.object_class)])
    return parts[out.logits.data[:, parts].argmax(axis=1)]


# ---------------------------------------------------------------------------
# captions


def caption_model_from_backbone(backbone: FCPN, caption_count=25, caption_widths=None, seed=0) -> FCPN:
    """Caption-head model sharing (copies of) the backbone weights of ``backbone``."""
    changes = dict(head="caption", caption_count=caption_count)
    if caption_widths is not None:
        changes["caption_widths"] = tuple(caption_widths)
    cfg = backbone.config.replace(**changes).validate()
    model = FCPN(cfg, seed=seed)
    shared = {k: v for k, v in backbone.state_dict().items() if k in model.params}
    model.load_state_dict(shared, strict=False)
    return model


def train_captions(frames, targets, model: FCPN, schedule: TrainSchedule, weights=None,
                   out_dir=None, log=None, stop=None) -> TrainResult:
    """Train only the caption layers of ``model`` on multi-hot ``targets``.

    Backbone features are computed once per frame since the backbone is frozen.
    """
    cfg = model.config
    if cfg.head != "caption":
        raise ConfigurationError(f"train_captions needs a caption head, got {cfg.head!r}")
    targets = np.asarray(targets)
    if targets.shape != (len(frames), cfg.caption_count):
        raise InputError(f"targets must have shape ({len(frames)}, {cfg.caption_count}), got {targets.shape}")
    if weights is None:
        weights = class_weights(targets.sum(axis=0))
    model.freeze(("caption.",))
    with T.no_grad():
        features = [model.encode(f, seed=0, stop_at_top=True)[0] for f in frames]

    def sample_loss(i, rng):
        logits = head_caption(features[i], model.params, cfg.dropout_rate, True, rng)
        return T.sigmoid_bce(logits, targets[i], weights)

    return _run(model, schedule, len(frames), sample_loss, out_dir, "captions", {}, log, stop)


def predict_captions(model: FCPN, frame: PointCloud, k=3):
    """``[(caption id, sigmoid score)]`` for the ``k`` best captions."""
    with T.no_grad():
        out = model.forward(frame)
    scores = out.probabilities()
    return [(i, float(scores[i])) for i in top_k_captions(scores, k)]
