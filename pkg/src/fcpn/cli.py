"""Command-line entry point: ``fcpn train|infer|eval|synth|inspect``.

Exit codes: 0 success, 2 invalid configuration or input (including missing
files and dimension mismatches), 3 training divergence, 4 corrupt binary file.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import MAGIC as CHECKPOINT_MAGIC
from .checkpoint import decode_checkpoint, file_sha256
from .cloud_io import AugmentParams, PointCloud, load_cloud, part_augment_params, save_cloud, voxel_augment_params
from .errors import ConfigurationError, CorruptFileError, DivergenceError, FCPNError, InputError
from .grid import FCVX_MAGIC, decode_fcvx, extract_training_volumes, save_fcvx
from .metrics import eval_parts, eval_voxel
from .model import FCPN, FCPNConfig, _layer_shapes, caption_config, part_config, voxel_config
from .synth import CLASS_NAMES, synth_caption_frames, synth_part_shapes, synth_scenes
from .train import (TrainSchedule, caption_model_from_backbone, part_table, predict_captions,
                    predict_parts, predict_voxels, train_captions, train_parts, train_voxel, write_loss_curve)

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_CORRUPT = 0, 2, 3, 4

TASKS = {"voxel": voxel_config, "parts": part_config, "captions": caption_config}
TASK_HEADS = {"voxel": "voxel", "parts": "point", "captions": "caption"}
CLOUD_PATTERNS = ("*.xyzl", "*.xyz", "*.ply", "*.txt")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class DataParams:
    volume: float = 2.4
    stride: float = 1.2
    min_occupancy: float = 0.02
    min_valid_label_fraction: float = 0.7


@dataclass
class Paths:
    dataset: str | None = None
    checkpoint: str | None = None
    output: str | None = None


@dataclass
class RunConfig:
    task: str = "voxel"
    seed: int = 0
    model: FCPNConfig = field(default_factory=voxel_config)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    augment: AugmentParams | None = field(default_factory=voxel_augment_params)
    data: DataParams = field(default_factory=DataParams)
    paths: Paths = field(default_factory=Paths)

    def to_dict(self):
        return {
            "task": self.task,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "schedule": dataclasses.asdict(self.schedule),
            "augment": None if self.augment is None else _jsonable(dataclasses.asdict(self.augment)),
            "data": dataclasses.asdict(self.data),
            "paths": dataclasses.asdict(self.paths),
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigurationError("config: top level must be an object")
        _reject_unknown(doc, {f.name for f in dataclasses.fields(cls)}, "config")
        task = doc.get("task", "voxel")
        if task not in TASKS:
            raise ConfigurationError(f"task: must be one of {sorted(TASKS)}, got {task!r}")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigurationError(f"seed: must be an integer, got {seed!r}")
        model_doc = _section(doc, "model")
        _reject_unknown(model_doc, {f.name for f in dataclasses.fields(FCPNConfig)}, "model")
        try:
            model = TASKS[task](**_tuples(model_doc))
        except (TypeError, ConfigurationError) as exc:
            raise ConfigurationError(f"model: {exc}") from None
        if model.head != TASK_HEADS[task]:
            raise ConfigurationError(f"model.head: task {task!r} needs head {TASK_HEADS[task]!r}, got {model.head!r}")
        schedule_doc = dict(_section(doc, "schedule"))
        if schedule_doc.setdefault("seed", seed) != seed:
            raise ConfigurationError("schedule.seed: must equal the top-level seed, which drives all randomness")
        schedule = _build(TrainSchedule, schedule_doc, "schedule")
        try:
            schedule.validate()
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc)) from None
        if "augment" in doc and doc["augment"] is None:
            augment = None
        else:
            default = {"voxel": voxel_augment_params(), "parts": part_augment_params(), "captions": None}[task]
            aug_doc = _section(doc, "augment")
            if default is None and not aug_doc:
                augment = None
            else:
                base = dataclasses.asdict(default or AugmentParams())
                base.update(aug_doc)
                augment = _build(AugmentParams, _tuples(base), "augment")
                try:
                    augment.validate()
                except ConfigurationError as exc:
                    raise ConfigurationError(f"augment: {exc}") from None
        data = _build(DataParams, _section(doc, "data"), "data")
        if task == "voxel" and any(abs(e - data.volume) > 1e-9 for e in model.extent):
            raise ConfigurationError(f"data.volume: training cutouts of {data.volume} m do not match "
                                     f"model.extent {list(model.extent)}")
        paths = _build(Paths, _section(doc, "paths"), "paths")
        return cls(task, seed, model, schedule, augment, data, paths)

    @classmethod
    def loads(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(doc)


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _reject_unknown(doc, known, where):
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigurationError(f"{where}.{unknown[0]}: unknown key")


def _section(doc, name):
    value = doc.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigurationError(f"{name}: must be an object")
    return value


def _build(kind, doc, where):
    fields = {f.name: f for f in dataclasses.fields(kind)}
    _reject_unknown(doc, fields, where)
    defaults = kind()
    for key, value in doc.items():
        expected = type(getattr(defaults, key))
        if value is None:
            continue
        if getattr(defaults, key) is None:
            # optional fields hold strings (paths) or nested objects
            if "str" in str(fields[key].type) and not isinstance(value, str):
                raise ConfigurationError(f"{where}.{key}: expected a string, got {value!r}")
            continue
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if not isinstance(value, expected) or (expected is not bool and isinstance(value, bool)):
            raise ConfigurationError(f"{where}.{key}: expected {expected.__name__}, got {value!r}")
    return kind(**doc)


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.loads(fh.read())


# ---------------------------------------------------------------------------
# datasets


def _cloud_files(directory):
    if not directory or not os.path.isdir(directory):
        raise InputError(f"dataset directory {directory!r} does not exist")
    files = sorted({f for pat in CLOUD_PATTERNS for f in glob.glob(os.path.join(directory, pat))})
    if not files:
        raise InputError(f"dataset directory {directory!r} holds no point cloud files")
    return files


def _voxel_dataset(run: RunConfig):
    samples = []
    d = run.data
    for path in _cloud_files(run.paths.dataset):
        scene = load_cloud(path, class_count=run.model.class_count)
        if scene.labels is None:
            raise InputError(f"{path}: training scenes need per-point labels")
        samples.extend(extract_training_volumes(scene, d.volume, d.stride, d.min_occupancy,
                                                d.min_valid_label_fraction, occupancy_cell=run.model.s1,
                                                label_cell=run.model.output_cell))
    if not samples:
        raise InputError("no training volume passed the occupancy and label filters")
    return samples


def _part_dataset(run: RunConfig):
    shapes = [load_cloud(p, class_count=run.model.class_count) for p in _cloud_files(run.paths.dataset)]
    for p, s in zip(_cloud_files(run.paths.dataset), shapes):
        if s.labels is None or s.object_class is None:
            raise InputError(f"{p}: part shapes need labels and an '# object_class: k' line")
    return shapes


def _caption_dataset(run: RunConfig):
    files = _cloud_files(run.paths.dataset)
    index_path = os.path.join(run.paths.dataset, "captions.json")
    if not os.path.isfile(index_path):
        raise InputError(f"{index_path} does not exist")
    with open(index_path, encoding="utf-8") as fh:
        index = json.load(fh)
    frames, targets = [], []
    for path in files:
        name = os.path.basename(path)
        if name not in index:
            raise InputError(f"{index_path}: no captions listed for {name}")
        row = np.zeros(run.model.caption_count, dtype=np.int64)
        ids = np.asarray(index[name], dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= run.model.caption_count):
            raise InputError(f"{index_path}: caption id outside [0, {run.model.caption_count}) for {name}")
        row[ids] = 1
        cloud = load_cloud(path)
        frames.append(PointCloud(cloud.points))
        targets.append(row)
    return frames, np.stack(targets)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    overrides = {}
    for flag, key in (("epochs", "epochs"), ("lr", "initial_lr"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    if args.seed is not None:
        run.seed = args.seed
    overrides["seed"] = run.seed
    run.schedule = dataclasses.replace(run.schedule, **overrides).validate()
    for flag in ("dataset", "checkpoint", "output"):
        if getattr(args, flag) is not None:
            setattr(run.paths, flag, getattr(args, flag))
    if not run.paths.output:
        raise ConfigurationError("paths.output: required")
    if not run.paths.dataset:
        raise ConfigurationError("paths.dataset: required")
    log = (lambda msg: print(msg, file=sys.stderr)) if not args.quiet else None
    ckpt_dir = os.path.join(run.paths.output, "checkpoints")
    if run.task == "voxel":
        result = train_voxel(_voxel_dataset(run), run.model, run.schedule, run.augment, out_dir=ckpt_dir, log=log)
    elif run.task == "parts":
        result = train_parts(_part_dataset(run), run.model, run.schedule, run.augment, out_dir=ckpt_dir, log=log)
    else:
        if not run.paths.checkpoint:
            raise ConfigurationError("paths.checkpoint: caption training needs a backbone checkpoint")
        backbone, _ = FCPN.load(run.paths.checkpoint)
        frames, targets = _caption_dataset(run)
        model = caption_model_from_backbone(backbone, run.model.caption_count, run.model.caption_widths,
                                            seed=run.seed)
        result = train_captions(frames, targets, model, run.schedule, out_dir=ckpt_dir, log=log)
    final = os.path.join(run.paths.output, "final.fcpn")
    # paths stay out of the checkpoint so identical runs hash identically wherever they write
    record = {k: v for k, v in run.to_dict().items() if k != "paths"}
    result.model.save(final, {"run": record})
    write_loss_curve(os.path.join(run.paths.output, "loss.csv"), result.curve)
    with open(os.path.join(run.paths.output, "run.json"), "w", encoding="utf-8") as fh:
        fh.write(run.dumps() + "\n")
    print(f"checkpoint {final} sha256 {file_sha256(final)}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = FCPN.load(args.checkpoint)
    head = model.config.head
    if args.head is not None and args.head != head:
        raise ConfigurationError(f"checkpoint holds a {head!r} head, not {args.head!r}")
    cloud = load_cloud(args.input)
    if head == "voxel":
        if not args.output:
            raise ConfigurationError("voxel inference needs an output path")
        grid, out = predict_voxels(model, cloud)
        if out.padded:
            print(f"notice: extent {out.requested_extent.tolist()} padded to {out.extent.tolist()}",
                  file=sys.stderr)
        if out.n_out_of_bounds:
            print(f"notice: {out.n_out_of_bounds} points fell outside the volume", file=sys.stderr)
        save_fcvx(args.output, grid)
        print(f"wrote {args.output} dims {','.join(map(str, grid.dims))} cell {grid.cell_size:g}")
    elif head == "point":
        if args.object_class is not None:
            cloud = dataclasses.replace(cloud, object_class=args.object_class)
        if not args.output:
            raise ConfigurationError("point inference needs an output path")
        labels = predict_parts(model, cloud)
        save_cloud(args.output, PointCloud(cloud.points, labels, cloud.object_class), format="xyzl-text")
        print(f"wrote {args.output} points {len(cloud)}")
    else:
        for cid, score in predict_captions(model, cloud, k=3):
            print(f"{cid} {score:.6f}")
    return EXIT_OK


def _paired(preds, gts):
    if len(preds) != len(gts):
        raise InputError(f"{len(preds)} prediction files but {len(gts)} ground-truth files")
    for p in list(preds) + list(gts):
        if not os.path.isfile(p):
            raise InputError(f"{p} does not exist")


def _load_fcvx(path):
    with open(path, "rb") as fh:
        return decode_fcvx(fh.read())


def cmd_eval(args) -> int:
    _paired(args.pred, args.gt)
    if args.mode == "voxel":
        preds = [_load_fcvx(p) for p in args.pred]
        gts = [_load_fcvx(g) for g in args.gt]
        freq = None
        if args.frequencies:
            with open(args.frequencies, encoding="utf-8") as fh:
                freq = {int(k): float(v) for k, v in json.load(fh).items()}
        for p, g, name in zip(preds, gts, args.gt):
            if p.dims != g.dims:
                raise InputError(f"{name}: prediction dims {p.dims} do not match ground truth dims {g.dims}")
        pred = np.concatenate([p.labels.ravel() for p in preds])
        gt = np.concatenate([g.labels.ravel() for g in gts])
        report = eval_voxel(pred, gt, freq, class_count=args.class_count)
    else:
        preds = [load_cloud(p) for p in args.pred]
        gts = [load_cloud(g) for g in args.gt]
        cats = []
        for p, g, name in zip(preds, gts, args.gt):
            if g.object_class is None:
                raise InputError(f"{name}: ground truth needs an '# object_class: k' line")
            if p.labels is None or g.labels is None:
                raise InputError(f"{name}: part evaluation needs labeled clouds")
            cats.append(g.object_class)
        report = eval_parts([p.labels for p in preds], [g.labels for g in gts], cats, part_table())
    print(report.summary())
    if args.csv:
        report.write_csv(args.csv)
    else:
        print("class,total,correct,accuracy")
        for c, total, correct, acc in report.rows():
            print(f"{c},{total},{correct},{float(acc)!r}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        os.makedirs(args.out, exist_ok=True)
        probe = os.path.join(args.out, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise InputError(f"cannot write to {args.out}: {exc.strerror}") from None
    if args.kind == "scenes":
        for i, scene in enumerate(synth_scenes(args.seed, args.count, (args.extent,) * 3)):
            save_cloud(os.path.join(args.out, f"scene_{i:04d}.xyzl"), scene)
    elif args.kind == "parts":
        for i, shape in enumerate(synth_part_shapes(args.seed, args.count)):
            save_cloud(os.path.join(args.out, f"shape_{i:04d}.xyzl"), shape)
    else:
        frames, targets = synth_caption_frames(args.seed, args.count, extent=(args.extent,) * 3)
        index = {}
        for i, (frame, row) in enumerate(zip(frames, targets)):
            name = f"frame_{i:04d}.xyz"
            save_cloud(os.path.join(args.out, name), frame)
            index[name] = [int(c) for c in np.flatnonzero(row)]
        with open(os.path.join(args.out, "captions.json"), "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)
    print(f"wrote {args.count} {args.kind} to {args.out}")
    return EXIT_OK


def _inspect_checkpoint(buf, args):
    blob, state = decode_checkpoint(buf)
    cfg = blob.get("model")
    print("format: FCPN checkpoint")
    if cfg is not None:
        print(f"head: {cfg.get('head')}")
        print("config: " + json.dumps(cfg, sort_keys=True))
    total = 0
    for name in state:
        n = int(np.prod(state[name].shape))
        total += n
        if args.verbose:
            print(f"  {name} {'x'.join(map(str, state[name].shape))} {n}")
    print(f"tensors: {len(state)}")
    print(f"parameters: {total}")
    if cfg is not None:
        try:
            shapes = _layer_shapes(FCPNConfig.from_dict(_tuples(cfg)))
            expected = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in shapes.values())
            print(f"parameters expected from config: {expected}")
        except ConfigurationError as exc:
            print(f"config does not validate: {exc}")


def _inspect_fcvx(buf, args):
    grid = decode_fcvx(buf)
    print("format: FCVX label grid")
    print(f"dims: {','.join(map(str, grid.dims))}")
    print(f"cell: {grid.cell_size:g}")
    print(f"origin: {','.join(f'{v:g}' for v in grid.origin)}")
    counts = np.bincount(grid.labels.ravel(), minlength=1)
    print("class,name,count")
    for c in np.flatnonzero(counts):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else ""
        print(f"{c},{name},{counts[c]}")
    if args.slices:
        os.makedirs(args.slices, exist_ok=True)
        axis = "xyz".index(args.axis)
        for k in range(grid.dims[axis]):
            plane = np.take(grid.labels, k, axis=axis)
            np.savetxt(os.path.join(args.slices, f"slice_{args.axis}{k:03d}.csv"), plane, fmt="%d", delimiter=",")
        print(f"wrote {grid.dims[axis]} slices to {args.slices}")


def cmd_inspect(args) -> int:
    if not os.path.isfile(args.path):
        raise InputError(f"{args.path} does not exist")
    with open(args.path, "rb") as fh:
        buf = fh.read()
    if buf[:4] == CHECKPOINT_MAGIC:
        _inspect_checkpoint(buf, args)
    elif buf[:4] == FCVX_MAGIC:
        _inspect_fcvx(buf, args)
    else:
        raise CorruptFileError(f"{args.path}: unrecognized magic {buf[:4]!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="fcpn", description=__doc__.split("\n")[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for numeric kernels (default: FCPN_THREADS or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--output")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint on one cloud")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output", nargs="?")
    p.add_argument("--head", choices=("voxel", "point", "caption"))
    p.add_argument("--object-class", type=int, dest="object_class")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--mode", choices=("voxel", "parts"), default="voxel")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--csv")
    p.add_argument("--frequencies", help="JSON object mapping class id to frequency")
    p.add_argument("--class-count", type=int, default=21, dest="class_count")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write procedural labeled data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("scenes", "parts", "captions"), default="scenes")
    p.add_argument("--extent", type=float, default=2.4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="describe a checkpoint or FCVX grid")
    p.add_argument("path")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--slices", help="directory for per-slice label CSVs (FCVX only)")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.set_defaults(func=cmd_inspect)
    return parser


def _thread_count(flag):
    if flag is not None:
        return flag
    env = os.environ.get("FCPN_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"FCPN_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads = _thread_count(args.threads)
        if threads < 1:
            raise ConfigurationError(f"--threads must be >= 1, got {threads}")
        with threadpool_limits(limits=threads):
            return args.func(args)
    except CorruptFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except DivergenceError as exc:
        where = f" (last checkpoint: {exc.last_checkpoint})" if exc.last_checkpoint else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FCPNError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
