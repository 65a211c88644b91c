"""Accuracy and IoU reports for voxel labeling and part segmentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass
class EvalReport:
    per_class_accuracy: dict = field(default_factory=dict)
    weighted_average: float = float("nan")
    unweighted_average: float = float("nan")
    micro_accuracy: float = float("nan")
    confusion: np.ndarray | None = None
    totals: dict = field(default_factory=dict)
    corrects: dict = field(default_factory=dict)
    # part segmentation only
    per_category_miou: dict = field(default_factory=dict)
    overall_mean: float = float("nan")
    category_mean: float = float("nan")
    shape_ious: list = field(default_factory=list)

    def rows(self):
        for c in sorted(self.totals):
            total, correct = self.totals[c], self.corrects[c]
            yield c, total, correct, (correct / total if total else float("nan"))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "total", "correct", "accuracy"])
            for c, total, correct, acc in self.rows():
                w.writerow([c, total, correct, repr(float(acc))])

    def summary(self):
        lines = []
        if self.per_class_accuracy:
            lines.append(f"weighted average accuracy:   {self.weighted_average:.4f}")
            lines.append(f"unweighted average accuracy: {self.unweighted_average:.4f}")
            lines.append(f"overall voxel accuracy:      {self.micro_accuracy:.4f}")
        if self.per_category_miou:
            lines.append(f"mean IoU over shapes:        {self.overall_mean:.4f}")
            lines.append(f"mean IoU over categories:    {self.category_mean:.4f}")
        return "\n".join(lines)


def _labels(grid):
    return np.asarray(getattr(grid, "labels", grid))


def eval_voxel(pred, gt, class_frequencies=None, class_count=21) -> EvalReport:
    """Per-class accuracy on ground-truth-occupied voxels (gt != 0).

    The weighted average weights each present class by ``class_frequencies``
    (renormalized over present classes); without frequencies the ground-truth
    class shares are used.
    """
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise InputError(f"prediction dims {p.shape} do not match ground truth dims {g.shape}")
    mask = g != 0
    gv = g[mask].astype(np.int64)
    pv = p[mask].astype(np.int64)
    if gv.size and (gv.max() >= class_count or pv.max() >= class_count or pv.min() < 0):
        raise InputError(f"labels must lie in [0, {class_count})")
    confusion = np.bincount(gv * class_count + pv, minlength=class_count**2).reshape(class_count, class_count)
    totals = confusion.sum(axis=1)
    correct = np.diag(confusion)
    present = np.flatnonzero(totals > 0)
    acc = {int(c): correct[c] / totals[c] for c in present}
    report = EvalReport(per_class_accuracy=acc, confusion=confusion,
                        totals={int(c): int(totals[c]) for c in present},
                        corrects={int(c): int(correct[c]) for c in present})
    if present.size == 0:
        return report
    report.unweighted_average = float(np.mean([acc[c] for c in acc]))
    report.micro_accuracy = float(correct.sum() / totals.sum())
    if class_frequencies is None:
        f = totals.astype(np.float64)
    else:
        f = np.zeros(class_count)
        if isinstance(class_frequencies, dict):
            for c, v in class_frequencies.items():
                f[int(c)] = v
        else:
            freq = np.asarray(class_frequencies, dtype=np.float64)
            f[: freq.size] = freq
    fp = f[present]
    if fp.sum() <= 0:
        raise InputError("class frequencies are zero for every present class")
    report.weighted_average = float(np.sum(fp * np.array([acc[c] for c in present])) / fp.sum())
    return report


def shape_iou(pred, gt, parts):
    """Mean over ``parts`` of intersection/union; a part absent from both counts as 1."""
    ious = []
    for part in parts:
        pp, gp = pred == part, gt == part
        union = np.sum(pp | gp)
        ious.append(1.0 if union == 0 else np.sum(pp & gp) / union)
    return float(np.mean(ious))


def eval_parts(predictions, ground_truths, categories, part_table) -> EvalReport:
    """Part segmentation IoU report.

    ``part_table[category]`` lists the part ids of that category. Shape IoU is
    averaged per category; ``overall_mean`` averages over all shapes and
    ``category_mean`` over categories. Point accuracy per part id is reported
    in ``per_class_accuracy``.
    """
    if not (len(predictions) == len(ground_truths) == len(categories)):
        raise InputError("predictions, ground truths and categories must have equal length")
    by_cat = {}
    shape_ious = []
    totals, corrects = {}, {}
    for pred, gt, cat in zip(predictions, ground_truths, categories):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise InputError(f"prediction length {pred.shape} does not match ground truth {gt.shape}")
        parts = tuple(part_table[int(cat)])
        for what, arr in (("prediction", pred), ("ground truth", gt)):
            if not np.all(np.isin(arr, parts)):
                raise InputError(f"{what} holds labels outside the part set {parts} of category {cat}")
        iou = shape_iou(pred, gt, parts)
        shape_ious.append(iou)
        by_cat.setdefault(int(cat), []).append(iou)
        for part in parts:
            sel = gt == part
            totals[part] = totals.get(part, 0) + int(sel.sum())
            corrects[part] = corrects.get(part, 0) + int(np.sum(pred[sel] == part))
    report = EvalReport(shape_ious=shape_ious)
    report.per_category_miou = {c: float(np.mean(v)) for c, v in sorted(by_cat.items())}
    report.overall_mean = float(np.mean(shape_ious)) if shape_ious else float("nan")
    report.category_mean = float(np.mean(list(report.per_category_miou.values()))) if by_cat else float("nan")
    report.totals = {p: t for p, t in totals.items() if t > 0}
    report.corrects = {p: corrects[p] for p in report.totals}
    report.per_class_accuracy = {p: corrects[p] / t for p, t in report.totals.items()}
    all_total = sum(report.totals.values())
    if all_total:
        report.micro_accuracy = sum(report.corrects.values()) / all_total
        report.unweighted_average = float(np.mean(list(report.per_class_accuracy.values())))
    return report
