import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcpn import tensor as T
from fcpn.cloud_io import PointCloud
from fcpn.errors import ConfigurationError, DivergenceError, InputError
from fcpn.grid import VoxelLabelGrid, voxelize_labels
from fcpn.metrics import eval_parts, eval_voxel, shape_iou
from fcpn.model import FCPN, caption_config, part_config, voxel_config
from fcpn.synth import synth_caption_frames, synth_part_shapes, synth_scenes
from fcpn.train import (TrainSchedule, caption_model_from_backbone, class_weights, label_histogram, params_digest,
                        part_table, predict_captions, predict_parts, predict_voxels, train_captions, train_parts,
                        train_voxel, write_loss_curve)

SMALL = dict(pointnet_widths=(4, 8), stage_widths=(8, 8, 8), skip_width=4, merge_width=8, head_width=4,
             point_widths=(8, 8), caption_widths=(8, 8), dtype="float32")
ROOM = (1.2, 1.2, 1.2)


def small_voxel_set(seed=0, count=2):
    out = []
    for scene in synth_scenes(seed, count, extent=ROOM):
        out.append((scene, voxelize_labels(scene, np.zeros(3), ROOM, 0.05)))
    return out


# ---------------------------------------------------------------------------
# schedule and weights


def test_learning_rate_halves_every_epoch():
    s = TrainSchedule()
    assert [s.lr_at(e) for e in range(5)] == [0.01, 0.005, 0.0025, 0.00125, 0.000625]
    assert TrainSchedule(decay_every=3).lr_at(5) == 0.005


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(initial_lr=0), dict(decay=1.5), dict(batch_size=0)])
def test_schedule_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainSchedule(**bad).validate()


def test_class_weights_formula():
    w = class_weights([357, 643])
    assert w[0] == pytest.approx(1 / math.log(1.557), rel=1e-12)
    assert w[0] == pytest.approx(2.26, abs=5e-3)
    even = class_weights([5, 5])
    assert even[0] == even[1]
    w = class_weights([0, 90, 10])
    assert w[2] > w[1]
    assert w[0] == w[2]
    with pytest.raises(InputError):
        class_weights([0, 0])
    with pytest.raises(InputError):
        class_weights([1, -1])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=21).filter(lambda h: sum(h) > 0))
def test_class_weights_are_monotone_in_share(hist):
    w = class_weights(hist)
    counts = np.asarray(hist)
    present = np.flatnonzero(counts)
    order = present[np.argsort(counts[present], kind="stable")]
    assert np.all(np.diff(w[order]) <= 1e-15)
    assert np.all(w > 0)


def test_label_histogram_accepts_grids_and_arrays():
    g = VoxelLabelGrid(np.zeros(3), 0.05, np.array([[[0, 1], [1, 2]]], dtype=np.uint8))
    np.testing.assert_array_equal(label_histogram([g, np.array([2, 2])], 4), [1, 2, 3, 0])


def test_weighted_loss_and_gradients_scale_linearly_with_weights():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((30, 5))
    targets = rng.integers(0, 5, 30)
    w = rng.uniform(0.5, 2.0, 5)
    a = T.Tensor(logits, requires_grad=True)
    b = T.Tensor(logits, requires_grad=True)
    la = T.weighted_softmax_xent(a, targets, w)
    lb = T.weighted_softmax_xent(b, targets, 3.0 * w)
    la.backward()
    lb.backward()
    assert float(lb.data) == pytest.approx(3.0 * float(la.data), rel=1e-12)
    np.testing.assert_allclose(b.grad, 3.0 * a.grad, rtol=1e-12)


# ---------------------------------------------------------------------------
# voxel metrics


def test_eval_voxel_two_class_example():
    gt = np.array([1] * 10 + [2] * 10).reshape(1, 4, 5)
    pred = gt.copy()
    pred.ravel()[10:15] = 1
    r = eval_voxel(pred, gt, class_frequencies={1: 0.9, 2: 0.1})
    assert r.per_class_accuracy == {1: 1.0, 2: 0.5}
    assert r.weighted_average == pytest.approx(0.95, abs=1e-15)
    assert r.unweighted_average == pytest.approx(0.75, abs=1e-15)
    assert r.micro_accuracy == 0.75


def test_eval_voxel_identity_and_unoccupied_masking():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 21, (6, 6, 6))
    r = eval_voxel(gt, gt)
    assert r.weighted_average == 1.0 and r.unweighted_average == 1.0
    pred = gt.copy()
    pred[gt == 0] = 5  # predictions on empty ground truth are ignored
    assert eval_voxel(pred, gt).unweighted_average == 1.0
    with pytest.raises(InputError):
        eval_voxel(gt[:5], gt)
    with pytest.raises(InputError):
        eval_voxel(gt + 30, gt)


def test_eval_voxel_matches_recount_on_random_fixture():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 6, (8, 8, 8))
    pred = np.where(rng.random((8, 8, 8)) < 0.6, gt, rng.integers(0, 6, (8, 8, 8)))
    freqs = rng.uniform(0.1, 1.0, 21)
    r = eval_voxel(pred, gt, class_frequencies=freqs)
    totals, correct = {}, {}
    for p, g in zip(pred.ravel(), gt.ravel()):
        if g == 0:
            continue
        totals[g] = totals.get(g, 0) + 1
        correct[g] = correct.get(g, 0) + int(p == g)
        assert r.confusion[g, p] >= 1
    acc = {c: correct[c] / totals[c] for c in totals}
    assert r.totals == totals and r.corrects == correct
    assert r.unweighted_average == pytest.approx(sum(acc.values()) / len(acc), abs=1e-12)
    fsum = sum(freqs[c] for c in acc)
    assert r.weighted_average == pytest.approx(sum(freqs[c] * acc[c] for c in acc) / fsum, abs=1e-12)
    assert r.confusion.sum() == np.count_nonzero(gt)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_uniform_frequencies_make_weighted_equal_unweighted(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 21, (8, 8, 8))
    pred = rng.integers(0, 21, (8, 8, 8))
    r = eval_voxel(pred, gt, class_frequencies=np.ones(21))
    assert abs(r.weighted_average - r.unweighted_average) <= 1e-12


def test_eval_voxel_relabeling_invariance():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 8, (6, 6, 6))
    pred = rng.integers(0, 8, (6, 6, 6))
    freqs = rng.uniform(0.1, 1, 8)
    perm = np.concatenate([[0], 1 + rng.permutation(7)])
    a = eval_voxel(pred, gt, class_frequencies=freqs, class_count=8)
    pf = np.zeros(8)
    pf[perm] = freqs
    b = eval_voxel(perm[pred], perm[gt], class_frequencies=pf, class_count=8)
    assert b.weighted_average == pytest.approx(a.weighted_average, abs=1e-12)
    assert b.unweighted_average == pytest.approx(a.unweighted_average, abs=1e-12)


def test_eval_csv(tmp_path):
    gt = np.array([[[1, 1, 2, 0]]])
    eval_voxel(np.array([[[1, 2, 2, 0]]]), gt).write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines == ["class,total,correct,accuracy", "1,2,1,0.5", "2,1,1,1.0"]


# ---------------------------------------------------------------------------
# part metrics


def test_shape_iou_hand_fixture():
    gt = np.array([12, 12, 12, 12, 13, 13, 13, 14, 14, 15])
    pred = np.array([12, 12, 13, 12, 13, 13, 12, 14, 15, 15])
    # part 12: inter 3, union 5; 13: 2/4; 14: 1/2; 15: 1/2
    assert shape_iou(pred, gt, (12, 13, 14, 15)) == pytest.approx((3 / 5 + 2 / 4 + 1 / 2 + 1 / 2) / 4)
    # a part missing from both counts as a perfect match
    assert shape_iou(np.array([4, 4]), np.array([4, 4]), (4, 5)) == 1.0


def test_eval_parts_report():
    table = part_table()
    swapped = eval_parts([np.array([5, 5, 4])], [np.array([4, 4, 5])], [1], table)
    assert swapped.overall_mean == 0.0
    perfect = eval_parts([np.array([4, 5])], [np.array([4, 5])], [1], table)
    assert perfect.overall_mean == 1.0
    r = eval_parts([np.array([4, 5]), np.array([4, 4]), np.array([22, 23])],
                   [np.array([4, 5]), np.array([4, 5]), np.array([22, 22])], [1, 1, 7], table)
    assert r.per_category_miou == {1: pytest.approx(0.625), 7: pytest.approx(0.25)}
    assert r.overall_mean == pytest.approx((1.0 + 0.25 + 0.25) / 3)
    assert r.category_mean == pytest.approx((0.625 + 0.25) / 2)
    with pytest.raises(InputError):
        eval_parts([np.array([4, 9])], [np.array([4, 5])], [1], table)
    with pytest.raises(InputError):
        eval_parts([np.array([4])], [], [1], table)


# ---------------------------------------------------------------------------
# training loops


def test_voxel_training_is_deterministic_and_reduces_loss(tmp_path):
    data = small_voxel_set(0, 8)
    cfg = voxel_config(extent=ROOM, **SMALL)
    sched = TrainSchedule(epochs=4, initial_lr=0.01, decay_every=2, batch_size=2, resample_points=3000, seed=4)
    a = train_voxel(data, cfg, sched, out_dir=tmp_path / "a")
    b = train_voxel(data, cfg, sched, out_dir=tmp_path / "b")
    assert a.curve == b.curve
    assert params_digest(a.model.params) == params_digest(b.model.params)
    assert [open(p, "rb").read() for p in a.checkpoints] == [open(p, "rb").read() for p in b.checkpoints]
    assert len(a.checkpoints) == 4 and len(a.curve) == 16
    assert a.epoch_losses[-1] < a.epoch_losses[0]
    assert [lr for _, lr, _ in a.curve[::4]] == [0.01, 0.01, 0.005, 0.005]
    a.write_curve(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 17
    grid, out = predict_voxels(a.model, data[0][0], origin=np.zeros(3), extent=ROOM)
    assert grid.dims == (24, 24, 24) and grid.cell_size == pytest.approx(0.05)


def test_first_epoch_smoothed_loss_decreases_for_most_seeds():
    data = small_voxel_set(1, 4)
    cfg = voxel_config(extent=ROOM, **SMALL)
    wins = 0
    seeds = range(6)
    for seed in seeds:
        sched = TrainSchedule(epochs=1, initial_lr=0.01, batch_size=1, resample_points=2000, seed=seed)
        data4 = data * 3
        curve = [loss for _, _, loss in train_voxel(data4, cfg, sched).curve]
        head, tail = np.mean(curve[:4]), np.mean(curve[-4:])
        wins += tail < head
    assert wins >= 0.95 * len(seeds)


def test_divergence_reports_last_checkpoint(tmp_path):
    data = small_voxel_set(0, 2)
    cfg = voxel_config(extent=ROOM, **SMALL)

    def poison(epoch, result):
        result.model.params["head.conv.b"].data[:] = np.nan
        return False

    sched = TrainSchedule(epochs=3, batch_size=2, resample_points=1000)
    with pytest.raises(DivergenceError) as err:
        train_voxel(data, cfg, sched, out_dir=tmp_path, stop=poison)
    assert err.value.last_checkpoint is not None
    assert err.value.last_checkpoint.endswith("voxel_epoch001.fcpn")
    FCPN.load(err.value.last_checkpoint)


def test_training_rejects_wrong_head_and_empty_set():
    with pytest.raises(ConfigurationError):
        train_voxel(small_voxel_set(0, 1), part_config(**SMALL), TrainSchedule(epochs=1))
    with pytest.raises(InputError):
        train_voxel([], voxel_config(extent=ROOM, **SMALL), TrainSchedule(epochs=1))


def test_single_part_shape_overfits_to_full_accuracy():
    shape = synth_part_shapes(0, 2, n_points=256)[1]
    cfg = part_config(**SMALL)
    sched = TrainSchedule(epochs=200, initial_lr=0.03, decay_every=1000, batch_size=1)
    stop = lambda epoch, res: np.mean(predict_parts(res.model, shape) == shape.labels) == 1.0
    res = train_parts([shape], cfg.replace(dropout_rate=0.0), sched, stop=stop)
    assert np.mean(predict_parts(res.model, shape) == shape.labels) == 1.0


def test_part_training_needs_labels_and_category():
    cfg = part_config(**SMALL)
    with pytest.raises(InputError):
        train_parts([PointCloud(np.zeros((4, 3)), [4, 4, 4, 4])], cfg, TrainSchedule(epochs=1))


def test_caption_training_freezes_backbone():
    frames, targets = synth_caption_frames(0, 4)
    backbone = FCPN(voxel_config(**SMALL), seed=1)
    model = caption_model_from_backbone(backbone, seed=2, caption_widths=(8, 8))
    shared = [k for k in model.params if not k.startswith("caption.")]
    before = params_digest(model.params, shared)
    assert before == params_digest(backbone.params, shared)
    head_before = params_digest(model.params, ["caption."])
    train_captions(frames, targets, model, TrainSchedule(epochs=2, batch_size=2))
    assert params_digest(model.params, shared) == before
    assert params_digest(model.params, ["caption."]) != head_before
    top = predict_captions(model, frames[0])
    assert len(top) == 3 and all(0 <= s <= 1 for _, s in top)
    with pytest.raises(InputError):
        train_captions(frames, targets[:, :5], model, TrainSchedule(epochs=1))


def test_write_loss_curve_round_trips_floats(tmp_path):
    curve = [(0, 0.01, 1 / 3), (1, 0.005, 2 / 7)]
    write_loss_curve(tmp_path / "c.csv", curve)
    rows = [line.split(",") for line in (tmp_path / "c.csv").read_text().splitlines()[1:]]
    assert [(int(s), float(lr), float(l)) for s, lr, l in rows] == curve
