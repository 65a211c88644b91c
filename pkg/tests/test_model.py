import math

import numpy as np
import pytest

from fcpn import tensor as T
from fcpn.checkpoint import decode_checkpoint, encode_checkpoint
from fcpn.cloud_io import PointCloud
from fcpn.errors import ConfigurationError, CorruptFileError, InputError
from fcpn.gradcheck import grad_check
from fcpn.model import (FCPN, FCPNConfig, FeatureVolume, caption_config, part_config, pool_matrix, sphere_weight,
                        three_nn, top_k_captions, voxel_config, weighted_average_pool)
from fcpn.tensor import Tensor

TINY = dict(pointnet_widths=(4, 6), stage_widths=(6, 8, 10), skip_width=4, merge_width=6, head_width=3,
            point_widths=(8, 8), caption_widths=(8, 8))


def tiny(**kw):
    return voxel_config(**{**TINY, **kw})


def random_cloud(rng, n, lo=0.0, hi=2.4):
    return PointCloud(rng.uniform(lo, hi, (n, 3)), rng.integers(0, 21, n))


# ---------------------------------------------------------------------------
# pooling


def brute_pool(values, dims, cell, radius):
    """O(n^2) weighted average over every other cell."""
    centers = (np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1).reshape(-1, 3) + 0.5) * cell
    flat = values.reshape(len(centers), -1)
    out = np.zeros_like(flat)
    for i, c in enumerate(centers):
        w = np.array([0.0 if j == i else sphere_weight(np.linalg.norm(c - d), radius) for j, d in enumerate(centers)])
        if w.sum() == 0:
            w = np.ones(len(centers))
            w[i] = 0.0
        out[i] = (w / w.sum()) @ flat
    return out.reshape(values.shape)


@pytest.mark.parametrize("cell", [0.6, 0.4, 0.25, 1.5])
def test_pool_matches_brute_force(cell):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 4, 4, 5))
    got = weighted_average_pool(FeatureVolume(np.zeros(3), cell, Tensor(x)), 1.0).tensor.data
    np.testing.assert_allclose(got, brute_pool(x, (4, 4, 4), cell, 1.0), atol=1e-9, rtol=0)


def test_pool_kernel_shape():
    assert sphere_weight(1.0, 1.0) == 1.0
    assert sphere_weight(0.0, 1.0) == 0.0
    assert sphere_weight(2.0, 1.0) == 0.0
    assert sphere_weight(0.5, 1.0) == pytest.approx(0.5)


def test_pool_is_convex():
    m = pool_matrix((4, 4, 4), 0.6, 1.0)
    np.testing.assert_allclose(np.asarray(m.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    assert m.min() >= 0
    assert np.all(m.diagonal() == 0)
    const = np.full((4, 4, 4, 3), 2.5)
    out = weighted_average_pool(FeatureVolume(np.zeros(3), 0.6, Tensor(const))).tensor.data
    np.testing.assert_allclose(out, 2.5, atol=1e-9)


def test_pool_single_cell_gives_zero_and_is_differentiable():
    one = weighted_average_pool(FeatureVolume(np.zeros(3), 0.6, Tensor(np.ones((1, 1, 1, 2))))).tensor.data
    np.testing.assert_array_equal(one, 0.0)
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    fn = lambda x: weighted_average_pool(FeatureVolume(np.zeros(3), 0.6, x)).tensor
    assert grad_check(fn, [x], n_samples=10, rng=rng) < 1e-4


# ---------------------------------------------------------------------------
# interpolation


def test_three_nn_matches_brute_force():
    rng = np.random.default_rng(2)
    dims, cell, origin = (4, 3, 5), 0.3, np.array([-0.2, 0.1, 0.0])
    centers = origin + (np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1).reshape(-1, 3) + 0.5) * cell
    q = origin + rng.uniform(0, 1, (300, 3)) * np.array(dims) * cell
    idx, w, clamped = three_nn(origin, cell, dims, q)
    assert clamped == 0
    for i in range(len(q)):
        d = np.linalg.norm(centers - q[i], axis=1)
        want = np.sort(d)[:3]
        np.testing.assert_allclose(np.sort(d[idx[i]]), want, atol=1e-12)
        inv = 1 / d[idx[i]]
        np.testing.assert_allclose(w[i], inv / inv.sum(), rtol=1e-12)


def test_three_nn_snaps_and_clamps():
    idx, w, clamped = three_nn(np.zeros(3), 1.0, (2, 2, 2), [[0.5, 0.5, 0.5], [-3.0, 0.5, 0.5]])
    assert idx[0, 0] == 0 and w[0, 0] == 1.0 and np.all(w[0, 1:] == 0)
    assert clamped == 1
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


# ---------------------------------------------------------------------------
# configuration and parameters


def analytic_parameter_count(c: FCPNConfig):
    lin = lambda a, b: a * b + b
    k = c.pointwise_depth
    w1, w2, w3 = c.stage_widths
    n = lin(3, c.pointnet_widths[0]) + lin(c.pointnet_widths[0], c.pointnet_widths[1])
    n += lin(c.pointnet_widths[1], w1) + (k - 1) * lin(w1, w1)
    n += lin(8 * w1, w2) + k * lin(w2, w2) + lin(8 * w2, w3) + k * lin(w3, w3)
    n += sum(lin(w, c.skip_width) + lin(27 * w, c.skip_width) for w in (w1, w2, w3))
    m, s = c.merge_width, c.skip_width
    n += lin(2 * s + w3, m) + (k - 1) * lin(m, m)
    if c.head == "caption":
        cells = int(np.prod([round(e / c.s3) for e in c.extent]))
        a, b = c.caption_widths
        return n + lin(cells * m, a) + lin(a, b) + lin(b, c.caption_count)
    n += 2 * (lin(8 * m, m) + lin(m + 2 * s, m) + (k - 1) * lin(m, m))
    if c.head == "voxel":
        r = c.upsample_factor
        return n + lin(r**3 * m, c.head_width) + lin(27 * c.head_width, c.class_count)
    a, b = c.point_widths
    return n + lin(m + c.object_class_count, a) + lin(a, b) + lin(b, c.class_count)


@pytest.mark.parametrize("cfg", [voxel_config(), part_config(), caption_config(), tiny(), tiny(pointwise_depth=1)])
def test_parameter_count_closed_form(cfg):
    assert FCPN(cfg).num_parameters() == analytic_parameter_count(cfg)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        voxel_config(scales=(0.15, 0.3, 0.5))
    with pytest.raises(ConfigurationError):
        voxel_config(extent=(2.5, 2.4, 2.4))
    with pytest.raises(ConfigurationError):
        voxel_config(output_cell=0.04)
    with pytest.raises(ConfigurationError):
        FCPNConfig.from_dict({"head": "voxel", "bogus": 1})
    cfg = part_config()
    assert FCPNConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.s1 == 0.10 and cfg.extent == (2.8, 2.8, 2.8)


def test_init_is_seeded():
    a, b, c = FCPN(tiny(), seed=3), FCPN(tiny(), seed=3), FCPN(tiny(), seed=4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params if k.endswith(".w"))


# ---------------------------------------------------------------------------
# forward


def test_voxel_forward_shapes_and_softmax():
    rng = np.random.default_rng(4)
    model = FCPN(tiny(dtype="float32"))
    with T.no_grad():
        out = model.forward(random_cloud(rng, 3000), origin=np.zeros(3))
    assert out.logits.shape == (48, 48, 48, 21)
    assert out.cell_size == pytest.approx(0.05)
    np.testing.assert_allclose(out.probabilities().sum(axis=-1), 1.0, atol=1e-5)


def test_auto_padding_to_multiple_of_top_scale():
    rng = np.random.default_rng(5)
    model = FCPN(tiny(dtype="float32"))
    cloud = random_cloud(rng, 500, 0.0, 2.9)
    with T.no_grad():
        out = model.forward(cloud, extent=(2.9, 2.9, 2.9))
    assert out.padded
    np.testing.assert_allclose(out.extent, 3.0)
    assert out.logits.shape[:3] == (60, 60, 60)


def test_point_head_outputs_per_point_logits():
    rng = np.random.default_rng(6)
    cfg = part_config(**TINY)
    model = FCPN(cfg)
    cloud = PointCloud(rng.uniform(-1, 1, (200, 3)), object_class=3)
    out = model.forward(cloud, origin=-1.4 * np.ones(3), extent=2.8)
    assert out.logits.shape == (200, 50)
    with pytest.raises(InputError):
        model.forward(PointCloud(cloud.points, object_class=16), origin=-1.4 * np.ones(3), extent=2.8)


def test_caption_head_needs_training_extent():
    rng = np.random.default_rng(7)
    model = FCPN(caption_config(**TINY))
    out = model.forward(random_cloud(rng, 500))
    assert out.logits.shape == (25,)
    with pytest.raises(ConfigurationError):
        model.forward(random_cloud(rng, 500, 0, 4.0), extent=4.8)
    assert top_k_captions(np.array([0.1, 0.9, 0.9, 0.3])) == [1, 2, 3]


def test_empty_cloud_is_rejected():
    with pytest.raises(InputError):
        FCPN(tiny()).forward(PointCloud(np.zeros((0, 3))))


def test_permutation_invariance_is_bitwise():
    rng = np.random.default_rng(8)
    model = FCPN(tiny())
    cloud = random_cloud(rng, 400)
    perm = rng.permutation(400)
    with T.no_grad():
        a = model.forward(cloud, origin=np.zeros(3)).logits.data
        b = model.forward(cloud.subset(perm), origin=np.zeros(3)).logits.data
    np.testing.assert_array_equal(a, b)


def _dyadic_cloud(rng, n, lo, hi):
    pts = np.round(rng.uniform(lo, hi, (n, 3)) * 1024) / 1024
    return PointCloud(pts)


def test_fixed_canvas_shift_by_top_scale_shifts_interior():
    # with the global pool disabled the network is exactly equivariant to
    # shifts by the coarsest cell, away from the padded boundary
    cfg = tiny(scales=(0.125, 0.25, 0.5), output_cell=0.125 / 3, extent=(3.0, 3.0, 3.0), pool_mode="zero", p_max=512)
    model = FCPN(cfg, seed=1)
    rng = np.random.default_rng(9)
    cloud = _dyadic_cloud(rng, 600, 0.25, 2.25)
    moved = cloud.with_points(cloud.points + np.array([0.5, 0.0, 0.0]))
    with T.no_grad():
        a = model.forward(cloud, origin=np.zeros(3), extent=3.0).logits.data
        b = model.forward(moved, origin=np.zeros(3), extent=3.0).logits.data
    per = 12  # output cells per top cell
    # top cells 1..3 of the original map to 2..4 of the moved run; the last
    # 3x3x3 conv reaches one output cell further, so trim that too
    np.testing.assert_array_equal(a[per + 1:4 * per - 1, per + 1:5 * per - 1, per + 1:5 * per - 1],
                                  b[2 * per + 1:5 * per - 1, per + 1:5 * per - 1, per + 1:5 * per - 1])


def test_full_model_gradients():
    rng = np.random.default_rng(10)
    cfg = tiny(extent=(1.2, 1.2, 1.2), stage_widths=(3, 4, 5), merge_width=4, skip_width=3, head_width=2,
               class_count=4, dropout_rate=0.0)
    model = FCPN(cfg, seed=2)
    # zero biases put empty cells exactly on the ReLU kink
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    cloud = PointCloud(rng.uniform(0, 1.2, (150, 3)))
    out = model.forward(cloud, origin=np.zeros(3)).logits
    proj = rng.standard_normal(out.shape)
    out.backward(proj)

    def scalar():
        with T.no_grad():
            return float((model.forward(cloud, origin=np.zeros(3)).logits.data * proj).sum())

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        up = scalar()
        flat[i] = orig - h
        down = scalar()
        flat[i] = orig
        return (up - down) / (2 * h)

    # the network is piecewise linear; a step that crosses a ReLU or max
    # switch changes the central difference with h, so compare at two steps
    # and require agreement with whichever difference is stable
    checked = 0
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(2, flat.size), replace=False):
            coarse, fine = central(flat, i, 1e-5), central(flat, i, 1e-6)
            scale = max(abs(grad[i]), 1e-6)
            if abs(coarse - fine) < 1e-6 * scale + 1e-9:
                assert abs(grad[i] - fine) <= 1e-5 * scale, name
                checked += 1
            else:
                assert abs(grad[i] - central(flat, i, 1e-7)) <= 1e-3 * scale, name
    assert checked > len(model.params)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = FCPN(tiny(), seed=5)
    path = tmp_path / "m.fcpn"
    model.save(path, {"note": "x"})
    raw = path.read_bytes()
    loaded, blob = FCPN.load(path)
    assert blob["note"] == "x"
    assert loaded.config == model.config
    assert loaded.to_bytes({"note": "x"}) == raw
    for k in model.params:
        np.testing.assert_array_equal(loaded.params[k].data, model.params[k].data.astype(np.float32))


@pytest.mark.parametrize("cut", [3, 8, 40, -1])
def test_checkpoint_truncation_is_typed(cut):
    buf = encode_checkpoint({"a": np.ones((2, 3))}, {"model": {}})
    with pytest.raises(CorruptFileError):
        decode_checkpoint(buf[:cut])


def test_checkpoint_bad_magic_and_trailing_bytes():
    buf = encode_checkpoint({"a": np.ones(2)}, {})
    with pytest.raises(CorruptFileError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CorruptFileError):
        decode_checkpoint(buf + b"\0")


def test_load_state_dict_checks_shapes():
    model = FCPN(tiny())
    state = model.state_dict()
    state["head.conv.b"] = np.zeros(5)
    with pytest.raises(ConfigurationError):
        model.load_state_dict(state)
