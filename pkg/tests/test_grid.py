import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcpn.cloud_io import PointCloud
from fcpn.errors import ConfigurationError, CorruptFileError, InputError
from fcpn.grid import (VoxelLabelGrid, build_grid, decode_fcvx, encode_fcvx, extract_training_volumes, grid_dims,
                       load_fcvx, occupancy_fraction, radius_group, save_fcvx, volume_placements, voxelize_labels)
from fcpn.synth import synth_scenes


def brute_groups(points, origin, dims, cell, radius):
    """Point ids within ``radius`` of each cell center, by exhaustive distance test."""
    upper = origin + np.asarray(dims) * cell
    inside = np.all((points >= origin) & (points <= upper), axis=1)
    out = []
    for flat in range(int(np.prod(dims))):
        ijk = np.array(np.unravel_index(flat, dims))
        center = origin + (ijk + 0.5) * cell
        d = np.sqrt(((points - center) ** 2).sum(axis=1))
        out.append(set(np.flatnonzero(inside & (d <= radius)).tolist()))
    return out


def check_against_brute(points, origin, dims, cell, radius, p_max, seed=0):
    cloud = PointCloud(points)
    grid = build_grid(cloud, origin, np.asarray(dims) * cell, cell)
    g = radius_group(cloud, grid, radius, p_max, seed=seed)
    truth = brute_groups(points, origin, dims, cell, radius)
    for flat, members in enumerate(truth):
        c = g.counts[flat]
        assert c == min(len(members), p_max)
        got = g.point_index[flat, :c].tolist()
        assert len(set(got)) == c
        if len(members) <= p_max:
            assert set(got) == members
        else:
            assert set(got) <= members
        if c:
            center = origin + (np.array(np.unravel_index(flat, dims)) + 0.5) * cell
            np.testing.assert_allclose(g.groups[flat, :c] * radius, points[got] - center, atol=1e-12)
            assert np.all(g.point_index[flat, c:] == g.point_index[flat, 0])
        else:
            assert np.all(g.point_index[flat] == -1)


def test_grid_dims_and_errors():
    assert grid_dims(2.4, 0.15) == (16, 16, 16)
    assert grid_dims((2.4, 4.8, 1.2), 0.6) == (4, 8, 2)
    with pytest.raises(ConfigurationError):
        grid_dims(2.5, 0.6)
    with pytest.raises(ConfigurationError):
        grid_dims(2.4, 0.0)


def test_build_grid_matches_floor_and_flags_out_of_bounds():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 2.0, (500, 3))
    grid = build_grid(PointCloud(pts), (0, 0, 0), 1.5, 0.5)
    for p, cell in zip(pts, grid.point_cells):
        if np.all((p >= 0) & (p <= 1.5)):
            ijk = np.minimum(np.floor(p / 0.5).astype(int), 2)
            assert cell == np.ravel_multi_index(ijk, (3, 3, 3))
        else:
            assert cell == -1
    assert grid.n_out_of_bounds == int(np.sum(grid.point_cells == -1))


def test_max_face_points_join_last_cell():
    grid = build_grid(PointCloud([[1.5, 1.5, 1.5], [0, 0, 0]]), 0, 1.5, 0.5)
    np.testing.assert_array_equal(grid.point_cells, [26, 0])


def test_occupancy_fraction():
    grid = build_grid(PointCloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.9, 0.9, 0.9]]), 0, 1.0, 0.5)
    assert occupancy_fraction(grid) == 2 / 8


@pytest.mark.parametrize("radius_factor", [1.0, 0.7, 1.6])
def test_radius_group_matches_brute_force(radius_factor):
    rng = np.random.default_rng(int(radius_factor * 10))
    for _ in range(20):
        n = int(rng.integers(1, 300))
        pts = rng.uniform(-0.2, 1.4, (n, 3))
        check_against_brute(pts, np.zeros(3), (3, 3, 3), 0.4, 0.4 * radius_factor, p_max=16,
                            seed=int(rng.integers(1000)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 120), st.integers(1, 12))
def test_radius_group_fuzz(seed, n, p_max):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, (n, 3))
    if n > 3:
        pts[:3] = rng.uniform(0, 1, 3)  # duplicates
    check_against_brute(pts, np.zeros(3), (2, 2, 2), 0.5, 0.5, p_max, seed=seed)


def test_radius_group_is_permutation_invariant_even_when_subsampling():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 1, (400, 3))
    grid_a = build_grid(PointCloud(pts), 0, 1.0, 0.5)
    a = radius_group(PointCloud(pts), grid_a, 0.5, p_max=8, seed=5)
    perm = rng.permutation(400)
    b = radius_group(PointCloud(pts[perm]), build_grid(PointCloud(pts[perm]), 0, 1.0, 0.5), 0.5, p_max=8, seed=5)
    np.testing.assert_array_equal(a.groups, b.groups)
    np.testing.assert_array_equal(a.counts, b.counts)
    c = radius_group(PointCloud(pts), grid_a, 0.5, p_max=8, seed=6)
    assert not np.array_equal(a.groups, c.groups)


def test_voxelize_majority_vote_matches_brute_force():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 0.2, (300, 3))
    labels = rng.integers(0, 4, 300)
    vox = voxelize_labels(PointCloud(pts, labels), 0, 0.2, 0.05)
    assert vox.dims == (4, 4, 4)
    ijk = np.minimum(np.floor(pts / 0.05).astype(int), 3)
    for i in range(4):
        for j in range(4):
            for k in range(4):
                sel = np.all(ijk == (i, j, k), axis=1)
                if not sel.any():
                    assert vox.labels[i, j, k] == 0
                    continue
                counts = np.bincount(labels[sel], minlength=4)
                assert vox.labels[i, j, k] == np.flatnonzero(counts == counts.max())[0]


def test_voxelize_tie_goes_to_smaller_id():
    vox = voxelize_labels(PointCloud([[0.01] * 3, [0.02] * 3], [7, 3]), 0, 0.05, 0.05)
    assert vox.labels[0, 0, 0] == 3


def test_fcvx_round_trip_and_layout(tmp_path):
    rng = np.random.default_rng(5)
    grid = VoxelLabelGrid(np.array([0.5, -1.25, 2.0]), 0.05, rng.integers(0, 21, (3, 4, 5)).astype(np.uint8))
    path = tmp_path / "g.fcvx"
    save_fcvx(path, grid)
    raw = path.read_bytes()
    assert raw[:4] == b"FCVX" and len(raw) == 4 + 2 + 12 + 12 + 4 + 60
    back = load_fcvx(path)
    assert back == grid
    assert encode_fcvx(back) == raw
    # x is the fastest-varying axis in the payload
    assert raw[34] == grid.labels[0, 0, 0] and raw[35] == grid.labels[1, 0, 0]


@pytest.mark.parametrize("mutate", [
    lambda b: b[:10],
    lambda b: b"XCVF" + b[4:],
    lambda b: b[:-1],
    lambda b: b + b"\x00",
    lambda b: b[:4] + b"\x09\x00" + b[6:],
])
def test_fcvx_corruption_is_typed(mutate):
    buf = encode_fcvx(VoxelLabelGrid(np.zeros(3), 0.05, np.zeros((2, 2, 2), np.uint8)))
    with pytest.raises(CorruptFileError):
        decode_fcvx(mutate(buf))


def test_volume_placements():
    starts = volume_placements([0, 0, 0], [6.0, 2.4, 1.0], 2.4, 1.2)
    xs = sorted({float(o[0]) for o in starts})
    assert xs == pytest.approx([0.0, 1.2, 2.4, 3.6])
    assert {float(o[1]) for o in starts} == {0.0}
    assert [float(o[2]) for o in starts] == pytest.approx([-0.7] * 4)


def test_extraction_filters():
    scene = synth_scenes(0, 1)[0]
    samples = extract_training_volumes(scene)
    assert len(samples) == 1
    cut, grid = samples[0]
    assert grid.dims == (48, 48, 48)
    # a nearly empty scene fails the occupancy filter
    sparse = PointCloud(np.array([[0.0, 0, 0], [2.4, 2.4, 2.4]]), [1, 1])
    assert extract_training_volumes(sparse) == []
    # mostly invalid labels fail the annotation filter
    assert extract_training_volumes(PointCloud(scene.points, np.zeros(len(scene), int))) == []
    with pytest.raises(InputError):
        extract_training_volumes(PointCloud(scene.points))


def test_synthetic_scenes_pass_filters_and_are_deterministic():
    a = synth_scenes(11, 6)
    b = synth_scenes(11, 6)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.points, t.points)
        np.testing.assert_array_equal(s.labels, t.labels)
        assert len(extract_training_volumes(s)) >= 1
    hist = np.bincount(np.concatenate([s.labels for s in a]), minlength=21)
    assert (hist[1] + hist[2]) / hist.sum() > 0.5
