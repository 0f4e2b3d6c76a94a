import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_fps
from mmmix.errors import DegenerateError, DomainError, FormatError
from mmmix.geometry import (NUM_SHAPES, PointCloud, decode_mmpd, encode_mmpd, fps, fps_batch, gen_shape,
                            load_mmpd, make_dataset, normalize_unit_sphere, save_mmpd)


def test_sphere_points_lie_on_unit_sphere():
    pc = gen_shape(0, 1024, 7, 0.0)
    assert pc.n == 1024
    assert np.abs(np.linalg.norm(pc.points, axis=1) - 1.0).max() <= 1e-9


@pytest.mark.parametrize("cls", range(NUM_SHAPES))
def test_every_shape_is_normalized(cls):
    pc = gen_shape(cls, 256, 11, 0.01)
    assert np.linalg.norm(pc.points.mean(axis=0)) <= 1e-9
    assert abs(np.linalg.norm(pc.points, axis=1).max() - 1.0) <= 1e-9
    assert pc.class_id == cls


def test_gen_shape_is_deterministic_and_seed_sensitive():
    a = gen_shape(3, 256, 42, 0.01)
    b = gen_shape(3, 256, 42, 0.01)
    c = gen_shape(3, 256, 43, 0.01)
    assert a.points.tobytes() == b.points.tobytes()
    assert not np.array_equal(a.points, c.points)


def test_gen_shape_rejects_bad_arguments():
    with pytest.raises(DomainError):
        gen_shape(NUM_SHAPES, 64, 0)
    with pytest.raises(DomainError):
        gen_shape(-1, 64, 0)
    with pytest.raises(DomainError):
        gen_shape(0, 7, 0)


def test_point_cloud_validation():
    with pytest.raises(DomainError):
        PointCloud(np.zeros((0, 3)), 0)
    with pytest.raises(DomainError):
        PointCloud(np.zeros((4, 2)), 0)
    with pytest.raises(DomainError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]), 0)
    pc = PointCloud(np.zeros((2, 3)), 1)
    with pytest.raises(ValueError):
        pc.points[0, 0] = 1.0


def test_normalize_examples():
    out = normalize_unit_sphere(PointCloud([[1, 0, 0], [-1, 0, 0]], 0))
    np.testing.assert_allclose(out.points, [[1, 0, 0], [-1, 0, 0]], atol=1e-12)
    out = normalize_unit_sphere(PointCloud([[2, 0, 0], [0, 0, 0]], 0))
    np.testing.assert_allclose(out.points, [[1, 0, 0], [-1, 0, 0]], atol=1e-12)


def test_normalize_rejects_single_location():
    with pytest.raises(DegenerateError):
        normalize_unit_sphere(PointCloud(np.ones((5, 3)), 0))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_normalize_properties(n, seed, scale):
    pts = np.random.default_rng(seed).normal(size=(n, 3)) * scale + 3.0
    out = normalize_unit_sphere(PointCloud(pts, 0))
    assert np.linalg.norm(out.points.mean(axis=0)) <= 1e-9
    assert abs(np.linalg.norm(out.points, axis=1).max() - 1.0) <= 1e-9
    again = normalize_unit_sphere(out)
    assert np.abs(again.points - out.points).max() <= 1e-9
    # shape is preserved up to translation and uniform scale
    c = pts - pts.mean(axis=0)
    np.testing.assert_allclose(out.points * np.linalg.norm(c, axis=1).max(), c, rtol=1e-9, atol=1e-9 * scale)


def test_fps_collinear_examples():
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert fps(line, 2, 0).tolist() == [0, 3]
    # indices 1 and 2 tie at distance 1; the smaller index wins
    assert fps(line, 3, 0).tolist() == [0, 3, 1]
    assert fps(line, 3, 0).tolist() == brute_fps(line, 3, 0)
    assert sorted(fps(line, 4, 2).tolist()) == [0, 1, 2, 3]


def test_fps_matches_bruteforce_oracle():
    rng = np.random.default_rng(2024)
    for case in range(500):
        n = int(rng.integers(1, 65))
        if case % 5 == 0:
            # integer grid coordinates produce many exact distance ties
            pts = rng.integers(0, 3, size=(n, 3)).astype(float)
        else:
            pts = rng.normal(size=(n, 3))
        m = int(rng.integers(1, n + 1))
        start = int(rng.integers(0, n))
        assert fps(pts, m, start).tolist() == brute_fps(pts, m, start), case


def test_fps_batch_matches_single():
    rng = np.random.default_rng(3)
    pts = rng.integers(0, 4, size=(20, 40, 3)).astype(float)
    starts = rng.integers(0, 40, size=20)
    got = fps_batch(pts, 25, starts)
    for b in range(20):
        assert got[b].tolist() == fps(pts[b], 25, int(starts[b])).tolist()


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 50), st.data())
def test_fps_indices_distinct_and_in_range(n, data):
    m = data.draw(st.integers(1, n))
    start = data.draw(st.integers(0, n - 1))
    pts = np.random.default_rng(n * 7919 + m).normal(size=(n, 3))
    out = fps(pts, m, start)
    assert out[0] == start
    assert len(set(out.tolist())) == m
    assert out.min() >= 0 and out.max() < n


def test_fps_errors():
    pts = np.zeros((4, 3))
    with pytest.raises(DomainError):
        fps(pts, 5, 0)
    with pytest.raises(DomainError):
        fps(pts, 2, 4)
    with pytest.raises(DomainError):
        fps_batch(pts[None], 5, [0])


def test_dataset_is_round_robin_and_thread_invariant():
    a = make_dataset(9, 40, 8, 32, 0.01)
    b = make_dataset(9, 40, 8, 32, 0.01, threads=4)
    assert [pc.class_id for pc in a] == [k % 8 for k in range(40)]
    assert [pc.id for pc in a] == list(range(40))
    assert encode_mmpd(a) == encode_mmpd(b)
    counts = np.bincount([pc.class_id for pc in make_dataset(1, 800, 8, 8, 0.0)])
    assert counts.tolist() == [100] * 8


def test_mmpd_roundtrip(tmp_path):
    clouds = make_dataset(4, 6, 3, 16, 0.02, id_offset=2**40)
    path = tmp_path / "x.mmpd"
    save_mmpd(clouds, path)
    back = load_mmpd(path)
    assert [(pc.id, pc.class_id) for pc in back] == [(pc.id, pc.class_id) for pc in clouds]
    assert all(a.points.tobytes() == b.points.tobytes() for a, b in zip(clouds, back))
    assert encode_mmpd(back) == path.read_bytes()


def test_mmpd_layout():
    data = encode_mmpd([PointCloud([[1.0, 2.0, 3.0]], 5, 77)])
    assert data[:4] == b"MMPD"
    assert int.from_bytes(data[4:6], "little") == 1
    assert int.from_bytes(data[6:10], "little") == 1
    assert int.from_bytes(data[10:18], "little") == 77
    assert int.from_bytes(data[18:20], "little") == 5
    assert int.from_bytes(data[20:24], "little") == 1
    assert np.frombuffer(data[24:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_mmpd_corruption_is_located():
    data = encode_mmpd(make_dataset(0, 3, 3, 8, 0.0))
    with pytest.raises(FormatError) as e:
        decode_mmpd(b"XMPD" + data[4:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        decode_mmpd(data[:4] + (2).to_bytes(2, "little") + data[6:])
    assert e.value.offset == 4
    with pytest.raises(FormatError) as e:
        decode_mmpd(data[:-5])
    assert "expected" in str(e.value) and "byte offset" in str(e.value)
    with pytest.raises(FormatError):
        decode_mmpd(data + b"\0")
