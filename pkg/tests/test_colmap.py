import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slgs.colmap import (CameraIntrinsics, ImagePose, SfmPoint, SparseReconstruction, init_cloud, load_dataset,
                         load_image, parse_cameras, parse_images, parse_points3d, read_sparse, save_image,
                         write_cameras_bin, write_cameras_txt, write_images_bin, write_images_txt,
                         write_points3d_bin, write_points3d_txt, write_sparse)
from slgs.errors import EmptyReconstruction, MalformedFile, UnsupportedCameraModel
from slgs.synthetic import make_synthetic_dataset, write_dataset

# Fixtures packed field by field from the published COLMAP layout:
# cameras: u64 count, then (i32 id, i32 model, u64 width, u64 height, f64 params...)
PINHOLE_BIN = struct.pack("<Q", 1) + struct.pack("<iiQQ", 1, 1, 100, 80) + struct.pack("<4d", 90, 90, 50, 40)
PINHOLE_TXT = b"# Camera list\n1 PINHOLE 100 80 90 90 50 40\n"


def image_record(image_id, q, t, cam_id, name: bytes, n_points=0):
    rec = struct.pack("<i4d3di", image_id, *q, *t, cam_id) + name + b"\0" + struct.pack("<Q", n_points)
    return rec + b"".join(struct.pack("<ddq", 1.0, 2.0, -1) for _ in range(n_points))


def point_record(pid, xyz, rgb, err, track=()):
    rec = struct.pack("<Q3d3BdQ", pid, *xyz, *rgb, err, len(track))
    return rec + b"".join(struct.pack("<ii", a, b) for a, b in track)


def test_pinhole_camera_binary_fixture():
    cams = parse_cameras(PINHOLE_BIN)
    cam = cams[1]
    assert (cam.model, cam.width, cam.height) == ("PINHOLE", 100, 80)
    assert cam.focal == (90.0, 90.0)
    np.testing.assert_array_equal(cam.principal_point, [50, 40])


def test_binary_and_text_cameras_agree():
    a, b = parse_cameras(PINHOLE_BIN), parse_cameras(PINHOLE_TXT)
    assert a.keys() == b.keys()
    np.testing.assert_array_equal(a[1].params, b[1].params)
    assert a[1].model == b[1].model and a[1].width == b[1].width


def test_simple_pinhole_focal():
    data = struct.pack("<Q", 1) + struct.pack("<iiQQ", 3, 0, 64, 48) + struct.pack("<3d", 70, 32, 24)
    cam = parse_cameras(data)[3]
    assert cam.model == "SIMPLE_PINHOLE" and cam.focal == (70.0, 70.0)


def test_empty_and_truncated_cameras():
    assert parse_cameras(struct.pack("<Q", 0)) == {}
    for cut in (9, 20, len(PINHOLE_BIN) - 1):
        with pytest.raises(MalformedFile):
            parse_cameras(PINHOLE_BIN[:cut], binary=True)


def test_unknown_and_unsupported_models():
    unknown = struct.pack("<Q", 1) + struct.pack("<iiQQ", 1, 99, 10, 10)
    with pytest.raises(UnsupportedCameraModel):
        parse_cameras(unknown)
    radial = struct.pack("<Q", 1) + struct.pack("<iiQQ", 1, 3, 10, 10) + struct.pack("<5d", 1, 2, 3, 4, 5)
    with pytest.raises(UnsupportedCameraModel):
        parse_cameras(radial)
    with pytest.raises(UnsupportedCameraModel):
        parse_cameras(b"1 OPENCV 10 10 1 1 5 5 0 0 0 0\n")


def test_image_fixture_identity_and_rotation():
    data = struct.pack("<Q", 2) + image_record(1, (1, 0, 0, 0), (0, 0, 0), 1, b"a.png", 2) \
        + image_record(2, (0.7071, 0, 0.7071, 0), (1, 2, 3), 1, b"b.png")
    imgs = parse_images(data)
    np.testing.assert_allclose(imgs["a.png"].world_to_camera, np.eye(4), atol=1e-12)
    rot = imgs["b.png"].world_to_camera[:3, :3]
    expected = np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]])
    np.testing.assert_allclose(rot, expected, atol=1e-4)
    np.testing.assert_array_equal(imgs["b.png"].world_to_camera[:3, 3], [1, 2, 3])


def test_non_ascii_name_preserved():
    raw = "café_ß.jpg".encode("utf-8")
    latin = b"caf\xe9.jpg"
    data = struct.pack("<Q", 2) + image_record(1, (1, 0, 0, 0), (0, 0, 0), 1, raw) \
        + image_record(2, (1, 0, 0, 0), (0, 0, 0), 1, latin)
    imgs = parse_images(data)
    assert "café_ß.jpg" in imgs
    assert any(k.encode("utf-8", "surrogateescape") == latin for k in imgs)


def test_truncated_image_records():
    data = struct.pack("<Q", 1) + image_record(1, (1, 0, 0, 0), (0, 0, 0), 1, b"a.png", 3)
    for cut in (8, 40, len(data) - 30, len(data) - 1):
        with pytest.raises(MalformedFile):
            parse_images(data[:cut], binary=True)
    with pytest.raises(MalformedFile):
        parse_images(struct.pack("<Q", 1) + struct.pack("<i4d3di", 1, 1, 0, 0, 0, 0, 0, 0, 1) + b"noterm",
                     binary=True)


def test_images_text_format_skips_observation_lines():
    text = (b"# Image list\n"
            b"1 1 0 0 0 0 0 0 1 a.png\n"
            b"10.0 20.0 -1 30.0 40.0 5\n"
            b"2 1 0 0 0 1 2 3 1 b.png\n"
            b"\n")
    imgs = parse_images(text)
    assert sorted(imgs) == ["a.png", "b.png"]
    np.testing.assert_array_equal(imgs["b.png"].tvec, [1, 2, 3])


def test_point_fixture():
    data = struct.pack("<Q", 1) + point_record(7, (1, 2, 3), (255, 0, 0), 0.5, [(1, 0), (2, 5)])
    (p,) = parse_points3d(data)
    np.testing.assert_array_equal(p.position, [1, 2, 3])
    np.testing.assert_array_equal(p.color, [255, 0, 0])
    assert p.reprojection_error == 0.5
    assert parse_points3d(struct.pack("<Q", 0)) == []


def test_point_text_and_nan():
    (p,) = parse_points3d(b"# points\n7 1 2 3 255 0 0 0.5 1 0 2 5\n")
    np.testing.assert_array_equal(p.position, [1, 2, 3])
    with pytest.raises(MalformedFile):
        parse_points3d(b"7 nan 2 3 255 0 0 0.5\n")
    with pytest.raises(MalformedFile):
        parse_points3d(b"7 1 2 3 300 0 0 0.5\n")


def reconstruction(rng, n_points=20):
    cams = {1: CameraIntrinsics(1, "PINHOLE", 64, 48, np.array([60.0, 61.0, 32.0, 24.0])),
            2: CameraIntrinsics(2, "SIMPLE_PINHOLE", 32, 32, np.array([30.0, 16.0, 16.0]))}
    images = {}
    for k in range(4):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        name = f"img_{k}.png"
        images[name] = ImagePose(k + 1, q, rng.normal(size=3), 1 + k % 2, name)
    pts = [SfmPoint(rng.normal(size=3), rng.integers(0, 256, 3).astype(np.uint8), float(rng.uniform()))
           for _ in range(n_points)]
    return SparseReconstruction(cams, images, pts)


def assert_same(a: SparseReconstruction, b: SparseReconstruction):
    assert a.cameras.keys() == b.cameras.keys()
    for k in a.cameras:
        np.testing.assert_array_equal(a.cameras[k].params, b.cameras[k].params)
        assert a.cameras[k].model == b.cameras[k].model
    assert a.images.keys() == b.images.keys()
    for k in a.images:
        np.testing.assert_allclose(a.images[k].qvec, b.images[k].qvec, rtol=1e-15)
        np.testing.assert_array_equal(a.images[k].tvec, b.images[k].tvec)
    assert len(a.points) == len(b.points)
    for p, q in zip(a.points, b.points):
        np.testing.assert_array_equal(p.position, q.position)
        np.testing.assert_array_equal(p.color, q.color)


def test_binary_text_round_trip_agree(tmp_path, rng):
    rec = reconstruction(rng)
    write_sparse(tmp_path / "bin", rec, binary=True)
    write_sparse(tmp_path / "txt", rec, binary=False)
    a, b = read_sparse(tmp_path / "bin"), read_sparse(tmp_path / "txt")
    assert_same(a, b)
    assert_same(rec, a)


def test_writers_are_inverse_of_parsers(rng):
    rec = reconstruction(rng, 5)
    assert parse_cameras(write_cameras_bin(rec.cameras)).keys() == rec.cameras.keys()
    assert parse_cameras(write_cameras_txt(rec.cameras)).keys() == rec.cameras.keys()
    assert parse_images(write_images_bin(rec.images)).keys() == rec.images.keys()
    assert parse_images(write_images_txt(rec.images)).keys() == rec.images.keys()
    assert len(parse_points3d(write_points3d_bin(rec.points))) == 5
    assert len(parse_points3d(write_points3d_txt(rec.points))) == 5


@given(st.binary(max_size=300))
def test_fuzz_parsers_fail_cleanly(data):
    for parse in (parse_cameras, parse_images, parse_points3d):
        for binary in (True, False, None):
            try:
                parse(data, binary=binary)
            except (MalformedFile, UnsupportedCameraModel):
                pass


@given(st.integers(0, 200), st.binary(max_size=8))
def test_fuzz_truncations_and_garbage_suffix(cut, junk):
    full = struct.pack("<Q", 1) + image_record(1, (1, 0, 0, 0), (0, 0, 0), 1, b"x.png", 2)
    data = full[:cut] + (junk if cut >= len(full) else b"")
    try:
        out = parse_images(data, binary=True)
        assert data == full and list(out) == ["x.png"]
    except MalformedFile:
        assert data != full


def test_init_cloud_positions_and_scales():
    pts = [SfmPoint(np.array(p, float), np.zeros(3, np.uint8), 0.0) for p in ([0, 0, 0], [1, 0, 0], [0, 2, 0])]
    cloud = init_cloud(pts)
    np.testing.assert_array_equal(cloud.positions, [[0, 0, 0], [1, 0, 0], [0, 2, 0]])
    # brute-force oracle: mean distance to the (up to) three nearest neighbours
    xyz = cloud.positions.astype(float)
    d = np.linalg.norm(xyz[:, None] - xyz[None], axis=-1)
    expected = np.sort(d, axis=1)[:, 1:4].mean(axis=1)
    np.testing.assert_allclose(cloud.scales()[:, 0], expected, rtol=1e-6)
    np.testing.assert_allclose(cloud.opacities(), 0.1, rtol=1e-6)
    np.testing.assert_array_equal(cloud.rotations, [[1, 0, 0, 0]] * 3)
    assert np.all(np.abs(cloud.f_diffuse) <= 0.1) and cloud.f_specular.shape == (3, 8)


def test_init_cloud_degenerate_and_large(rng):
    same = [SfmPoint(np.ones(3), np.zeros(3, np.uint8), 0.0) for _ in range(4)]
    np.testing.assert_allclose(init_cloud(same).scales(), 1e-4, rtol=1e-5)
    many = [SfmPoint(p, np.zeros(3, np.uint8), 0.0) for p in rng.normal(size=(1000, 3))]
    s = init_cloud(many).scales()
    assert np.all(np.isfinite(s)) and np.all(s > 0)
    with pytest.raises(EmptyReconstruction):
        init_cloud([])


def test_dataset_load_and_split(tmp_path):
    ds, _ = make_synthetic_dataset(0)
    write_dataset(tmp_path / "ds", ds)
    loaded = load_dataset(tmp_path / "ds")
    assert len(loaded) == 8
    train, test = loaded.split(8)
    assert [loaded.views[i].name for i in test] == ["view_000.png"] and len(train) == 7
    np.testing.assert_allclose(loaded.images[3], ds.images[3], atol=0.5 / 255 + 1e-6)
    np.testing.assert_allclose(loaded.views[3].world_to_camera, ds.views[3].world_to_camera, atol=1e-12)
    half = load_dataset(tmp_path / "ds", downscale=2)
    assert half.images[0].shape == (16, 16, 3) and half.views[0].focal_x == ds.views[0].focal_x / 2


def test_dataset_missing_paths(tmp_path):
    with pytest.raises(FileNotFoundError, match="sparse"):
        load_dataset(tmp_path)


def test_image_io_round_trip(tmp_path, rng):
    img = rng.uniform(size=(5, 7, 3))
    save_image(tmp_path / "x.png", img)
    back = load_image(tmp_path / "x.png")
    assert back.dtype == np.float32 and back.shape == (5, 7, 3)
    np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-6)
