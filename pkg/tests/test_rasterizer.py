import json

import numpy as np
import pytest

from slgs.autodiff import Tensor, check_gradients
from slgs.errors import ShapeError, StateError
from slgs.projection import ProjectedGaussian
from slgs.rasterizer import (ALPHA_MAX, TileRasterizer, splat, splat_forward, splat_oracle, splat_reference)
from slgs.scene import CameraView

from conftest import random_splat_scene, smooth_splat_scene


def view(w=16, h=16):
    return CameraView(w, h, 10.0, 10.0, (w / 2, h / 2), np.eye(4))


def one(mean=(7.5, 7.5), cov=((4.0, 0.0), (0.0, 4.0)), opacity=1.0, depth=1.0, index=0):
    return ProjectedGaussian(np.array(mean), np.array(cov), depth, 6.0, index, opacity)


def test_single_gaussian_at_own_centre_hits_alpha_ceiling():
    f = np.arange(17, dtype=np.float32)
    maps = splat_forward([one(opacity=0.999)], f[None], view())
    np.testing.assert_allclose(maps.features[7, 7], ALPHA_MAX * f, rtol=1e-6)
    assert abs(maps.alpha[7, 7, 0] - ALPHA_MAX) < 1e-6
    assert maps.mask.shape == (16, 16, 1) and maps.diffuse.shape == (16, 16, 8)


def test_single_gaussian_falloff_matches_formula():
    cov = np.array([[6.0, 1.5], [1.5, 3.0]])
    maps = splat_forward([one(cov=cov, opacity=0.7)], np.ones((1, 1)), view(), 1, 0)
    inv = np.linalg.inv(cov)
    for x, y in [(7, 7), (9, 6), (5, 8)]:
        d = np.array([x + 0.5, y + 0.5]) - 7.5
        expected = 0.7 * np.exp(-0.5 * d @ inv @ d)
        assert abs(maps.features[y, x, 0] - expected) < 1e-6


def test_two_layer_front_to_back_compositing():
    front = one(opacity=0.5, depth=1.0, index=0)
    back = one(opacity=0.5, depth=2.0, index=1)
    f = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    maps = splat_forward([front, back], f, view(), 2, 0)
    np.testing.assert_allclose(maps.features[7, 7], [0.5, 0.25], rtol=1e-6)
    assert abs(maps.alpha[7, 7, 0] - 0.75) < 1e-6
    assert maps.contributors[7, 7, 0] == 2


def test_zero_gaussians_give_zero_buffers():
    maps = splat_forward([], np.zeros((0, 17), dtype=np.float32), view())
    assert not maps.features.any() and not maps.alpha.any() and not maps.contributors.any()


def test_feature_row_mismatch_raises():
    with pytest.raises(ShapeError):
        splat_forward([one()], np.zeros((2, 17)), view())


def test_backward_without_forward_raises():
    with pytest.raises(StateError):
        TileRasterizer(8, 8).backward(np.zeros((8, 8, 3)))


def test_zero_upstream_gradient_gives_zero_gradients(rng):
    mean2d, cov, opacity, feats = smooth_splat_scene(rng)
    rast = TileRasterizer(16, 16)
    rast.forward(mean2d, cov, opacity, feats)
    grads = rast.backward(np.zeros((16, 16, 3)))
    for g in grads.values():
        assert not np.any(g)


def test_tile_matches_oracle_random_scenes():
    rng = np.random.default_rng(7)
    for _ in range(40):
        mean2d, cov, opacity, feats, w, h = random_splat_scene(rng)
        tile = TileRasterizer(w, h).forward(mean2d, cov, opacity, feats)
        ref = splat_oracle(mean2d, cov, opacity, feats, w, h)
        assert np.abs(tile[0] - ref[0]).max(initial=0) < 1e-5
        np.testing.assert_array_equal(tile[2], ref[2])


def test_splat_reference_agrees_on_five_gaussians(rng):
    ps = [one(mean=rng.uniform(0, 16, 2), cov=np.diag(rng.uniform(1, 20, 2)), opacity=rng.uniform(0.2, 1),
              depth=float(k), index=k) for k in range(5)]
    feats = rng.normal(size=(5, 17))
    a = splat_forward(ps, feats, view())
    b = splat_reference(ps, feats, view())
    assert np.abs(a.features - b.features).max() < 1e-5
    np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-6)


def test_feature_gradient_is_transmittance_weighted_alpha():
    cov = np.array([[9.0, 0.0, 9.0]])
    mean = np.array([[8.0, 8.0]])
    op = np.array([0.8])
    rast = TileRasterizer(16, 16)
    rast.forward(mean, cov, op, np.ones((1, 1)))
    grads = rast.backward(np.ones((16, 16, 1)))
    px, py = np.meshgrid(np.arange(16) + 0.5, np.arange(16) + 0.5)
    a = 0.8 * np.exp(-0.5 * ((px - 8) ** 2 + (py - 8) ** 2) / 9.0)
    expected = np.where(a >= 1 / 255, np.minimum(a, 0.99), 0).sum()
    assert abs(grads["features"][0, 0] - expected) < 1e-4


def test_splat_gradients_twenty_overlap_scenes():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        mean2d, cov, opacity, feats = smooth_splat_scene(rng)

        def fn(m, c, o, f):
            return splat(m, c, o, f, 16, 16)[0]

        res = check_gradients(fn, [mean2d, cov, opacity, feats], seed=seed)
        assert res, res.worst


def test_feature_map_dump(tmp_path, rng):
    mean2d, cov, opacity, feats = smooth_splat_scene(rng, channels=17)
    image, t, count = TileRasterizer(16, 16).forward(mean2d, cov, opacity, feats.astype(np.float32))
    from slgs.rasterizer import FeatureMaps
    maps = FeatureMaps(image, (1 - t)[..., None], count[..., None].astype(np.float32))
    maps.dump(tmp_path / "maps.bin")
    meta = json.loads((tmp_path / "maps.bin.json").read_text())
    raw = (tmp_path / "maps.bin").read_bytes()
    entry = next(b for b in meta["buffers"] if b["name"] == "mask")
    mask = np.frombuffer(raw[entry["offset"]:entry["offset"] + entry["bytes"]], dtype="<f4").reshape(16, 16, 1)
    np.testing.assert_array_equal(mask, maps.mask.astype(np.float32))
