"""Tile-based feature splatting, its adjoint, and a brute-force reference.

Per pixel p, sorted front to back::

    f(p) = sum_i T_i a_i f_i,   a_i = min(0.99, o_i exp(-0.5 d^T cov_i^-1 d)),
    T_i = prod_{j<i} (1 - a_j)

Terms with a_i < 1/255 are skipped, and accumulation stops before the term
that would push T below 1e-4.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.tensor import Tensor, make_result
from .errors import ShapeError, StateError
from .projection import ProjectedGaussian, support_extent
from .scene import CameraView

TILE_SIZE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


@dataclass
class FeatureMaps:
    features: np.ndarray  # H x W x C, channels [diffuse | specular | mask]
    alpha: np.ndarray  # H x W x 1
    contributors: np.ndarray  # H x W x 1
    diffuse_dims: int = 8
    specular_dims: int = 8

    @property
    def diffuse(self) -> np.ndarray:
        return self.features[..., :self.diffuse_dims]

    @property
    def specular(self) -> np.ndarray:
        return self.features[..., self.diffuse_dims:self.diffuse_dims + self.specular_dims]

    @property
    def mask(self) -> np.ndarray:
        k = self.diffuse_dims + self.specular_dims
        return self.features[..., k:k + 1]

    def dump(self, path: Path) -> None:
        """Write each buffer as raw little-endian float32 with a JSON sidecar."""
        path = Path(path)
        buffers = {"diffuse": self.diffuse, "specular": self.specular, "mask": self.mask,
                   "alpha": self.alpha, "contributors": self.contributors}
        meta = {"height": int(self.features.shape[0]), "width": int(self.features.shape[1]), "buffers": []}
        offset = 0
        with open(path, "wb") as fh:
            for name, buf in buffers.items():
                raw = np.ascontiguousarray(buf, dtype="<f4").tobytes()
                fh.write(raw)
                meta["buffers"].append({"name": name, "channels": int(buf.shape[-1]),
                                        "offset": offset, "bytes": len(raw)})
                offset += len(raw)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def _conic(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def _alpha(px, py, mean2d, conic, opacity):
    """Raw (clamped) alpha and the Gaussian falloff, for Gaussians x pixels."""
    dx = px[None, :] - mean2d[:, 0:1]
    dy = py[None, :] - mean2d[:, 1:2]
    ca, cb, cc = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    falloff = np.exp(power)
    raw = opacity[:, None] * falloff
    return np.minimum(raw, ALPHA_MAX), falloff, raw > ALPHA_MAX, dx, dy


def _pixel_grid(x0, x1, y0, y1, dtype):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return (xs.reshape(-1) + 0.5).astype(dtype), (ys.reshape(-1) + 0.5).astype(dtype)


def _check_inputs(mean2d, cov2d, opacity, features):
    m = len(mean2d)
    if features.ndim != 2 or features.shape[0] != m:
        raise ShapeError(f"features shape {features.shape} does not match {m} projected Gaussians")
    if cov2d.shape != (m, 3) or opacity.shape != (m,):
        raise ShapeError(f"cov2d {cov2d.shape} / opacity {opacity.shape} do not match {m} Gaussians")


class TileRasterizer:
    """Forward splat over 16x16 tiles plus the matching backward replay."""

    def __init__(self, width: int, height: int, tile: int = TILE_SIZE):
        self.width, self.height, self.tile = int(width), int(height), tile
        self._saved = None

    def _tile_lists(self, mean2d, extent):
        lo_x = mean2d[:, 0] - extent
        hi_x = mean2d[:, 0] + extent
        lo_y = mean2d[:, 1] - extent
        hi_y = mean2d[:, 1] + extent
        for y0 in range(0, self.height, self.tile):
            y1 = min(y0 + self.tile, self.height)
            rows = (hi_y >= y0) & (lo_y <= y1)
            for x0 in range(0, self.width, self.tile):
                x1 = min(x0 + self.tile, self.width)
                idx = np.flatnonzero(rows & (hi_x >= x0) & (lo_x <= x1))
                yield (x0, x1, y0, y1), idx

    def forward(self, mean2d, cov2d, opacity, features):
        """Splat sorted Gaussians; returns (H x W x C image, final transmittance, contributor count)."""
        mean2d, cov2d, opacity, features = (np.asarray(a) for a in (mean2d, cov2d, opacity, features))
        _check_inputs(mean2d, cov2d, opacity, features)
        dtype = features.dtype
        h, w, c = self.height, self.width, features.shape[1]
        image = np.zeros((h, w, c), dtype=dtype)
        final_t = np.ones((h, w), dtype=dtype)
        last = np.zeros((h, w), dtype=np.int64)
        count = np.zeros((h, w), dtype=np.int64)
        conic = _conic(cov2d)
        _, extent = support_extent(cov2d, opacity)
        tiles = []
        for (x0, x1, y0, y1), idx in self._tile_lists(mean2d, extent):
            tiles.append(((x0, x1, y0, y1), idx))
            if len(idx) == 0:
                continue
            px, py = _pixel_grid(x0, x1, y0, y1, dtype)
            alpha, _, _, _, _ = _alpha(px, py, mean2d[idx], conic[idx], opacity[idx])
            eff = np.where(alpha < ALPHA_MIN, 0, alpha).astype(dtype)
            t_next = np.cumprod(1 - eff, axis=0)
            included = (t_next >= T_MIN) & (eff > 0)
            t_before = np.concatenate([np.ones((1, px.size), dtype=dtype), t_next[:-1]])
            weight = np.where(included, t_before * eff, 0)
            shape = (y1 - y0, x1 - x0)
            image[y0:y1, x0:x1] = (weight.T @ features[idx]).reshape(shape + (c,))
            final_t[y0:y1, x0:x1] = np.cumprod(np.where(included, 1 - eff, 1), axis=0)[-1].reshape(shape)
            kept = t_next >= T_MIN
            last[y0:y1, x0:x1] = kept.sum(axis=0).reshape(shape)
            count[y0:y1, x0:x1] = included.sum(axis=0).reshape(shape)
        self._saved = dict(mean2d=mean2d, conic=conic, opacity=opacity, features=features,
                           final_t=final_t, last=last, tiles=tiles)
        return image, final_t, count

    def backward(self, grad_image, grad_alpha=None):
        """Adjoint of :meth:`forward`, replaying each tile back to front.

        Returns a dict with gradients for ``features``, ``opacity``, ``mean2d``
        and ``cov2d``.
        """
        if self._saved is None:
            raise StateError("splat backward called without a preceding forward")
        s = self._saved
        mean2d, conic, opacity, features = s["mean2d"], s["conic"], s["opacity"], s["features"]
        dtype = features.dtype
        grad_image = np.asarray(grad_image, dtype=dtype)
        if grad_image.shape != (self.height, self.width, features.shape[1]):
            raise ShapeError(f"grad shape {grad_image.shape} does not match image "
                             f"{(self.height, self.width, features.shape[1])}")
        if grad_alpha is not None:
            grad_alpha = np.asarray(grad_alpha, dtype=dtype).reshape(self.height, self.width)
        m = len(mean2d)
        d_feat = np.zeros_like(features)
        d_opacity = np.zeros(m, dtype=dtype)
        d_mean = np.zeros((m, 2), dtype=dtype)
        d_conic = np.zeros((m, 3), dtype=dtype)
        for (x0, x1, y0, y1), idx in s["tiles"]:
            if len(idx) == 0:
                continue
            px, py = _pixel_grid(x0, x1, y0, y1, dtype)
            alpha, falloff, clamped, dx, dy = _alpha(px, py, mean2d[idx], conic[idx], opacity[idx])
            g = grad_image[y0:y1, x0:x1].reshape(-1, features.shape[1])
            t_final = s["final_t"][y0:y1, x0:x1].reshape(-1)
            last = s["last"][y0:y1, x0:x1].reshape(-1)
            ga = None if grad_alpha is None else grad_alpha[y0:y1, x0:x1].reshape(-1)
            feats = features[idx]
            gf_all = feats @ g.T  # (G, P): g(p) . f_i
            t = t_final.copy()
            acc = np.zeros_like(t)
            d_alpha = np.zeros_like(alpha)
            for k in range(len(idx) - 1, -1, -1):
                inc = (k < last) & (alpha[k] >= ALPHA_MIN)
                if not inc.any():
                    continue
                a = np.where(inc, alpha[k], 0)
                one_minus = 1 - a
                t = np.where(inc, t / one_minus, t)
                wgt = a * t
                d_feat[idx[k]] += wgt @ g
                da = t * gf_all[k] - acc / one_minus
                if ga is not None:
                    da = da + ga * t_final / one_minus
                d_alpha[k] = np.where(inc, da, 0)
                acc += wgt * gf_all[k]
            d_alpha = np.where(clamped, 0, d_alpha)
            d_opacity[idx] += (d_alpha * falloff).sum(axis=1)
            d_power = d_alpha * alpha
            ca, cb, cc = conic[idx, 0:1], conic[idx, 1:2], conic[idx, 2:3]
            d_mean[idx, 0] += (d_power * (ca * dx + cb * dy)).sum(axis=1)
            d_mean[idx, 1] += (d_power * (cb * dx + cc * dy)).sum(axis=1)
            d_conic[idx, 0] += (d_power * (-0.5 * dx * dx)).sum(axis=1)
            d_conic[idx, 1] += (d_power * (-dx * dy)).sum(axis=1)
            d_conic[idx, 2] += (d_power * (-0.5 * dy * dy)).sum(axis=1)
        # conic = cov^-1  =>  dcov = -K dK K, with dK symmetric
        ka, kb, kc = conic[:, 0], conic[:, 1], conic[:, 2]
        ga_, gb_, gc_ = d_conic[:, 0], 0.5 * d_conic[:, 1], d_conic[:, 2]
        # (K G K) entries for symmetric 2x2 K and G
        kg00 = ka * ga_ + kb * gb_
        kg01 = ka * gb_ + kb * gc_
        kg10 = kb * ga_ + kc * gb_
        kg11 = kb * gb_ + kc * gc_
        s00 = kg00 * ka + kg01 * kb
        s01 = kg00 * kb + kg01 * kc
        s11 = kg10 * kb + kg11 * kc
        d_cov = -np.stack([s00, 2 * s01, s11], axis=1)
        return dict(features=d_feat, opacity=d_opacity, mean2d=d_mean, cov2d=d_cov.astype(dtype))


def splat_oracle(mean2d, cov2d, opacity, features, width: int, height: int):
    """Per-pixel reference: every pixel visits every Gaussian in order, no tiles."""
    mean2d, cov2d, opacity, features = (np.asarray(a) for a in (mean2d, cov2d, opacity, features))
    _check_inputs(mean2d, cov2d, opacity, features)
    dtype = features.dtype
    px, py = _pixel_grid(0, width, 0, height, dtype)
    conic = _conic(cov2d)
    out = np.zeros((px.size, features.shape[1]), dtype=dtype)
    t = np.ones(px.size, dtype=dtype)
    done = np.zeros(px.size, dtype=bool)
    count = np.zeros(px.size, dtype=np.int64)
    for i in range(len(mean2d)):
        alpha = _alpha(px, py, mean2d[i:i + 1], conic[i:i + 1], opacity[i:i + 1])[0][0]
        skip = alpha < ALPHA_MIN
        test_t = t * (1 - alpha)
        done |= ~skip & (test_t < T_MIN)
        live = ~done & ~skip
        out += np.where(live, t * alpha, 0)[:, None] * features[i][None, :]
        t = np.where(live, test_t, t)
        count += live
    return (out.reshape(height, width, -1), t.reshape(height, width), count.reshape(height, width))


def _unpack(projected: list[ProjectedGaussian], dtype=np.float32):
    m = len(projected)
    mean2d = np.array([p.mean2d for p in projected], dtype=dtype).reshape(m, 2)
    cov2d = np.array([[p.cov2d[0, 0], p.cov2d[0, 1], p.cov2d[1, 1]] for p in projected], dtype=dtype).reshape(m, 3)
    opacity = np.array([p.opacity for p in projected], dtype=dtype).reshape(m)
    return mean2d, cov2d, opacity


def _maps(image, final_t, count, diffuse_dims, specular_dims) -> FeatureMaps:
    return FeatureMaps(image, (1 - final_t)[..., None], count[..., None].astype(image.dtype),
                       diffuse_dims, specular_dims)


def splat_forward(projected: list[ProjectedGaussian], features: np.ndarray, view: CameraView,
                  diffuse_dims: int = 8, specular_dims: int = 8,
                  rasterizer: TileRasterizer | None = None) -> FeatureMaps:
    """Tile-render sorted projected Gaussians; row i of ``features`` belongs to ``projected[i]``."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[0] != len(projected):
        raise ShapeError(f"features shape {features.shape} does not match {len(projected)} projected Gaussians")
    rast = rasterizer or TileRasterizer(view.width, view.height)
    image, final_t, count = rast.forward(*_unpack(projected), features)
    return _maps(image, final_t, count, diffuse_dims, specular_dims)


def splat_reference(projected: list[ProjectedGaussian], features: np.ndarray, view: CameraView,
                    diffuse_dims: int = 8, specular_dims: int = 8) -> FeatureMaps:
    """FeatureMaps from :func:`splat_oracle`, same inputs as :func:`splat_forward`."""
    features = np.asarray(features, dtype=np.float32)
    image, final_t, count = splat_oracle(*_unpack(projected), features, view.width, view.height)
    return _maps(image, final_t, count, diffuse_dims, specular_dims)


@dataclass
class SplatAux:
    alpha: np.ndarray
    contributors: np.ndarray
    rasterizer: TileRasterizer


def splat(mean2d: Tensor, cov2d: Tensor, opacity: Tensor, features: Tensor,
          width: int, height: int) -> tuple[Tensor, SplatAux]:
    """Differentiable splat on the active tape; returns the H x W x C image."""
    rast = TileRasterizer(width, height)
    image, final_t, count = rast.forward(mean2d.data, cov2d.data, opacity.data, features.data)

    def backward(g):
        grads = rast.backward(g)
        return grads["mean2d"], grads["cov2d"], grads["opacity"], grads["features"]

    out = make_result("splat", image, (mean2d, cov2d, opacity, features), backward)
    return out, SplatAux(1 - final_t, count, rast)
