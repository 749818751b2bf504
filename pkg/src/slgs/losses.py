"""Photometric, decomposition and normal losses; PSNR/SSIM metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import as_tensor
from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0


@dataclass
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_diffuse: float = 0.05
    lambda_normal: float = 0.001

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.lambda_dssim > 1:
            raise ValueError(f"lambda_dssim must be at most 1, got {self.lambda_dssim}")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def l1(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "l1")
    return ops.mean(ops.abs(a - b))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _as_planes(x: Tensor) -> Tensor:
    """(1, C, H, W) or (H, W, C) images to (C, 1, H, W) so channels filter independently."""
    if x.ndim == 4:
        n, c, h, w = x.shape
        return ops.reshape(x, (n * c, 1, h, w))
    if x.ndim == 3:
        h, w, c = x.shape
        return ops.reshape(ops.transpose(x, (2, 0, 1)), (c, 1, h, w))
    raise ShapeError(f"ssim expects an image, got shape {x.shape}")


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    """Mean SSIM over pixels and channels with a Gaussian window (zero padded)."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "ssim")
    x, y = _as_planes(a), _as_planes(b)
    k = Tensor(gaussian_window(window, sigma)[None, None])
    pad = window // 2

    def blur(t):
        return ops.conv2d(t, k, padding=pad)

    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = blur(x * x) - mu_xx
    var_y = blur(y * y) - mu_yy
    cov = blur(x * y) - mu_xy
    num = (2 * mu_xy + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return ops.mean(num / den)


def dssim(a, b) -> Tensor:
    return (1 - ssim(a, b)) * 0.5


def normal_loss(n, n_pseudo) -> Tensor:
    """Mean of 1 - cos(n, n_pseudo) over rows."""
    n, n_pseudo = as_tensor(n), as_tensor(n_pseudo)
    _same_shape(n, n_pseudo, "normal_loss")
    if n.ndim == 1:
        n, n_pseudo = ops.reshape(n, (1, -1)), ops.reshape(n_pseudo, (1, -1))
    dot = ops.sum(n * n_pseudo, axis=1)
    norms = ops.sqrt(ops.sum(n * n, axis=1) * ops.sum(n_pseudo * n_pseudo, axis=1))
    return ops.mean(1 - dot / norms)


def photometric(render, gt, lambda_dssim: float) -> Tensor:
    return (1 - lambda_dssim) * l1(render, gt) + lambda_dssim * dssim(render, gt)


def total_loss(render, diffuse, gt, normals, pseudo_normals, w: LossWeights = LossWeights(),
               parts: dict | None = None) -> Tensor:
    """Rendered-image loss plus weighted diffuse and normal regularizers.

    If ``parts`` is given it receives the three unweighted sub-losses as floats.
    """
    l_render = photometric(render, gt, w.lambda_dssim)
    loss = l_render
    l_diffuse = l_normal = None
    if w.lambda_diffuse > 0 and diffuse is not None:
        l_diffuse = photometric(diffuse, gt, w.lambda_dssim)
        loss = loss + w.lambda_diffuse * l_diffuse
    if w.lambda_normal > 0 and normals is not None and as_tensor(normals).size > 0:
        l_normal = normal_loss(normals, pseudo_normals)
        loss = loss + w.lambda_normal * l_normal
    if parts is not None:
        parts["render"] = l_render.item()
        parts["diffuse"] = 0.0 if l_diffuse is None else l_diffuse.item()
        parts["normal"] = 0.0 if l_normal is None else l_normal.item()
    return loss


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical images report the 100 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10 * np.log10(1 / mse), PSNR_CAP))


def ssim_value(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM of two H x W x C float images, computed in float64."""
    from .autodiff import precision

    with precision(np.float64):
        return ssim(Tensor(a), Tensor(b)).item()
