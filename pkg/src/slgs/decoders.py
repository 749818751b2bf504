"""Image-space decoders: Diffuse-UNet, Specular-CNN, ray encoding and composition.

All feature maps on the tape are NCHW with N = 1.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Conv2d, Module, Tensor, ops
from .errors import ShapeError
from .scene import CameraView

PE_OCTAVES = 4
RAY_ENC_DIMS = 3 + 3 * 2 * PE_OCTAVES
UNET_WIDTHS = (8, 16, 32, 64)
SPECULAR_WIDTH = 32


class ResBlock(Module):
    """conv -> LayerNorm -> ELU -> conv -> LayerNorm, added back to the input."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, rng)
        self.conv2 = Conv2d(channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.elu(ops.layer_norm(self.conv1(x), axis=1))
        h = ops.layer_norm(self.conv2(h), axis=1)
        return ops.elu(x + h)


class DiffuseUNet(Module):
    """Three stride-2 downsamples to 1/8 resolution and a mirrored decoder with skips."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 8, widths=UNET_WIDTHS):
        w0, w1, w2, w3 = widths
        self.in_channels = in_channels
        self.stem = Conv2d(in_channels, w0, rng)
        self.enc0 = ResBlock(w0, rng)
        self.down1 = Conv2d(w0, w1, rng, stride=2)
        self.enc1 = ResBlock(w1, rng)
        self.down2 = Conv2d(w1, w2, rng, stride=2)
        self.enc2 = ResBlock(w2, rng)
        self.down3 = Conv2d(w2, w3, rng, stride=2)
        self.bottleneck = ResBlock(w3, rng)
        self.up3 = Conv2d(w3, w2, rng)
        self.fuse3 = Conv2d(2 * w2, w2, rng)
        self.dec2 = ResBlock(w2, rng)
        self.up2 = Conv2d(w2, w1, rng)
        self.fuse2 = Conv2d(2 * w1, w1, rng)
        self.dec1 = ResBlock(w1, rng)
        self.up1 = Conv2d(w1, w0, rng)
        self.fuse1 = Conv2d(2 * w0, w0, rng)
        self.dec0 = ResBlock(w0, rng)
        self.head = Conv2d(w0, 3, rng, zero_init=True)

    @staticmethod
    def _up(conv: Conv2d, x: Tensor) -> Tensor:
        return ops.elu(conv(ops.upsample_nearest2d(x, 2)))

    def forward(self, x: Tensor) -> Tensor:
        s0 = self.enc0(ops.elu(self.stem(x)))
        s1 = self.enc1(ops.elu(self.down1(s0)))
        s2 = self.enc2(ops.elu(self.down2(s1)))
        b = self.bottleneck(ops.elu(self.down3(s2)))
        h = self.dec2(ops.elu(self.fuse3(ops.concat([self._up(self.up3, b), s2], axis=1))))
        h = self.dec1(ops.elu(self.fuse2(ops.concat([self._up(self.up2, h), s1], axis=1))))
        h = self.dec0(ops.elu(self.fuse1(ops.concat([self._up(self.up1, h), s0], axis=1))))
        return self.head(h)


class SpecularCNN(Module):
    def __init__(self, rng: np.random.Generator, in_channels: int = 8, width: int = SPECULAR_WIDTH,
                 ray_dims: int = RAY_ENC_DIMS):
        self.in_channels = in_channels
        self.base = Conv2d(in_channels, width, rng)
        self.conv1 = Conv2d(width + ray_dims, width, rng)
        self.conv2 = Conv2d(width, width, rng)
        self.head = Conv2d(width, 3, rng, zero_init=True)

    def forward(self, features: Tensor, ray_enc: Tensor) -> Tensor:
        h = ops.elu(self.base(features))
        h = ops.concat([h, ray_enc], axis=1)
        h = ops.elu(self.conv1(h))
        h = ops.elu(self.conv2(h))
        return self.head(h)


def pixel_rays(view: CameraView) -> np.ndarray:
    """Unit world-space ray directions through pixel centres, (H, W, 3)."""
    ys, xs = np.mgrid[0:view.height, 0:view.width]
    cx, cy = view.principal_point
    cam = np.stack([(xs + 0.5 - cx) / view.focal_x, (ys + 0.5 - cy) / view.focal_y, np.ones(xs.shape)], axis=-1)
    world = cam @ view.rotation  # R^T applied to row vectors
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def positional_encoding(d: np.ndarray, octaves: int = PE_OCTAVES) -> np.ndarray:
    """[d, sin(2^k d), cos(2^k d) for k < octaves] along the last axis."""
    parts = [d]
    for k in range(octaves):
        parts += [np.sin(2.0 ** k * d), np.cos(2.0 ** k * d)]
    return np.concatenate(parts, axis=-1)


def pixel_ray_encoding(view: CameraView, octaves: int = PE_OCTAVES) -> np.ndarray:
    """H x W x (3 + 6 * octaves) encoding of per-pixel ray directions."""
    return positional_encoding(pixel_rays(view), octaves).astype(np.float32)


def to_nchw(hwc) -> Tensor:
    t = hwc if isinstance(hwc, Tensor) else Tensor(hwc)
    if t.ndim != 3:
        raise ShapeError(f"expected an H x W x C map, got shape {t.shape}")
    h, w, c = t.shape
    return ops.reshape(ops.transpose(t, (2, 0, 1)), (1, c, h, w))


def to_hwc(nchw: Tensor) -> np.ndarray:
    return np.transpose(nchw.data[0], (1, 2, 0))


def _pad_amount(n: int, multiple: int = 8) -> int:
    return (-n) % multiple


def decode_diffuse(net: DiffuseUNet, diffuse_map) -> Tensor:
    """Decode a (1, C, H, W) or H x W x C diffuse map to a (1, 3, H, W) image.

    Sizes that are not multiples of 8 are reflect-padded, then cropped back.
    """
    x = diffuse_map if isinstance(diffuse_map, Tensor) and diffuse_map.ndim == 4 else to_nchw(diffuse_map)
    if x.shape[1] != net.in_channels:
        raise ShapeError(f"diffuse map has {x.shape[1]} channels, decoder expects {net.in_channels}")
    h, w = x.shape[2:]
    ph, pw = _pad_amount(h), _pad_amount(w)
    if ph or pw:
        x = ops.pad_reflect(x, (0, ph, 0, pw))
    out = net(x)
    if out.shape[2:] != (h, w):
        out = out[:, :, :h, :w]
    return out


def decode_specular(net: SpecularCNN, specular_map, ray_enc) -> Tensor:
    """Decode specular features plus per-pixel ray encoding to a (1, 3, H, W) image."""
    f = specular_map if isinstance(specular_map, Tensor) and specular_map.ndim == 4 else to_nchw(specular_map)
    r = ray_enc if isinstance(ray_enc, Tensor) and ray_enc.ndim == 4 else to_nchw(ray_enc)
    if f.shape[2:] != r.shape[2:]:
        raise ShapeError(f"specular map {f.shape} and ray encoding {r.shape} differ spatially")
    if f.shape[1] != net.in_channels:
        raise ShapeError(f"specular map has {f.shape[1]} channels, decoder expects {net.in_channels}")
    return net(f, r)


def compose(diffuse_rgb, specular_rgb, mask_map) -> Tensor:
    """diffuse + specular * mask, with the single mask channel broadcast over RGB."""
    return ops.add(diffuse_rgb, ops.mul(specular_rgb, mask_map))
