"""The full renderer: project, shade, splat, decode, compose."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Module, Tensor, ops
from .decoders import DiffuseUNet, SpecularCNN, compose, decode_diffuse, decode_specular, pixel_ray_encoding, to_nchw
from .projection import depth_order, project_arrays, project_gaussians
from .rasterizer import FeatureMaps, splat
from .scene import CameraView, GaussianCloud
from .shading import ShadingNets, predict_normal, predict_view_mask, pseudo_normal, sh_color


@dataclass
class ModelConfig:
    diffuse_dims: int = 8
    specular_dims: int = 8
    no_mask: bool = False
    no_specular: bool = False
    sh_color_baseline: bool = False

    def __post_init__(self):
        if self.diffuse_dims < 1 or self.specular_dims < 1:
            raise ValueError("latent channel counts must be positive")

    @property
    def splat_channels(self) -> int:
        if self.sh_color_baseline:
            return self.diffuse_dims + 3
        return self.diffuse_dims + self.specular_dims + 1


class SplatModel:
    """Gaussian cloud plus the shading MLPs and image decoders."""

    def __init__(self, cloud: GaussianCloud, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.cloud = cloud
        self.config = config
        rng = np.random.default_rng(seed)
        self.shading = ShadingNets(rng, config.diffuse_dims, config.specular_dims)
        self.unet = DiffuseUNet(rng, config.diffuse_dims)
        self.specular = SpecularCNN(rng, config.specular_dims)
        if config.sh_color_baseline and cloud.sh_color is None:
            cloud.sh_color = np.zeros((len(cloud), 16, 3), dtype=np.float32)

    def networks(self) -> dict[str, Module]:
        nets = {"shading": self.shading, "unet": self.unet}
        if not (self.config.no_specular or self.config.sh_color_baseline):
            nets["specular"] = self.specular
        return nets

    def all_networks(self) -> dict[str, Module]:
        return {"shading": self.shading, "unet": self.unet, "specular": self.specular}

    def network_parameters(self) -> dict[str, Tensor]:
        return {f"{k}.{n}": p for k, net in self.networks().items() for n, p in net.named_parameters()}


@dataclass
class RenderResult:
    image: Tensor  # (1, 3, H, W)
    diffuse: Tensor
    specular: Tensor | None
    mask: Tensor | None  # (1, 1, H, W)
    normals: Tensor  # (M, 3) for the visible set
    pseudo_normals: np.ndarray
    visible: np.ndarray  # cloud indices, front to back
    mean2d: Tensor
    radii: np.ndarray
    maps: FeatureMaps
    params: dict[str, Tensor] = field(default_factory=dict)

    def rgb(self, which: str = "image") -> np.ndarray:
        t = getattr(self, which)
        return np.transpose(t.data[0], (1, 2, 0))


def leaf_params(cloud: GaussianCloud, requires_grad: bool = False) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=requires_grad, name=name) for name, arr in cloud.params().items()}


def render(model: SplatModel, view: CameraView, params: dict[str, Tensor] | None = None,
           ray_enc: np.ndarray | None = None) -> RenderResult:
    """Render one view; differentiable when run under a tape with tracked ``params``."""
    cfg = model.config
    cloud = model.cloud
    params = params if params is not None else leaf_params(cloud)
    proj = project_arrays(cloud.positions, cloud.rotations, cloud.log_scales, cloud.opacities(), view)
    vis = np.flatnonzero(proj["visible"])
    idx = vis[depth_order(proj["depth"][vis], vis)]

    pos = params["positions"][idx]
    quats = params["rotations"][idx]
    log_scales = params["log_scales"][idx]
    packed = project_gaussians(pos, quats, log_scales, view)
    mean2d = packed[:, 0:2]
    cov2d = packed[:, 2:5]
    opacity = ops.sigmoid(params["opacity_logits"][idx])

    view_dir = ops.normalize(pos - Tensor(view.center), axis=1)
    f_d = params["f_diffuse"][idx]
    f_s = params["f_specular"][idx]
    normals = predict_normal(model.shading, f_d, f_s)
    pseudo = pseudo_normal(cloud.rotation_matrices()[idx], cloud.scales()[idx], view_dir.data)

    dd, ds = cfg.diffuse_dims, cfg.specular_dims
    if cfg.sh_color_baseline:
        feats = [f_d, sh_color(params["sh_color"][idx], view_dir)]
    else:
        feats = [f_d, f_s]
        if cfg.no_mask or cfg.no_specular:
            feats.append(Tensor(np.ones((len(idx), 1))))
        else:
            feats.append(predict_view_mask(model.shading, view_dir, normals))
    image, aux = splat(mean2d, cov2d, opacity, ops.concat(feats, axis=1), view.width, view.height)
    fmap = to_nchw(image)

    diffuse = decode_diffuse(model.unet, fmap[:, :dd])
    specular = mask = None
    if cfg.sh_color_baseline:
        out = diffuse + fmap[:, dd:dd + 3]
    elif cfg.no_specular:
        out = diffuse
    else:
        if ray_enc is None:
            ray_enc = pixel_ray_encoding(view)
        specular = decode_specular(model.specular, fmap[:, dd:dd + ds], ray_enc)
        mask = Tensor(np.ones((1, 1, view.height, view.width))) if cfg.no_mask else fmap[:, dd + ds:dd + ds + 1]
        out = compose(diffuse, specular, mask)

    maps = FeatureMaps(image.data, aux.alpha[..., None], aux.contributors[..., None].astype(np.float32),
                       dd, 0 if cfg.sh_color_baseline else ds)
    return RenderResult(out, diffuse, specular, mask, normals, pseudo, idx, mean2d, proj["radius"][idx], maps,
                        params)
