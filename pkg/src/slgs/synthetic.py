"""A small scene rendered by the engine's own forward model, used for overfit checks."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .colmap import CameraIntrinsics, Dataset, ImagePose, SfmPoint, SparseReconstruction, save_image, write_sparse
from .model import ModelConfig, SplatModel, render
from .scene import GaussianCloud, logit, look_at, rotmat_to_quat

NUM_GAUSSIANS = 3
NUM_VIEWS = 8
IMAGE_SIZE = 32
FOCAL = 36.0
ORBIT_RADIUS = 3.0
DIFFUSE_HEAD_STD = 0.05
SPECULAR_HEAD_STD = 0.25
MASK_GAIN = 4.0
INIT_HALF_WIDTH = 0.6


def orbit_views(n_views: int = NUM_VIEWS, size: int = IMAGE_SIZE, focal: float = FOCAL,
                radius: float = ORBIT_RADIUS):
    from .scene import CameraView

    views = []
    for k in range(n_views):
        a = 2 * np.pi * k / n_views
        eye = np.array([radius * np.sin(a), -0.6 + 0.3 * np.cos(2 * a), -radius * np.cos(a)])
        views.append(CameraView(size, size, focal, focal, (size / 2, size / 2), look_at(eye, np.zeros(3)),
                                name=f"view_{k:03d}.png"))
    return views


def ground_truth_cloud(rng: np.random.Generator, config: ModelConfig) -> GaussianCloud:
    n = NUM_GAUSSIANS
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.sign(q[:, :1])
    cloud = GaussianCloud(
        positions=rng.uniform(-0.45, 0.45, (n, 3)).astype(np.float32),
        opacity_logits=np.full(n, logit(0.8), dtype=np.float32),
        rotations=q.astype(np.float32),
        log_scales=np.log(rng.uniform(0.2, 0.45, (n, 3))).astype(np.float32),
        f_diffuse=rng.uniform(-1, 1, (n, config.diffuse_dims)).astype(np.float32),
        f_specular=rng.uniform(-1, 1, (n, config.specular_dims)).astype(np.float32),
    )
    if config.sh_color_baseline:
        cloud.sh_color = (rng.normal(size=(n, 16, 3)) * 0.2).astype(np.float32)
    return cloud


def ground_truth_model(seed: int = 0, config: ModelConfig = ModelConfig()) -> SplatModel:
    """Random cloud and networks whose output heads are non-zero, so the images carry structure."""
    rng = np.random.default_rng(seed)
    model = SplatModel(ground_truth_cloud(rng, config), config, seed=seed + 1)
    unet, spec = model.unet.head, model.specular.head
    unet.weight.data = rng.normal(scale=DIFFUSE_HEAD_STD, size=unet.weight.shape).astype(np.float32)
    unet.bias.data = np.full(3, 0.35, dtype=np.float32)
    spec.weight.data = rng.normal(scale=SPECULAR_HEAD_STD, size=spec.weight.shape).astype(np.float32)
    # a sharper mask makes the highlights strongly view dependent
    mask_head = model.shading.mask_mlp.layers[-1]
    mask_head.weight.data *= MASK_GAIN
    return model


def render_views(model: SplatModel, views) -> list[np.ndarray]:
    return [np.clip(render(model, v).rgb(), 0, 1).astype(np.float32) for v in views]


def sfm_points(rng: np.random.Generator, n: int = NUM_GAUSSIANS, half_width: float = INIT_HALF_WIDTH
               ) -> list[SfmPoint]:
    """Uniformly random points around the scene: training starts with no knowledge of the true centres."""
    pos = rng.uniform(-half_width, half_width, (n, 3))
    return [SfmPoint(p, np.array([128, 128, 128], dtype=np.uint8), 0.5) for p in pos]


def make_synthetic_dataset(seed: int = 0, config: ModelConfig = ModelConfig(), n_views: int = NUM_VIEWS,
                           size: int = IMAGE_SIZE) -> tuple[Dataset, SplatModel]:
    gt = ground_truth_model(seed, config)
    views = orbit_views(n_views, size)
    images = render_views(gt, views)
    points = sfm_points(np.random.default_rng(seed + 2))
    return Dataset(views, images, points), gt


def write_dataset(directory, dataset: Dataset, binary: bool = True) -> Path:
    """Write ``sparse/0`` and ``images/`` so the dataset can be read back with load_dataset."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    cameras, images = {}, {}
    for i, view in enumerate(dataset.views):
        cam_id = i + 1
        cameras[cam_id] = CameraIntrinsics(cam_id, "PINHOLE", view.width, view.height,
                                           np.array([view.focal_x, view.focal_y, *view.principal_point]))
        images[view.name] = ImagePose(i + 1, rotmat_to_quat(view.rotation), view.translation.copy(), cam_id,
                                      view.name)
        save_image(directory / "images" / view.name, dataset.images[i])
    write_sparse(directory / "sparse" / "0", SparseReconstruction(cameras, images, dataset.points), binary)
    return directory
