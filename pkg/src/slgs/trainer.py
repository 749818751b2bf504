"""Optimization loop: Adam, densification and pruning, evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .autodiff import Tape
from .colmap import Dataset, TEST_EVERY, init_cloud
from .decoders import pixel_ray_encoding
from .errors import NonFiniteGradient, TrainingAborted
from .losses import LossWeights, psnr, ssim_value, total_loss
from .model import ModelConfig, SplatModel, leaf_params, render
from .scene import GaussianCloud, quat_to_rotmat

log = logging.getLogger(__name__)

SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_latent: float = 2.5e-3
    lr_network: float = 1e-3
    lr_network_final: float = 1e-4
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: float = 0.6  # fraction of iterations
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_scale_fraction: float = 0.01  # of the scene extent
    max_screen_radius: float = 0.0  # pixels; 0 disables the screen-size prune
    opacity_reset_interval: int = 0  # 0 disables
    lambda_dssim: float = 0.2
    lambda_diffuse: float = 0.05
    lambda_normal: float = 0.001
    test_every: int = TEST_EVERY
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        for name in ("densify_grad_threshold", "prune_opacity", "split_scale_fraction", "densify_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) >= 0:
                raise ValueError(f"{f.name} must be non-negative")
        self.loss_weights()  # validates the lambdas

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_dssim, self.lambda_diffuse, self.lambda_normal)

    @property
    def densify_stop(self) -> int:
        return int(self.densify_until * self.iterations)


# ------------------------------------------------------------------ Adam

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update at step ``t`` (1-based), in place on param, m and v."""
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError(f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    """Adam over named parameter groups; moments are float32 like the parameters."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                log.error("non-finite gradient in group %s", name)
                raise NonFiniteGradient(name)
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            adam_step(p, grads[name].astype(p.dtype), self.m[name], self.v[name], self.t[name], lrs[name],
                      self.beta1, self.beta2, self.eps)

    def extend_rows(self, names, n_new: int) -> None:
        for name in names:
            if name in self.m:
                pad = np.zeros((n_new,) + self.m[name].shape[1:], dtype=self.m[name].dtype)
                self.m[name] = np.concatenate([self.m[name], pad])
                self.v[name] = np.concatenate([self.v[name], pad])

    def select_rows(self, names, keep: np.ndarray) -> None:
        for name in names:
            if name in self.m:
                self.m[name] = self.m[name][keep]
                self.v[name] = self.v[name][keep]


# ------------------------------------------------------------------ densification

def densify_and_prune(cloud: GaussianCloud, config: TrainConfig, extent: float, rng: np.random.Generator,
                      optimizer: Adam | None = None) -> dict[str, int]:
    """Clone small and split large high-gradient Gaussians, then prune transparent ones.

    Gradient statistics are reset afterwards. Returns counts of each action.
    """
    n = len(cloud)
    grads = np.where(cloud.grad_count > 0, cloud.grad_accum / np.maximum(cloud.grad_count, 1), 0.0)
    hot = grads >= config.densify_grad_threshold
    max_scale = cloud.scales().max(axis=1) if n else np.zeros(0)
    large = max_scale > config.split_scale_fraction * extent
    clone = np.flatnonzero(hot & ~large)
    split = np.flatnonzero(hot & large)

    fields_ = cloud.param_fields()
    new_rows = {name: [getattr(cloud, name)[clone]] for name in fields_}
    if len(split):
        scales = cloud.scales()[split]
        rot = quat_to_rotmat(cloud.rotations[split].astype(np.float64))
        for _ in range(SPLIT_CHILDREN):
            offsets = rng.normal(size=scales.shape) * scales
            pos = cloud.positions[split] + np.einsum("nij,nj->ni", rot, offsets)
            child = {name: getattr(cloud, name)[split] for name in fields_}
            child["positions"] = pos.astype(np.float32)
            child["log_scales"] = np.log(scales / SPLIT_SCALE_DIVISOR).astype(np.float32)
            for name in fields_:
                new_rows[name].append(child[name])
    rows = {name: np.concatenate(parts) for name, parts in new_rows.items()}
    n_new = len(rows["positions"])
    if n_new:
        cloud.append(rows)
        if optimizer is not None:
            optimizer.extend_rows(fields_, n_new)

    keep = np.ones(len(cloud), dtype=bool)
    keep[split] = False
    keep &= cloud.opacities() >= config.prune_opacity
    if config.max_screen_radius > 0:
        keep &= cloud.max_radii <= config.max_screen_radius
    pruned = int(n + n_new - keep.sum() - len(split))
    cloud.select(keep)
    if optimizer is not None:
        optimizer.select_rows(fields_, keep)
    cloud.reset_stats()
    return {"cloned": int(len(clone)), "split": int(len(split)), "pruned": pruned, "total": len(cloud)}


def reset_opacity(cloud: GaussianCloud, optimizer: Adam | None = None, ceiling: float = 0.01) -> None:
    cap = math.log(ceiling / (1 - ceiling))
    cloud.opacity_logits = np.minimum(cloud.opacity_logits, np.float32(cap))
    if optimizer is not None and "opacity_logits" in optimizer.m:
        optimizer.m["opacity_logits"][:] = 0
        optimizer.v["opacity_logits"][:] = 0


# ------------------------------------------------------------------ training

@dataclass
class StepStats:
    iteration: int
    view: int
    loss: float
    parts: dict
    num_gaussians: int
    psnr: float | None = None
    ssim: float | None = None
    densify: dict | None = None

    def metrics(self) -> dict:
        return {"iter": self.iteration, "psnr": self.psnr, "ssim": self.ssim, "loss": self.loss}


def image_to_nchw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1))[None])


class Trainer:
    """Owns the model, optimizer state and RNG for one training run."""

    def __init__(self, model: SplatModel, dataset: Dataset, config: TrainConfig = TrainConfig(),
                 train_indices: list[int] | None = None):
        self.model = model
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = Adam()
        self.iteration = 0
        if train_indices is None:
            train_indices = dataset.split(config.test_every)[0]
        if len(train_indices) < 2:
            raise ValueError(f"training needs at least 2 views, got {len(train_indices)}")
        self.train_indices = list(train_indices)
        self.extent = dataset.scene_extent
        self._rays: dict[int, np.ndarray] = {}
        self._weights = config.loss_weights()

    def ray_encoding(self, index: int) -> np.ndarray:
        if index not in self._rays:
            self._rays[index] = pixel_ray_encoding(self.dataset.views[index])
        return self._rays[index]

    def _decayed(self, start: float, end: float) -> float:
        """Log-linear interpolation from ``start`` to ``end`` over the run."""
        frac = min(self.iteration / self.config.iterations, 1.0)
        if start <= 0 or end <= 0:
            return start
        return math.exp((1 - frac) * math.log(start) + frac * math.log(end))

    def position_lr(self) -> float:
        return self._decayed(self.config.lr_position, self.config.lr_position_final) * self.extent

    def learning_rates(self) -> dict[str, float]:
        c = self.config
        lrs = {"positions": self.position_lr(), "opacity_logits": c.lr_opacity, "rotations": c.lr_rotation,
               "log_scales": c.lr_scale, "f_diffuse": c.lr_latent, "f_specular": c.lr_latent,
               "sh_color": c.lr_latent}
        lr_net = self._decayed(c.lr_network, c.lr_network_final)
        for name in self.model.network_parameters():
            lrs[name] = lr_net
        return lrs

    def step(self, with_metrics: bool = False) -> StepStats:
        view_index = self.train_indices[int(self.rng.integers(len(self.train_indices)))]
        view = self.dataset.views[view_index]
        gt = image_to_nchw(self.dataset.images[view_index])
        nets = self.model.network_parameters()
        for p in nets.values():
            p.grad = None
        parts: dict = {}
        with Tape() as tape:
            params = leaf_params(self.model.cloud, requires_grad=True)
            out = render(self.model, view, params, self.ray_encoding(view_index))
            loss = total_loss(out.image, out.diffuse, gt, out.normals, out.pseudo_normals, self._weights, parts)
            if not np.isfinite(loss.item()):
                raise TrainingAborted(
                    f"non-finite loss at iteration {self.iteration}",
                    {"iteration": self.iteration, "view": view_index, "view_name": view.name,
                     "loss": loss.item(), "terms": parts})
            tape.backward(loss)
            grad2d = tape.grad(out.mean2d) if len(out.visible) else np.zeros((0, 2))

        grads = {name: params[name].grad for name in params}
        grads.update({name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in nets.items()})
        arrays = {name: params[name].data for name in params}
        arrays.update({name: p.data for name, p in nets.items()})
        self.optimizer.step(arrays, grads, self.learning_rates())
        cloud = self.model.cloud
        for name in params:
            setattr(cloud, name, arrays[name])
        self._accumulate(out.visible, grad2d, out.radii, view)
        self.iteration += 1

        stats = StepStats(self.iteration, view_index, loss.item(), parts, len(cloud))
        if with_metrics:
            pred = np.clip(out.rgb(), 0, 1)
            target = self.dataset.images[view_index]
            stats.psnr = psnr(pred, target)
            stats.ssim = ssim_value(pred, target)
        c = self.config
        if c.densify_from <= self.iteration < c.densify_stop and self.iteration % c.densify_interval == 0:
            stats.densify = densify_and_prune(cloud, c, self.extent, self.rng, self.optimizer)
            log.info("iteration %d densify %s", self.iteration, stats.densify)
        if c.opacity_reset_interval and self.iteration % c.opacity_reset_interval == 0 \
                and self.iteration < c.densify_stop:
            reset_opacity(cloud, self.optimizer)
        return stats

    def _accumulate(self, visible: np.ndarray, grad2d: np.ndarray, radii: np.ndarray, view) -> None:
        if not len(visible):
            return
        cloud = self.model.cloud
        ndc = grad2d * np.array([view.width / 2, view.height / 2])
        seen = radii > 0
        idx = visible[seen]
        cloud.grad_accum[idx] += np.linalg.norm(ndc[seen], axis=1)
        cloud.grad_count[idx] += 1
        cloud.max_radii[idx] = np.maximum(cloud.max_radii[idx], radii[seen])

    def run(self, callback: Callable[[StepStats], None] | None = None) -> None:
        log_every = self.config.log_every
        while self.iteration < self.config.iterations:
            last = self.iteration + 1 == self.config.iterations
            want = bool(log_every) and ((self.iteration + 1) % log_every == 0 or last)
            stats = self.step(with_metrics=want)
            if callback is not None:
                callback(stats)

    def evaluate(self, indices: list[int]) -> list[dict]:
        return evaluate(self.model, self.dataset, indices)


def evaluate(model: SplatModel, dataset: Dataset, indices: list[int]) -> list[dict]:
    """PSNR/SSIM per view of the clamped composed render."""
    rows = []
    for i in indices:
        out = render(model, dataset.views[i])
        pred = np.clip(out.rgb(), 0, 1)
        rows.append({"view": int(i), "name": dataset.views[i].name,
                     "psnr": psnr(pred, dataset.images[i]), "ssim": ssim_value(pred, dataset.images[i])})
    return rows


def build_model(dataset: Dataset, model_config: ModelConfig = ModelConfig(), seed: int = 0) -> SplatModel:
    rng = np.random.default_rng(seed)
    cloud = init_cloud(dataset.points, rng, model_config.diffuse_dims, model_config.specular_dims,
                       sh_color=model_config.sh_color_baseline)
    return SplatModel(cloud, model_config, seed=seed)


def train(dataset: Dataset, config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig(),
          callback: Callable[[StepStats], None] | None = None, train_indices: list[int] | None = None):
    """Train from the dataset's SfM points and return the final checkpoint."""
    from .checkpoint import checkpoint_from_trainer

    trainer = Trainer(build_model(dataset, model_config, config.seed), dataset, config, train_indices)
    trainer.run(callback)
    return checkpoint_from_trainer(trainer)


def config_dict(config) -> dict:
    return asdict(config)
