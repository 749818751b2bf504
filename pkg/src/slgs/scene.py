"""Scene primitives, cameras, and their activation conventions."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidCamera, InvalidPrimitive

DIFFUSE_DIMS = 8
SPECULAR_DIMS = 8
INIT_OPACITY = 0.1
LATENT_INIT_RANGE = 0.1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))


def logit(p: float) -> float:
    return float(np.log(p / (1 - p)))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions, shape (..., 4), to rotation matrices (..., 3, 3).

    The input is normalized first.
    """
    q = np.asarray(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix; returns w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    trace = np.trace(r)
    if trace > 0:
        s = 2 * np.sqrt(trace + 1)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2 * np.sqrt(1 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2 * np.sqrt(1 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2 * np.sqrt(1 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


@dataclass
class LatentGaussian:
    position: np.ndarray
    opacity_logit: float
    rotation: np.ndarray
    log_scale: np.ndarray
    f_diffuse: np.ndarray
    f_specular: np.ndarray

    @property
    def num_parameters(self) -> int:
        return 3 + 1 + 4 + 3 + len(self.f_diffuse) + len(self.f_specular)


def activate(g: LatentGaussian) -> tuple[float, np.ndarray, np.ndarray]:
    """Return (opacity, per-axis scale, rotation matrix) for one primitive."""
    fields = [g.position, g.opacity_logit, g.rotation, g.log_scale, g.f_diffuse, g.f_specular]
    if not all(np.all(np.isfinite(f)) for f in fields):
        raise InvalidPrimitive("primitive has non-finite fields")
    if np.linalg.norm(g.rotation) == 0:
        raise InvalidPrimitive("rotation quaternion has zero length")
    opacity = float(sigmoid(g.opacity_logit))
    scale = np.exp(np.asarray(g.log_scale, dtype=np.float64))
    return opacity, scale, quat_to_rotmat(np.asarray(g.rotation, dtype=np.float64))


@dataclass
class CameraView:
    width: int
    height: int
    focal_x: float
    focal_y: float
    principal_point: np.ndarray
    world_to_camera: np.ndarray
    image_path: Path | str | None = None
    name: str = ""

    def __post_init__(self):
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)

    def validate(self) -> None:
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise InvalidCamera(f"focal lengths must be positive, got {self.focal_x}, {self.focal_y}")
        if self.world_to_camera.shape != (4, 4) or not np.all(np.isfinite(self.world_to_camera)):
            raise InvalidCamera("world_to_camera must be a finite 4x4 matrix")
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-5) or abs(np.linalg.det(r) - 1) > 1e-5:
            raise InvalidCamera("world_to_camera rotation block is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return camera_center(self)

    def scaled(self, factor: float) -> "CameraView":
        """Same pose with intrinsics and resolution divided by ``factor``."""
        return CameraView(
            width=int(round(self.width / factor)),
            height=int(round(self.height / factor)),
            focal_x=self.focal_x / factor,
            focal_y=self.focal_y / factor,
            principal_point=self.principal_point / factor,
            world_to_camera=self.world_to_camera.copy(),
            image_path=self.image_path,
            name=self.name,
        )


def camera_center(v: CameraView) -> np.ndarray:
    m = v.world_to_camera
    if m.shape != (4, 4) or not np.all(np.isfinite(m)) or abs(np.linalg.det(m[:3, :3])) < 1e-12:
        raise InvalidCamera("world_to_camera is singular")
    r, t = m[:3, :3], m[:3, 3]
    return -r.T @ t


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    Camera axes follow the COLMAP convention: x right, y down, z forward.
    """
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    forward = target - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = -r @ eye
    return m


@dataclass
class GaussianCloud:
    """Struct-of-arrays store for N primitives plus densification statistics."""

    positions: np.ndarray
    opacity_logits: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    f_diffuse: np.ndarray
    f_specular: np.ndarray
    sh_color: np.ndarray | None = None
    grad_accum: np.ndarray = field(default=None)
    grad_count: np.ndarray = field(default=None)
    max_radii: np.ndarray = field(default=None)

    PARAM_FIELDS = ("positions", "opacity_logits", "rotations", "log_scales", "f_diffuse", "f_specular")

    def __post_init__(self):
        n = len(self.positions)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)
        if self.max_radii is None:
            self.max_radii = np.zeros(n)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> LatentGaussian:
        return LatentGaussian(
            position=self.positions[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            f_diffuse=self.f_diffuse[i].copy(),
            f_specular=self.f_specular[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: list[LatentGaussian]) -> "GaussianCloud":
        def stack(attr, dims):
            vals = [np.asarray(getattr(g, attr), dtype=np.float32) for g in gaussians]
            return np.stack(vals) if vals else np.zeros((0,) + dims, dtype=np.float32)

        dd = len(gaussians[0].f_diffuse) if gaussians else DIFFUSE_DIMS
        ds = len(gaussians[0].f_specular) if gaussians else SPECULAR_DIMS
        return cls(
            positions=stack("position", (3,)),
            opacity_logits=stack("opacity_logit", ()),
            rotations=stack("rotation", (4,)),
            log_scales=stack("log_scale", (3,)),
            f_diffuse=stack("f_diffuse", (dd,)),
            f_specular=stack("f_specular", (ds,)),
        )

    def param_fields(self) -> tuple[str, ...]:
        return self.PARAM_FIELDS + (("sh_color",) if self.sh_color is not None else ())

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_fields()}

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations.astype(np.float64))

    @property
    def parameters_per_gaussian(self) -> int:
        return sum(int(np.prod(getattr(self, f).shape[1:])) for f in self.param_fields())

    def select(self, keep: np.ndarray) -> None:
        """Keep rows indexed by ``keep`` (bool mask or index array), in place."""
        for name in self.param_fields() + ("grad_accum", "grad_count", "max_radii"):
            setattr(self, name, getattr(self, name)[keep])

    def append(self, rows: dict[str, np.ndarray]) -> None:
        n_new = len(rows["positions"])
        for name in self.param_fields():
            setattr(self, name, np.concatenate([getattr(self, name), rows[name].astype(np.float32)]))
        for name in ("grad_accum", "grad_count", "max_radii"):
            setattr(self, name, np.concatenate([getattr(self, name), np.zeros(n_new)]))

    def reset_stats(self) -> None:
        self.grad_accum[:] = 0
        self.grad_count[:] = 0
        self.max_radii[:] = 0

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: (None if v is None else v.copy()) for k, v in vars(self).items()})


# 3D-GS stores position, opacity, rotation, scale and 48 SH colour coefficients
# (degree 3) as optimizable scalars.
BASELINE_3DGS_OPTIMIZABLE = 3 + 1 + 4 + 3 + 48
# Its PLY rows additionally carry three unused normal slots.
BASELINE_3DGS_STORED = BASELINE_3DGS_OPTIMIZABLE + 3
