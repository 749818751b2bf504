"""EWA projection of 3D Gaussians into screen space.

Screen coordinates are in pixels with the centre of pixel (i, j) at
(i + 0.5, j + 0.5), so a point on the optical axis lands on the principal
point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.tensor import Tensor, make_result
from .scene import CameraView, LatentGaussian, activate, quat_to_rotmat

NEAR_PLANE = 0.01
COV_FLOOR = 0.3
FRUSTUM_CLAMP = 1.3
ALPHA_MIN = 1.0 / 255.0
# extra pixels around the analytic support bound; covers float32 rounding
EXTENT_SLACK = 1.0


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float
    source_index: int
    opacity: float = 1.0
    extent: float = 0.0

    @property
    def conic(self) -> np.ndarray:
        return np.linalg.inv(self.cov2d)


def build_covariance(rotation_matrix: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Σ = R S Sᵀ Rᵀ; broadcasts over leading axes."""
    m = np.asarray(rotation_matrix) * np.asarray(scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def support_extent(cov2d: np.ndarray, opacity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (3-sigma radius, pixel extent beyond which alpha < 1/255).

    ``cov2d`` holds (A, B, C) rows of [[A, B], [B, C]].
    """
    a, b, c = cov2d[..., 0], cov2d[..., 1], cov2d[..., 2]
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0))
    radius = 3 * np.sqrt(lam_max)
    cutoff = 2 * np.log(np.maximum(255 * np.asarray(opacity, dtype=np.float64), 1.0))
    extent = np.maximum(radius, np.sqrt(cutoff * lam_max)) + EXTENT_SLACK
    return radius, extent


def _camera_arrays(view: CameraView, dtype):
    rw = view.rotation.astype(dtype)
    tw = view.translation.astype(dtype)
    lim = (FRUSTUM_CLAMP * 0.5 * view.width / view.focal_x, FRUSTUM_CLAMP * 0.5 * view.height / view.focal_y)
    return rw, tw, lim


def _forward(positions, quats, log_scales, view: CameraView):
    dtype = positions.dtype
    rw, tw, (limx, limy) = _camera_arrays(view, dtype)
    fx, fy = view.focal_x, view.focal_y
    cx, cy = view.principal_point
    tc = positions @ rw.T + tw
    x, y, z = tc[:, 0], tc[:, 1], tc[:, 2]
    # guard division for culled entries; callers drop them
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    rx, ry = x / zs, y / zs
    cxz = np.clip(rx, -limx, limx)
    cyz = np.clip(ry, -limy, limy)
    jac = np.zeros((len(x), 2, 3), dtype=dtype)
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * cxz / zs
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * cyz / zs
    tm = jac @ rw
    qn = np.linalg.norm(quats, axis=1, keepdims=True)
    qhat = quats / qn
    rot = quat_to_rotmat(qhat).astype(dtype)
    s = np.exp(log_scales)
    m = rot * s[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)
    cov = tm @ sigma @ np.swapaxes(tm, 1, 2)
    out = np.stack([fx * rx + cx, fy * ry + cy,
                    cov[:, 0, 0] + COV_FLOOR, cov[:, 0, 1], cov[:, 1, 1] + COV_FLOOR], axis=1)
    saved = dict(x=x, y=y, z=zs, cxz=cxz, cyz=cyz, rx=rx, ry=ry, lim=(limx, limy), rw=rw, tm=tm,
                 sigma=sigma, m=m, rot=rot, s=s, qhat=qhat, qn=qn)
    return out.astype(dtype), saved


def _quat_backward(d_rot: np.ndarray, qhat: np.ndarray, qn: np.ndarray) -> np.ndarray:
    w, x, y, z = qhat.T
    d = d_rot.reshape(-1, 9)
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = d.T
    dw = 2 * (-z * r01 + y * r02 + z * r10 - x * r12 - y * r20 + x * r21)
    dx = 2 * (y * r01 + z * r02 + y * r10 - 2 * x * r11 - w * r12 + z * r20 + w * r21 - 2 * x * r22)
    dy = 2 * (-2 * y * r00 + x * r01 + w * r02 + x * r10 + z * r12 - w * r20 + z * r21 - 2 * y * r22)
    dz = 2 * (-2 * z * r00 - w * r01 + x * r02 + w * r10 - 2 * z * r11 + y * r12 + x * r20 + y * r21)
    dqhat = np.stack([dw, dx, dy, dz], axis=1)
    return (dqhat - qhat * (qhat * dqhat).sum(axis=1, keepdims=True)) / qn


def _backward(g: np.ndarray, saved: dict, view: CameraView):
    fx, fy = view.focal_x, view.focal_y
    x, y, z = saved["x"], saved["y"], saved["z"]
    cxz, cyz, rx, ry = saved["cxz"], saved["cyz"], saved["rx"], saved["ry"]
    limx, limy = saved["lim"]
    rw, tm, sigma, m, rot, s = (saved[k] for k in ("rw", "tm", "sigma", "m", "rot", "s"))
    gu, gv, ga, gb, gc = g.T

    g2 = np.zeros((len(x), 2, 2), dtype=g.dtype)
    g2[:, 0, 0] = ga
    g2[:, 0, 1] = g2[:, 1, 0] = 0.5 * gb
    g2[:, 1, 1] = gc
    d_sigma = np.swapaxes(tm, 1, 2) @ g2 @ tm
    d_tm = 2 * g2 @ tm @ sigma
    d_jac = d_tm @ rw.T

    dx = gu * fx / z
    dy = gv * fy / z
    dz = -gu * fx * rx / z - gv * fy * ry / z
    dz += (-d_jac[:, 0, 0] * fx - d_jac[:, 1, 1] * fy
           + d_jac[:, 0, 2] * fx * cxz + d_jac[:, 1, 2] * fy * cyz) / (z * z)
    d_cxz = -d_jac[:, 0, 2] * fx / z
    d_cyz = -d_jac[:, 1, 2] * fy / z
    in_x = np.abs(rx) <= limx
    in_y = np.abs(ry) <= limy
    dx += np.where(in_x, d_cxz / z, 0)
    dz += np.where(in_x, -d_cxz * x / (z * z), 0)
    dy += np.where(in_y, d_cyz / z, 0)
    dz += np.where(in_y, -d_cyz * y / (z * z), 0)
    d_pos = np.stack([dx, dy, dz], axis=1) @ rw

    d_m = 2 * d_sigma @ m
    d_rot = d_m * s[:, None, :]
    d_s = (d_m * rot).sum(axis=1)
    d_log_scale = d_s * s
    d_quat = _quat_backward(d_rot, saved["qhat"], saved["qn"])
    return d_pos, d_quat, d_log_scale


def project_arrays(positions, quats, log_scales, opacities, view: CameraView, near: float = NEAR_PLANE):
    """Project N Gaussians; returns a dict of per-Gaussian arrays plus a ``visible`` mask.

    Keys: ``mean2d`` (N, 2), ``cov2d`` (N, 3) as (A, B, C), ``depth``,
    ``radius`` (3 sigma), ``extent`` (tile/cull support), ``visible``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    out, _ = _forward(positions, np.asarray(quats, dtype=np.float64), np.asarray(log_scales, dtype=np.float64),
                      view)
    depth = positions @ view.rotation[2] + view.translation[2]
    mean2d, cov2d = out[:, :2], out[:, 2:]
    radius, extent = support_extent(cov2d, opacities)
    visible = depth > near
    visible &= (mean2d[:, 0] + extent > 0) & (mean2d[:, 0] - extent < view.width)
    visible &= (mean2d[:, 1] + extent > 0) & (mean2d[:, 1] - extent < view.height)
    visible &= np.all(np.isfinite(out), axis=1)
    return dict(mean2d=mean2d, cov2d=cov2d, depth=depth, radius=radius, extent=extent, visible=visible)


def project(g: LatentGaussian, v: CameraView, near: float = NEAR_PLANE, index: int = 0) -> ProjectedGaussian | None:
    """Project one primitive, or return None if it is culled."""
    opacity, _, _ = activate(g)
    res = project_arrays(np.asarray(g.position)[None], np.asarray(g.rotation)[None],
                         np.asarray(g.log_scale)[None], np.array([opacity]), v, near)
    if not res["visible"][0]:
        return None
    a, b, c = res["cov2d"][0]
    return ProjectedGaussian(
        mean2d=res["mean2d"][0],
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(res["depth"][0]),
        radius=float(res["radius"][0]),
        source_index=index,
        opacity=opacity,
        extent=float(res["extent"][0]),
    )


def depth_order(depths: np.ndarray, source_index: np.ndarray | None = None) -> np.ndarray:
    """Indices sorting by ascending depth, ties broken by source index."""
    depths = np.asarray(depths)
    if source_index is None:
        source_index = np.arange(len(depths))
    return np.lexsort((np.asarray(source_index), depths))


def sort_by_depth(projected: list[ProjectedGaussian]) -> list[ProjectedGaussian]:
    if not projected:
        return []
    order = depth_order(np.array([p.depth for p in projected]), np.array([p.source_index for p in projected]))
    return [projected[i] for i in order]


def project_gaussians(positions: Tensor, rotations: Tensor, log_scales: Tensor, view: CameraView) -> Tensor:
    """Differentiable projection; returns (M, 5) rows of (u, v, A, B, C).

    The +0.3 px² floor is included in A and C.
    """
    out, saved = _forward(positions.data, rotations.data, log_scales.data, view)

    def backward(g):
        return _backward(g, saved, view)

    return make_result("project", out, (positions, rotations, log_scales), backward)
