"""Per-Gaussian view-dependent quantities: normals, SH encoding, view mask."""
from __future__ import annotations

import numpy as np

from .autodiff import MLP, Module, Tensor, ops
from .autodiff.tensor import make_result

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
SH_DIM = 16
HIDDEN = 32


def sh_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real SH values up to degree 3 and their Jacobian w.r.t. (x, y, z).

    Returns arrays of shape (N, 16) and (N, 16, 3).
    """
    d = np.asarray(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    one, zero = np.ones_like(x), np.zeros_like(x)
    xx, yy, zz = x * x, y * y, z * z
    c2, c3 = SH_C2, SH_C3
    vals = [
        SH_C0 * one,
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        c2[0] * x * y,
        c2[1] * y * z,
        c2[2] * (2 * zz - xx - yy),
        c2[3] * x * z,
        c2[4] * (xx - yy),
        c3[0] * y * (3 * xx - yy),
        c3[1] * x * y * z,
        c3[2] * y * (4 * zz - xx - yy),
        c3[3] * z * (2 * zz - 3 * xx - 3 * yy),
        c3[4] * x * (4 * zz - xx - yy),
        c3[5] * z * (xx - yy),
        c3[6] * x * (xx - 3 * yy),
    ]
    grads = [
        (zero, zero, zero),
        (zero, -SH_C1 * one, zero), (zero, zero, SH_C1 * one), (-SH_C1 * one, zero, zero),
        (c2[0] * y, c2[0] * x, zero),
        (zero, c2[1] * z, c2[1] * y),
        (-2 * c2[2] * x, -2 * c2[2] * y, 4 * c2[2] * z),
        (c2[3] * z, zero, c2[3] * x),
        (2 * c2[4] * x, -2 * c2[4] * y, zero),
        (6 * c3[0] * x * y, c3[0] * (3 * xx - 3 * yy), zero),
        (c3[1] * y * z, c3[1] * x * z, c3[1] * x * y),
        (-2 * c3[2] * x * y, c3[2] * (4 * zz - xx - 3 * yy), 8 * c3[2] * y * z),
        (-6 * c3[3] * x * z, -6 * c3[3] * y * z, c3[3] * (6 * zz - 3 * xx - 3 * yy)),
        (c3[4] * (4 * zz - 3 * xx - yy), -2 * c3[4] * x * y, 8 * c3[4] * x * z),
        (2 * c3[5] * x * z, -2 * c3[5] * y * z, c3[5] * (xx - yy)),
        (c3[6] * (3 * xx - 3 * yy), -6 * c3[6] * x * y, zero),
    ]
    values = np.stack(vals, axis=-1)
    jac = np.stack([np.stack(g, axis=-1) for g in grads], axis=-2)
    return values, jac


def sh_encode(d) -> Tensor:
    """Degree-3 real SH encoding of unit directions, (N, 3) -> (N, 16); differentiable."""
    d = d if isinstance(d, Tensor) else Tensor(np.atleast_2d(d))
    values, jac = sh_basis(d.data)
    return make_result("sh_encode", values, (d,), lambda g: (np.einsum("nk,nkj->nj", g, jac),))


def pseudo_normal(rotation_matrix: np.ndarray, scale: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Shortest principal axis, flipped so that n . v >= 0; broadcasts over leading axes."""
    rotation_matrix = np.asarray(rotation_matrix)
    scale = np.asarray(scale)
    axis = np.argmin(scale, axis=-1)  # first index among ties
    n = np.take_along_axis(rotation_matrix, axis[..., None, None], axis=-1)[..., 0]
    flip = (n * np.asarray(view_dir)).sum(axis=-1, keepdims=True) < 0
    return np.where(flip, -n, n)


def reflect(w_i: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Mirror ``w_i`` about ``n``: 2 (w_i . n) n - w_i."""
    w_i, n = np.asarray(w_i), np.asarray(n)
    return 2 * (w_i * n).sum(axis=-1, keepdims=True) * n - w_i


class ShadingNets(Module):
    """Normal predictor over the latent descriptor and the view-mask MLP."""

    def __init__(self, rng: np.random.Generator, diffuse_dims: int = 8, specular_dims: int = 8):
        self.normal_mlp = MLP([diffuse_dims + specular_dims, HIDDEN, HIDDEN, 3], rng)
        self.mask_mlp = MLP([SH_DIM + 3, HIDDEN, HIDDEN, 1], rng)


def predict_normal(nets: ShadingNets, f_d: Tensor, f_s: Tensor) -> Tensor:
    """Unit normals (N, 3) from latent features; zero outputs fall back to +z."""
    raw = nets.normal_mlp(ops.concat([f_d, f_s], axis=1))
    return ops.normalize(raw, axis=1)


def predict_view_mask(nets: ShadingNets, d: Tensor, n: Tensor) -> Tensor:
    """Mask value in (0, 1) per Gaussian, shape (N, 1)."""
    return ops.sigmoid(nets.mask_mlp(ops.concat([sh_encode(d), n], axis=1)))


def sh_color(coeffs: Tensor, d: Tensor) -> Tensor:
    """Evaluate per-Gaussian SH colour (N, 16, 3) along directions (N, 3), offset by 0.5."""
    basis = sh_encode(d)
    n = basis.shape[0]
    return ops.reshape(ops.matmul(ops.reshape(basis, (n, 1, SH_DIM)), coeffs), (n, 3)) + 0.5
