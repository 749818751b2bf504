"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, precision


@dataclass
class GradCheckResult:
    ok: bool
    max_abs_err: float
    max_rel_err: float
    worst: str

    def __bool__(self) -> bool:
        return self.ok


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    *,
    h: float = 1e-3,
    rtol: float = 1e-2,
    atol: float = 1e-4,
    tiny: float = 1e-2,
    seed: int = 0,
    dtype=np.float64,
) -> GradCheckResult:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps tensors to a tensor of any shape; it is contracted with a fixed
    random weight so every output element contributes. Where the numeric
    gradient is smaller than ``tiny`` the absolute tolerance applies, otherwise
    the relative one.
    """
    rng = np.random.default_rng(seed)
    with precision(dtype):
        arrays = [np.array(a, dtype=dtype) for a in inputs]
        probe = fn(*[Tensor(a) for a in arrays]).data
        weight = rng.standard_normal(probe.shape).astype(dtype)

        def scalar(*arrs) -> float:
            return float((fn(*[Tensor(a) for a in arrs]).data * weight).sum())

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = fn(*leaves)
            loss = (out * Tensor(weight)).sum()
        tape.backward(loss)

        max_abs = max_rel = 0.0
        worst = ""
        ok = True
        for k, leaf in enumerate(leaves):
            def partial(x, k=k):
                arrs = list(arrays)
                arrs[k] = x
                return scalar(*arrs)

            num = numeric_grad(partial, arrays[k].copy(), h)
            ana = leaf.grad
            err = np.abs(ana - num)
            small = np.abs(num) < tiny
            rel = err / np.maximum(np.abs(num), 1e-30)
            bad = np.where(small, err > atol, rel > rtol)
            if bad.any():
                ok = False
                i = int(np.argmax(np.where(bad, err, -1)))
                worst = f"input {k} elem {i}: analytic {ana.reshape(-1)[i]:.6g} numeric {num.reshape(-1)[i]:.6g}"
            max_abs = max(max_abs, float(err.max(initial=0)))
            if (~small).any():
                max_rel = max(max_rel, float(rel[~small].max()))
    return GradCheckResult(ok, max_abs, max_rel, worst)
