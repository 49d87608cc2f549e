"""Riemannian expert reconstructors.

Each expert owns a constant-curvature manifold with a learnable curvature
magnitude (the sign is fixed by its initialization) and a small tangent
network. A forward pass lifts the input embedding onto the manifold, then
per layer: log-map to the tangent space, affine transform, nonlinearity
(tanh, identity on the last layer), exp-map back, and project; the final
output is read back in the tangent space at the origin, so experts consume
and produce plain Euclidean vectors of the same width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .backbone import glorot_uniform
from .errors import DataError, NumericError

KAPPA_MIN_ABS = 1e-3
KAPPA_MAX_ABS = 10.0


@dataclass
class ExpertModel:
    index: int
    kappa_init: float
    theta: Tensor  # scalar; kappa = kappa_init * exp(clamped theta)
    layers: list[tuple[Tensor, Tensor]]
    dim: int
    eps_boundary: float = geo.DEFAULT_EPS_BOUNDARY

    def theta_bounds(self) -> tuple[float, float]:
        mag = abs(self.kappa_init)
        return float(np.log(KAPPA_MIN_ABS / mag)), float(np.log(KAPPA_MAX_ABS / mag))


def init_expert(
    index: int,
    kappa_init: float,
    dim: int,
    depth: int = 2,
    rng: np.random.Generator | None = None,
) -> ExpertModel:
    rng = rng or np.random.default_rng(0)
    if dim < 1 or depth < 1:
        raise DataError("expert dim and depth must be >= 1")
    layers = []
    for _ in range(depth):
        w = Tensor(glorot_uniform(dim, dim, rng), requires_grad=True)
        b = Tensor(np.zeros(dim), requires_grad=True)
        layers.append((w, b))
    theta = Tensor(np.array(0.0), requires_grad=True)
    return ExpertModel(index=index, kappa_init=float(kappa_init), theta=theta, layers=layers, dim=dim)


def curvature_tensor(e: ExpertModel) -> Tensor | float:
    """Current curvature with gradient support; plain 0.0 for the flat expert."""
    if e.kappa_init == 0.0:
        return 0.0
    lo, hi = e.theta_bounds()
    return ad.exp(ad.clip(e.theta, lo, hi)) * e.kappa_init


def curvature_of(e: ExpertModel) -> float:
    kappa = curvature_tensor(e)
    return float(kappa.value) if isinstance(kappa, Tensor) else kappa


def expert_forward_rows(e: ExpertModel, h) -> Tensor:
    """Batched reconstruction, one embedding per row."""
    h = ad.as_tensor(h)
    if h.value.shape[1] != e.dim:
        raise DataError(f"embedding width {h.value.shape[1]} != expert dim {e.dim}")
    kappa = curvature_tensor(e)
    x = geo.exp_origin_rows(h, kappa, eps_boundary=e.eps_boundary)
    last = len(e.layers) - 1
    for i, (w, b) in enumerate(e.layers):
        t = ad.matmul(geo.log_origin_rows(x, kappa), w) + b
        if i < last:
            t = ad.tanh(t)
        x = geo.project_rows(
            geo.exp_origin_rows(t, kappa, eps_boundary=e.eps_boundary),
            kappa,
            eps_boundary=e.eps_boundary,
        )
    return geo.log_origin_rows(x, kappa)


def expert_forward(e: ExpertModel, h: np.ndarray) -> np.ndarray:
    """Single-vector reconstruction; raises on numeric blow-up."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (e.dim,):
        raise DataError(f"embedding has shape {h.shape}, expected ({e.dim},)")
    if not np.all(np.isfinite(h)):
        raise NumericError("expert input contains non-finite entries")
    out = expert_forward_rows(e, h[None, :]).value[0]
    if not np.all(np.isfinite(out)):
        raise NumericError(
            f"expert {e.index} produced non-finite output (exploding parameters?)"
        )
    return out
