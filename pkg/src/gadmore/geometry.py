"""Numerically safe constant-curvature manifold kernel.

Three families, selected by the sign of the curvature ``kappa``:

* ``kappa < 0``  — Poincaré ball of radius 1/sqrt(-kappa), distance
  ``d(p,q) = arccosh(1 + 2|p-q|^2 / ((1+k|p|^2)(1+k|q|^2))) / sqrt(-k)``
* ``kappa = 0``  — plain Euclidean space, ``d(p,q) = |p-q|``
* ``kappa > 0``  — sphere of radius R=1/sqrt(kappa) embedded in R^{dim+1}
  with base point (0,...,0,R), distance ``arccos(kappa <p,q>)/sqrt(kappa)``

The row-wise kernels at the bottom operate on ``(n, d)`` batches and accept
either plain ndarrays or autodiff Tensors for the points *and* the
curvature, so the same formulas serve the pure-numpy API and the
differentiable model. Exponential/logarithmic maps are always taken at the
origin; near-zero tangent vectors take a first-order branch to avoid 0/0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import DataError, NumericError

SMALL_NORM = 1e-9  # below this, exp/log fall back to the identity scaling
DEFAULT_EPS_BOUNDARY = 1e-5


@dataclass(frozen=True)
class ManifoldSpec:
    """A constant-curvature space: curvature, tangent dimension, clamp margin."""

    kappa: float
    dim: int
    eps_boundary: float = DEFAULT_EPS_BOUNDARY

    def __post_init__(self):
        if not np.isfinite(self.kappa):
            raise DataError("curvature must be finite")
        if self.dim < 1:
            raise DataError("dim must be a positive integer")
        if not (0.0 < self.eps_boundary <= 1e-2):
            raise DataError("eps_boundary must lie in (0, 1e-2]")

    @property
    def ambient_dim(self) -> int:
        """Length of a point vector: dim, or dim+1 for the embedded sphere."""
        return self.dim + 1 if self.kappa > 0 else self.dim

    @property
    def radius(self) -> float:
        """1/sqrt(|kappa|), or inf for the flat case."""
        if self.kappa == 0.0:
            return np.inf
        return 1.0 / np.sqrt(abs(self.kappa))

    def origin(self) -> np.ndarray:
        o = np.zeros(self.ambient_dim)
        if self.kappa > 0:
            o[-1] = self.radius
        return o


# -- validation -----------------------------------------------------------


def _check_finite(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains non-finite entries")
    return x


def check_point(spec: ManifoldSpec, p, name: str = "point") -> np.ndarray:
    """Validate that `p` is a representable point of `spec`; return it as float64."""
    p = _check_finite(p, name)
    if p.shape != (spec.ambient_dim,):
        raise DataError(
            f"{name} has length {p.shape}, expected ({spec.ambient_dim},) for kappa={spec.kappa}"
        )
    norm = float(np.linalg.norm(p))
    if spec.kappa < 0 and norm >= spec.radius:
        raise DataError(f"{name} lies outside the Poincaré ball (|p|={norm:.6g} >= {spec.radius:.6g})")
    if spec.kappa > 0 and abs(norm - spec.radius) > spec.eps_boundary * spec.radius:
        raise DataError(
            f"{name} is off the sphere of radius {spec.radius:.6g} (|p|={norm:.6g})"
        )
    return p


def _check_tangent(spec: ManifoldSpec, v, name: str = "tangent vector") -> np.ndarray:
    v = _check_finite(v, name)
    if v.shape != (spec.dim,):
        raise DataError(f"{name} has length {v.shape}, expected ({spec.dim},)")
    return v


# -- scalar API (validated, numpy in / numpy out) --------------------------


def dist(spec: ManifoldSpec, p, q) -> float:
    """Geodesic distance between two points of `spec`."""
    p = check_point(spec, p, "p")
    q = check_point(spec, q, "q")
    return float(dist_rows(p[None, :], q[None, :], spec.kappa).value[0])


def exp_origin(spec: ManifoldSpec, v) -> np.ndarray:
    """Map a tangent vector at the origin onto the manifold."""
    v = _check_tangent(spec, v)
    return exp_origin_rows(v[None, :], spec.kappa, eps_boundary=spec.eps_boundary).value[0]


def log_origin(spec: ManifoldSpec, p) -> np.ndarray:
    """Inverse of exp_origin on its injectivity domain."""
    p = check_point(spec, p, "p")
    if spec.kappa > 0:
        theta = np.arctan2(np.linalg.norm(p[:-1]), p[-1])
        if theta >= np.pi - spec.eps_boundary:
            raise DataError("log_origin is undefined at (or within eps of) the antipode")
    return log_origin_rows(p[None, :], spec.kappa).value[0]


def project(spec: ManifoldSpec, p) -> np.ndarray:
    """Pull a raw ambient vector into the valid region (total on finite input)."""
    p = _check_finite(p, "p")
    if p.shape != (spec.ambient_dim,):
        raise DataError(f"p has length {p.shape}, expected ({spec.ambient_dim},)")
    return project_rows(p[None, :], spec.kappa, eps_boundary=spec.eps_boundary).value[0]


# -- row-wise kernels (ndarray or Tensor in, Tensor out) --------------------


def _kappa_sign(kappa) -> float:
    k = float(kappa.value) if isinstance(kappa, Tensor) else float(kappa)
    return float(np.sign(k))


def _safe_rows(r: Tensor, mask: np.ndarray) -> Tensor:
    # dummy 1.0 in masked-out lanes so the main formula never divides by ~0
    return ad.blend(mask, r, 1.0)


def exp_origin_rows(v, kappa, *, eps_boundary: float = DEFAULT_EPS_BOUNDARY) -> Tensor:
    """Exponential map at the origin, one point per row."""
    v = as_tensor(v)
    sign = _kappa_sign(kappa)
    if sign == 0.0:
        return v
    if sign < 0.0:
        c = ad.sqrt(as_tensor(kappa) * -1.0)
        r = ad.l2norm(v, axis=-1, keepdims=True)
        big = r.value > SMALL_NORM
        cr = c * _safe_rows(r, big)
        factor = ad.blend(big, ad.tanh(cr) / cr, 1.0)
        return project_rows(v * factor, kappa, eps_boundary=eps_boundary)
    radius = ad.as_tensor(kappa) ** -0.5
    r = ad.l2norm(v, axis=-1, keepdims=True)
    big = r.value > SMALL_NORM
    rs = _safe_rows(r, big)
    head = ad.blend(big, v * (radius * ad.sin(rs / radius) / rs), v)
    last = radius * ad.cos(r / radius)
    return ad.concat([head, last], axis=1)


def log_origin_rows(p, kappa) -> Tensor:
    """Logarithmic map at the origin, one point per row."""
    p = as_tensor(p)
    sign = _kappa_sign(kappa)
    if sign == 0.0:
        return p
    if sign < 0.0:
        c = ad.sqrt(as_tensor(kappa) * -1.0)
        r = ad.l2norm(p, axis=-1, keepdims=True)
        big = r.value > SMALL_NORM
        cr = ad.clip(c * _safe_rows(r, big), None, 1.0 - 1e-12)
        factor = ad.blend(big, ad.arctanh(cr) / cr, 1.0)
        return p * factor
    radius = ad.as_tensor(kappa) ** -0.5
    u = p[:, :-1]
    last = p[:, -1:]
    nu = ad.l2norm(u, axis=-1, keepdims=True)
    theta = ad.arctan2(nu, last)
    big = nu.value > SMALL_NORM
    return ad.blend(big, u * (theta * radius / _safe_rows(nu, big)), u)


def project_rows(p, kappa, *, eps_boundary: float = DEFAULT_EPS_BOUNDARY) -> Tensor:
    """Clamp rows into the valid region (ball interior / exact sphere norm)."""
    p = as_tensor(p)
    sign = _kappa_sign(kappa)
    if sign == 0.0:
        return p
    kap = as_tensor(kappa)
    radius = (kap if sign > 0 else kap * -1.0) ** -0.5
    r = ad.l2norm(p, axis=-1, keepdims=True)
    if sign < 0.0:
        limit = radius * (1.0 - eps_boundary)
        over = r.value >= limit.value
        factor = ad.blend(over, limit / _safe_rows(r, over), 1.0)
        return p * factor
    nonzero = r.value > SMALL_NORM
    scaled = p * (radius / _safe_rows(r, nonzero))
    n, amb = p.value.shape
    origin_rows = ad.concat(
        [as_tensor(np.zeros((n, amb - 1))), ad.as_tensor(np.ones((n, 1))) * radius], axis=1
    )
    if bool(nonzero.all()):
        return scaled
    return ad.blend(nonzero, scaled, origin_rows)


def dist_rows(p, q, kappa) -> Tensor:
    """Geodesic distance between paired rows of `p` and `q`."""
    p, q = as_tensor(p), as_tensor(q)
    sign = _kappa_sign(kappa)
    if sign == 0.0:
        return ad.l2norm(p - q, axis=-1)
    if sign < 0.0:
        kap = as_tensor(kappa)
        c = ad.sqrt(kap * -1.0)
        sq = ad.tsum((p - q) * (p - q), axis=-1)
        dp = 1.0 + kap * ad.tsum(p * p, axis=-1)
        dq = 1.0 + kap * ad.tsum(q * q, axis=-1)
        return ad.arccosh(1.0 + 2.0 * sq / (dp * dq)) / c
    kap = as_tensor(kappa)
    dot = ad.tsum(p * q, axis=-1)
    return ad.arccos(kap * dot) * kap**-0.5


def dist_matrix(p, q, kappa) -> Tensor:
    """All-pairs distances between the rows of `p` (n) and `q` (m) -> (n, m).

    With no gradient flowing, squared distances use the Gram identity
    (fast); on the differentiable path they use explicit row differences,
    whose gradient is well defined even for coincident pairs.
    """
    p, q = as_tensor(p), as_tensor(q)
    sign = _kappa_sign(kappa)
    needs_grad = (
        p.requires_grad
        or q.requires_grad
        or (isinstance(kappa, Tensor) and kappa.requires_grad)
    )

    if sign > 0.0:
        kap = as_tensor(kappa)
        dots = ad.matmul(p, ad.transpose(q))
        return ad.arccos(kap * dots) * kap**-0.5

    if sign == 0.0:
        if needs_grad:
            return ad.l2norm(_expand_rows(p, q), axis=-1)
        return Tensor(np.sqrt(_sq_cross(p.value, q.value)))

    if needs_grad:
        diff = _expand_rows(p, q)
        sq = ad.tsum(diff * diff, axis=-1)
    else:
        sq = Tensor(_sq_cross(p.value, q.value))
    kap = as_tensor(kappa)
    c = ad.sqrt(kap * -1.0)
    dp = 1.0 + kap * ad.tsum(p * p, axis=-1, keepdims=True)
    dq = 1.0 + kap * ad.tsum(q * q, axis=-1, keepdims=True)
    return ad.arccosh(1.0 + 2.0 * sq / (dp * ad.transpose(dq))) / c


def _expand_rows(p: Tensor, q: Tensor) -> Tensor:
    """Row differences p[i] - q[j], shape (n, m, d)."""
    n, d = p.value.shape
    m = q.value.shape[0]
    return ad.reshape(p, (n, 1, d)) - ad.reshape(q, (1, m, d))


def _sq_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(sq, 0.0)
