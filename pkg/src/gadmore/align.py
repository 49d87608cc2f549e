"""Multi-curvature feature alignment.

Raw node features are projected into C parallel curvature spaces. Per
space: bound the rows inside the manifold's valid radius, log-map them to
the tangent space at the origin, PCA down to a candidate pool, then keep
the columns whose Laplacian score is lowest (smoothest over the graph).
The per-space selections are concatenated into one N x D matrix that is
the model input everywhere downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import DataError, NumericError
from .graphdata import Graph, laplacian_scores_columns, sym_norm_adjacency

DEFAULT_CURVATURES = (0.0, -0.5, -1.0, 0.5, 1.0)


@dataclass(frozen=True)
class AlignConfig:
    curvatures: tuple[float, ...] = DEFAULT_CURVATURES
    total_dim: int = 32
    pca_factor: int = 4
    scale_margin: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "curvatures", tuple(float(k) for k in self.curvatures))
        if len(self.curvatures) < 1:
            raise DataError("need at least one curvature space")
        if self.total_dim < len(self.curvatures):
            raise DataError("total_dim must be >= number of curvature spaces")
        if self.pca_factor < 1:
            raise DataError("pca_factor must be >= 1")
        if not (0.0 < self.scale_margin < 1.0):
            raise DataError("scale_margin must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "curvatures": list(self.curvatures),
            "total_dim": self.total_dim,
            "pca_factor": self.pca_factor,
            "scale_margin": self.scale_margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlignConfig":
        return cls(
            curvatures=tuple(d.get("curvatures", DEFAULT_CURVATURES)),
            total_dim=int(d.get("total_dim", 32)),
            pca_factor=int(d.get("pca_factor", 4)),
            scale_margin=float(d.get("scale_margin", 0.9)),
        )


@dataclass
class SpaceSelection:
    """Per-space fit record: PCA basis + which candidate columns survived."""

    kappa: float
    width: int
    mean: np.ndarray  # (d0,) column mean used for centering
    components: np.ndarray  # (d0, m) PCA directions, zero-filled past the rank
    n_zero_filled: int
    selected: np.ndarray  # (width,) indices into the m candidate columns
    scores: np.ndarray  # (m,) Laplacian scores of the candidates


@dataclass
class AlignedFeatures:
    matrix: np.ndarray  # (N, D)
    partition: list[tuple[float, int]]  # (kappa_c, D_c) in config order
    selections: list[SpaceSelection]

    def __post_init__(self):
        if sum(w for _, w in self.partition) != self.matrix.shape[1]:
            raise DataError("partition widths do not sum to the matrix width")


def partition_dims(total_dim: int, n_spaces: int) -> list[int]:
    """Equal split of D over C spaces, remainder going to the first spaces."""
    if n_spaces < 1 or total_dim < n_spaces:
        raise DataError(f"cannot split D={total_dim} over C={n_spaces} spaces")
    base, rem = divmod(total_dim, n_spaces)
    return [base + 1 if c < rem else base for c in range(n_spaces)]


def to_tangent(X0: np.ndarray, spec: geo.ManifoldSpec, scale_margin: float) -> np.ndarray:
    """Bound rows inside the manifold's valid radius and log-map to the origin.

    Flat space is the identity. For curved spaces every row is rescaled by
    one global factor placing the largest row at scale_margin times the
    valid radius (ball radius for kappa<0; pi/(2 sqrt(kappa)) for
    kappa>0, where the rescaled rows are read as tangent vectors and
    round-tripped through the sphere).
    """
    X0 = np.asarray(X0, dtype=np.float64)
    if not np.all(np.isfinite(X0)):
        raise NumericError("to_tangent input contains non-finite entries")
    if spec.kappa == 0.0:
        return X0
    max_norm = float(np.linalg.norm(X0, axis=1).max(initial=0.0))
    if spec.kappa < 0:
        r_max = spec.radius
    else:
        r_max = np.pi / (2.0 * np.sqrt(spec.kappa))
    scale = scale_margin * r_max / max(max_norm, 1e-12)
    scaled = X0 * scale
    if spec.kappa < 0:
        points = geo.project_rows(scaled, spec.kappa, eps_boundary=spec.eps_boundary)
        return geo.log_origin_rows(points.value, spec.kappa).value
    on_sphere = geo.exp_origin_rows(scaled, spec.kappa, eps_boundary=spec.eps_boundary)
    return geo.log_origin_rows(on_sphere.value, spec.kappa).value


def pca_reduce(X: np.ndarray, d_out: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Column-centered PCA to d_out columns.

    Returns (components, projected, n_zero_filled). Components are
    orthonormal covariance eigendirections in descending-variance order;
    requesting more columns than the rank is allowed and pads with zero
    columns. Sign convention: the entry of largest magnitude in each
    component is positive (first such index on ties).
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if d_out < 1:
        raise DataError("d_out must be >= 1")
    mean = X.mean(axis=0)
    centered = X - mean
    # economy SVD: right singular vectors are the covariance eigendirections
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, d) * np.finfo(np.float64).eps * (svals[0] if svals.size else 0.0)
    rank = int((svals > tol).sum())
    keep = min(rank, d_out)
    components = np.zeros((d, d_out))
    components[:, :keep] = vt[:keep].T
    for j in range(keep):
        col = components[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            components[:, j] = -col
    projected = centered @ components
    return components, projected, d_out - keep


def select_by_laplacian(
    Xc: np.ndarray, adj_norm, width: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keep the `width` lowest-Laplacian-score columns (ties: lower index).

    Returns (selected columns in original order, their indices, all scores).
    """
    Xc = np.asarray(Xc, dtype=np.float64)
    m = Xc.shape[1]
    if width > m:
        raise DataError(f"cannot select {width} of {m} columns")
    scores = laplacian_scores_columns(Xc, adj_norm)
    order = np.lexsort((np.arange(m), scores))  # score asc, then index asc
    chosen = np.sort(order[:width])
    return Xc[:, chosen], chosen, scores


def align_features(g: Graph, cfg: AlignConfig, adj_norm=None) -> AlignedFeatures:
    """Fit the full alignment pipeline on one graph (fully unsupervised)."""
    if adj_norm is None:
        adj_norm = sym_norm_adjacency(g)
    widths = partition_dims(cfg.total_dim, len(cfg.curvatures))
    n, d0 = g.raw_features.shape
    blocks = []
    selections = []
    for kappa, width in zip(cfg.curvatures, widths):
        spec = geo.ManifoldSpec(kappa=kappa, dim=d0)
        tangent = to_tangent(g.raw_features, spec, cfg.scale_margin)
        # candidate pool: pca_factor * width when the data supports it, but
        # never below width itself (zero-fill keeps the output shape fixed)
        pool = max(width, min(cfg.pca_factor * width, min(n, d0)))
        components, candidates, n_zero = pca_reduce(tangent, pool)
        selected, indices, scores = select_by_laplacian(candidates, adj_norm, width)
        blocks.append(selected)
        selections.append(
            SpaceSelection(
                kappa=kappa,
                width=width,
                mean=tangent.mean(axis=0),
                components=components,
                n_zero_filled=n_zero,
                selected=indices,
                scores=scores,
            )
        )
    matrix = np.concatenate(blocks, axis=1)
    partition = list(zip(cfg.curvatures, widths))
    return AlignedFeatures(matrix=matrix, partition=partition, selections=selections)


def export_aligned(aligned: AlignedFeatures, directory) -> None:
    """Write the aligned matrix as CSV plus a JSON metadata sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "aligned.csv", "w") as fh:
        for row in aligned.matrix:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    meta = {
        "partition": [[k, w] for k, w in aligned.partition],
        "spaces": [
            {
                "kappa": s.kappa,
                "width": s.width,
                "selected": s.selected.tolist(),
                "scores": s.scores.tolist(),
                "n_zero_filled": s.n_zero_filled,
                "mean": s.mean.tolist(),
                "components": s.components.tolist(),
            }
            for s in aligned.selections
        ],
    }
    with open(d / "alignment.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
