"""Shared graph encoder: one MLP applied to every hop matrix, residual concat.

The encoder is deliberately light: hop matrices H^k come from repeated
multiplication by the normalized adjacency (no parameters), a single
shared MLP transforms each one, and a node's embedding is the
concatenation of the residuals (transformed hop k) - (transformed hop 0)
for k = 1..k_hops. Nodes whose aggregated features never move under
propagation therefore embed to exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError
from .graphdata import propagate_hops


@dataclass
class BackboneParams:
    layers: list[tuple[Tensor, Tensor]]  # (weight, bias) per linear layer
    k_hops: int

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.k_hops * self.out_dim


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_backbone(
    in_dim: int,
    out_dim: int,
    depth: int = 4,
    k_hops: int = 2,
    rng: np.random.Generator | None = None,
) -> BackboneParams:
    """Depth linear layers (hidden width = in_dim), tanh between, none after last."""
    rng = rng or np.random.default_rng(0)
    if depth < 1 or k_hops < 1:
        raise DataError("depth and k_hops must be >= 1")
    widths = [in_dim] * depth + [out_dim]
    layers = []
    for a, b in zip(widths[:-1], widths[1:]):
        w = Tensor(glorot_uniform(a, b, rng), requires_grad=True)
        bias = Tensor(np.zeros(b), requires_grad=True)
        layers.append((w, bias))
    return BackboneParams(layers=layers, k_hops=k_hops)


def mlp_apply(params: BackboneParams, x) -> Tensor:
    h = ad.as_tensor(x)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = ad.matmul(h, w) + b
        if i < last:
            h = ad.tanh(h)
    return h


def encode_hops(hop_rows: Sequence, params: BackboneParams) -> Tensor:
    """Residual embedding from per-hop feature blocks (same node subset each)."""
    if len(hop_rows) != params.k_hops + 1:
        raise DataError(f"expected {params.k_hops + 1} hop blocks, got {len(hop_rows)}")
    base = mlp_apply(params, hop_rows[0])
    residuals = [mlp_apply(params, hk) - base for hk in hop_rows[1:]]
    return ad.concat(residuals, axis=1)


def encode(X: np.ndarray, adj_norm, params: BackboneParams) -> np.ndarray:
    """Full-graph embeddings, shape (N, k_hops * out_dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != params.in_dim:
        raise DataError(f"feature width {X.shape[1]} != encoder input width {params.in_dim}")
    hops = propagate_hops(adj_norm, X, params.k_hops)
    return encode_hops(hops, params).value
