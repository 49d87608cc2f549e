"""Graph data model, file I/O, normalization, hop propagation, Laplacian score.

File formats:
  * edge file    — one edge per line, two 0-indexed integers separated by a
                   tab; lines starting with '#' are ignored
  * feature file — CSV of floats, row i = node i (row count defines N)
  * label file   — one 0/1 integer per line, length N (optional)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataError

EDGE_FILE = "edges.tsv"
FEATURE_FILE = "features.csv"
LABEL_FILE = "labels.txt"
MANIFEST_FILE = "manifest.json"


@dataclass
class Graph:
    """Undirected, unweighted attributed graph with optional binary labels."""

    num_nodes: int
    edges: np.ndarray  # (E, 2) int array, u < v, lexicographically sorted
    raw_features: np.ndarray  # (N, d0) float64
    labels: np.ndarray | None = None  # (N,) 0/1 ints

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.raw_features = np.asarray(self.raw_features, dtype=np.float64)
        n = self.num_nodes
        if n <= 0:
            raise DataError("graph must have at least one node")
        if self.raw_features.shape[0] != n:
            raise DataError(
                f"feature row count {self.raw_features.shape[0]} != num_nodes {n}"
            )
        if not np.all(np.isfinite(self.raw_features)):
            raise DataError("raw features contain non-finite entries")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise DataError("edge endpoint out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise DataError("self-loops are not allowed")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataError(f"label length {self.labels.shape} != num_nodes {n}")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError("labels must be 0 or 1")

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.raw_features.shape[1])

    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency, no self-loops."""
        n = self.num_nodes
        if self.num_edges == 0:
            return sp.csr_matrix((n, n))
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(rows.shape[0])
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def canonical_edges(pairs: np.ndarray, num_nodes: int) -> np.ndarray:
    """Dedupe, drop self-loops, orient u < v, sort lexicographically."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size == 0:
        return pairs
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keep = lo != hi
    stacked = np.stack([lo[keep], hi[keep]], axis=1)
    if stacked.size == 0:
        return stacked
    return np.unique(stacked, axis=0)


def load_graph(edge_path, feature_path, label_path=None) -> Graph:
    """Build a Graph from the three text files; N comes from the feature rows."""
    features = _read_features(Path(feature_path))
    n = features.shape[0]
    pairs = _read_edges(Path(edge_path), n)
    labels = _read_labels(Path(label_path), n) if label_path is not None else None
    return Graph(num_nodes=n, edges=canonical_edges(pairs, n), raw_features=features, labels=labels)


def load_graph_dir(directory) -> Graph:
    """Load a graph from a directory using the conventional file names."""
    d = Path(directory)
    edge_path = d / EDGE_FILE
    feat_path = d / FEATURE_FILE
    label_path = d / LABEL_FILE
    if not feat_path.exists():
        raise DataError(f"missing feature file {feat_path}")
    if not edge_path.exists():
        raise DataError(f"missing edge file {edge_path}")
    return load_graph(edge_path, feat_path, label_path if label_path.exists() else None)


def save_graph_dir(g: Graph, directory, manifest: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / EDGE_FILE, "w") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    with open(d / FEATURE_FILE, "w") as fh:
        for row in g.raw_features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    if g.labels is not None:
        with open(d / LABEL_FILE, "w") as fh:
            fh.write("\n".join(str(int(x)) for x in g.labels) + "\n")
    if manifest is not None:
        with open(d / MANIFEST_FILE, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _read_edges(path: Path, num_nodes: int) -> np.ndarray:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two tab-separated integers")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer edge endpoint") from None
            if u < 0 or v < 0 or u >= num_nodes or v >= num_nodes:
                raise DataError(f"{path}:{lineno}: endpoint out of range [0, {num_nodes})")
            pairs.append((u, v))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _read_features(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(x) for x in line.split(",")]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature entry") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: empty feature file")
    features = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise DataError(f"{path}: non-finite feature value")
    return features


def _read_labels(path: Path, num_nodes: int) -> np.ndarray:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1")
            values.append(int(line))
    if len(values) != num_nodes:
        raise DataError(f"{path}: {len(values)} labels for {num_nodes} nodes")
    return np.asarray(values, dtype=np.int64)


# -- spectral preprocessing -------------------------------------------------


def sym_norm_adjacency(g: Graph) -> sp.csr_matrix:
    """D^{-1/2} A D^{-1/2}; rows/columns of isolated nodes stay all-zero."""
    return sym_norm_csr(g.adjacency())


def sym_norm_csr(a: sp.spmatrix) -> sp.csr_matrix:
    """Symmetric normalization of an explicit binary adjacency matrix."""
    deg = np.asarray(a.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        dinv = 1.0 / np.sqrt(deg)
    dinv[~np.isfinite(dinv)] = 0.0
    dmat = sp.diags(dinv)
    return (dmat @ a @ dmat).tocsr()


def propagate_hops(adj_norm, X: np.ndarray, k_hops: int) -> list[np.ndarray]:
    """[H^0 ... H^k] with H^0 = X and H^k = adj_norm @ H^{k-1}."""
    X = np.asarray(X, dtype=np.float64)
    if adj_norm.shape[0] != adj_norm.shape[1] or adj_norm.shape[0] != X.shape[0]:
        raise DataError(
            f"adjacency {adj_norm.shape} incompatible with features {X.shape}"
        )
    if k_hops < 1:
        raise DataError("k_hops must be >= 1")
    hops = [X]
    for _ in range(k_hops):
        hops.append(np.asarray(adj_norm @ hops[-1]))
    return hops


def laplacian_score(f: np.ndarray, adj_norm) -> float:
    """Smoothness f^T (I - adj_norm) f of a feature over the graph (low = smooth)."""
    f = np.asarray(f, dtype=np.float64).ravel()
    if adj_norm.shape[0] != f.shape[0]:
        raise DataError(f"feature length {f.shape[0]} != adjacency size {adj_norm.shape[0]}")
    return float(f @ f - f @ (adj_norm @ f))


def laplacian_scores_columns(X: np.ndarray, adj_norm) -> np.ndarray:
    """laplacian_score applied to every column of X at once."""
    X = np.asarray(X, dtype=np.float64)
    if adj_norm.shape[0] != X.shape[0]:
        raise DataError(f"row count {X.shape[0]} != adjacency size {adj_norm.shape[0]}")
    return np.einsum("ij,ij->j", X, X) - np.einsum("ij,ij->j", X, adj_norm @ X)
