"""Seeded synthetic graphs with planted anomalies for desk-scale evaluation.

Three generator kinds:

* tree_bridges     — balanced binary tree; anomalies get 3 extra edges
                     into other root subtrees (shortcut/bridge nodes);
                     features cluster around per-depth means
* sbm_contextual   — 4-block stochastic block model; anomalies keep their
                     structure but swap features with a node from the
                     block whose feature mean is farthest
* clique_injection — Erdős–Rényi base; anomalies form disjoint injected
                     cliques (nominal size 8), features from the base
                     distribution (purely structural anomalies)

Every generator is a pure function of its spec and labels exactly the
planted nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .graphdata import Graph, canonical_edges

KINDS = ("tree_bridges", "sbm_contextual", "clique_injection")

CLIQUE_SIZE = 8
BRIDGE_EXTRA_EDGES = 3
SBM_BLOCKS = 4
SBM_P_IN = 0.1
SBM_P_OUT = 0.01
ER_EXPECTED_DEGREE = 4.0


@dataclass(frozen=True)
class SynthSpec:
    kind: str
    n: int
    d0: int = 64
    anomaly_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown synthetic kind {self.kind!r}; choose from {KINDS}")
        if self.n < 20:
            raise DataError("n must be >= 20")
        if not (0.0 < self.anomaly_fraction < 0.5):
            raise DataError("anomaly_fraction must lie in (0, 0.5)")
        if self.d0 < 1:
            raise DataError("d0 must be >= 1")

    @property
    def num_anomalies(self) -> int:
        return int(np.ceil(self.anomaly_fraction * self.n))


def gen_synth(spec: SynthSpec) -> Graph:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "tree_bridges":
        return _tree_bridges(spec, rng)
    if spec.kind == "sbm_contextual":
        return _sbm_contextual(spec, rng)
    return _clique_injection(spec, rng)


def _tree_bridges(spec: SynthSpec, rng: np.random.Generator) -> Graph:
    n, a = spec.n, spec.num_anomalies
    # heap-indexed balanced binary tree: children of i are 2i+1, 2i+2
    edges = [(parent, child) for child in range(1, n) for parent in [(child - 1) // 2]]
    depth = np.zeros(n, dtype=np.int64)
    for v in range(1, n):
        depth[v] = depth[(v - 1) // 2] + 1
    # the root subtree a node belongs to (0 for the root itself)
    subtree = np.zeros(n, dtype=np.int64)
    for v in range(1, n):
        r = v
        while r > 2:
            r = (r - 1) // 2
        subtree[v] = r
    if n < 3:
        raise DataError("tree_bridges needs at least two root subtrees")

    anomalies = rng.choice(np.arange(1, n), size=a, replace=False)
    extra = []
    for v in anomalies:
        candidates = np.where((subtree != subtree[v]) & (np.arange(n) != 0))[0]
        if candidates.size < BRIDGE_EXTRA_EDGES:
            raise DataError("tree too small to place bridge edges")
        targets = rng.choice(candidates, size=BRIDGE_EXTRA_EDGES, replace=False)
        extra.extend((int(v), int(t)) for t in targets)

    means = rng.normal(0.0, 2.0, size=(int(depth.max()) + 1, spec.d0))
    features = means[depth] + rng.normal(0.0, 0.5, size=(n, spec.d0))
    labels = np.zeros(n, dtype=np.int64)
    labels[anomalies] = 1
    return Graph(
        num_nodes=n,
        edges=canonical_edges(np.array(edges + extra), n),
        raw_features=features,
        labels=labels,
    )


def _sbm_contextual(spec: SynthSpec, rng: np.random.Generator) -> Graph:
    n, a = spec.n, spec.num_anomalies
    blocks = rng.integers(0, SBM_BLOCKS, size=n)
    iu, ju = np.triu_indices(n, k=1)
    same = blocks[iu] == blocks[ju]
    probs = np.where(same, SBM_P_IN, SBM_P_OUT)
    keep = rng.random(iu.shape[0]) < probs
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    block_means = rng.normal(0.0, 2.0, size=(SBM_BLOCKS, spec.d0))
    features = block_means[blocks] + rng.normal(0.0, 0.5, size=(n, spec.d0))

    # farthest block by feature-mean distance, per block
    gaps = np.linalg.norm(block_means[:, None, :] - block_means[None, :, :], axis=2)
    farthest = gaps.argmax(axis=1)

    anomalies = rng.choice(n, size=a, replace=False)
    labels = np.zeros(n, dtype=np.int64)
    labels[anomalies] = 1
    used_partners: set[int] = set()
    for v in anomalies:
        pool = np.where((blocks == farthest[blocks[v]]) & (labels == 0))[0]
        pool = np.array([p for p in pool if p not in used_partners])
        if pool.size == 0:
            raise DataError("no swap partner available; lower the anomaly fraction")
        partner = int(rng.choice(pool))
        used_partners.add(partner)
        features[[v, partner]] = features[[partner, v]]
    return Graph(num_nodes=n, edges=canonical_edges(edges, n), raw_features=features, labels=labels)


def _clique_injection(spec: SynthSpec, rng: np.random.Generator) -> Graph:
    n, a = spec.n, spec.num_anomalies
    if a < 2:
        raise DataError("clique_injection needs an anomaly budget of at least 2")
    p = ER_EXPECTED_DEGREE / n
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.shape[0]) < p
    edges = list(map(tuple, np.stack([iu[keep], ju[keep]], axis=1)))

    # split the budget into cliques of the nominal size; a remainder of 1
    # is folded into the previous clique so every clique has >= 2 members
    sizes = [CLIQUE_SIZE] * (a // CLIQUE_SIZE)
    rem = a % CLIQUE_SIZE
    if rem == 1 and sizes:
        sizes[-1] += 1
    elif rem:
        sizes.append(rem)

    anomalies = rng.choice(n, size=a, replace=False)
    labels = np.zeros(n, dtype=np.int64)
    labels[anomalies] = 1
    offset = 0
    for size in sizes:
        members = anomalies[offset : offset + size]
        offset += size
        for x in range(size):
            for y in range(x + 1, size):
                edges.append((int(members[x]), int(members[y])))

    features = rng.normal(0.0, 1.0, size=(n, spec.d0))
    return Graph(
        num_nodes=n,
        edges=canonical_edges(np.array(edges), n),
        raw_features=features,
        labels=labels,
    )


def manifest_for(spec: SynthSpec, g: Graph) -> dict:
    return {
        "kind": spec.kind,
        "n": spec.n,
        "d0": spec.d0,
        "anomaly_fraction": spec.anomaly_fraction,
        "seed": spec.seed,
        "num_anomalies": int(g.labels.sum()),
        "num_edges": g.num_edges,
    }
