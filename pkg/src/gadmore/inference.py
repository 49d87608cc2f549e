"""Zero-shot scoring of unseen graphs plus ranking metrics.

Scoring refits the (fully unsupervised) feature alignment on the target
graph, encodes every node, routes it with frozen memory banks, and takes
the L2 norm of the residual between embedding and reconstruction as the
anomaly score. Nothing in the model state is mutated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError
from .graphdata import Graph
from .training import ModelState, moe_forward, prepare_graph


@dataclass
class ScoreReport:
    scores: np.ndarray  # (N,) non-negative anomaly scores
    auroc: float | None
    auprc: float | None
    hist_edges: np.ndarray  # (bins + 1,)
    hist_normal: np.ndarray  # (bins,) counts (all nodes when unlabeled)
    hist_anomalous: np.ndarray  # (bins,) counts (zero when unlabeled)


def score_nodes(g: Graph, state: ModelState) -> np.ndarray:
    """Residual-norm anomaly score per node; pure read of the model state."""
    pg = prepare_graph(g, state.align_cfg, state.backbone.k_hops)
    from .backbone import encode_hops  # local import avoids a cycle at module load

    h = encode_hops(pg.hops, state.backbone)
    fwd = moe_forward(state, Tensor(h.value))  # constants in -> no graph is built
    residual = h.value - fwd.recon.value
    return np.sqrt((residual * residual).sum(axis=1))


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise DataError("auroc needs at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.shape[0]:
        j = i
        while j < sorted_scores.shape[0] and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # midrank of the tie group
        i = j
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision over the descending-score ranking (ties keep their
    original index order)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int((labels == 1).sum())
    if pos == 0:
        raise DataError("auprc needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.shape[0] + 1)
    precision_at_hits = hits[ranked == 1] / ranks[ranked == 1]
    return float(precision_at_hits.sum() / pos)


def score_report(g: Graph, state: ModelState, bins: int = 50) -> ScoreReport:
    scores = score_nodes(g, state)
    return build_report(scores, g.labels, bins=bins)


def build_report(scores: np.ndarray, labels: np.ndarray | None, bins: int = 50) -> ScoreReport:
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo <= 0.0:
        hi = lo + 1.0  # constant scores: everything lands in the first bin
    edges = np.linspace(lo, hi, bins + 1)
    if labels is None:
        counts, _ = np.histogram(scores, bins=edges)
        return ScoreReport(
            scores=scores,
            auroc=None,
            auprc=None,
            hist_edges=edges,
            hist_normal=counts,
            hist_anomalous=np.zeros(bins, dtype=np.int64),
        )
    normal_counts, _ = np.histogram(scores[labels == 0], bins=edges)
    anom_counts, _ = np.histogram(scores[labels == 1], bins=edges)
    return ScoreReport(
        scores=scores,
        auroc=auroc(scores, labels),
        auprc=auprc(scores, labels),
        hist_edges=edges,
        hist_normal=normal_counts,
        hist_anomalous=anom_counts,
    )


# -- file formats ---------------------------------------------------------


def write_scores_tsv(scores: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        for i, s in enumerate(scores):
            fh.write(f"{i}\t{repr(float(s))}\n")


def read_scores_tsv(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataError(f"score file not found: {p}")
    scores = {}
    with open(p) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{p}:{lineno}: expected 'node_id<TAB>score'")
            try:
                scores[int(parts[0])] = float(parts[1])
            except ValueError:
                raise DataError(f"{p}:{lineno}: malformed node id or score") from None
    if sorted(scores) != list(range(len(scores))):
        raise DataError(f"{p}: node ids must cover 0..N-1")
    return np.array([scores[i] for i in range(len(scores))])


def write_metrics_json(report: ScoreReport, labels: np.ndarray, path) -> None:
    doc = {
        "auroc": report.auroc,
        "auprc": report.auprc,
        "n": int(report.scores.shape[0]),
        "n_pos": int((np.asarray(labels) == 1).sum()),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_histogram_csv(report: ScoreReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("bin_low,bin_high,count_normal,count_anomalous\n")
        for k in range(report.hist_normal.shape[0]):
            fh.write(
                f"{report.hist_edges[k]!r},{report.hist_edges[k + 1]!r},"
                f"{int(report.hist_normal[k])},{int(report.hist_anomalous[k])}\n"
            )
