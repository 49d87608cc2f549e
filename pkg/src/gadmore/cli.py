"""Command-line entry point.

Subcommands: synth, align, train, score, eval, sweep. Exit codes: 0 on
success, 1 on usage errors, 2 on data errors, 3 on numeric failures. The
environment variable GADMORE_THREADS caps BLAS-level parallelism
(best-effort).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .align import AlignConfig, align_features, export_aligned
from .errors import DataError, GadmoreError, NumericError
from .graphdata import load_graph_dir, propagate_hops, save_graph_dir, sym_norm_adjacency
from .inference import (
    auprc,
    auroc,
    build_report,
    read_scores_tsv,
    score_nodes,
    write_histogram_csv,
    write_metrics_json,
    write_scores_tsv,
)
from .router import RouterConfig
from .synthbench import KINDS, SynthSpec, gen_synth, manifest_for
from .training import TrainConfig, load_checkpoint, save_checkpoint, train


@dataclass
class RunConfig:
    """Parsed contents of a --config JSON document."""

    seed: int
    source_graphs: list[str]
    align: AlignConfig
    router: RouterConfig
    train: TrainConfig

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise DataError(f"config is not valid JSON: {err}") from None
        seed = int(doc.get("seed", 0))
        train_doc = dict(doc.get("train", {}))
        train_doc.setdefault("seed", seed)
        cfg = cls(
            seed=seed,
            source_graphs=list(doc.get("source_graphs", [])),
            align=AlignConfig.from_dict(doc.get("align", {})),
            router=RouterConfig.from_dict(doc.get("router", {})),
            train=TrainConfig.from_dict(train_doc),
        )
        for d in cfg.source_graphs:
            if not Path(d).exists():
                raise DataError(f"source graph directory not found: {d}")
        return cfg


def _apply_thread_cap() -> None:
    cap = os.environ.get("GADMORE_THREADS")
    if not cap:
        return
    try:
        limit = max(1, int(cap))
    except ValueError:
        raise DataError(f"GADMORE_THREADS must be an integer, got {cap!r}") from None
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=limit)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(limit)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gadmore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled graph")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d0", type=int, default=64)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("align", help="fit feature alignment on a graph and export it")
    p.add_argument("--config", default=None)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on the source graphs from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="JSON-lines run log (default: <out>.log.jsonl)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("score", help="score an unseen graph with a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--histogram", default=None, help="optional per-class histogram CSV")
    p.add_argument("--bins", type=int, default=50)

    p = sub.add_parser("eval", help="compute metrics for a score file against labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", default=None, help="write metrics JSON here as well as stdout")

    p = sub.add_parser("sweep", help="single-curvature kNN-distance detector over a curvature grid")
    p.add_argument("--graph", required=True)
    p.add_argument("--curvatures", default="-1,-0.5,0,0.5,1")
    p.add_argument("--knn", type=int, default=10)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--scale-margin", type=float, default=0.9)
    p.add_argument("--out", required=True)
    return parser


def run_command(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        _apply_thread_cap()
        handler = {
            "synth": _cmd_synth,
            "align": _cmd_align,
            "train": _cmd_train,
            "score": _cmd_score,
            "eval": _cmd_eval,
            "sweep": _cmd_sweep,
        }[args.command]
        handler(args)
        return 0
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    except (DataError, GadmoreError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


# -- handlers -----------------------------------------------------------------


def _cmd_synth(args) -> None:
    spec = SynthSpec(
        kind=args.kind, n=args.n, d0=args.d0, anomaly_fraction=args.fraction, seed=args.seed
    )
    g = gen_synth(spec)
    save_graph_dir(g, args.out, manifest=manifest_for(spec, g))
    print(f"wrote {args.kind} graph (n={g.num_nodes}, edges={g.num_edges}) to {args.out}")


def _cmd_align(args) -> None:
    align_cfg = AlignConfig()
    if args.config is not None:
        align_cfg = RunConfig.load(args.config).align
    g = load_graph_dir(args.graph)
    aligned = align_features(g, align_cfg)
    export_aligned(aligned, args.out)
    print(f"wrote aligned features {aligned.matrix.shape} to {args.out}")


def _cmd_train(args) -> None:
    cfg = RunConfig.load(args.config)
    if not cfg.source_graphs:
        raise DataError("config lists no source_graphs")
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": args.seed})
    graphs = [load_graph_dir(d) for d in cfg.source_graphs]
    log_path = args.log if args.log is not None else str(args.out) + ".log.jsonl"
    state = train(graphs, train_cfg, align_cfg=cfg.align, router_cfg=cfg.router, log_path=log_path)
    save_checkpoint(state, args.out)
    print(f"wrote checkpoint to {args.out} (run log: {log_path})")


def _cmd_score(args) -> None:
    state = load_checkpoint(args.model)
    g = load_graph_dir(args.graph)
    scores = score_nodes(g, state)
    write_scores_tsv(scores, args.out)
    print(f"wrote {scores.shape[0]} scores to {args.out}")
    report = build_report(scores, g.labels, bins=args.bins)
    if g.labels is not None:
        metrics_path = Path(args.out).with_suffix(".metrics.json")
        write_metrics_json(report, g.labels, metrics_path)
        print(f"auroc={report.auroc:.4f} auprc={report.auprc:.4f} ({metrics_path})")
    if args.histogram is not None:
        write_histogram_csv(report, args.histogram)


def _cmd_eval(args) -> None:
    scores = read_scores_tsv(args.scores)
    labels_path = Path(args.labels)
    if not labels_path.exists():
        raise DataError(f"label file not found: {labels_path}")
    labels = np.array([int(line) for line in labels_path.read_text().split()])
    if labels.shape[0] != scores.shape[0]:
        raise DataError(f"{labels.shape[0]} labels for {scores.shape[0]} scores")
    doc = {
        "auroc": auroc(scores, labels),
        "auprc": auprc(scores, labels),
        "n": int(scores.shape[0]),
        "n_pos": int((labels == 1).sum()),
    }
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")


def _cmd_sweep(args) -> None:
    g = load_graph_dir(args.graph)
    if g.labels is None:
        raise DataError("sweep needs a labeled graph")
    try:
        curvatures = [float(x) for x in args.curvatures.split(",") if x.strip() != ""]
    except ValueError:
        raise DataError(f"bad curvature list: {args.curvatures!r}") from None
    if not curvatures:
        raise DataError("empty curvature list")
    rows = []
    for kappa in curvatures:
        score = knn_distance_scores(
            g,
            kappa,
            knn=args.knn,
            dim=args.dim,
            k_hops=args.hops,
            scale_margin=args.scale_margin,
        )
        rows.append((kappa, auroc(score, g.labels)))
    with open(args.out, "w") as fh:
        fh.write("kappa,auroc\n")
        for kappa, value in rows:
            fh.write(f"{kappa!r},{value!r}\n")
    for kappa, value in rows:
        print(f"kappa={kappa:+.2f}  auroc={value:.4f}")


def knn_distance_scores(
    g,
    kappa: float,
    knn: int = 10,
    dim: int = 32,
    k_hops: int = 2,
    scale_margin: float = 0.9,
) -> np.ndarray:
    """Single-curvature detector: align at one curvature, hop-average the
    features, embed on the manifold, and score each node by its mean
    distance to its knn nearest neighbors there."""
    if knn < 1:
        raise DataError("knn must be >= 1")
    if knn >= g.num_nodes:
        raise DataError(f"knn={knn} must be smaller than the graph (n={g.num_nodes})")
    adj_norm = sym_norm_adjacency(g)
    align_cfg = AlignConfig(curvatures=(kappa,), total_dim=dim, scale_margin=scale_margin)
    aligned = align_features(g, align_cfg, adj_norm=adj_norm)
    hops = propagate_hops(adj_norm, aligned.matrix, k_hops)
    tangent = np.mean(hops, axis=0)
    if kappa == 0.0:
        points = tangent
    else:
        spec = geo.ManifoldSpec(kappa=kappa, dim=dim)
        r_max = spec.radius if kappa < 0 else np.pi / (2.0 * np.sqrt(kappa))
        max_norm = float(np.linalg.norm(tangent, axis=1).max(initial=0.0))
        scaled = tangent * (scale_margin * r_max / max(max_norm, 1e-12))
        points = geo.exp_origin_rows(scaled, kappa).value
    dmat = geo.dist_matrix(points, points, kappa).value
    np.fill_diagonal(dmat, np.inf)
    nearest = np.partition(dmat, knn - 1, axis=1)[:, :knn]
    return nearest.mean(axis=1)
