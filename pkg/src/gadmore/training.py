"""Unsupervised training: loss terms, Adam, the epoch/batch loop, checkpoints.

The objective is a weighted sum of five terms per node batch:

* embedding reconstruction  — mean squared residual between an embedding
  and its top-k expert reconstruction
* feature reconstruction    — a linear decoder maps the reconstruction
  back to the aligned feature space
* structure reconstruction  — BCE between sigmoid(H_hat H_hat^T) and the
  batch submatrix of the adjacency (exact, or an unbiased
  positives-plus-sampled-non-edges estimate on large graphs)
* structure contrastive     — InfoNCE over cosine similarity with in-batch
  neighbors as positives and a sampled denominator
* gate entropy              — negative gating entropy, discouraging
  expert collapse

Hop matrices are parameter-free, so they are computed once per graph and
batches are plain node subsets. Memory banks update after each optimizer
step and never receive gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .align import AlignConfig, align_features
from .autodiff import Tensor
from .backbone import BackboneParams, encode_hops, glorot_uniform, init_backbone
from .errors import DataError, NumericError
from .experts import ExpertModel, curvature_of, expert_forward_rows, init_expert
from .graphdata import Graph, propagate_hops, sym_norm_csr
from .router import (
    BankEntry,
    MemoryBank,
    RouterConfig,
    gate_batch,
    routing_logits_batch,
    update_banks,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1

LOSS_NAMES = ("L_embed", "L_feat", "L_struct", "L_con", "L_gate")


@dataclass(frozen=True)
class TrainConfig:
    lambdas: tuple[float, float, float, float, float] = (1.0, 0.5, 0.1, 0.1, 0.01)
    learning_rate: float = 5e-5
    weight_decay: float = 5e-5
    epochs: int = 40
    batch_size: int = 512
    tau_contrast: float = 0.5
    n_negatives: int = 256
    struct_mode: str = "auto"  # "full" | "sampled" | "auto" (sampled when N > threshold)
    struct_threshold: int = 2000
    seed: int = 0
    expert_kappas: tuple[float, ...] = (0.0, -0.5, -1.0, 0.5, 1.0)
    mlp_depth: int = 4
    k_hops: int = 2
    expert_depth: int = 2

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "expert_kappas", tuple(float(x) for x in self.expert_kappas))
        if len(self.lambdas) != 5 or any(x < 0 for x in self.lambdas):
            raise DataError("lambdas must be five non-negative weights")
        if self.learning_rate <= 0 or self.tau_contrast <= 0:
            raise DataError("learning_rate and tau_contrast must be positive")
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2")
        if self.struct_mode not in ("full", "sampled", "auto"):
            raise DataError("struct_mode must be full, sampled, or auto")
        if len(self.expert_kappas) < 1:
            raise DataError("need at least one expert")

    def to_dict(self) -> dict:
        return {
            "lambdas": list(self.lambdas),
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "tau_contrast": self.tau_contrast,
            "n_negatives": self.n_negatives,
            "struct_mode": self.struct_mode,
            "struct_threshold": self.struct_threshold,
            "seed": self.seed,
            "expert_kappas": list(self.expert_kappas),
            "mlp_depth": self.mlp_depth,
            "k_hops": self.k_hops,
            "expert_depth": self.expert_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        defaults = cls()
        kwargs = {}
        for key in defaults.to_dict():
            value = d.get(key, getattr(defaults, key))
            if key in ("lambdas", "expert_kappas"):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)


@dataclass
class ModelState:
    backbone: BackboneParams
    experts: list[ExpertModel]
    decoder_w: Tensor
    decoder_b: Tensor
    banks: list[MemoryBank]
    align_cfg: AlignConfig
    router_cfg: RouterConfig
    train_cfg: TrainConfig
    adam_t: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)

    @property
    def embedding_dim(self) -> int:
        return self.backbone.embedding_dim

    @property
    def num_experts(self) -> int:
        return len(self.experts)


def init_state(
    align_cfg: AlignConfig, router_cfg: RouterConfig, train_cfg: TrainConfig
) -> ModelState:
    rng = np.random.default_rng(train_cfg.seed)
    d = align_cfg.total_dim
    backbone = init_backbone(
        in_dim=d, out_dim=d, depth=train_cfg.mlp_depth, k_hops=train_cfg.k_hops, rng=rng
    )
    dim = backbone.embedding_dim
    experts = [
        init_expert(i, kappa, dim, depth=train_cfg.expert_depth, rng=rng)
        for i, kappa in enumerate(train_cfg.expert_kappas)
    ]
    decoder_w = Tensor(glorot_uniform(dim, d, rng), requires_grad=True)
    decoder_b = Tensor(np.zeros(d), requires_grad=True)
    banks = [MemoryBank(expert_index=i, capacity=router_cfg.capacity) for i in range(len(experts))]
    return ModelState(
        backbone=backbone,
        experts=experts,
        decoder_w=decoder_w,
        decoder_b=decoder_b,
        banks=banks,
        align_cfg=align_cfg,
        router_cfg=router_cfg,
        train_cfg=train_cfg,
    )


def named_parameters(state: ModelState) -> list[tuple[str, Tensor]]:
    """Every trainable tensor; bank contents are deliberately absent."""
    params = []
    for i, (w, b) in enumerate(state.backbone.layers):
        params.append((f"backbone.w{i}", w))
        params.append((f"backbone.b{i}", b))
    for e in state.experts:
        for j, (w, b) in enumerate(e.layers):
            params.append((f"expert{e.index}.w{j}", w))
            params.append((f"expert{e.index}.b{j}", b))
        params.append((f"expert{e.index}.theta", e.theta))
    params.append(("decoder.w", state.decoder_w))
    params.append(("decoder.b", state.decoder_b))
    return params


# -- forward -----------------------------------------------------------------


@dataclass
class ForwardPass:
    h: Tensor  # (B, dim) embeddings
    logits: Tensor  # (B, K)
    gate_full: Tensor  # (B, K) softmax over all experts
    active: np.ndarray  # (B, top_k) active expert indices
    gate_active: Tensor  # (B, K) renormalized weights, zero off the active set
    expert_outs: list[Tensor]  # K tensors of shape (B, dim)
    recon: Tensor  # (B, dim) combined reconstruction

    def expert_errors(self) -> np.ndarray:
        """(B, K) squared reconstruction errors per expert (values only)."""
        h = self.h.value
        return np.stack(
            [((h - out.value) ** 2).sum(axis=1) for out in self.expert_outs], axis=1
        )


def moe_forward(state: ModelState, h: Tensor) -> ForwardPass:
    """Route and reconstruct a batch of embeddings with the current banks."""
    logits = routing_logits_batch(
        h, state.banks, state.experts, squared=state.router_cfg.squared_routing
    )
    gate_full, active, gate_active = gate_batch(logits, state.router_cfg)
    outs = [expert_forward_rows(e, h) for e in state.experts]
    batch = h.value.shape[0]
    recon = None
    for i, out in enumerate(outs):
        weighted = ad.reshape(gate_active[:, i], (batch, 1)) * out
        recon = weighted if recon is None else recon + weighted
    return ForwardPass(
        h=h,
        logits=logits,
        gate_full=gate_full,
        active=active,
        gate_active=gate_active,
        expert_outs=outs,
        recon=recon,
    )


# -- loss terms ---------------------------------------------------------------


def _struct_loss_full(recon: Tensor, a_bb: np.ndarray) -> Tensor:
    logits = ad.matmul(recon, ad.transpose(recon))
    return ad.tmean(ad.bce_with_logits(logits, a_bb))


def _struct_loss_sampled(recon: Tensor, a_bb: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Unbiased estimate of the full-mode mean: all positive entries plus
    uniformly sampled zero entries, weighted by their population sizes."""
    b = a_bb.shape[0]
    logits = ad.matmul(recon, ad.transpose(recon))
    pos_r, pos_c = np.nonzero(a_bb)
    n_pos = pos_r.size
    n_zero = b * b - n_pos
    if n_zero == 0:
        return ad.tmean(ad.bce_with_logits(logits, a_bb))
    zero_flat = np.flatnonzero(a_bb == 0)
    n_samp = max(1, n_pos)
    samp = rng.choice(zero_flat, size=n_samp, replace=True)
    samp_r, samp_c = np.unravel_index(samp, (b, b))
    total = ad.tsum(ad.bce_with_logits(logits[(samp_r, samp_c)], 0.0)) * (n_zero / n_samp)
    if n_pos:
        total = total + ad.tsum(ad.bce_with_logits(logits[(pos_r, pos_c)], 1.0))
    return total * (1.0 / (b * b))


def _contrastive_loss(
    h: Tensor, a_bb: np.ndarray, tau_c: float, n_negatives: int, rng: np.random.Generator
) -> Tensor:
    b = a_bb.shape[0]
    has_pos = a_bb.sum(axis=1) > 0
    if not has_pos.any():
        return Tensor(np.array(0.0))
    norms = ad.clip(ad.l2norm(h, axis=1, keepdims=True), 1e-12, None)
    sims = ad.matmul(h / norms, ad.transpose(h / norms))
    expsim = ad.exp(sims * (1.0 / tau_c))
    neg_cols = rng.choice(b, size=min(n_negatives, b), replace=False)
    den_mask = np.array(a_bb, dtype=np.float64)
    den_mask[:, neg_cols] = 1.0
    num = ad.tsum(expsim * a_bb, axis=1)
    den = ad.tsum(expsim * den_mask, axis=1)
    keep = has_pos.astype(np.float64)
    num_safe = ad.blend(keep, num, 1.0)
    den_safe = ad.blend(keep, den, 1.0)
    per_node = (ad.log(den_safe) - ad.log(num_safe)) * keep
    return ad.tsum(per_node) * (1.0 / keep.sum())


def _gate_entropy_loss(logits: Tensor, temperature: float) -> Tensor:
    lg = ad.log_softmax(logits * (1.0 / temperature), axis=1)
    g = ad.exp(lg)
    return ad.tmean(ad.tsum(g * lg, axis=1))


def loss_terms(
    state: ModelState,
    X: np.ndarray,
    adj: sp.spmatrix,
    batch: np.ndarray,
    rng: np.random.Generator | None = None,
    hops: list[np.ndarray] | None = None,
    struct_mode: str | None = None,
) -> tuple[dict, ForwardPass]:
    """All five loss terms for one node batch, plus the forward pass.

    `adj` is the binary adjacency; hop matrices are derived from it unless
    passed in precomputed. `rng` drives negative sampling (contrastive
    denominator and sampled structure mode).
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise DataError("loss_terms needs a nonempty batch")
    rng = rng or np.random.default_rng(0)
    if hops is None:
        hops = propagate_hops(sym_norm_csr(adj), X, state.backbone.k_hops)
    cfg = state.train_cfg
    if struct_mode is None:
        struct_mode = cfg.struct_mode
    if struct_mode == "auto":
        struct_mode = "sampled" if X.shape[0] > cfg.struct_threshold else "full"

    h = encode_hops([hk[batch] for hk in hops], state.backbone)
    fwd = moe_forward(state, h)

    diff = h - fwd.recon
    l_embed = ad.tmean(ad.tsum(diff * diff, axis=1))

    decoded = ad.matmul(fwd.recon, state.decoder_w) + state.decoder_b
    fdiff = decoded - X[batch]
    l_feat = ad.tmean(ad.tsum(fdiff * fdiff, axis=1))

    a_bb = np.asarray(adj[batch][:, batch].todense(), dtype=np.float64)
    if struct_mode == "full":
        l_struct = _struct_loss_full(fwd.recon, a_bb)
    else:
        l_struct = _struct_loss_sampled(fwd.recon, a_bb, rng)

    l_con = _contrastive_loss(h, a_bb, cfg.tau_contrast, cfg.n_negatives, rng)
    l_gate = _gate_entropy_loss(fwd.logits, state.router_cfg.temperature)

    terms = {
        "L_embed": l_embed,
        "L_feat": l_feat,
        "L_struct": l_struct,
        "L_con": l_con,
        "L_gate": l_gate,
    }
    for name, term in terms.items():
        if not np.isfinite(term.value):
            raise NumericError(f"loss term {name} is non-finite")
    return terms, fwd


def total_loss(terms, lambdas):
    """Weighted sum of the five loss terms (tensors or plain floats)."""
    values = [terms[name] for name in LOSS_NAMES] if isinstance(terms, dict) else list(terms)
    if len(values) != 5:
        raise DataError("total_loss expects five terms")
    if any(isinstance(v, Tensor) for v in values):
        out = None
        for lam, v in zip(lambdas, values):
            contrib = ad.as_tensor(v) * float(lam)
            out = contrib if out is None else out + contrib
        return out
    return float(sum(lam * v for lam, v in zip(lambdas, values)))


# -- optimizer ----------------------------------------------------------------


def adam_step(
    params: list[tuple[str, Tensor]],
    adam_m: dict,
    adam_v: dict,
    t: int,
    lr: float,
    weight_decay: float,
) -> None:
    """One Adam update (beta1=0.9, beta2=0.999, bias-corrected); weight decay
    enters as an additive wd*theta term on the gradient."""
    if t < 1:
        raise DataError("Adam step count starts at 1")
    for name, p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.value)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        grad = grad + weight_decay * p.value
        m = adam_m.setdefault(name, np.zeros_like(p.value))
        v = adam_v.setdefault(name, np.zeros_like(p.value))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# -- training loop ------------------------------------------------------------


@dataclass
class PreparedGraph:
    graph: Graph
    adj: sp.csr_matrix
    aligned: np.ndarray
    hops: list[np.ndarray]


def prepare_graph(g: Graph, align_cfg: AlignConfig, k_hops: int) -> PreparedGraph:
    adj = g.adjacency()
    adj_norm = sym_norm_csr(adj)
    aligned = align_features(g, align_cfg, adj_norm=adj_norm)
    hops = propagate_hops(adj_norm, aligned.matrix, k_hops)
    return PreparedGraph(graph=g, adj=adj, aligned=aligned.matrix, hops=hops)


def train(
    graphs: list[Graph],
    cfg: TrainConfig | None = None,
    align_cfg: AlignConfig | None = None,
    router_cfg: RouterConfig | None = None,
    log_path=None,
) -> ModelState:
    """Algorithm: per epoch, per source graph, per seeded node batch:
    encode -> route -> reconstruct -> losses -> Adam -> bank update."""
    cfg = cfg or TrainConfig()
    align_cfg = align_cfg or AlignConfig()
    router_cfg = router_cfg or RouterConfig()
    if not graphs:
        raise DataError("need at least one source graph")

    state = init_state(align_cfg, router_cfg, cfg)
    prepared = [prepare_graph(g, align_cfg, cfg.k_hops) for g in graphs]
    params = named_parameters(state)
    rng = np.random.default_rng(cfg.seed)

    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            for g_idx, pg in enumerate(prepared):
                n = pg.graph.num_nodes
                perm = rng.permutation(n)
                for b_idx, start in enumerate(range(0, n, cfg.batch_size)):
                    batch = perm[start : start + cfg.batch_size]
                    if batch.size < 2:
                        continue  # a singleton batch has no pairwise structure
                    try:
                        terms, fwd = loss_terms(
                            state, pg.aligned, pg.adj, batch, rng=rng, hops=pg.hops
                        )
                        loss = total_loss(terms, cfg.lambdas)
                    except NumericError as err:
                        raise NumericError(
                            f"epoch {epoch}, graph {g_idx}, batch {b_idx}: {err}"
                        ) from err
                    for _, p in params:
                        p.zero_grad()
                    loss.backward()
                    state.adam_t += 1
                    adam_step(
                        params,
                        state.adam_m,
                        state.adam_v,
                        state.adam_t,
                        cfg.learning_rate,
                        cfg.weight_decay,
                    )
                    _assert_curvature_signs(state)
                    update_banks(
                        state.banks,
                        fwd.h.value,
                        fwd.active,
                        fwd.expert_errors(),
                        epoch,
                        router_cfg,
                    )
                    if log_fh is not None:
                        record = {
                            "epoch": epoch,
                            "graph": g_idx,
                            "batch": b_idx,
                            **{k: float(v.value) for k, v in terms.items()},
                            "total": float(loss.value),
                            "bank_sizes": [len(b) for b in state.banks],
                        }
                        log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


def _assert_curvature_signs(state: ModelState) -> None:
    for e in state.experts:
        if np.sign(curvature_of(e)) != np.sign(e.kappa_init):
            raise NumericError(f"expert {e.index} curvature changed sign")


# -- gradient oracle -----------------------------------------------------------


def grad_check(
    state: ModelState,
    X: np.ndarray,
    adj: sp.spmatrix,
    batch: np.ndarray,
    step: float = 1e-5,
    sample_seed: int = 0,
    grad_scale: float = 1.0,
) -> dict[str, float]:
    """Compare analytic gradients of the total loss against central finite
    differences, parameter by parameter; returns max relative error per
    parameter group. `grad_scale` != 1 injects a deliberate fault so tests
    can confirm the check catches bad gradients."""
    params = named_parameters(state)
    lambdas = state.train_cfg.lambdas

    def evaluate() -> float:
        rng = np.random.default_rng(sample_seed)
        terms, _ = loss_terms(state, X, adj, batch, rng=rng)
        return float(total_loss(terms, lambdas).value)

    rng = np.random.default_rng(sample_seed)
    terms, _ = loss_terms(state, X, adj, batch, rng=rng)
    loss = total_loss(terms, lambdas)
    for _, p in params:
        p.zero_grad()
    loss.backward()

    worst: dict[str, float] = {}
    for name, p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.value)) * grad_scale
        flat = p.value.reshape(-1)
        a_flat = analytic.reshape(-1)
        group = _param_group(name)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = evaluate()
            flat[j] = orig - step
            down = evaluate()
            flat[j] = orig
            numeric = (up - down) / (2.0 * step)
            rel = abs(a_flat[j] - numeric) / max(abs(a_flat[j]), abs(numeric), 1e-6)
            worst[group] = max(worst.get(group, 0.0), rel)
    worst["overall"] = max(worst.values())
    return worst


def _param_group(name: str) -> str:
    if name.startswith("backbone"):
        return "backbone"
    if name.startswith("decoder"):
        return "decoder"
    if name.endswith("theta"):
        return "expert_curvature"
    return "expert_layers"


# -- checkpoint ----------------------------------------------------------------


def _layers_to_json(layers) -> list:
    return [{"w": w.value.tolist(), "b": b.value.tolist()} for w, b in layers]


def _layers_from_json(items) -> list:
    return [
        (Tensor(np.array(it["w"]), requires_grad=True), Tensor(np.array(it["b"]), requires_grad=True))
        for it in items
    ]


def state_to_dict(state: ModelState) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "align": state.align_cfg.to_dict(),
        "router": state.router_cfg.to_dict(),
        "train": state.train_cfg.to_dict(),
        "backbone": {
            "k_hops": state.backbone.k_hops,
            "layers": _layers_to_json(state.backbone.layers),
        },
        "experts": [
            {
                "index": e.index,
                "kappa_init": e.kappa_init,
                "theta": float(e.theta.value),
                "dim": e.dim,
                "layers": _layers_to_json(e.layers),
            }
            for e in state.experts
        ],
        "decoder": {"w": state.decoder_w.value.tolist(), "b": state.decoder_b.value.tolist()},
        "banks": [
            {
                "expert_index": b.expert_index,
                "capacity": b.capacity,
                "entries": [
                    {"embedding": e.embedding.tolist(), "quality": e.quality} for e in b.entries
                ],
                "stats": b.stats,
            }
            for b in state.banks
        ],
        "adam": {
            "t": state.adam_t,
            "m": {k: v.tolist() for k, v in state.adam_m.items()},
            "v": {k: v.tolist() for k, v in state.adam_v.items()},
        },
    }


def state_from_dict(doc: dict) -> ModelState:
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint format_version {version!r}")
    align_cfg = AlignConfig.from_dict(doc["align"])
    router_cfg = RouterConfig.from_dict(doc["router"])
    train_cfg = TrainConfig.from_dict(doc["train"])
    backbone = BackboneParams(
        layers=_layers_from_json(doc["backbone"]["layers"]), k_hops=int(doc["backbone"]["k_hops"])
    )
    experts = []
    for it in doc["experts"]:
        experts.append(
            ExpertModel(
                index=int(it["index"]),
                kappa_init=float(it["kappa_init"]),
                theta=Tensor(np.array(it["theta"]), requires_grad=True),
                layers=_layers_from_json(it["layers"]),
                dim=int(it["dim"]),
            )
        )
    banks = []
    for it in doc["banks"]:
        bank = MemoryBank(expert_index=int(it["expert_index"]), capacity=int(it["capacity"]))
        bank.entries = [
            BankEntry(embedding=np.array(e["embedding"]), quality=float(e["quality"]))
            for e in it["entries"]
        ]
        bank.stats = dict(it.get("stats", {}))
        banks.append(bank)
    state = ModelState(
        backbone=backbone,
        experts=experts,
        decoder_w=Tensor(np.array(doc["decoder"]["w"]), requires_grad=True),
        decoder_b=Tensor(np.array(doc["decoder"]["b"]), requires_grad=True),
        banks=banks,
        align_cfg=align_cfg,
        router_cfg=router_cfg,
        train_cfg=train_cfg,
        adam_t=int(doc["adam"]["t"]),
        adam_m={k: np.array(v) for k, v in doc["adam"]["m"].items()},
        adam_v={k: np.array(v) for k, v in doc["adam"]["v"].items()},
    )
    validate_state(state)
    return state


def validate_state(state: ModelState) -> None:
    d = state.align_cfg.total_dim
    if state.backbone.in_dim != d:
        raise DataError(
            f"checkpoint inconsistent: encoder input width {state.backbone.in_dim} "
            f"!= aligned feature width D={d}"
        )
    dim = state.backbone.embedding_dim
    for e in state.experts:
        if e.dim != dim:
            raise DataError(
                f"checkpoint inconsistent: expert {e.index} width {e.dim} != embedding width {dim}"
            )
    if state.decoder_w.value.shape != (dim, d):
        raise DataError(
            f"checkpoint inconsistent: decoder shape {state.decoder_w.value.shape} "
            f"!= ({dim}, {d})"
        )


def save_checkpoint(state: ModelState, path) -> None:
    with open(path, "w") as fh:
        json.dump(state_to_dict(state), fh)
        fh.write("\n")


def load_checkpoint(path) -> ModelState:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    with open(p) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise DataError(f"checkpoint is not valid JSON: {err}") from None
    return state_from_dict(doc)
