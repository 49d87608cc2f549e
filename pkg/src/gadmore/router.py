"""Memory-based dynamic routing and the expert memory-bank lifecycle.

Routing logits are negative minimum manifold distances between a node's
embedding and the prototypes an expert has reconstructed well in the past
(both lifted onto the expert's manifold). Banks fill only after a
cold-start period, gated by a quality threshold that rises linearly over
training, with a percentile fallback for uniformly bad batches, a
hysteresis margin on replacements, and a per-update insertion cap.

Stored prototypes are plain arrays: gradients of routing logits flow into
the live embeddings and the expert curvatures, never into bank contents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .errors import DataError
from .experts import ExpertModel, curvature_tensor, expert_forward


@dataclass(frozen=True)
class RouterConfig:
    temperature: float = 0.7
    top_k: int = 2
    capacity: int = 64
    tau_min: float = 0.5
    tau_max: float = 0.9
    e_cold: int = 5
    e_total: int = 40
    hysteresis: float = 0.05
    update_cap: int = 8
    fallback_percentile: float = 90.0
    epsilon: float = 1e-8
    squared_routing: bool = False

    def __post_init__(self):
        if not (0.0 < self.tau_min <= self.tau_max <= 1.0):
            raise DataError("need 0 < tau_min <= tau_max <= 1")
        if self.temperature <= 0.0:
            raise DataError("temperature must be positive")
        if self.top_k < 1:
            raise DataError("top_k must be >= 1")
        if not (0 <= self.e_cold < self.e_total):
            raise DataError("need 0 <= e_cold < e_total")
        if self.capacity < 1 or self.update_cap < 1:
            raise DataError("capacity and update_cap must be >= 1")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_k": self.top_k,
            "capacity": self.capacity,
            "tau_min": self.tau_min,
            "tau_max": self.tau_max,
            "e_cold": self.e_cold,
            "e_total": self.e_total,
            "hysteresis": self.hysteresis,
            "update_cap": self.update_cap,
            "fallback_percentile": self.fallback_percentile,
            "epsilon": self.epsilon,
            "squared_routing": self.squared_routing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouterConfig":
        defaults = cls()
        return cls(**{k: d.get(k, getattr(defaults, k)) for k in defaults.to_dict()})


@dataclass
class BankEntry:
    embedding: np.ndarray
    quality: float


@dataclass
class MemoryBank:
    expert_index: int
    capacity: int
    entries: list[BankEntry] = field(default_factory=list)
    stats: dict = field(default_factory=lambda: {"appended": 0, "replaced": 0, "rejected": 0})

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def qualities(self) -> np.ndarray:
        return np.array([e.quality for e in self.entries])

    def embedding_matrix(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries], axis=0)


@dataclass
class GateDecision:
    logits: np.ndarray  # (K,)
    weights: np.ndarray  # (K,) full softmax
    active: np.ndarray  # (top_k,) expert indices, ascending
    active_weights: np.ndarray  # (top_k,) renormalized over the active set


# -- routing logits ---------------------------------------------------------


def routing_logits_batch(
    H, banks: list[MemoryBank], experts: list[ExpertModel], squared: bool = False
) -> Tensor:
    """(batch, K) logits; empty banks contribute an all-zero column."""
    H = ad.as_tensor(H)
    n = H.value.shape[0]
    cols = []
    for bank, expert in zip(banks, experts):
        if len(bank) == 0:
            cols.append(Tensor(np.zeros((n, 1))))
            continue
        kappa = curvature_tensor(expert)
        points = geo.exp_origin_rows(H, kappa, eps_boundary=expert.eps_boundary)
        protos = geo.exp_origin_rows(
            bank.embedding_matrix(), kappa, eps_boundary=expert.eps_boundary
        )
        dmat = geo.dist_matrix(points, protos, kappa)
        nearest = ad.amin(dmat, axis=1)
        if squared:
            nearest = nearest * nearest
        cols.append(ad.reshape(nearest * -1.0, (n, 1)))
    return ad.concat(cols, axis=1)


def routing_logits(
    h: np.ndarray, banks: list[MemoryBank], experts: list[ExpertModel], squared: bool = False
) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return routing_logits_batch(h[None, :], banks, experts, squared=squared).value[0]


# -- gating -------------------------------------------------------------------


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def top_k_indices(s: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits, ties to the lower index; ascending order."""
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k])


def gate(s: np.ndarray, cfg: RouterConfig) -> GateDecision:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise DataError("gate expects a flat logit vector")
    if cfg.top_k > s.shape[0]:
        raise DataError(f"top_k={cfg.top_k} exceeds K={s.shape[0]}")
    z = s / cfg.temperature
    weights = _softmax_np(z)
    active = top_k_indices(s, cfg.top_k)
    active_weights = _softmax_np(z[active])
    return GateDecision(logits=s, weights=weights, active=active, active_weights=active_weights)


def gate_batch(s: Tensor, cfg: RouterConfig) -> tuple[Tensor, np.ndarray, Tensor]:
    """Differentiable batched gating.

    Returns (full weights (batch, K), active indices (batch, top_k),
    renormalized weights as a masked (batch, K) tensor that is zero on
    inactive experts).
    """
    z = s / cfg.temperature
    g = ad.softmax(z, axis=1)
    batch, k_experts = s.value.shape
    order = np.argsort(-s.value, axis=1, kind="stable")
    active = np.sort(order[:, : cfg.top_k], axis=1)
    mask = np.zeros((batch, k_experts))
    mask[np.arange(batch)[:, None], active] = 1.0
    shift = np.where(mask > 0, z.value, -np.inf).max(axis=1, keepdims=True)
    e_masked = ad.exp(z - shift) * mask
    w = e_masked / ad.tsum(e_masked, axis=1, keepdims=True)
    return g, active, w


def moe_reconstruct(
    h: np.ndarray, decision: GateDecision, experts: list[ExpertModel]
) -> np.ndarray:
    """Renormalized top-k combination of expert reconstructions."""
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros_like(h)
    for idx, weight in zip(decision.active, decision.active_weights):
        out += weight * expert_forward(experts[idx], h)
    return out


# -- memory bank lifecycle ----------------------------------------------------


def quality_scores(recon_errors: np.ndarray, epsilon: float) -> np.ndarray:
    """Batch-relative quality in (0, 1]; the batch-minimum error scores 1."""
    errors = np.asarray(recon_errors, dtype=np.float64)
    if errors.size == 0:
        raise DataError("quality_scores needs a nonempty batch")
    lo, hi = errors.min(), errors.max()
    return 1.0 - (errors - lo) / (hi - lo + epsilon)


def quality_threshold(epoch: int, cfg: RouterConfig) -> float:
    """Admission threshold, linear from tau_min at e_cold to tau_max at e_total."""
    frac = (epoch - cfg.e_cold) / (cfg.e_total - cfg.e_cold)
    return cfg.tau_min + (cfg.tau_max - cfg.tau_min) * min(1.0, max(0.0, frac))


def update_banks(
    banks: list[MemoryBank],
    embeddings: np.ndarray,
    active_sets: np.ndarray,
    recon_errors: np.ndarray,
    epoch: int,
    cfg: RouterConfig,
) -> list[dict]:
    """Run one post-batch bank update; returns a per-expert log.

    `embeddings` is (batch, dim); `active_sets` is (batch, top_k) expert
    indices from gating; `recon_errors` is (batch, K) per-expert squared
    reconstruction errors. No-op during the cold-start epochs.
    """
    if epoch < cfg.e_cold:
        return [
            {"expert": b.expert_index, "cold_start": True, "appended": 0, "replaced": 0, "rejected": 0}
            for b in banks
        ]
    embeddings = np.asarray(embeddings, dtype=np.float64)
    active_sets = np.asarray(active_sets)
    recon_errors = np.asarray(recon_errors, dtype=np.float64)
    tau_q = quality_threshold(epoch, cfg)
    logs = []
    for bank in banks:
        i = bank.expert_index
        q_all = quality_scores(recon_errors[:, i], cfg.epsilon)
        cand = np.where((active_sets == i).any(axis=1))[0]
        entry = {
            "expert": i,
            "cold_start": False,
            "candidates": int(cand.size),
            "fallback": False,
            "appended": 0,
            "replaced": 0,
            "rejected": 0,
        }
        if cand.size:
            q_cand = q_all[cand]
            keep = q_cand >= tau_q
            if not keep.any():
                entry["fallback"] = True
                keep = q_cand >= np.percentile(q_cand, cfg.fallback_percentile)
            survivors = cand[keep]
            # best quality first; ties broken by node position for determinism
            order = np.lexsort((survivors, -q_all[survivors]))
            survivors = survivors[order][: cfg.update_cap]
            for v in survivors:
                _insert(bank, embeddings[v].copy(), float(q_all[v]), cfg.hysteresis, entry)
        bank.stats["appended"] += entry["appended"]
        bank.stats["replaced"] += entry["replaced"]
        bank.stats["rejected"] += entry["rejected"]
        logs.append(entry)
    return logs


def _insert(bank: MemoryBank, embedding: np.ndarray, quality: float, margin: float, log: dict):
    if len(bank.entries) < bank.capacity:
        bank.entries.append(BankEntry(embedding=embedding, quality=quality))
        log["appended"] += 1
        return
    worst = min(range(len(bank.entries)), key=lambda j: (bank.entries[j].quality, j))
    if quality >= bank.entries[worst].quality + margin:
        bank.entries[worst] = BankEntry(embedding=embedding, quality=quality)
        log["replaced"] += 1
    else:
        log["rejected"] += 1
