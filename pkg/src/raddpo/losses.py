"""Training objectives: multi-label SFT, list-wise reference-free contrast with
prefix detachment and similarity-based penalty weights, plus the pairwise
DPO / SimPO baselines.

Sequence-level inputs are tensors of summed candidate log-probabilities.
Everything is vectorized over a leading session axis where that is natural.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    lam: float = 12.0
    n_negatives: int = 3
    enable_tlgd: bool = True
    enable_rdrw: bool = True
    enable_multilabel_sft: bool = True
    sft_weight: float = 1.0
    stats_capacity: int = 4096
    quartile_refresh: int = 256

    def __post_init__(self):
        if self.beta <= 0 or self.lam <= 0:
            raise ValueError("beta and lam must be positive")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")


# ----------------------------------------------------------------------------
# SFT

def sft_loss(pos_logps: Tensor) -> Tensor:
    """Negative mean of the positives' sequence log-likelihoods (no length norm)."""
    if pos_logps.data.size == 0:
        raise ValueError("empty positive set")
    return -ad.mean(pos_logps)


def masked_sft_loss(cand_logps: Tensor, pos_mask: np.ndarray) -> Tensor:
    """Per-session SFT over a (B, M) candidate grid; ``pos_mask`` picks positives."""
    pos_mask = np.asarray(pos_mask, dtype=np.float64)
    counts = pos_mask.sum(1)
    if np.any(counts == 0):
        raise ValueError("session without positives")
    return -(cand_logps * pos_mask).sum(axis=1) / counts


# ----------------------------------------------------------------------------
# prefix detachment

def longest_common_prefix(a: Sequence[int], b: Sequence[int], eos_id: int | None = None) -> int:
    if eos_id is not None:
        a = [t for t in a if t != eos_id]
        b = [t for t in b if t != eos_id]
    k = 0
    for x, y in zip(a, b):
        if x != y:
            break
        k += 1
    return k


def diff_indicator(length: int, k: int) -> np.ndarray:
    """1 for tokens after the shared prefix, 0 for tokens t <= k (1-indexed)."""
    return (np.arange(1, length + 1) > k).astype(np.float64)


def detached_neg_logprob(token_logps: Tensor, k: int) -> Tensor:
    """Sequence log-likelihood whose first ``k`` tokens pass no gradient."""
    keep = diff_indicator(token_logps.shape[-1], k).astype(bool)
    mixed = ad.where(keep, token_logps, ad.stop_gradient(token_logps))
    return mixed.sum(axis=-1)


# ----------------------------------------------------------------------------
# rewards and weights

def implicit_reward(logp: Tensor, length) -> Tensor:
    length = np.asarray(length, dtype=np.float64)
    if np.any(length < 1):
        raise ValueError("candidate length must be >= 1")
    return logp / length


def cosine_sim(h_w: np.ndarray, h_l: np.ndarray) -> np.ndarray:
    """Cosine along the last axis; a zero-norm side yields 0 and a warning."""
    h_w, h_l = np.asarray(h_w, dtype=np.float64), np.asarray(h_l, dtype=np.float64)
    nw = np.linalg.norm(h_w, axis=-1)
    nl = np.linalg.norm(h_l, axis=-1)
    denom = nw * nl
    zero = denom == 0
    if np.any(zero):
        log.warning("zero-norm hidden state in cosine similarity; using 0")
    out = np.where(zero, 0.0, (h_w * h_l).sum(-1) / np.where(zero, 1.0, denom))
    return np.clip(out, -1.0, 1.0)


def penalty_weight(sim, q25: float, q50: float, q75: float, lam: float = 12.0) -> np.ndarray:
    """Full penalty for clearly distinct negatives, half for the most similar ones."""
    sim = np.asarray(sim, dtype=np.float64)
    mid = 0.5 + 0.5 / (1.0 + np.exp(lam * (sim - q50)))
    return np.where(sim < q25, 1.0, np.where(sim > q75, 0.5, mid))


@dataclass
class RewardStats:
    """Ring buffer of pair similarities with quartile anchors.

    Anchors are first computed when the buffer fills, then every
    ``refresh_every`` updates.  Until then weights are forced to 1.
    """

    capacity: int = 4096
    refresh_every: int = 256
    buffer: np.ndarray = field(default=None, repr=False)
    count: int = 0
    warm: bool = False
    q25: float = float("nan")
    q50: float = float("nan")
    q75: float = float("nan")
    updates_since_refresh: int = 0

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = np.zeros(self.capacity)

    @property
    def size(self) -> int:
        return min(self.count, self.capacity)

    def contents(self) -> np.ndarray:
        return self.buffer[:self.size].copy()

    def refresh(self) -> None:
        self.q25, self.q50, self.q75 = (float(q) for q in np.percentile(self.contents(), [25, 50, 75]))
        self.updates_since_refresh = 0

    def update(self, sims) -> "RewardStats":
        for s in np.ravel(sims):
            self.buffer[self.count % self.capacity] = s
            self.count += 1
        if not self.warm:
            if self.count >= self.capacity:
                self.warm = True
                self.refresh()
        else:
            self.updates_since_refresh += 1
            if self.updates_since_refresh >= self.refresh_every:
                self.refresh()
        return self

    def weights(self, sims, lam: float = 12.0) -> np.ndarray:
        sims = np.asarray(sims, dtype=np.float64)
        if not self.warm:
            return np.ones_like(sims)
        return penalty_weight(sims, self.q25, self.q50, self.q75, lam)

    def snapshot(self) -> dict:
        return {"count": self.count, "warm": self.warm, "q25": self.q25, "q50": self.q50, "q75": self.q75}


def update_stats(stats: RewardStats, sims) -> RewardStats:
    return stats.update(sims)


# ----------------------------------------------------------------------------
# preference losses

def pl_loss(r_w: Tensor, r_neg: Tensor, weights=None, beta: float = 1.0) -> Tensor:
    """-log sigmoid(beta * logsumexp_j w_j (r_w - r_j)), per session.

    ``r_w`` is (B,) or scalar, ``r_neg`` (B, n) or (n,).
    """
    if r_neg.shape[-1] == 0:
        raise ValueError("empty negative set")
    gaps = ad.reshape(r_w, r_w.shape + (1,)) - r_neg
    if weights is not None:
        gaps = gaps * np.asarray(weights, dtype=np.float64)
    return -ad.log_sigmoid(ad.logsumexp(gaps, axis=-1) * beta)


def dpo_pair_loss(pi_w: Tensor, pi_l: Tensor, ref_w, ref_l, beta: float = 0.1) -> Tensor:
    if ref_w is None or ref_l is None:
        raise ValueError("DPO needs reference log-probabilities")
    ref_margin = np.asarray(getattr(ref_w, "data", ref_w)) - np.asarray(getattr(ref_l, "data", ref_l))
    return -ad.log_sigmoid(((pi_w - pi_l) - ref_margin) * beta)


def simpo_pair_loss(r_w: Tensor, r_l: Tensor, beta: float = 2.0, gamma: float = 0.0) -> Tensor:
    return -ad.log_sigmoid((r_w - r_l) * beta - gamma)


# ----------------------------------------------------------------------------
# combined objective on a packed batch

@dataclass
class SessionLayout:
    """Where each session's candidates sit in the packed (B, M) grid."""

    pos_mask: np.ndarray     # (B, M) bool
    anchor: np.ndarray       # (B,) segment index (0-based) of the top-tier positive
    negatives: np.ndarray    # (B, n) segment indices of negatives
    lengths: np.ndarray      # (B, M) candidate token counts incl. EOS
    prefix_k: np.ndarray     # (B, n) shared-prefix length of each negative vs the anchor


@dataclass
class LossOutput:
    loss: Tensor
    sft: float
    pl: float
    sims: np.ndarray
    weights: np.ndarray


def tlgd_token_mask(segment_ids: np.ndarray, target_mask: np.ndarray, layout: SessionLayout) -> np.ndarray:
    """(B, T) True on negative-candidate tokens inside the shared prefix."""
    B, T = segment_ids.shape
    detach = np.zeros((B, T), dtype=bool)
    for b in range(B):
        for j, seg in enumerate(layout.negatives[b]):
            k = int(layout.prefix_k[b, j])
            if k == 0:
                continue
            idx = np.flatnonzero((segment_ids[b] == seg + 1) & target_mask[b])
            detach[b, idx[:k]] = True
    return detach


def total_loss(token_logp: Tensor, seg_matrix: np.ndarray, detach_mask: np.ndarray,
               eos_h: np.ndarray, layout: SessionLayout, cfg: LossConfig,
               stats: RewardStats | None) -> LossOutput:
    """SFT over positives plus the weighted list-wise contrast, averaged over sessions.

    ``token_logp`` is (B, T), ``seg_matrix`` (B, T, M), ``eos_h`` (B, M, D).
    Stats are read before being updated with this batch's similarities.
    """
    B, T = token_logp.shape
    rows = np.arange(B)
    cand = (ad.reshape(token_logp, (B, 1, T)) @ seg_matrix).reshape(B, seg_matrix.shape[-1])
    if cfg.enable_tlgd:
        mixed = ad.where(detach_mask, ad.stop_gradient(token_logp), token_logp)
        cand_neg_src = (ad.reshape(mixed, (B, 1, T)) @ seg_matrix).reshape(B, seg_matrix.shape[-1])
    else:
        cand_neg_src = cand

    if cfg.enable_multilabel_sft:
        sft = masked_sft_loss(cand, layout.pos_mask)
    else:
        sft = -cand[rows, layout.anchor]

    r_w = implicit_reward(cand[rows, layout.anchor], layout.lengths[rows, layout.anchor])
    neg_rows = rows[:, None]
    r_neg = implicit_reward(cand_neg_src[neg_rows, layout.negatives], layout.lengths[neg_rows, layout.negatives])

    sims = cosine_sim(eos_h[rows, layout.anchor][:, None, :], eos_h[neg_rows, layout.negatives])
    if cfg.enable_rdrw and stats is not None:
        weights = stats.weights(sims, cfg.lam)
    else:
        weights = np.ones_like(sims)
    pl = pl_loss(r_w, r_neg, weights, cfg.beta)
    if stats is not None:
        stats.update(sims)

    loss = ad.mean(sft * cfg.sft_weight + pl)
    return LossOutput(loss, float(sft.data.mean()), float(pl.data.mean()), sims, weights)
