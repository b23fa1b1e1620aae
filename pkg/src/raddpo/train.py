"""Two-stage training: SFT on positive paths, then preference alignment."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .datagen import Session, pack_session, split_for_pairwise
from .model import (ModelConfig, Params, clone_params, collate, eos_hidden, forward,
                    candidate_logprobs, pack, save_checkpoint)
from .sid import Vocab

log = logging.getLogger(__name__)

METHODS = ("rad_dpo", "dpo", "simpo", "sft_only")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "align"
    method: str = "rad_dpo"
    lr: float = 3e-4
    batch_size: int = 16
    steps: int = 3000
    seed: int = 0
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    dpo_beta: float = 0.1
    simpo_beta: float = 2.0
    simpo_gamma: float = 0.0
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    reference: str | None = None

    def __post_init__(self):
        if self.stage not in ("sft", "align"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("lr, batch_size and steps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = L.LossConfig(**d["loss"])
        return cls(**d)


class Adam:
    def __init__(self, params: Params, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Index batches from successive seeded permutations of ``range(n)``."""
    rng = np.random.default_rng([seed, 777])
    out, perm, pos = [], rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm, pos = rng.permutation(n), 0
        out.append(perm[pos:pos + batch_size])
        pos += batch_size
    return out


# ----------------------------------------------------------------------------
# per-method step losses

def sft_step_loss(params: Params, mcfg: ModelConfig, vocab: Vocab, sessions: Sequence[Session]) -> tuple[ad.Tensor, dict]:
    rows = [pack(s.prompt(vocab), [vocab.candidate(sid) for sid, _ in s.positives]) for s in sessions]
    batch = collate(rows)
    out = forward(params, mcfg, batch)
    cand = candidate_logprobs(out, batch)
    pos_mask = batch.segment_matrix().sum(1) > 0
    loss = ad.mean(L.masked_sft_loss(cand, pos_mask))
    return loss, {"sft": float(loss.data)}


def session_layout(sessions: Sequence[Session], batch, vocab: Vocab) -> L.SessionLayout:
    B, M = len(sessions), batch.n_segments
    pos_mask = np.zeros((B, M), dtype=bool)
    n = len(sessions[0].negatives)
    negs = np.zeros((B, n), dtype=np.int64)
    prefix_k = np.zeros((B, n), dtype=np.int64)
    anchor = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(sessions):
        P = len(s.positives)
        pos_mask[b, :P] = True
        anchor[b] = s.anchor_index
        negs[b] = P + np.arange(n)
        a_tok = vocab.candidate(s.anchor)
        for j, (sid, _) in enumerate(s.negatives):
            prefix_k[b, j] = L.longest_common_prefix(a_tok, vocab.candidate(sid), eos_id=vocab.EOS)
    lengths = batch.segment_matrix().sum(1)
    return L.SessionLayout(pos_mask, anchor, negs, lengths, prefix_k)


def rad_dpo_step_loss(params, mcfg, vocab, sessions, loss_cfg: L.LossConfig, stats: L.RewardStats):
    batch = collate([pack_session(s, vocab) for s in sessions])
    out = forward(params, mcfg, batch)
    layout = session_layout(sessions, batch, vocab)
    detach = L.tlgd_token_mask(batch.segment_ids, batch.target_mask, layout)
    h = eos_hidden(out, batch, vocab.EOS)
    res = L.total_loss(out.token_logp, batch.segment_matrix(), detach, h, layout, loss_cfg, stats)
    info = {"sft": res.sft, "pl": res.pl, "w_mean": float(res.weights.mean()),
            "w_full": float((res.weights == 1.0).mean()), "w_half": float((res.weights == 0.5).mean()),
            "sim_mean": float(res.sims.mean())}
    return res.loss, info


def pair_batch(vocab: Vocab, sessions: Sequence[Session]):
    """One row per (x, y_w, y_l) triple: the unshared pairwise layout."""
    triples = split_for_pairwise(sessions)
    return collate([pack(s.prompt(vocab), [vocab.candidate(w), vocab.candidate(l)]) for s, w, l in triples])


def pair_logps(params, mcfg, vocab: Vocab, sessions: Sequence[Session]):
    """Log-probs and lengths for every decomposed pair, as flat (P,) vectors.

    Computed from one packed forward per session; by candidate independence
    each value equals what a separate forward on ``pair_batch`` gives.
    """
    batch = collate([pack_session(s, vocab) for s in sessions])
    out = forward(params, mcfg, batch)
    cand = candidate_logprobs(out, batch)
    lengths = batch.segment_matrix().sum(1)
    w_idx, l_idx, rows = [], [], []
    for b, s in enumerate(sessions):
        P = len(s.positives)
        for j in range(len(s.negatives)):
            rows.append(b)
            w_idx.append(s.anchor_index)
            l_idx.append(P + j)
    rows, w_idx, l_idx = np.array(rows), np.array(w_idx), np.array(l_idx)
    return cand[rows, w_idx], cand[rows, l_idx], lengths[rows, w_idx], lengths[rows, l_idx]


def simpo_step_loss(params, mcfg, vocab, sessions, cfg: TrainConfig):
    lw, ll, nw, nl = pair_logps(params, mcfg, vocab, sessions)
    r_w = L.implicit_reward(lw, nw)
    r_l = L.implicit_reward(ll, nl)
    loss = ad.mean(L.simpo_pair_loss(r_w, r_l, cfg.simpo_beta, cfg.simpo_gamma))
    return loss, {"pl": float(loss.data)}


def dpo_step_loss(params, ref_params, mcfg, vocab, sessions, cfg: TrainConfig):
    if ref_params is None:
        raise ValueError("DPO needs a reference model")
    lw, ll, _, _ = pair_logps(params, mcfg, vocab, sessions)
    rw, rl, _, _ = pair_logps(ref_params, mcfg, vocab, sessions)
    loss = ad.mean(L.dpo_pair_loss(lw, ll, rw.data, rl.data, cfg.dpo_beta))
    return loss, {"pl": float(loss.data)}


# ----------------------------------------------------------------------------
# loops

@dataclass
class TrainResult:
    params: Params
    curve: list[dict]
    stats_trace: list[dict] = field(default_factory=list)
    n_param_sets: int = 1
    stats: L.RewardStats | None = None


def _check_finite(step: int, loss: ad.Tensor) -> None:
    v = float(loss.data)
    if not math.isfinite(v):
        raise TrainingDiverged(step, v)


def _optimize(params: Params, cfg: TrainConfig, n_items: int, step_loss, ckpt_dir: Path | None,
              mcfg: ModelConfig, tag: str) -> list[dict]:
    opt = Adam(params, cfg.lr)
    curve = []
    for step, idx in enumerate(batch_order(n_items, cfg.batch_size, cfg.steps, cfg.seed), start=1):
        with ad.Tape():
            loss, info = step_loss(idx)
            _check_finite(step, loss)
            g = ad.backward(loss)
        grads = {k: g[p] for k, p in params.items()}
        gnorm = clip_global_norm(grads, cfg.grad_clip)
        opt.step(params, grads)
        curve.append({"step": step, "loss": float(loss.data), "grad_norm": gnorm, **info})
        if ckpt_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"{tag}-step{step:06d}.npz", params, mcfg, {"step": step})
    return curve


def run_sft(cfg: TrainConfig, sessions: Sequence[Session], vocab: Vocab, mcfg: ModelConfig,
            params: Params, ckpt_dir: Path | None = None) -> TrainResult:
    params = clone_params(params)
    curve = _optimize(params, cfg, len(sessions),
                      lambda idx: sft_step_loss(params, mcfg, vocab, [sessions[i] for i in idx]),
                      ckpt_dir, mcfg, "sft")
    return TrainResult(params, curve)


def run_alignment(cfg: TrainConfig, sessions: Sequence[Session], vocab: Vocab, mcfg: ModelConfig,
                  sft_params: Params, ckpt_dir: Path | None = None) -> TrainResult:
    """Align from an SFT checkpoint.  Only ``dpo`` keeps a second, frozen parameter set."""
    params = clone_params(sft_params)
    n_sets = 1
    ref = None
    stats = None
    trace: list[dict] = []
    if cfg.method == "dpo":
        ref = clone_params(sft_params, trainable=False)
        n_sets += 1
    if cfg.method == "rad_dpo":
        stats = L.RewardStats(cfg.loss.stats_capacity, cfg.loss.quartile_refresh)

    def step_loss(idx):
        batch = [sessions[i] for i in idx]
        if cfg.method == "rad_dpo":
            loss, info = rad_dpo_step_loss(params, mcfg, vocab, batch, cfg.loss, stats)
            trace.append({"step": len(trace) + 1, **stats.snapshot()})
            return loss, info
        if cfg.method == "simpo":
            return simpo_step_loss(params, mcfg, vocab, batch, cfg)
        if cfg.method == "dpo":
            return dpo_step_loss(params, ref, mcfg, vocab, batch, cfg)
        return sft_step_loss(params, mcfg, vocab, batch)

    curve = _optimize(params, cfg, len(sessions), step_loss, ckpt_dir, mcfg, cfg.method)
    return TrainResult(params, curve, trace, n_sets, stats)


def write_trace(path, records: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def with_flags(loss_cfg: L.LossConfig, tlgd=True, rdrw=True, mlsft=True) -> L.LossConfig:
    return replace(loss_cfg, enable_tlgd=tlgd, enable_rdrw=rdrw, enable_multilabel_sft=mlsft)
