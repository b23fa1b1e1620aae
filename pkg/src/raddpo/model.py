"""Tiny decoder-only transformer with packed multi-candidate forward passes.

A packed row is ``prompt ++ cand_1 ++ ... ++ cand_m``.  Every candidate sees
the whole prompt and its own causal prefix, never another candidate, and
all candidates reuse the same position indices (``len(prompt) + j``).  With
that layout one forward pass scores all candidates of a session exactly as
if each had been run alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "raddpo-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    depth: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 128
    d_ff: int = 0  # 0 -> 2 * d_model
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 2 * self.d_model


Params = dict[str, Tensor]


def init_params(cfg: ModelConfig) -> Params:
    rng = np.random.default_rng(cfg.seed)
    D, F, V = cfg.d_model, cfg.ff_width, cfg.vocab_size

    def normal(*shape, std=0.02):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def const(value, *shape):
        return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    p: Params = {
        "tok_emb": normal(V, D),
        "pos_emb": normal(cfg.max_seq_len, D),
    }
    resid_std = 0.02 / np.sqrt(2 * cfg.depth)
    for i in range(cfg.depth):
        pre = f"layer{i}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = const(1.0, D), const(0.0, D)
        for name in ("wq", "wk", "wv"):
            p[pre + name] = normal(D, D)
        p[pre + "wo"] = normal(D, D, std=resid_std)
        p[pre + "bo"] = const(0.0, D)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = const(1.0, D), const(0.0, D)
        p[pre + "w1"], p[pre + "b1"] = normal(D, F), const(0.0, F)
        p[pre + "w2"], p[pre + "b2"] = normal(F, D, std=resid_std), const(0.0, D)
    p["lnf.g"], p["lnf.b"] = const(1.0, D), const(0.0, D)
    p["head"] = normal(D, V)
    return p


def clone_params(params: Params, trainable: bool = True) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=trainable) for k, v in params.items()}


# ----------------------------------------------------------------------------
# packing

@dataclass
class PackedBatch:
    """One packed row.  ``source[j]`` is the position whose output predicts token j."""

    tokens: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    target_mask: np.ndarray
    source: np.ndarray

    @property
    def n_segments(self) -> int:
        return int(self.segment_ids.max())

    @property
    def visibility(self) -> np.ndarray:
        return visibility_matrix(self.segment_ids)

    def segment_tokens(self, i: int) -> np.ndarray:
        return self.tokens[self.segment_ids == i]

    def __len__(self) -> int:
        return len(self.tokens)


def visibility_matrix(segment_ids: np.ndarray) -> np.ndarray:
    """vis[i, j]: token i may attend to token j.  Segment 0 is the prompt, -1 padding."""
    seg = np.asarray(segment_ids)
    T = len(seg)
    causal = np.tril(np.ones((T, T), dtype=bool))
    same = seg[:, None] == seg[None, :]
    vis = causal & ((seg[None, :] == 0) | same) & (seg[None, :] >= 0)
    vis |= np.eye(T, dtype=bool)  # padding attends to itself
    return vis


def pack(prompt: Sequence[int], candidates: Sequence[Sequence[int]]) -> PackedBatch:
    """Concatenate prompt and candidates with aligned positions."""
    P = len(prompt)
    if P == 0:
        raise ValueError("empty prompt")
    tokens = list(prompt)
    seg = [0] * P
    pos = list(range(P))
    tgt = [False] * P
    src = [max(j - 1, 0) for j in range(P)]
    for i, cand in enumerate(candidates, start=1):
        if len(cand) == 0:
            raise ValueError(f"candidate {i} is empty")
        start = len(tokens)
        for j, tok in enumerate(cand):
            tokens.append(int(tok))
            seg.append(i)
            pos.append(P + j)
            tgt.append(True)
            src.append(P - 1 if j == 0 else start + j - 1)
    return PackedBatch(np.array(tokens, dtype=np.int64), np.array(seg, dtype=np.int64),
                       np.array(pos, dtype=np.int64), np.array(tgt, dtype=bool),
                       np.array(src, dtype=np.int64))


def unpack(batch: PackedBatch) -> tuple[list[int], list[list[int]]]:
    prompt = batch.tokens[batch.segment_ids == 0].tolist()
    return prompt, [batch.segment_tokens(i).tolist() for i in range(1, batch.n_segments + 1)]


@dataclass
class Collated:
    tokens: np.ndarray       # (B, T)
    segment_ids: np.ndarray  # (B, T), -1 on padding
    position_ids: np.ndarray
    target_mask: np.ndarray
    source: np.ndarray
    visibility: np.ndarray   # (B, T, T)
    n_segments: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    def segment_matrix(self) -> np.ndarray:
        """(B, T, M) one-hot of target tokens per candidate segment 1..M."""
        segs = np.arange(1, self.n_segments + 1)
        return ((self.segment_ids[:, :, None] == segs) & self.target_mask[:, :, None]).astype(np.float64)


def collate(batches: Sequence[PackedBatch], pad_id: int = 0) -> Collated:
    B = len(batches)
    T = max(len(b) for b in batches)
    tokens = np.full((B, T), pad_id, dtype=np.int64)
    seg = np.full((B, T), -1, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    tgt = np.zeros((B, T), dtype=bool)
    src = np.zeros((B, T), dtype=np.int64)
    vis = np.zeros((B, T, T), dtype=bool)
    for r, b in enumerate(batches):
        n = len(b)
        tokens[r, :n], seg[r, :n], pos[r, :n] = b.tokens, b.segment_ids, b.position_ids
        tgt[r, :n], src[r, :n] = b.target_mask, b.source
    for r in range(B):
        vis[r] = visibility_matrix(seg[r])
    return Collated(tokens, seg, pos, tgt, src, vis, max(b.n_segments for b in batches))


# ----------------------------------------------------------------------------
# forward

@dataclass
class ForwardOut:
    token_logp: Tensor   # (B, T) log-prob of each token given its source; 0 off-target
    hidden: Tensor       # (B, T, D) final normalized hidden states
    logp: Tensor | None  # (B, T, V) full log-distributions, if requested


def _attention(x: Tensor, p: Params, pre: str, vis: np.ndarray, n_heads: int,
               kv_out: list | None = None) -> Tensor:
    B, T, D = x.shape
    dh = D // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(x @ p[pre + "wq"])
    k = heads(x @ p[pre + "wk"])
    v = heads(x @ p[pre + "wv"])
    if kv_out is not None:
        kv_out.append((k.data, v.data))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = ad.masked_softmax(scores, vis[:, None, :, :])
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return out @ p[pre + "wo"] + p[pre + "bo"]


def forward(params: Params, cfg: ModelConfig, batch: Collated, full_logp: bool = False,
            kv_out: list | None = None) -> ForwardOut:
    B, T = batch.shape
    # candidates share positions, so the limit applies to positions, not row length
    if batch.position_ids.max() >= cfg.max_seq_len:
        raise ValueError(f"position {batch.position_ids.max()} exceeds max_seq_len {cfg.max_seq_len}")
    if batch.tokens.min() < 0 or batch.tokens.max() >= cfg.vocab_size:
        raise ValueError("unknown token id")
    x = ad.embedding(params["tok_emb"], batch.tokens) + ad.embedding(params["pos_emb"], batch.position_ids)
    for i in range(cfg.depth):
        pre = f"layer{i}."
        h = ad.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = x + _attention(h, params, pre, batch.visibility, cfg.n_heads, kv_out)
        h = ad.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = ad.gelu(h @ params[pre + "w1"] + params[pre + "b1"])
        x = x + (h @ params[pre + "w2"] + params[pre + "b2"])
    hidden = ad.layer_norm(x, params["lnf.g"], params["lnf.b"])
    logp = ad.log_softmax(hidden @ params["head"], axis=-1)
    rows = np.arange(B)[:, None]
    picked = logp[rows, batch.source, batch.tokens]
    token_logp = ad.where(batch.target_mask, picked, 0.0)
    return ForwardOut(token_logp, hidden, logp if full_logp else None)


def forward_packed(params: Params, cfg: ModelConfig, batch: PackedBatch) -> ForwardOut:
    return forward(params, cfg, collate([batch]))


def candidate_logprobs(out: ForwardOut, batch: Collated) -> Tensor:
    """(B, M) summed target log-probs per candidate segment."""
    S = batch.segment_matrix()
    B, T = batch.shape
    return (out.token_logp.reshape(B, 1, T) @ S).reshape(B, S.shape[-1])


def candidate_logprob(token_logp: Tensor, batch: PackedBatch, i: int) -> Tensor:
    """log pi(y_i | x) for segment ``i`` of a single packed row."""
    sel = (batch.segment_ids == i) & batch.target_mask
    if not sel.any():
        raise ValueError(f"segment {i} is empty")
    row = token_logp if token_logp.ndim == 1 else token_logp[0]
    return row[np.flatnonzero(sel)].sum()


def candidate_lengths(batch: Collated) -> np.ndarray:
    return batch.segment_matrix().sum(axis=1)


def eos_positions(batch: Collated, eos_id: int) -> np.ndarray:
    """(B, M) index of each candidate's EOS token; -1 where a segment is absent."""
    B = batch.shape[0]
    out = np.full((B, batch.n_segments), -1, dtype=np.int64)
    for b in range(B):
        for i in range(1, batch.n_segments + 1):
            idx = np.flatnonzero((batch.segment_ids[b] == i) & (batch.tokens[b] == eos_id))
            if len(idx):
                out[b, i - 1] = idx[-1]
    return out


def eos_hidden(out: ForwardOut, batch: Collated, eos_id: int) -> np.ndarray:
    """(B, M, D) detached final hidden state at every candidate's EOS token."""
    pos = eos_positions(batch, eos_id)
    present = (batch.segment_matrix().sum(1) > 0)
    if np.any((pos < 0) & present):
        raise ValueError("candidate segment without EOS")
    B = batch.shape[0]
    return out.hidden.data[np.arange(B)[:, None], np.maximum(pos, 0)].copy()


# ----------------------------------------------------------------------------
# decoding

class PrefixConstraint(Protocol):
    def next_codes(self, prefix: Sequence[int]) -> set[int]: ...


@dataclass
class Beam:
    codes: tuple[int, ...]
    score: float


def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps) * g + b


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * x * (1.0 + 0.044715 * x * x)))


def _np_log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


class PromptCache:
    """Per-layer prompt keys/values so beams only process their own tokens.

    Mirrors :func:`forward` exactly for rows laid out as packed candidates:
    each beam token attends to its prompt plus its own earlier tokens.
    """

    def __init__(self, params: Params, cfg: ModelConfig, prompts: Sequence[Sequence[int]]):
        self.params, self.cfg = params, cfg
        rows = [pack(p, []) for p in prompts]
        batch = collate(rows)
        kv: list = []
        out = forward(params, cfg, batch, full_logp=True, kv_out=kv)
        self.lengths = np.array([len(p) for p in prompts])
        self.prompt_kv = kv                                  # per layer: (S, H, P, dh) each
        self.prompt_mask = batch.segment_ids == 0            # (S, P)
        self.first_logp = out.logp.data[np.arange(len(rows)), self.lengths - 1]  # (S, V)
        self.beam_kv: list[tuple[np.ndarray, np.ndarray]] | None = None

    def reorder(self, parent: np.ndarray) -> None:
        """Keep the cached beam tokens of the selected parents; ``parent`` is (S, nb)."""
        if self.beam_kv is None:
            return
        S = parent.shape[0]
        rows = np.arange(S)[:, None]
        self.beam_kv = [(k[rows, parent], v[rows, parent]) for k, v in self.beam_kv]

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one new token per beam, (S, nb); returns (S, nb, V) next-token log-probs."""
        p, cfg = self.params, self.cfg
        S, nb = tokens.shape
        H = cfg.n_heads
        D = cfg.d_model
        dh = D // H
        j = 0 if self.beam_kv is None else self.beam_kv[0][0].shape[3]
        pos = np.broadcast_to((self.lengths + j)[:, None], (S, nb))
        if pos.max() >= cfg.max_seq_len:
            raise ValueError("decoded position exceeds max_seq_len")
        x = p["tok_emb"].data[tokens] + p["pos_emb"].data[pos]          # (S, nb, D)
        new_kv = []
        scale = 1.0 / np.sqrt(dh)
        for i in range(cfg.depth):
            pre = f"layer{i}."
            h = _np_layer_norm(x, p[pre + "ln1.g"].data, p[pre + "ln1.b"].data)
            q = (h @ p[pre + "wq"].data).reshape(S, nb, H, dh)
            k = (h @ p[pre + "wk"].data).reshape(S, nb, H, 1, dh)
            v = (h @ p[pre + "wv"].data).reshape(S, nb, H, 1, dh)
            if self.beam_kv is not None:
                k = np.concatenate([self.beam_kv[i][0], k], axis=3)
                v = np.concatenate([self.beam_kv[i][1], v], axis=3)
            new_kv.append((k, v))
            kp, vp = self.prompt_kv[i]                                   # (S, H, P, dh)
            sp = np.einsum("sbhd,shpd->sbhp", q, kp) * scale
            sp = np.where(self.prompt_mask[:, None, None, :], sp, -np.inf)
            sb = np.einsum("sbhd,sbhld->sbhl", q, k) * scale
            m = np.maximum(sp.max(-1, keepdims=True), sb.max(-1, keepdims=True))
            ep, eb = np.exp(sp - m), np.exp(sb - m)
            z = ep.sum(-1, keepdims=True) + eb.sum(-1, keepdims=True)
            o = (np.einsum("sbhp,shpd->sbhd", ep, vp) + np.einsum("sbhl,sbhld->sbhd", eb, v)) / z
            x = x + o.reshape(S, nb, D) @ p[pre + "wo"].data + p[pre + "bo"].data
            h = _np_layer_norm(x, p[pre + "ln2.g"].data, p[pre + "ln2.b"].data)
            h = _np_gelu(h @ p[pre + "w1"].data + p[pre + "b1"].data)
            x = x + h @ p[pre + "w2"].data + p[pre + "b2"].data
        self.beam_kv = new_kv
        hidden = _np_layer_norm(x, p["lnf.g"].data, p["lnf.b"].data)
        return _np_log_softmax(hidden @ p["head"].data)


def beam_search(params: Params, cfg: ModelConfig, vocab, prompts: Sequence[Sequence[int]], width: int,
                constraint: PrefixConstraint | None = None, include_eos: bool = True,
                chunk: int = 64) -> list[list[Beam]]:
    """Level-by-level beam search over SID codes, many prompts at once.

    Without a constraint each step may emit any code of the current level.
    Each result list is sorted by total log-probability, best first; ties
    keep the lower (parent, code) order.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    results: list[list[Beam]] = []
    for start in range(0, len(prompts), chunk):
        results.extend(_beam_chunk(params, cfg, vocab, prompts[start:start + chunk], width,
                                   constraint, include_eos))
    return results


def _beam_chunk(params, cfg, vocab, prompts, width, constraint, include_eos):
    cache = PromptCache(params, cfg, prompts)
    S = len(prompts)
    depth = len(vocab.sizes)
    scores = np.zeros((S, 1))
    codes = np.zeros((S, 1, 0), dtype=np.int64)
    logp = cache.first_logp[:, None, :]
    for lvl in range(depth):
        off, size = vocab.level_offset(lvl), vocab.sizes[lvl]
        nb = scores.shape[1]
        cand = scores[:, :, None] + logp[:, :, off:off + size]                  # (S, nb, size)
        if constraint is not None:
            allowed = np.zeros((S, nb, size), dtype=bool)
            for s in range(S):
                for b in range(nb):
                    if np.isfinite(scores[s, b]):
                        for c in constraint.next_codes(tuple(codes[s, b])):
                            allowed[s, b, c] = True
            cand = np.where(allowed, cand, -np.inf)
        flat = cand.reshape(S, nb * size)
        keep = min(width, nb * size)
        order = np.argsort(-flat, axis=1, kind="stable")[:, :keep]
        parent, code = order // size, order % size
        scores = np.take_along_axis(flat, order, axis=1)
        codes = np.concatenate([np.take_along_axis(codes, parent[:, :, None], axis=1), code[:, :, None]], axis=2)
        cache.reorder(parent)
        if lvl < depth - 1 or include_eos:
            logp = cache.step(off + code)
    if include_eos:
        scores = scores + logp[:, :, vocab.EOS]
        order = np.argsort(-scores, axis=1, kind="stable")
        scores = np.take_along_axis(scores, order, axis=1)
        codes = np.take_along_axis(codes, order[:, :, None], axis=1)
    out = []
    for s in range(S):
        out.append([Beam(tuple(int(c) for c in codes[s, b]), float(scores[s, b]))
                    for b in range(scores.shape[1]) if np.isfinite(scores[s, b])])
    return out


def greedy_decode(params: Params, cfg: ModelConfig, vocab, prompt: Sequence[int]) -> tuple[int, ...]:
    """Argmax code per level, computed with plain packed forwards."""
    codes: tuple[int, ...] = ()
    for lvl in range(len(vocab.sizes)):
        row = pack(prompt, [vocab.serialize_prefix(codes)]) if codes else pack(prompt, [])
        out = forward(params, cfg, collate([row]), full_logp=True)
        off = vocab.level_offset(lvl)
        lp = out.logp.data[0, len(row) - 1, off:off + vocab.sizes[lvl]]
        codes = codes + (int(lp.argmax()),)
    return codes


# ----------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: Params, cfg: ModelConfig, meta: dict | None = None) -> None:
    header = {"format": CHECKPOINT_FORMAT, "config": asdict(cfg), "meta": meta or {}}
    arrays = {f"param/{k}": v.data for k, v in sorted(params.items())}
    with open(path, "wb") as f:
        np.savez(f, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')}")
        params = {k[len("param/"):]: Tensor(z[k].copy(), requires_grad=True)
                  for k in z.files if k.startswith("param/")}
    return params, ModelConfig(**header["config"]), header["meta"]
