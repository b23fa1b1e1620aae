"""Synthetic search-session simulator.

Each query has a hidden relevant set of SIDs: a few level-2 cells inside one
or two level-1 clusters plus some scattered noise SIDs.  Sessions draw
clicked/ordered positives from that set by popularity.  Negatives are
"exposed but unclicked" (or random) SIDs; with probability
``pseudo_negative_rate`` a negative is secretly relevant.  The depth of the
prefix a negative shares with the session's top positive is sampled to hit
configured per-depth rates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import PackedBatch, pack
from .sid import Catalog, SemanticId, Vocab, prefix_share_stats

CORPUS_FORMAT = "raddpo-corpus/1"
ORACLE_FORMAT = "raddpo-oracle/1"

ORDERED, CLICKED = "ordered", "clicked"
EXPOSED, RANDOM = "exposed_unclicked", "random"


@dataclass
class Session:
    query: int
    history: list[SemanticId]
    positives: list[tuple[SemanticId, str]]
    negatives: list[tuple[SemanticId, str]]
    is_pseudo: list[bool] = field(default_factory=list, repr=False)

    @property
    def anchor_index(self) -> int:
        """Index of the top-tier positive: the ordered one, else the first click."""
        for i, (_, tier) in enumerate(self.positives):
            if tier == ORDERED:
                return i
        return 0

    @property
    def anchor(self) -> SemanticId:
        return self.positives[self.anchor_index][0]

    def prompt(self, vocab: Vocab) -> list[int]:
        toks = [vocab.query_token(self.query)]
        for sid in self.history:
            toks.extend(vocab.serialize(sid))
        toks.append(vocab.SEP)
        return toks

    def public_record(self) -> dict:
        return {
            "query": self.query,
            "history": [list(s) for s in self.history],
            "positives": [[list(s), t] for s, t in self.positives],
            "negatives": [[list(s), o] for s, o in self.negatives],
        }


@dataclass(frozen=True)
class GenConfig:
    n_queries: int = 200
    sessions: int = 1000
    day: int = 0
    positives_dist: tuple[float, ...] = (0.5, 0.3, 0.2)   # P(1), P(2), P(3) positives
    order_prob: float = 0.5
    n_negatives: int = 3
    pseudo_negative_rate: float = 0.2
    prefix_share_targets: tuple[float, ...] = (0.346, 0.019, 0.0)
    random_negative_share: float = 1 / 3
    history_max: int = 8
    clusters_per_query: tuple[float, ...] = (0.5, 0.5)  # P(1 cluster), P(2 clusters)
    cells_per_cluster: int = 3
    cell_keep: float = 0.7
    noise_sids: int = 4
    zipf: float = 1.0
    seed: int = 0

    def __post_init__(self):
        probs = [self.order_prob, self.pseudo_negative_rate, self.random_negative_share, self.cell_keep,
                 *self.prefix_share_targets, *self.positives_dist, *self.clusters_per_query]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.n_queries < 1 or self.sessions < 0 or self.n_negatives < 0 or self.history_max < 0:
            raise ValueError("counts must be positive")
        t = self.prefix_share_targets
        if any(t[i] < t[i + 1] for i in range(len(t) - 1)):
            raise ValueError("prefix share targets must be non-increasing in depth")

    def depth_distribution(self, depth: int) -> np.ndarray:
        """P(shared prefix length == d) for d = 0..depth."""
        t = list(self.prefix_share_targets)[:depth] + [0.0] * max(0, depth - len(self.prefix_share_targets))
        ge = [1.0] + t + [0.0]
        return np.array([ge[d] - ge[d + 1] for d in range(depth + 1)])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Oracle:
    """Hidden ground truth: relevant SIDs per query with popularity weights."""

    relevant: dict[int, list[SemanticId]]
    popularity: dict[int, list[float]]

    def relevant_set(self, query: int) -> set[SemanticId]:
        return set(self.relevant[query])

    def relevant_items(self, query: int, catalog: Catalog) -> set[int]:
        return {i for s in self.relevant[query] for i in catalog.items_of(s)}


# ----------------------------------------------------------------------------
# item embeddings for the catalog

def synthetic_item_embeddings(n_items: int = 1200, dim: int = 16, branching: Sequence[int] = (8, 8, 8),
                              active_leaf: float = 0.6, seed: int = 0) -> np.ndarray:
    """Items as sums of shared per-level codewords at shrinking scales plus noise.

    Only a random ``active_leaf`` fraction of code combinations hosts items,
    so the resulting catalog is sparse and several items share one code path.
    """
    rng = np.random.default_rng(seed)
    scales = [4.0, 1.5, 0.6, 0.25][:len(branching)]
    books = [rng.normal(0, s, (b, dim)) for b, s in zip(branching, scales)]
    combos = np.array(np.meshgrid(*[np.arange(b) for b in branching], indexing="ij")).reshape(len(branching), -1).T
    active = np.flatnonzero(rng.random(len(combos)) < active_leaf)
    if len(active) == 0:
        active = np.array([0])
    leaf = combos[rng.choice(active, size=n_items)]
    emb = sum(books[lvl][leaf[:, lvl]] for lvl in range(len(branching)))
    return emb + rng.normal(0, 0.05, (n_items, dim))


# ----------------------------------------------------------------------------
# generation

class _CatalogIndex:
    def __init__(self, catalog: Catalog):
        self.sids = catalog.sids
        self.codes = np.array(self.sids, dtype=np.int64)
        self.pos = {s: i for i, s in enumerate(self.sids)}

    def lcp_to(self, sid: SemanticId) -> np.ndarray:
        eq = self.codes == np.array(sid)
        return np.cumprod(eq, axis=1).sum(1)


def sample_oracle(catalog: Catalog, cfg: GenConfig) -> Oracle:
    rng = np.random.default_rng([cfg.seed, 10_000])
    index = _CatalogIndex(catalog)
    l1_codes = sorted({s[0] for s in index.sids})
    if len(l1_codes) < 2 and cfg.prefix_share_targets[0] < 1.0:
        raise ValueError("catalog has a single level-1 cluster; prefix-share targets infeasible")
    relevant, popularity = {}, {}
    for q in range(cfg.n_queries):
        n_clusters = 1 + int(rng.choice(len(cfg.clusters_per_query), p=cfg.clusters_per_query))
        clusters = rng.choice(l1_codes, size=min(n_clusters, len(l1_codes)), replace=False)
        chosen: list[SemanticId] = []
        for c in clusters:
            cells = sorted({s[:2] for s in index.sids if s[0] == c})
            picked = rng.choice(len(cells), size=min(cfg.cells_per_cluster, len(cells)), replace=False)
            for ci in sorted(picked):
                members = [s for s in index.sids if s[:2] == cells[ci]]
                keep = [s for s in members if rng.random() < cfg.cell_keep] or [members[rng.integers(len(members))]]
                chosen.extend(keep)
        others = [s for s in index.sids if s[0] not in set(clusters.tolist())]
        if others and cfg.noise_sids:
            extra = rng.choice(len(others), size=min(cfg.noise_sids, len(others)), replace=False)
            chosen.extend(others[i] for i in sorted(extra))
        chosen = sorted(set(chosen))
        order = rng.permutation(len(chosen))
        ranks = np.empty(len(chosen))
        ranks[order] = np.arange(1, len(chosen) + 1)
        w = ranks ** -cfg.zipf
        relevant[q] = chosen
        popularity[q] = (w / w.sum()).tolist()
    return Oracle(relevant, popularity)


def _sample_negative(rng: np.random.Generator, index: _CatalogIndex, anchor: SemanticId,
                     rel_mask: np.ndarray, exclude: np.ndarray, depth_p: np.ndarray,
                     pseudo_rate: float) -> tuple[SemanticId, bool]:
    lcp = index.lcp_to(anchor)
    d = int(rng.choice(len(depth_p), p=depth_p))
    want_pseudo = rng.random() < pseudo_rate
    # a zero rate is a hard guarantee: never fall back to a relevant SID
    flags = (want_pseudo,) if pseudo_rate == 0.0 else (want_pseudo, not want_pseudo)
    for pseudo in flags:
        pool = np.flatnonzero((lcp == d) & (rel_mask == pseudo) & ~exclude)
        if len(pool):
            return index.sids[int(rng.choice(pool))], pseudo
    # nothing at that depth; take the closest feasible depth, deeper on ties
    for dd in sorted(range(len(depth_p)), key=lambda x: (abs(x - d), -x)):
        for pseudo in flags:
            pool = np.flatnonzero((lcp == dd) & (rel_mask == pseudo) & ~exclude)
            if len(pool):
                return index.sids[int(rng.choice(pool))], pseudo
    raise ValueError("catalog too small to draw a negative")


def generate_session(i: int, catalog: Catalog, oracle: Oracle, cfg: GenConfig,
                     index: _CatalogIndex | None = None) -> Session:
    index = index or _CatalogIndex(catalog)
    rng = np.random.default_rng([cfg.seed, cfg.day, i])
    q = int(rng.integers(cfg.n_queries))
    rel = oracle.relevant[q]
    pop = np.array(oracle.popularity[q])

    n_pos = 1 + int(rng.choice(len(cfg.positives_dist), p=np.array(cfg.positives_dist) / sum(cfg.positives_dist)))
    n_pos = min(n_pos, len(rel))
    pos_idx = rng.choice(len(rel), size=n_pos, replace=False, p=pop)
    ordered = rng.random() < cfg.order_prob
    positives = [(rel[j], ORDERED if (ordered and k == 0) else CLICKED) for k, j in enumerate(pos_idx)]

    n_hist = int(rng.integers(cfg.history_max + 1))
    hist_idx = rng.choice(len(rel), size=n_hist, replace=True, p=pop) if n_hist else []
    history = [rel[j] for j in hist_idx]

    rel_mask = np.zeros(len(index.sids), dtype=bool)
    rel_mask[[index.pos[s] for s in rel]] = True
    exclude = np.zeros(len(index.sids), dtype=bool)
    exclude[[index.pos[s] for s, _ in positives]] = True

    session = Session(q, history, positives, [], [])
    anchor = session.anchor
    depth_p = cfg.depth_distribution(len(anchor))
    for _ in range(cfg.n_negatives):
        sid, pseudo = _sample_negative(rng, index, anchor, rel_mask, exclude, depth_p, cfg.pseudo_negative_rate)
        origin = RANDOM if rng.random() < cfg.random_negative_share else EXPOSED
        session.negatives.append((sid, origin))
        session.is_pseudo.append(pseudo)
    return session


def generate(catalog: Catalog, cfg: GenConfig, oracle: Oracle | None = None) -> tuple[list[Session], Oracle]:
    """Sessions for ``cfg.day`` plus the hidden oracle (shared across days)."""
    oracle = oracle or sample_oracle(catalog, cfg)
    index = _CatalogIndex(catalog)
    sessions = [generate_session(i, catalog, oracle, cfg, index) for i in range(cfg.sessions)]
    return sessions, oracle


def split_for_pairwise(sessions: Iterable[Session]) -> list[tuple[Session, SemanticId, SemanticId]]:
    """One (session, top positive, negative) triple per negative."""
    return [(s, s.anchor, neg) for s in sessions for neg, _ in s.negatives]


def pair_prefix_stats(sessions: Iterable[Session]) -> list[float]:
    return prefix_share_stats([(s.anchor, neg) for s in sessions for neg, _ in s.negatives])


def pseudo_rate(sessions: Sequence[Session]) -> float:
    flags = [p for s in sessions for p in s.is_pseudo]
    return float(np.mean(flags)) if flags else 0.0


# ----------------------------------------------------------------------------
# packing

def pack_session(session: Session, vocab: Vocab, max_seq_len: int | None = None) -> PackedBatch:
    """Prompt, then positives, then negatives; each candidate ends with EOS."""
    cands = [vocab.candidate(s) for s, _ in session.positives] + [vocab.candidate(s) for s, _ in session.negatives]
    prompt = session.prompt(vocab)
    if max_seq_len is not None and len(prompt) + max(len(c) for c in cands) > max_seq_len:
        raise ValueError("packed session overflows max_seq_len")
    return pack(prompt, cands)


def unpack_session(batch: PackedBatch, vocab: Vocab, n_positives: int) -> tuple[list[int], list[SemanticId], list[SemanticId]]:
    prompt = batch.tokens[batch.segment_ids == 0].tolist()
    sids = [vocab.parse(batch.segment_tokens(i).tolist()) for i in range(1, batch.n_segments + 1)]
    return prompt, sids[:n_positives], sids[n_positives:]


# ----------------------------------------------------------------------------
# files

def _digest(lines: Iterable[str]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line.encode())
    return h.hexdigest()[:16]


def corpus_lines(sessions: Sequence[Session], cfg: GenConfig) -> list[str]:
    header = {"format": CORPUS_FORMAT, "fields": ["query", "history", "positives", "negatives"],
              "config": cfg.to_dict()}
    lines = [json.dumps(header, sort_keys=True) + "\n"]
    lines += [json.dumps(s.public_record(), sort_keys=True) + "\n" for s in sessions]
    return lines


def corpus_hash(sessions: Sequence[Session], cfg: GenConfig) -> str:
    return _digest(corpus_lines(sessions, cfg))


def save_corpus(path, sessions: Sequence[Session], cfg: GenConfig) -> str:
    lines = corpus_lines(sessions, cfg)
    with open(path, "w") as f:
        f.writelines(lines)
    return _digest(lines)


def load_corpus(path, oracle_path=None) -> tuple[list[Session], GenConfig]:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError(f"unsupported corpus format {header.get('format')}")
        cfg_d = header["config"]
        cfg = GenConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg_d.items()})
        sessions = []
        for line in f:
            r = json.loads(line)
            sessions.append(Session(
                r["query"], [tuple(s) for s in r["history"]],
                [(tuple(s), t) for s, t in r["positives"]],
                [(tuple(s), o) for s, o in r["negatives"]]))
    if oracle_path is not None:
        flags = load_oracle(oracle_path)[1]
        for s, f in zip(sessions, flags):
            s.is_pseudo = f
    return sessions, cfg


def save_oracle(path, oracle: Oracle, sessions: Sequence[Session]) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"format": ORACLE_FORMAT}) + "\n")
        f.write(json.dumps({"relevant": {str(q): [list(s) for s in v] for q, v in oracle.relevant.items()},
                            "popularity": {str(q): v for q, v in oracle.popularity.items()}},
                           sort_keys=True) + "\n")
        for s in sessions:
            f.write(json.dumps(s.is_pseudo) + "\n")


def load_oracle(path) -> tuple[Oracle, list[list[bool]]]:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != ORACLE_FORMAT:
            raise ValueError(f"unsupported oracle format {header.get('format')}")
        body = json.loads(f.readline())
        flags = [json.loads(line) for line in f]
    relevant = {int(q): [tuple(s) for s in v] for q, v in body["relevant"].items()}
    popularity = {int(q): v for q, v in body["popularity"].items()}
    return Oracle(relevant, popularity), flags

