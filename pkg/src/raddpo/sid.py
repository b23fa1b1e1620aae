"""Hierarchical Semantic IDs: residual K-means codebooks, catalog and trie."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CODEBOOK_FORMAT = "raddpo-codebooks/1"
CATALOG_FORMAT = "raddpo-catalog/1"

SemanticId = tuple[int, ...]


@dataclass(frozen=True)
class Codebooks:
    levels: tuple[np.ndarray, ...]

    @property
    def sizes(self) -> list[int]:
        return [c.shape[0] for c in self.levels]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    def save(self, path) -> None:
        arrays = {f"level_{i}": c for i, c in enumerate(self.levels)}
        np.savez(path, format=np.array(CODEBOOK_FORMAT), **arrays)

    @classmethod
    def load(cls, path) -> "Codebooks":
        with np.load(path) as z:
            if str(z["format"]) != CODEBOOK_FORMAT:
                raise ValueError(f"unsupported codebook format {z['format']}")
            n = sum(1 for k in z.files if k.startswith("level_"))
            return cls(tuple(z[f"level_{i}"] for i in range(n)))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(-1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(-1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 50,
           n_init: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ starts; keeps the lowest-inertia restart."""
    best = None
    for _ in range(n_init):
        centers, assign = _lloyd(x, k, rng, max_iter)
        inertia = ((x - centers[assign]) ** 2).sum()
        if best is None or inertia < best[0]:
            best = (inertia, centers, assign)
    return best[1], best[2]


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int) -> tuple[np.ndarray, np.ndarray]:
    centers = _kmeans_pp(x, k, rng)
    assign = None
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = d.argmin(1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(0)
            else:
                # reseed an empty cluster at the point worst served right now
                far = d[np.arange(len(x)), assign].argmax()
                centers[j] = x[far]
                assign[far] = j
                d[far] = 0.0
    assign = _sq_dists(x, centers).argmin(1)
    return centers, assign


def rq_kmeans_fit(embeddings: np.ndarray, sizes: Sequence[int], seed: int = 0,
                  max_iter: int = 50, n_init: int = 8) -> Codebooks:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("need a nonempty (n, dim) embedding matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings must be finite")
    if max(sizes) > len(x):
        raise ValueError(f"codebook size {max(sizes)} exceeds point count {len(x)}")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    levels = []
    for k in sizes:
        centers, _ = kmeans(residual, k, rng, max_iter, n_init)
        # greedy assignment, identical to what encode() does
        assign = _sq_dists(residual, centers).argmin(1)
        residual = residual - centers[assign]
        levels.append(centers)
    return Codebooks(tuple(levels))


def encode_batch(embeddings: np.ndarray, books: Codebooks) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != books.dim:
        raise ValueError(f"expected (n, {books.dim}) embeddings, got {x.shape}")
    residual = x.copy()
    codes = np.empty((len(x), len(books.levels)), dtype=np.int64)
    for lvl, centers in enumerate(books.levels):
        # argmin returns the first minimum, so ties go to the lowest index
        c = _sq_dists(residual, centers).argmin(1)
        codes[:, lvl] = c
        residual = residual - centers[c]
    return codes


def encode(embedding: np.ndarray, books: Codebooks) -> SemanticId:
    return tuple(int(c) for c in encode_batch(np.atleast_2d(embedding), books)[0])


def reconstruct(codes: Sequence[int], books: Codebooks) -> np.ndarray:
    return sum(books.levels[lvl][c] for lvl, c in enumerate(codes))


def residual_errors(embeddings: np.ndarray, books: Codebooks) -> list[float]:
    """Mean squared residual after 0, 1, ..., L levels."""
    x = np.asarray(embeddings, dtype=np.float64)
    residual = x.copy()
    errs = [float((residual ** 2).sum(1).mean())]
    for centers in books.levels:
        c = _sq_dists(residual, centers).argmin(1)
        residual = residual - centers[c]
        errs.append(float((residual ** 2).sum(1).mean()))
    return errs


class Trie:
    """Prefix tree over code sequences of a fixed depth."""

    def __init__(self, sizes: Sequence[int], sids: Iterable[SemanticId] = ()):
        self.sizes = list(sizes)
        self.root: dict = {}
        for s in sids:
            self.insert(s)

    def insert(self, sid: SemanticId) -> None:
        node = self.root
        for c in sid:
            node = node.setdefault(int(c), {})

    def _walk(self, prefix: Sequence[int]) -> dict | None:
        if len(prefix) > len(self.sizes):
            raise ValueError(f"prefix longer than {len(self.sizes)} levels")
        node = self.root
        for lvl, c in enumerate(prefix):
            if not 0 <= c < self.sizes[lvl]:
                raise ValueError(f"code {c} out of range for level {lvl}")
            node = node.get(int(c))
            if node is None:
                return None
        return node

    def next_codes(self, prefix: Sequence[int]) -> set[int]:
        """Valid continuations of ``prefix``; empty if it has none or is complete."""
        node = self._walk(prefix)
        return set(node) if node else set()

    def contains(self, sid: Sequence[int]) -> bool:
        if len(sid) != len(self.sizes):
            return False
        return self._walk(sid) is not None

    def lookup(self, prefix: Sequence[int]) -> set[int] | bool:
        """Continuations for a partial prefix, membership verdict for a full one."""
        if len(prefix) == len(self.sizes):
            return self.contains(prefix)
        return self.next_codes(prefix)


@dataclass
class Catalog:
    sizes: list[int]
    item_sid: dict[int, SemanticId]
    embeddings: np.ndarray | None = None
    sid_to_items: dict[SemanticId, list[int]] = field(init=False)
    trie: Trie = field(init=False)

    def __post_init__(self):
        self.sid_to_items = {}
        for item in sorted(self.item_sid):
            self.sid_to_items.setdefault(self.item_sid[item], []).append(item)
        self.trie = Trie(self.sizes, self.sid_to_items)

    @classmethod
    def build(cls, embeddings: np.ndarray, books: Codebooks) -> "Catalog":
        codes = encode_batch(embeddings, books)
        item_sid = {i: tuple(int(c) for c in row) for i, row in enumerate(codes)}
        return cls(books.sizes, item_sid, np.asarray(embeddings, dtype=np.float64))

    @property
    def depth(self) -> int:
        return len(self.sizes)

    @property
    def sids(self) -> list[SemanticId]:
        return sorted(self.sid_to_items)

    def __contains__(self, sid) -> bool:
        return tuple(sid) in self.sid_to_items

    def items_of(self, sid: SemanticId) -> list[int]:
        return self.sid_to_items.get(tuple(sid), [])

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"format": CATALOG_FORMAT, "sizes": self.sizes}) + "\n")
            for item in sorted(self.item_sid):
                row = [item, *self.item_sid[item]]
                if self.embeddings is not None:
                    row.append([float.hex(float(v)) for v in self.embeddings[item]])
                f.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path) -> "Catalog":
        with open(path) as f:
            header = json.loads(f.readline())
            if header.get("format") != CATALOG_FORMAT:
                raise ValueError(f"unsupported catalog format {header.get('format')}")
            sizes = header["sizes"]
            item_sid, embs = {}, {}
            for line in f:
                row = json.loads(line)
                item, codes = row[0], tuple(row[1:1 + len(sizes)])
                item_sid[item] = codes
                if len(row) > 1 + len(sizes):
                    embs[item] = [float.fromhex(v) for v in row[1 + len(sizes)]]
        emb = np.array([embs[i] for i in sorted(item_sid)]) if embs else None
        return cls(sizes, item_sid, emb)


def common_prefix_len(a: Sequence[int], b: Sequence[int]) -> int:
    k = 0
    for x, y in zip(a, b):
        if x != y:
            break
        k += 1
    return k


def prefix_share_stats(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> list[float]:
    """Fraction of pairs sharing at least 1, 2, ..., L leading codes."""
    if not pairs:
        raise ValueError("no pairs")
    depth = len(pairs[0][0])
    k = np.array([common_prefix_len(a, b) for a, b in pairs])
    return [float((k >= d).mean()) for d in range(1, depth + 1)]


@dataclass(frozen=True)
class Vocab:
    """Token layout: specials, prompt (query) tokens, then one block per SID level."""

    n_queries: int
    sizes: tuple[int, ...]

    PAD = 0
    EOS = 1
    SEP = 2
    N_SPECIAL = 3

    @property
    def query_offset(self) -> int:
        return self.N_SPECIAL

    def level_offset(self, level: int) -> int:
        return self.N_SPECIAL + self.n_queries + sum(self.sizes[:level])

    @property
    def size(self) -> int:
        return self.N_SPECIAL + self.n_queries + sum(self.sizes)

    def query_token(self, q: int) -> int:
        if not 0 <= q < self.n_queries:
            raise ValueError(f"query {q} out of range")
        return self.query_offset + q

    def serialize(self, sid: Sequence[int]) -> list[int]:
        if len(sid) != len(self.sizes):
            raise ValueError(f"SID depth {len(sid)} != {len(self.sizes)}")
        return self.serialize_prefix(sid)

    def serialize_prefix(self, sid: Sequence[int]) -> list[int]:
        if len(sid) > len(self.sizes):
            raise ValueError(f"SID depth {len(sid)} > {len(self.sizes)}")
        out = []
        for lvl, c in enumerate(sid):
            if not 0 <= c < self.sizes[lvl]:
                raise ValueError(f"code {c} out of range for level {lvl}")
            out.append(self.level_offset(lvl) + int(c))
        return out

    def candidate(self, sid: Sequence[int]) -> list[int]:
        """Token form of a full SID as a training candidate: codes then EOS."""
        return self.serialize(sid) + [self.EOS]

    def parse(self, tokens: Sequence[int]) -> SemanticId:
        toks = list(tokens)
        if toks and toks[-1] == self.EOS:
            toks = toks[:-1]
        if len(toks) != len(self.sizes):
            raise ValueError(f"expected {len(self.sizes)} SID tokens, got {len(toks)}")
        codes = []
        for lvl, t in enumerate(toks):
            c = t - self.level_offset(lvl)
            if not 0 <= c < self.sizes[lvl]:
                raise ValueError(f"token {t} is not a level-{lvl} token")
            codes.append(c)
        return tuple(codes)

    def to_json(self) -> str:
        return json.dumps({"n_queries": self.n_queries, "sizes": list(self.sizes)})

    @classmethod
    def from_json(cls, s: str) -> "Vocab":
        d = json.loads(s)
        return cls(d["n_queries"], tuple(d["sizes"]))


def catalog_digest(catalog: Catalog) -> str:
    buf = io.StringIO()
    for item in sorted(catalog.item_sid):
        buf.write(f"{item}:{catalog.item_sid[item]}\n")
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()[:16]
