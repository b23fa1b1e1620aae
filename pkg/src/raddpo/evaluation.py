"""Decode-and-score harness: Recall@K, MRR and hallucination rate."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .datagen import Oracle, Session
from .model import ModelConfig, Params, beam_search
from .sid import Catalog, SemanticId, Vocab

SID_KS = (8, 64, 128)
ITEM_KS = (10, 100, 500)
ITEM_KS_SMALL = (10, 50, 100)

# column groups in table order: hallucination, item-level, SID-level
METRIC_GROUPS = ("hallucination", "item", "sid")


def recall_at_k(ranked: Sequence, relevant: set, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    if not relevant:
        raise ValueError("empty relevant set")
    return len(set(ranked[:k]) & relevant) / len(relevant)


def reciprocal_rank(ranked: Sequence, relevant: set) -> float:
    for r, x in enumerate(ranked, start=1):
        if x in relevant:
            return 1.0 / r
    return 0.0


def expand_items(ranked: Sequence[SemanticId], catalog: Catalog) -> list[int]:
    """SIDs in rank order to items; hallucinated SIDs contribute nothing."""
    out: list[int] = []
    for s in ranked:
        out.extend(catalog.items_of(s))
    return out


def item_ks_for(catalog: Catalog) -> tuple[int, ...]:
    return ITEM_KS_SMALL if len(catalog.item_sid) < 500 else ITEM_KS


@dataclass
class EvalReport:
    method: str
    sid_recall: dict[int, float]
    item_recall: dict[int, float]
    sid_mrr: float
    item_mrr: float
    hallucination_rate: float
    width: int
    constrained: bool
    n_sessions: int
    skipped: int = 0
    corpus_hash: str = ""
    seeds: list[int] = field(default_factory=list)

    def metrics(self) -> dict[str, float]:
        """Flat metric map in table column order."""
        out = {"halluc": self.hallucination_rate}
        out.update({f"item_R@{k}": v for k, v in self.item_recall.items()})
        out["item_MRR"] = self.item_mrr
        out.update({f"sid_R@{k}": v for k, v in self.sid_recall.items()})
        out["sid_MRR"] = self.sid_mrr
        return out

    def to_record(self) -> dict:
        d = asdict(self)
        d["sid_recall"] = {str(k): v for k, v in self.sid_recall.items()}
        d["item_recall"] = {str(k): v for k, v in self.item_recall.items()}
        return d

    @classmethod
    def from_record(cls, d: dict) -> "EvalReport":
        d = dict(d)
        # JSON keys come back as strings; restore numeric K order
        d["sid_recall"] = {int(k): v for k, v in sorted(d["sid_recall"].items(), key=lambda kv: int(kv[0]))}
        d["item_recall"] = {int(k): v for k, v in sorted(d["item_recall"].items(), key=lambda kv: int(kv[0]))}
        return cls(**d)


def score_session(ranked: Sequence[SemanticId], relevant: set[SemanticId], relevant_items: set[int],
                  catalog: Catalog, sid_ks: Sequence[int], item_ks: Sequence[int]) -> dict:
    items = expand_items(ranked, catalog)
    return {
        "sid_recall": {k: recall_at_k(ranked, relevant, k) for k in sid_ks},
        "item_recall": {k: recall_at_k(items, relevant_items, k) for k in item_ks},
        "sid_rr": reciprocal_rank(ranked, relevant),
        "item_rr": reciprocal_rank(items, relevant_items),
        "halluc": sum(s not in catalog for s in ranked),
        "n": len(ranked),
    }


def evaluate(params: Params, mcfg: ModelConfig, vocab: Vocab, sessions: Sequence[Session],
             catalog: Catalog, oracle: Oracle, width: int = 128, constrained: bool = False,
             method: str = "", sid_ks: Sequence[int] = SID_KS, item_ks: Sequence[int] | None = None,
             corpus_hash: str = "") -> EvalReport:
    if width < max(sid_ks):
        raise ValueError(f"beam width {width} < max K {max(sid_ks)}")
    item_ks = tuple(item_ks or item_ks_for(catalog))
    beams = beam_search(params, mcfg, vocab, [s.prompt(vocab) for s in sessions], width,
                        constraint=catalog.trie if constrained else None)
    acc = {"sid_recall": {k: 0.0 for k in sid_ks}, "item_recall": {k: 0.0 for k in item_ks},
           "sid_rr": 0.0, "item_rr": 0.0}
    halluc = decoded = scored = skipped = 0
    for s, bs in zip(sessions, beams):
        ranked = [b.codes for b in bs]
        halluc += sum(r not in catalog for r in ranked)
        decoded += len(ranked)
        relevant = oracle.relevant_set(s.query)
        if not relevant:
            skipped += 1
            continue
        res = score_session(ranked, relevant, oracle.relevant_items(s.query, catalog), catalog, sid_ks, item_ks)
        for k in sid_ks:
            acc["sid_recall"][k] += res["sid_recall"][k]
        for k in item_ks:
            acc["item_recall"][k] += res["item_recall"][k]
        acc["sid_rr"] += res["sid_rr"]
        acc["item_rr"] += res["item_rr"]
        scored += 1
    n = max(scored, 1)
    return EvalReport(
        method=method,
        sid_recall={k: v / n for k, v in acc["sid_recall"].items()},
        item_recall={k: v / n for k, v in acc["item_recall"].items()},
        sid_mrr=acc["sid_rr"] / n,
        item_mrr=acc["item_rr"] / n,
        hallucination_rate=halluc / max(decoded, 1),
        width=width, constrained=constrained, n_sessions=scored, skipped=skipped,
        corpus_hash=corpus_hash,
    )


def compare(reports: Sequence[EvalReport], baseline: str | None = None) -> tuple[str, list[dict]]:
    """Per-metric deltas against ``baseline`` (default: first report)."""
    if len(reports) < 2:
        raise ValueError("need at least two reports")
    hashes = {r.corpus_hash for r in reports}
    if len(hashes) > 1:
        raise ValueError(f"reports come from different eval corpora: {sorted(hashes)}")
    base = next((r for r in reports if r.method == baseline), reports[0]) if baseline else reports[0]
    cols = list(base.metrics())
    records = []
    for r in reports:
        m = r.metrics()
        records.append({"method": r.method, **m, **{f"delta_{c}": m[c] - base.metrics()[c] for c in cols}})
    width = max(len(r.method) for r in reports) + 2
    head = "Method".ljust(width) + "".join(c.rjust(12) for c in cols)
    lines = [head, "-" * len(head)]
    for rec in records:
        lines.append(rec["method"].ljust(width) + "".join(f"{rec[c]:12.4f}" for c in cols))
    lines.append("")
    lines.append(f"deltas vs {base.method}")
    for rec in records:
        lines.append(rec["method"].ljust(width) + "".join(f"{rec['delta_' + c]:+12.4f}" for c in cols))
    return "\n".join(lines), records


def write_reports(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def read_reports(path) -> list[EvalReport]:
    with open(path) as f:
        return [EvalReport.from_record(json.loads(line)) for line in f if line.strip()]
