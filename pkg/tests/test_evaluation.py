import itertools

import numpy as np
import pytest

from raddpo import datagen as D
from raddpo import evaluation as E
from raddpo import model as M
from raddpo.sid import Vocab
from conftest import random_model


@pytest.fixture(scope="module")
def setup(world):
    catalog = world[0]
    cfg = D.GenConfig(sessions=100, n_queries=30, seed=11)
    sessions, oracle = D.generate(catalog, cfg)
    vocab = Vocab(cfg.n_queries, tuple(catalog.sizes))
    mcfg, params = random_model(vocab.size, d_model=16, seed=3, noise=0.5, max_seq_len=40)
    return catalog, sessions, oracle, vocab, params, mcfg


def test_recall_examples():
    assert E.recall_at_k(["a", "b", "c"], {"b", "z"}, 2) == 0.5
    assert E.recall_at_k(["a", "b", "c"], {"b", "z"}, 1) == 0.0
    assert E.recall_at_k(["a"], {"a"}, 5) == 1.0
    assert E.reciprocal_rank(["a", "b", "c"], {"c"}) == pytest.approx(1 / 3)
    assert E.reciprocal_rank(["a"], {"q"}) == 0.0
    with pytest.raises(ValueError):
        E.recall_at_k(["a"], {"a"}, 0)
    with pytest.raises(ValueError):
        E.recall_at_k(["a"], set(), 1)


def test_expand_items_skips_hallucinations(setup):
    catalog = setup[0]
    real = catalog.sids[0]
    ghost = next(s for s in itertools.product(*map(range, catalog.sizes)) if s not in catalog)
    assert E.expand_items([ghost, real], catalog) == catalog.items_of(real)


def brute_force_ranking(params, mcfg, vocab, prompt, sizes):
    sids = list(itertools.product(*map(range, sizes)))
    scores = []
    for i in range(0, len(sids), 64):
        chunk = sids[i:i + 64]
        col = M.collate([M.pack(prompt, [vocab.candidate(s)]) for s in chunk])
        scores.extend(M.candidate_logprobs(M.forward(params, mcfg, col), col).data[:, 0])
    order = np.argsort(-np.asarray(scores), kind="stable")
    return [sids[i] for i in order]


def test_recall_matches_brute_force(setup):
    catalog, sessions, oracle, vocab, params, mcfg = setup
    sub = sessions[:12]
    ks = (8, 64, 128)
    rep = E.evaluate(params, mcfg, vocab, sub, catalog, oracle, width=512, sid_ks=ks)
    want = {k: 0.0 for k in ks}
    mrr = 0.0
    for s in sub:
        ranked = brute_force_ranking(params, mcfg, vocab, s.prompt(vocab), catalog.sizes)
        rel = oracle.relevant_set(s.query)
        for k in ks:
            want[k] += sum(r in rel for r in ranked[:k]) / len(rel)
        mrr += next((1 / (i + 1) for i, r in enumerate(ranked) if r in rel), 0.0)
    for k in ks:
        assert rep.sid_recall[k] == pytest.approx(want[k] / len(sub), abs=1e-12)
    assert rep.sid_mrr == pytest.approx(mrr / len(sub), abs=1e-12)


def test_constrained_never_hallucinates(setup):
    catalog, sessions, oracle, vocab, params, mcfg = setup
    rep = E.evaluate(params, mcfg, vocab, sessions, catalog, oracle, width=128, constrained=True)
    assert rep.hallucination_rate == 0.0
    assert rep.n_sessions == len(sessions)


def test_unconstrained_hallucination_recount(setup):
    catalog, sessions, oracle, vocab, params, mcfg = setup
    rep = E.evaluate(params, mcfg, vocab, sessions, catalog, oracle, width=128)
    beams = M.beam_search(params, mcfg, vocab, [s.prompt(vocab) for s in sessions], 128)
    valid = set(catalog.sids)
    n_bad = n_all = 0
    for bs in beams:
        for b in bs:
            n_all += 1
            n_bad += b.codes not in valid
    assert rep.hallucination_rate == n_bad / n_all
    assert rep.hallucination_rate > 0


def test_recall_monotone_and_mrr_bounded(setup):
    catalog, sessions, oracle, vocab, params, mcfg = setup
    rep = E.evaluate(params, mcfg, vocab, sessions, catalog, oracle, width=128, constrained=True)
    for rec in (rep.sid_recall, rep.item_recall):
        vals = [rec[k] for k in sorted(rec)]
        assert all(0.0 <= a <= b <= 1.0 for a, b in zip(vals, vals[1:]))
    assert 0.0 <= rep.sid_mrr <= 1.0 and 0.0 <= rep.item_mrr <= 1.0


def test_width_below_k_raises(setup):
    catalog, sessions, oracle, vocab, params, mcfg = setup
    with pytest.raises(ValueError):
        E.evaluate(params, mcfg, vocab, sessions[:2], catalog, oracle, width=64)


def make_report(method, shift=0.0, corpus_hash="h"):
    return E.EvalReport(method=method, sid_recall={8: 0.2 + shift, 64: 0.5}, item_recall={10: 0.1, 50: 0.3 + shift, 100: 0.4},
                        sid_mrr=0.15, item_mrr=0.05, hallucination_rate=0.3 - shift, width=128,
                        constrained=False, n_sessions=10, corpus_hash=corpus_hash)


def test_compare_with_self_is_zero():
    _, recs = E.compare([make_report("a"), make_report("a")])
    assert all(v == 0.0 for r in recs for k, v in r.items() if k.startswith("delta_"))


def test_compare_deltas_and_columns():
    a, b = make_report("sft"), make_report("rad", shift=0.05)
    text, recs = E.compare([a, b])
    for col, v in b.metrics().items():
        assert recs[1][f"delta_{col}"] == v - a.metrics()[col]
    assert list(a.metrics()) == ["halluc", "item_R@10", "item_R@50", "item_R@100", "item_MRR", "sid_R@8", "sid_R@64", "sid_MRR"]
    assert text.splitlines()[0].split()[1:] == list(a.metrics())
    _, recs = E.compare([a, b], baseline="rad")
    assert recs[1]["delta_sid_R@8"] == 0.0


def test_compare_rejects_mixed_corpora():
    with pytest.raises(ValueError):
        E.compare([make_report("a"), make_report("b", corpus_hash="other")])
    with pytest.raises(ValueError):
        E.compare([make_report("a")])


def test_report_roundtrip(tmp_path):
    reps = [make_report("a"), make_report("b", 0.1)]
    E.write_reports(tmp_path / "r.jsonl", reps)
    assert E.read_reports(tmp_path / "r.jsonl") == reps
