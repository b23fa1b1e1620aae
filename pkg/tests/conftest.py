import numpy as np
import pytest

from raddpo import model as M
from raddpo.sid import Vocab


def central_diff(f, arr: np.ndarray, idx, h: float = 1e-6) -> float:
    """Central finite difference of scalar ``f()`` w.r.t. ``arr[idx]`` (mutated in place)."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def tiny_vocab() -> Vocab:
    return Vocab(n_queries=5, sizes=(4, 3, 4))


def random_model(vocab_size: int, d_model: int = 16, depth: int = 2, seed: int = 0, noise: float = 0.3,
                 max_seq_len: int = 24):
    """Small model with parameters pushed away from init so gradients are non-trivial."""
    cfg = M.ModelConfig(vocab_size=vocab_size, depth=depth, d_model=d_model, n_heads=4,
                        max_seq_len=max_seq_len, seed=seed)
    params = M.init_params(cfg)
    rng = np.random.default_rng(seed + 100)
    for p in params.values():
        p.data += rng.normal(0, noise, p.shape)
    return cfg, params


@pytest.fixture
def tiny_model(tiny_vocab):
    return random_model(tiny_vocab.size)


@pytest.fixture(scope="session")
def world():
    """Default desk-scale catalog: synthetic embeddings quantized by [8, 8, 8] codebooks."""
    from raddpo import datagen as D
    from raddpo import sid as S
    emb = D.synthetic_item_embeddings(seed=0)
    books = S.rq_kmeans_fit(emb, [8, 8, 8], seed=0)
    return S.Catalog.build(emb, books), books, emb


@pytest.fixture(scope="session")
def big_corpus(world):
    """50k sessions at the default config (150k negative pairs)."""
    from raddpo import datagen as D
    cfg = D.GenConfig(sessions=50_000)
    sessions, oracle = D.generate(world[0], cfg)
    return sessions, oracle, cfg


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
