import numpy as np
import pytest

from apievade.corpus import CorpusConfig, build_vocabulary, generate_corpus
from apievade.detector import TrainConfig, new_model, train
from apievade.detector.model import OracleModel


def random_model(encoding="plain", vocab=None, n=12, d=16, h=8, seed=0, threshold=0.5,
                 head_scale=1.0) -> OracleModel:
    """Untrained model with a non-zero head, so scores and gradients vary."""
    vocab = vocab or build_vocabulary(40, seed=3)
    m = new_model(encoding, vocab, n=n, d=d, h=h, seed=seed, threshold=threshold)
    rng = np.random.default_rng(seed + 1000)
    m.p["w_out"][:] = rng.normal(0, head_scale, m.p["w_out"].shape)
    m.p["b_out"][:] = rng.normal(0, 0.1)
    return m


@pytest.fixture(scope="session")
def tiny_vocab():
    return build_vocabulary(40, seed=3)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = CorpusConfig(n_benign=40, n_malicious=40, min_len=20, max_len=60,
                       nondet_level=0.5, seed=11, vocab_size=60)
    return generate_corpus(cfg)


@pytest.fixture(scope="session")
def small_models(small_corpus):
    """Small plain and triple detectors trained briefly on the small corpus."""
    out = {}
    for k, enc in enumerate(("plain", "triple")):
        m = new_model(enc, small_corpus.vocab, n=32, d=16, h=8, seed=k)
        train(m, small_corpus.split("train"), small_corpus.split("val"),
              TrainConfig(epochs=6, seed=k, batch=8))
        out[enc] = m
    return out


# Acceptance verdicts, printed once at the end of the session.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
