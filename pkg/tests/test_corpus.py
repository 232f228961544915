import numpy as np
import pytest

from apievade.core import GOODWARE, MALWARE
from apievade.corpus import (CorpusConfig, build_vocabulary, generate_corpus, generate_program, load_corpus,
                             motif_occurrences, save_corpus)
from apievade.errors import ConfigError, CorpusParseError
from apievade.vm import execute

VOCAB = build_vocabulary(300, seed=7)


def _cfg(**kw):
    base = dict(n_benign=30, n_malicious=30, min_len=20, max_len=100, nondet_level=0.5, seed=3)
    base.update(kw)
    return CorpusConfig(**base)


@pytest.mark.parametrize("nondet", [0.0, 0.5, 1.0])
def test_label_soundness_over_executions(nondet):
    cfg = _cfg(nondet_level=nondet)
    for seed in range(25):
        for label in (GOODWARE, MALWARE):
            prog = generate_program(label, cfg, VOCAB, seed)
            for run in range(6):
                t = execute(prog, 1000 + run)
                hits = motif_occurrences(t.tokens, VOCAB)
                assert (hits > 0) == (label == MALWARE)


def test_trace_lengths_within_bounds():
    cfg = _cfg(min_len=25, max_len=70, nondet_level=1.0)
    for seed in range(40):
        prog = generate_program(seed % 2, cfg, VOCAB, seed)
        for run in range(5):
            assert 25 <= len(execute(prog, run)) <= 70


def test_nondet_zero_identical_executions():
    prog = generate_program(MALWARE, _cfg(nondet_level=0.0), VOCAB, 5)
    first = execute(prog, 0).tokens
    assert all(execute(prog, s).tokens == first for s in range(1, 10))


def test_nondet_high_yields_divergent_traces():
    cfg = _cfg(nondet_level=0.8)
    divergent = 0
    for seed in range(100):
        prog = generate_program(seed % 2, cfg, VOCAB, seed)
        runs = {tuple(execute(prog, 50 + k).tokens) for k in range(5)}
        divergent += len(runs) >= 2
    # Probability ~1 per program; allow no misses.
    assert divergent == 100


def test_program_deterministic_in_seed():
    cfg = _cfg()
    assert generate_program(1, cfg, VOCAB, 9) == generate_program(1, cfg, VOCAB, 9)
    assert generate_program(1, cfg, VOCAB, 9) != generate_program(1, cfg, VOCAB, 10)


def test_generate_program_bad_label():
    with pytest.raises(ConfigError):
        generate_program(2, _cfg(), VOCAB, 0)


def test_config_validation():
    for bad in (dict(min_len=10), dict(max_len=15, min_len=20), dict(nondet_level=1.5), dict(n_benign=-1)):
        with pytest.raises(ConfigError):
            generate_corpus(_cfg(**bad))


def test_corpus_counts_and_splits():
    c = generate_corpus(CorpusConfig(n_benign=500, n_malicious=500, seed=7))
    assert len(c) == 1000
    labels = [s.label for s in c.sequences]
    assert labels.count(MALWARE) == 500
    sizes = {k: c.splits.count(k) for k in ("train", "val", "test")}
    assert sizes == {"train": 700, "val": 150, "test": 150}
    assert all(s.program_id in c.programs for s in c.sequences)


def test_same_seed_byte_identical_files(tmp_path):
    for name in ("a", "b"):
        save_corpus(generate_corpus(_cfg()), tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.programs.jsonl").read_bytes() == (tmp_path / "b.programs.jsonl").read_bytes()


def test_round_trip_full_corpus(tmp_path):
    c = generate_corpus(CorpusConfig(n_benign=500, n_malicious=500, seed=7))
    save_corpus(c, tmp_path / "c.jsonl")
    assert load_corpus(tmp_path / "c.jsonl") == c


def test_truncated_file_is_parse_error(tmp_path):
    f = tmp_path / "c.jsonl"
    save_corpus(generate_corpus(_cfg()), f)
    lines = f.read_text().splitlines(keepends=True)
    f.write_text("".join(lines[:-5]))
    with pytest.raises(CorpusParseError, match="truncated"):
        load_corpus(f)
    f.write_text("".join(lines[:3]) + lines[3][: len(lines[3]) // 2])
    with pytest.raises(CorpusParseError, match=":4:"):
        load_corpus(f)


def test_empty_file_and_empty_corpus(tmp_path):
    f = tmp_path / "empty.jsonl"
    f.write_text("")
    with pytest.raises(CorpusParseError):
        load_corpus(f)
    c = generate_corpus(_cfg(n_benign=0, n_malicious=0))
    save_corpus(c, tmp_path / "z.jsonl")
    loaded = load_corpus(tmp_path / "z.jsonl")
    assert len(loaded) == 0 and loaded == c


def test_unknown_token_in_file_is_parse_error(tmp_path):
    f = tmp_path / "c.jsonl"
    save_corpus(generate_corpus(_cfg(n_benign=2, n_malicious=2)), f)
    lines = f.read_text().splitlines()
    lines[1] = lines[1].replace('"tokens":[', '"tokens":[9999,', 1)
    f.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusParseError, match=":2:"):
        load_corpus(f)


def test_markers_lean_benign_but_do_not_separate_labels():
    c = generate_corpus(CorpusConfig(n_benign=200, n_malicious=200, seed=1))
    markers = set(c.vocab.benign_markers)
    rate = np.array([np.mean([t in markers for t in s.tokens]) for s in c.sequences])
    labels = np.array([s.label for s in c.sequences])
    assert rate[labels == GOODWARE].mean() > rate[labels == MALWARE].mean()
    # Marker rate alone must not reach the detector accuracy bar.
    best = max(np.mean((rate >= t) == (labels == GOODWARE)) for t in np.unique(rate))
    assert best < 0.95
