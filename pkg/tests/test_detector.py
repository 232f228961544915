import numpy as np
import pytest

from apievade.core import PAD
from apievade.detector import ENCODINGS, TrainConfig, load_model, new_model, save_model, sweep_threshold, train
from apievade.detector.training import evaluate, rates
from apievade.errors import ConfigError, ModelLoadError, TrainingError, VocabularyError

from conftest import random_model

EPS = 1e-4


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_window(model, rng, n_pad):
    toks = rng.integers(1, model.vocab_size + 1, model.n).tolist()
    return toks[: model.n - n_pad] + [PAD] * n_pad


def fd_input(model, window):
    X = model.embed(window)
    out = np.zeros_like(X)
    for i in range(X.shape[0]):
        if window[i] == PAD:
            continue
        for j in range(X.shape[1]):
            Xp, Xm = X.copy(), X.copy()
            Xp[i, j] += EPS
            Xm[i, j] -= EPS
            out[i, j] = (model.score_embedded(Xp, window) - model.score_embedded(Xm, window)) / (2 * EPS)
    return out


def fd_params(model, windows, labels, idx):
    out = []
    for k in idx:
        old = model.params[k]
        model.params[k] = old + EPS
        lp, _ = model.loss_and_grad(windows, labels)
        model.params[k] = old - EPS
        lm, _ = model.loss_and_grad(windows, labels)
        model.params[k] = old
        out.append((lp - lm) / (2 * EPS))
    return np.array(out)


@pytest.mark.parametrize("encoding", ENCODINGS)
@pytest.mark.parametrize("seed", range(10))
def test_input_jacobian_matches_finite_differences(encoding, seed):
    m = random_model(encoding, n=8, d=6, h=4, seed=seed)
    rng = np.random.default_rng(seed)
    w = random_window(m, rng, n_pad=seed % 3)
    J = m.input_jacobian(w)
    assert J.shape == (8, 6)
    assert rel_err(J, fd_input(m, w)) < 1e-4
    assert np.all(J[[t == PAD for t in w]] == 0)


@pytest.mark.parametrize("encoding", ENCODINGS)
@pytest.mark.parametrize("seed", range(10))
def test_parameter_gradient_matches_finite_differences(encoding, seed):
    m = random_model(encoding, n=8, d=6, h=4, seed=seed)
    rng = np.random.default_rng(100 + seed)
    wins = [random_window(m, rng, n_pad=k % 3) for k in range(3)]
    labels = [0, 1, 1]
    _, g = m.loss_and_grad(wins, labels)
    # Every parameter group, plus a random sample across the flat vector.
    idx, k = [], 0
    for name, shape in m.layout:
        size = int(np.prod(shape))
        idx.extend(rng.choice(np.arange(k, k + size), min(size, 4), replace=False).tolist())
        k += size
    idx = sorted(set(idx) | set(rng.choice(m.n_params, 20, replace=False).tolist()))
    assert rel_err(g[idx], fd_params(m, wins, labels, idx)) < 1e-4


def test_all_padding_window():
    m = random_model("plain", n=8, d=6, h=4)
    w = [PAD] * 8
    assert np.all(m.embed(w) == 0)
    J = m.input_jacobian(w)
    assert J.shape == (8, 6) and np.all(np.isfinite(J))


def test_embedding_locality_and_purity(tiny_vocab):
    for enc in ENCODINGS:
        m = new_model(enc, tiny_vocab, n=10, d=16, h=8, seed=1)
        w = list(range(1, 11))
        E = m.embed(w)
        assert np.array_equal(E, m.embed(w))
        w2 = w.copy()
        w2[4] = 30
        diff = np.any(m.embed(w2) != E, axis=1)
        assert diff.tolist() == [i == 4 for i in range(10)]


def test_triple_encoding_shares_attributes(tiny_vocab):
    m = new_model("triple", tiny_vocab, n=4, d=16, h=8)
    e = tiny_vocab.entries
    a, b = next((x, y) for x in e for y in e if x.id < y.id and x.category == y.category)
    Ea, Eb = m.embed([a.id, 0, 0, 0])[0], m.embed([b.id, 0, 0, 0])[0]
    assert np.array_equal(Ea[:6], Eb[:6])


def test_untrained_score_is_half_and_pure(tiny_vocab):
    for enc in ENCODINGS:
        m = new_model(enc, tiny_vocab, n=12, d=16, h=8, seed=2)
        w = list(range(1, 13))
        assert m.score(w) == 0.5
        m.p["w_out"][:] = 0.3
        assert m.score(w) == m.score(w)
        assert 0.0 <= m.score(w) <= 1.0


def test_shape_and_vocab_errors(tiny_vocab):
    m = new_model("plain", tiny_vocab, n=6, d=16, h=8)
    with pytest.raises(ConfigError):
        m.score([1, 2, 3])
    with pytest.raises(VocabularyError):
        m.score([1, 2, 3, 4, 5, 41])
    with pytest.raises(ConfigError):
        new_model("onehot", tiny_vocab)
    with pytest.raises(ConfigError):
        new_model("plain", tiny_vocab, threshold=1.0)


def test_windows_split_and_pad():
    m = random_model(n=4)
    assert m.windows([1, 2, 3, 4, 5]) == [[1, 2, 3, 4], [5, 0, 0, 0]]
    assert m.windows([]) == [[0, 0, 0, 0]]
    # Padding never turns into a pooled position: extra padding leaves the score unchanged.
    assert m.score([1, 2, 0, 0]) == m.sequence_score([1, 2])


def test_sequence_score_is_max_over_windows():
    m = random_model(n=4, seed=3)
    toks = list(range(1, 12))
    assert m.sequence_score(toks) == max(m.score(w) for w in m.windows(toks))


def test_training_deterministic(small_corpus):
    out = []
    for _ in range(2):
        m = new_model("plain", small_corpus.vocab, n=16, d=16, h=8, seed=3)
        train(m, small_corpus.split("train")[:30], None, TrainConfig(epochs=2, seed=5, batch=8))
        out.append(m.params.copy())
    assert np.array_equal(out[0], out[1])
    assert np.all(np.isfinite(out[0]))


def test_training_errors(small_corpus):
    m = new_model("plain", small_corpus.vocab, n=16, d=16, h=8)
    with pytest.raises(TrainingError):
        train(m, [])
    benign = [s for s in small_corpus.sequences if s.label == 0][:5]
    with pytest.raises(TrainingError):
        train(m, benign)


def test_training_lowers_loss(small_corpus):
    for enc in ENCODINGS:
        m = new_model(enc, small_corpus.vocab, n=32, d=16, h=8, seed=0)
        res = train(m, small_corpus.split("train"), small_corpus.split("val"),
                    TrainConfig(epochs=8, seed=0, batch=8))
        assert len(res.history) == 8
        assert res.history[-1].loss < res.history[0].loss
        assert res.final.accuracy == evaluate(m, small_corpus.split("val"))[0]


def test_rates_on_known_counts():
    assert rates([0.9, 0.2, 0.6, 0.4], [1, 1, 0, 0], 0.5) == (0.5, 0.5, 0.5)


def test_sweep_degenerate_thresholds_and_monotone(small_models, small_corpus):
    m = small_models["plain"]
    rows = sweep_threshold(m, small_corpus.sequences)
    assert rows[0] == (0.0, 1.0, 1.0)
    assert rows[-1][1:] == (0.0, 0.0)
    tprs = [r[1] for r in rows]
    fprs = [r[2] for r in rows]
    assert tprs == sorted(tprs, reverse=True) and fprs == sorted(fprs, reverse=True)


def test_model_round_trip_and_corruption(tmp_path, small_models):
    m = small_models["triple"]
    f = tmp_path / "m.model"
    save_model(m, f)
    loaded = load_model(f, expect_vocab_hash=m.vocab_hash)
    assert np.array_equal(loaded.params, m.params)
    assert (loaded.encoding, loaded.n, loaded.threshold) == (m.encoding, m.n, m.threshold)
    w = list(range(1, 33))
    assert loaded.score(w) == m.score(w)
    with pytest.raises(ModelLoadError):
        load_model(f, expect_vocab_hash="0" * 16)
    blob = bytearray(f.read_bytes())
    blob[-40] ^= 1
    f.write_bytes(bytes(blob))
    with pytest.raises(ModelLoadError, match="checksum"):
        load_model(f)
    f.write_bytes(b"nonsense")
    with pytest.raises(ModelLoadError):
        load_model(f)
