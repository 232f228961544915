"""Window classifier: embedding -> BiGRU -> masked global max pool -> dense -> sigmoid."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..core import N_ACTIONS, N_CATEGORIES, N_OBJECTS, PAD
from ..errors import ConfigError, VocabularyError
from .gru import gru_backward, gru_forward, sigmoid

ENCODINGS = ("plain", "triple")


def triple_split(d: int) -> tuple[int, int, int]:
    base, rem = divmod(d, 3)
    return (base + (1 if rem > 0 else 0), base + (1 if rem > 1 else 0), base)


class OracleModel:
    """Differentiable malware scorer over fixed-size windows of API ids.

    ``encoding='plain'`` embeds each API id directly; ``encoding='triple'``
    concatenates category/action/object embeddings, so APIs sharing an
    attribute share part of their representation.
    """

    def __init__(self, encoding: str, vocab_size: int, triples: Optional[np.ndarray] = None,
                 n: int = 64, d: int = 16, h: int = 32, threshold: float = 0.5,
                 seed: int = 0, vocab_hash: str = "", init: bool = True):
        if encoding not in ENCODINGS:
            raise ConfigError(f"unknown encoding {encoding!r}")
        if encoding == "triple" and triples is None:
            raise ConfigError("triple encoding needs the vocabulary's attribute triples")
        if not 0.0 < threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        self.encoding = encoding
        self.vocab_size = int(vocab_size)
        self.triples = None if triples is None else np.asarray(triples, dtype=np.int64)
        self.n, self.d, self.h = int(n), int(d), int(h)
        self.threshold = float(threshold)
        self.vocab_hash = vocab_hash
        self.layout = self._layout()
        self.params = np.zeros(sum(int(np.prod(s)) for _, s in self.layout))
        self.p = self.views(self.params)
        if init:
            self._init(seed)

    # parameter store -----------------------------------------------------
    def _layout(self):
        d, h = self.d, self.h
        if self.encoding == "plain":
            emb = [("emb", (self.vocab_size + 1, d))]
        else:
            dc, da, do = triple_split(d)
            emb = [("emb_cat", (N_CATEGORIES, dc)), ("emb_act", (N_ACTIONS, da)),
                   ("emb_obj", (N_OBJECTS, do))]
        rnn = []
        for pre in ("f", "b"):
            rnn += [(f"{pre}_Wx", (d, 3 * h)), (f"{pre}_Wh", (h, 3 * h)), (f"{pre}_b", (3 * h,))]
        return emb + rnn + [("w_out", (2 * h,)), ("b_out", (1,))]

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, k = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = flat[k:k + size].reshape(shape)
            k += size
        return out

    def _init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(self.h)
        for name, shape in self.layout:
            if name.startswith("emb"):
                self.p[name][...] = rng.normal(0.0, 0.5, shape)
            elif name in ("w_out", "b_out"):
                self.p[name][...] = 0.0
            else:
                self.p[name][...] = rng.uniform(-bound, bound, shape)
        if self.encoding == "plain":
            self.p["emb"][PAD] = 0.0

    def copy(self) -> "OracleModel":
        m = OracleModel(self.encoding, self.vocab_size, self.triples, self.n, self.d, self.h,
                        self.threshold, vocab_hash=self.vocab_hash, init=False)
        m.params[:] = self.params
        return m

    @property
    def n_params(self) -> int:
        return self.params.size

    # windows -------------------------------------------------------------
    def as_batch(self, windows) -> np.ndarray:
        arr = np.asarray(windows, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape[1] != self.n:
            raise ConfigError(f"window length {arr.shape[1]} != n={self.n}")
        if arr.size and (arr.min() < 0 or arr.max() > self.vocab_size):
            bad = arr[(arr < 0) | (arr > self.vocab_size)][0]
            raise VocabularyError(f"unknown api id {int(bad)}")
        return arr

    def pad(self, tokens: Sequence[int]) -> list[int]:
        toks = list(tokens)[: self.n]
        return toks + [PAD] * (self.n - len(toks))

    def windows(self, tokens: Sequence[int]) -> list[list[int]]:
        toks = list(tokens)
        if not toks:
            return [[PAD] * self.n]
        return [self.pad(toks[i:i + self.n]) for i in range(0, len(toks), self.n)]

    # forward / backward --------------------------------------------------
    def embed(self, windows) -> np.ndarray:
        """(B, n, d) or (n, d) for a single window; padding rows are zero."""
        single = np.asarray(windows).ndim == 1
        tok = self.as_batch(windows)
        X = self._embed(tok)
        return X[0] if single else X

    def _embed(self, tok: np.ndarray) -> np.ndarray:
        mask = (tok != PAD)[..., None]
        if self.encoding == "plain":
            X = self.p["emb"][tok]
        else:
            tr = self.triples[tok]
            X = np.concatenate([self.p["emb_cat"][tr[..., 0]], self.p["emb_act"][tr[..., 1]],
                                self.p["emb_obj"][tr[..., 2]]], axis=-1)
        return X * mask

    def _forward_embedded(self, X: np.ndarray, M: np.ndarray):
        p = self.p
        Hf, cf = gru_forward(X, M, p["f_Wx"], p["f_Wh"], p["f_b"], reverse=False)
        Hb, cb = gru_forward(X, M, p["b_Wx"], p["b_Wh"], p["b_b"], reverse=True)
        Hcat = np.concatenate([Hf, Hb], axis=-1)
        masked = np.where(M[..., None] > 0, Hcat, -np.inf)
        idx = np.argmax(masked, axis=1)  # first index on ties
        valid = M.any(axis=1)
        pooled = np.take_along_axis(Hcat, idx[:, None, :], axis=1)[:, 0, :]
        pooled[~valid] = 0.0
        logit = pooled @ p["w_out"] + p["b_out"][0]
        return sigmoid(logit), logit, (X, M, cf, cb, idx, valid, pooled)

    def forward_batch(self, windows):
        tok = self.as_batch(windows)
        M = (tok != PAD).astype(np.float64)
        X = self._embed(tok)
        s, logit, cache = self._forward_embedded(X, M)
        return s, logit, (tok,) + cache

    def _backward(self, cache, dlogit: np.ndarray, need_params: bool = True):
        tok, X, M, cf, cb, idx, valid, pooled = cache
        p = self.p
        B, T, _ = X.shape
        grad = np.zeros_like(self.params)
        g = self.views(grad)
        g["w_out"][...] = pooled.T @ dlogit
        g["b_out"][0] = dlogit.sum()
        dpooled = dlogit[:, None] * p["w_out"][None, :]
        dpooled[~valid] = 0.0
        dH = np.zeros((B, T, 2 * self.h))
        rows = np.repeat(np.arange(B), 2 * self.h)
        cols = np.tile(np.arange(2 * self.h), B)
        dH[rows, idx.reshape(-1), cols] = dpooled.reshape(-1)
        dXf, dWxf, dWhf, dbf = gru_backward(dH[..., : self.h], cf)
        dXb, dWxb, dWhb, dbb = gru_backward(dH[..., self.h:], cb)
        g["f_Wx"][...], g["f_Wh"][...], g["f_b"][...] = dWxf, dWhf, dbf
        g["b_Wx"][...], g["b_Wh"][...], g["b_b"][...] = dWxb, dWhb, dbb
        dX = (dXf + dXb) * M[..., None]
        if need_params:
            if self.encoding == "plain":
                np.add.at(g["emb"], tok, dX)
                g["emb"][PAD] = 0.0
            else:
                tr = self.triples[tok]
                dc, da, _ = triple_split(self.d)
                np.add.at(g["emb_cat"], tr[..., 0], dX[..., :dc])
                np.add.at(g["emb_act"], tr[..., 1], dX[..., dc:dc + da])
                np.add.at(g["emb_obj"], tr[..., 2], dX[..., dc + da:])
        return grad, dX

    # public scoring API --------------------------------------------------
    def score(self, window) -> float:
        s, _, _ = self.forward_batch(window)
        return float(s[0])

    def scores(self, windows) -> np.ndarray:
        s, _, _ = self.forward_batch(windows)
        return s

    def sequence_score(self, tokens: Sequence[int]) -> float:
        """Max window score over consecutive length-n windows (last one padded)."""
        return float(self.scores(self.windows(tokens)).max())

    def classify(self, tokens: Sequence[int], threshold: Optional[float] = None) -> int:
        thr = self.threshold if threshold is None else threshold
        return int(self.sequence_score(tokens) >= thr)

    def input_jacobian(self, window) -> np.ndarray:
        """d score / d embedded window, shape (n, d)."""
        s, _, cache = self.forward_batch(window)
        _, dX = self._backward(cache, s * (1.0 - s), need_params=False)
        return dX[0]

    def score_embedded(self, X: np.ndarray, window) -> float:
        """Score of an explicitly supplied embedding (used by gradient checks)."""
        tok = self.as_batch(window)
        M = (tok != PAD).astype(np.float64)
        s, _, _ = self._forward_embedded(np.asarray(X, dtype=np.float64)[None], M)
        return float(s[0])

    def loss_and_grad(self, windows, labels, weights=None):
        """Mean binary cross-entropy over windows and its parameter gradient."""
        y = np.asarray(labels, dtype=np.float64)
        s, logit, cache = self.forward_batch(windows)
        w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
        denom = max(w.sum(), 1e-12)
        loss = float((w * (np.logaddexp(0.0, logit) - y * logit)).sum() / denom)
        grad, _ = self._backward(cache, w * (s - y) / denom)
        return loss, grad
