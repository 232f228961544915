from .io import load_model, save_model
from .model import ENCODINGS, OracleModel
from .training import (EpochMetrics, TrainConfig, TrainResult, evaluate, rates, score_sequences,
                       sweep_threshold, train)


def new_model(encoding, vocab, n=64, d=16, h=32, seed=0, threshold=0.5) -> OracleModel:
    """Fresh detector bound to ``vocab`` (size, attribute triples, hash)."""
    return OracleModel(encoding, vocab.size, vocab.triples(), n=n, d=d, h=h,
                       threshold=threshold, seed=seed, vocab_hash=vocab.hash)


__all__ = [
    "ENCODINGS", "EpochMetrics", "OracleModel", "TrainConfig", "TrainResult", "evaluate",
    "load_model", "new_model", "rates", "save_model", "score_sequences", "sweep_threshold", "train",
]
