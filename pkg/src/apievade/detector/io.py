"""Binary model file.

Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header,
the flat parameter array as little-endian float64, then a SHA-256 digest of
everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from ..errors import ModelLoadError
from .model import OracleModel

MAGIC = b"APIEVADE-MODEL\n"
FORMAT_VERSION = 1


def save_model(model: OracleModel, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "encoding": model.encoding,
        "n": model.n, "d": model.d, "h": model.h,
        "threshold": model.threshold,
        "vocab_size": model.vocab_size,
        "vocab_hash": model.vocab_hash,
        "n_params": int(model.params.size),
        "triples": None if model.triples is None else model.triples.tolist(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(hb)) + hb + model.params.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_model(path, expect_vocab_hash: str | None = None) -> OracleModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8 + 32:
        raise ModelLoadError(f"{path}: not a model file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelLoadError(f"{path}: checksum mismatch (corrupted file)")
    (hlen,) = struct.unpack("<Q", body[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(body[start:start + hlen].decode())
    except ValueError as exc:
        raise ModelLoadError(f"{path}: bad header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelLoadError(f"{path}: unsupported format_version {header.get('format_version')}")
    if expect_vocab_hash is not None and header["vocab_hash"] != expect_vocab_hash:
        raise ModelLoadError(f"{path}: vocab hash {header['vocab_hash']} != {expect_vocab_hash}")
    params = np.frombuffer(body[start + hlen:], dtype="<f8")
    if params.size != header["n_params"]:
        raise ModelLoadError(f"{path}: expected {header['n_params']} parameters, found {params.size}")
    triples = header["triples"]
    model = OracleModel(header["encoding"], header["vocab_size"],
                        None if triples is None else np.asarray(triples),
                        header["n"], header["d"], header["h"], header["threshold"],
                        vocab_hash=header["vocab_hash"], init=False)
    if model.params.size != params.size:
        raise ModelLoadError(f"{path}: parameter count does not match architecture")
    model.params[:] = params
    return model
