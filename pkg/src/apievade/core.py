"""Shared value types: the API vocabulary, recorded sequences, seed splitting."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import VocabularyError

PAD = 0
MALWARE = 1
GOODWARE = 0

ORIGINS = ("observed", "adversarial-feature-space", "observed-post-patch")

N_CATEGORIES = 12
N_ACTIONS = 20
N_OBJECTS = 25


@dataclass(frozen=True)
class ApiEntry:
    id: int
    name: str
    category: int
    action: int
    object: int
    safe_to_inject: bool
    tracked: bool


@dataclass(frozen=True)
class ApiVocabulary:
    """Closed, ordered set of trackable APIs. Ids are dense and start at 1."""

    entries: tuple[ApiEntry, ...]
    motifs: tuple[tuple[int, int, int, int], ...] = ()
    benign_markers: tuple[int, ...] = ()
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, api_id: int) -> ApiEntry:
        if not 1 <= api_id <= len(self.entries):
            raise VocabularyError(f"unknown api id {api_id}")
        return self.entries[api_id - 1]

    def __contains__(self, api_id) -> bool:
        return isinstance(api_id, (int, np.integer)) and 1 <= api_id <= len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def safe_ids(self) -> set[int]:
        return {e.id for e in self.entries if e.safe_to_inject}

    def tracked_ids(self) -> set[int]:
        return {e.id for e in self.entries if e.tracked}

    def triples(self) -> np.ndarray:
        """(size+1, 3) int array; row 0 is the padding row."""
        out = np.zeros((len(self.entries) + 1, 3), dtype=np.int64)
        for e in self.entries:
            out[e.id] = (e.category, e.action, e.object)
        return out

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "entries": [
                [e.id, e.name, e.category, e.action, e.object, int(e.safe_to_inject), int(e.tracked)]
                for e in self.entries
            ],
            "motifs": [list(m) for m in self.motifs],
            "benign_markers": list(self.benign_markers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ApiVocabulary":
        entries = tuple(
            ApiEntry(int(i), str(n), int(c), int(a), int(o), bool(s), bool(t))
            for i, n, c, a, o, s, t in d["entries"]
        )
        return cls(
            entries=entries,
            motifs=tuple(tuple(int(x) for x in m) for m in d.get("motifs", [])),
            benign_markers=tuple(int(x) for x in d.get("benign_markers", [])),
            seed=int(d.get("seed", 0)),
        )

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate_tokens(self, tokens: Sequence[int], allow_pad: bool = False) -> None:
        n = len(self.entries)
        for t in tokens:
            if t == PAD and allow_pad:
                continue
            if not 1 <= t <= n:
                raise VocabularyError(f"unknown api id {t}")


@dataclass
class ApiSequence:
    """One recorded behavior.

    ``provenance`` holds the emitting call-site id per token, ``injected`` marks
    tokens added by a patch or an attack, ``args`` the argument signature tag.
    """

    tokens: list[int]
    label: int = MALWARE
    origin: str = "observed"
    provenance: Optional[list[int]] = None
    injected: Optional[list[bool]] = None
    args: Optional[list[int]] = None
    program_id: Optional[str] = None

    def __post_init__(self):
        self.tokens = [int(t) for t in self.tokens]
        n = len(self.tokens)
        for name in ("provenance", "injected", "args"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} length {len(v)} != token count {n}")
        if PAD in self.tokens:
            raise ValueError("padding id inside an ApiSequence")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")

    def __len__(self) -> int:
        return len(self.tokens)

    def original_tokens(self) -> list[int]:
        if self.injected is None:
            return list(self.tokens)
        return [t for t, inj in zip(self.tokens, self.injected) if not inj]

    def to_record(self) -> dict:
        rec = {"program_id": self.program_id, "label": self.label, "origin": self.origin,
               "tokens": self.tokens}
        if self.provenance is not None:
            rec["provenance"] = self.provenance
        if self.injected is not None:
            rec["injected"] = [int(b) for b in self.injected]
        if self.args is not None:
            rec["args"] = self.args
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ApiSequence":
        inj = rec.get("injected")
        return cls(
            tokens=list(rec["tokens"]),
            label=int(rec["label"]),
            origin=rec.get("origin", "observed"),
            provenance=rec.get("provenance"),
            injected=None if inj is None else [bool(b) for b in inj],
            args=rec.get("args"),
            program_id=rec.get("program_id"),
        )


# Seed splitting: every consumer gets its own stream keyed by (purpose, index...).
PURPOSES = {
    "vocab": 0, "program": 1, "observe": 2, "split": 3, "init": 4, "train": 5,
    "attack": 6, "pre-run": 7, "post-run": 8, "replay": 9, "misc": 10,
}


def derive_seed(master: int, purpose: str, *index: int) -> int:
    ss = np.random.SeedSequence(int(master) & (2**64 - 1),
                                spawn_key=(PURPOSES[purpose],) + tuple(int(i) for i in index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(master: int, purpose: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, purpose, *index))


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
