"""Synthetic world: API vocabulary, benign/malicious programs, labeled corpora.

Label soundness is structural. A malicious motif is a contiguous run
``m1 m2 m3`` of APIs reserved for motifs. Malicious programs carry
``MAND_MOTIFS`` mandatory, never-shuffled motif blocks. Both labels carry
decoys: the same APIs with filler calls in ``DECOY_GAP_COUNT`` of the gaps,
e.g. ``m1 x m2 m3``. Every pair of a motif thus occurs in benign programs and
only the full run separates the labels. Motif APIs appear nowhere else and
only ``m1`` can open a block, so no reordering or dropping of blocks can
assemble a contiguous motif in a benign program. Motif APIs are never safe
to inject. Mandatory motif blocks carry ``MOTIF_VARIANTS`` equivalent
implementations at other call sites, one of which a nondeterministic run may
take instead. Marker APIs are mildly more frequent in benign programs: enough
to give gradient-guided API choice a benign direction, too weak for the
detector to classify by marker counts.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (ApiEntry, ApiSequence, ApiVocabulary, GOODWARE, MALWARE, N_ACTIONS,
                   N_CATEGORIES, N_OBJECTS, derive_seed, make_rng)
from .errors import ConfigError, CorpusParseError
from .vm import Block, BehaviorProgram, Site, execute, load_programs, save_programs

FORMAT_VERSION = 1
SPLIT_RATIOS = (0.70, 0.15, 0.15)
MOTIF_LEN = 3
N_MOTIFS = 4
DECOY_MIN = {GOODWARE: 1, MALWARE: 0}
DECOY_MAX = {GOODWARE: 3, MALWARE: 2}
OPT_MOTIF_MAX = 0
MAND_MOTIFS = 2
BENIGN_MARKER_FRAC = 0.15
MALWARE_MARKER_FRAC = 0.05
ZIPF_EXPONENT = 1.0
MOTIF_APIS_SAFE = False  # motif APIs carry side effects, so they stay out of every arsenal
DECOY_GAPS = (1, 2)  # motif offsets eligible for filler calls inside decoys
DECOY_FILL = (1, 1)  # filler calls per decoy gap, inclusive range
DECOY_GAP_COUNT: Optional[int] = 1  # gaps drawn per decoy from DECOY_GAPS; None uses all
MARKER_PROGRAM_FRAC = 1.0  # share of benign programs that use markers at all
MOTIF_VARIANTS = 1  # alternative call-site implementations per mandatory motif block

_CATEGORIES = ["file", "registry", "process", "network", "memory", "thread",
               "crypto", "service", "system", "ui", "device", "sync"]
_ACTIONS = ["Create", "Open", "Read", "Write", "Close", "Delete", "Query", "Set",
            "Enum", "Load", "Map", "Alloc", "Free", "Connect", "Send", "Recv",
            "Start", "Stop", "Wait", "Get"]
_OBJECTS = ["File", "Key", "Value", "Process", "Thread", "Section", "Memory", "Socket",
            "Handle", "Module", "Library", "Service", "Mutex", "Event", "Window",
            "Device", "Token", "Pipe", "Directory", "Url", "Buffer", "Hash", "Certificate",
            "Timer", "Object"]


def build_vocabulary(size: int = 300, seed: int = 0) -> ApiVocabulary:
    if size < 10:
        raise ConfigError(f"vocabulary size must be >= 10, got {size}")
    rng = make_rng(seed, "vocab")
    cats = rng.integers(0, N_CATEGORIES, size)
    acts = rng.integers(0, N_ACTIONS, size)
    objs = rng.integers(0, N_OBJECTS, size)
    safe = rng.random(size) < 0.5
    tracked = rng.random(size) < 0.95
    if not safe.any():
        safe[0] = True
    if tracked.sum() < 2 * MOTIF_LEN:
        tracked[: 2 * MOTIF_LEN] = True
    if not (safe & tracked).any():
        tracked[np.flatnonzero(safe)[0]] = True

    entries = []
    seen: dict[str, int] = {}
    for i in range(size):
        base = f"{_ACTIONS[acts[i]]}{_OBJECTS[objs[i]]}"
        k = seen.get(base, 0)
        seen[base] = k + 1
        name = base if k == 0 else f"{base}Ex{k}"
        entries.append(ApiEntry(i + 1, name, int(cats[i]), int(acts[i]), int(objs[i]),
                                bool(safe[i]), bool(tracked[i])))

    tracked_ids = [e.id for e in entries if e.tracked]
    n_motifs = max(1, min(N_MOTIFS, len(tracked_ids) // (2 * MOTIF_LEN)))
    motif_apis = rng.choice(tracked_ids, n_motifs * MOTIF_LEN, replace=False)
    motifs = tuple(tuple(int(x) for x in motif_apis[k * MOTIF_LEN:(k + 1) * MOTIF_LEN])
                   for k in range(n_motifs))
    reserved = set(int(x) for x in motif_apis)
    if not MOTIF_APIS_SAFE:
        entries = [replace(e, safe_to_inject=False) if e.id in reserved else e for e in entries]
        if not any(e.safe_to_inject and e.tracked for e in entries):
            first = next(e for e in entries if e.id not in reserved)
            entries[first.id - 1] = replace(first, safe_to_inject=True, tracked=True)
    pool = [a for a in tracked_ids if a not in reserved]
    n_markers = max(1, size // 10)
    markers = tuple(sorted(int(x) for x in rng.choice(pool, min(n_markers, len(pool) - 1), replace=False)))
    return ApiVocabulary(tuple(entries), motifs, markers, seed)


@dataclass
class CorpusConfig:
    n_benign: int = 500
    n_malicious: int = 500
    min_len: int = 20
    max_len: int = 100
    nondet_level: float = 0.5
    seed: int = 7
    vocab_size: int = 300

    def validate(self) -> None:
        if self.n_benign < 0 or self.n_malicious < 0:
            raise ConfigError("sample counts must be non-negative")
        if self.min_len < 15:
            raise ConfigError(f"min_len must be >= 15, got {self.min_len}")
        if self.max_len < self.min_len:
            raise ConfigError("max_len must be >= min_len")
        if not 0.0 <= self.nondet_level <= 1.0:
            raise ConfigError("nondet_level must be in [0, 1]")
        if self.vocab_size < 10:
            raise ConfigError("vocab_size must be >= 10")


def motif_occurrences(tokens, vocab: ApiVocabulary) -> int:
    count = 0
    motifs = set(vocab.motifs)
    for i in range(len(tokens) - MOTIF_LEN + 1):
        if tuple(tokens[i:i + MOTIF_LEN]) in motifs:
            count += 1
    return count


def _general_pool(vocab: ApiVocabulary) -> list[int]:
    reserved = {a for m in vocab.motifs for a in m}
    return [a for a in sorted(vocab.tracked_ids()) if a not in reserved]


def generate_program(label: int, cfg: CorpusConfig, vocab: ApiVocabulary, seed: int,
                     program_id: str = "p0") -> BehaviorProgram:
    """One benign (0) or malicious (1) program, deterministic in ``seed``."""
    cfg.validate()
    if label not in (GOODWARE, MALWARE):
        raise ConfigError(f"label must be 0 or 1, got {label}")
    rng = np.random.default_rng(seed)
    pool = _general_pool(vocab)
    markers = [a for a in vocab.benign_markers if a in set(pool)]
    others = [a for a in pool if a not in set(markers)]

    # Background calls follow one shared, heavy-tailed API frequency profile.
    zipf = 1.0 / np.arange(1, len(others) + 1) ** ZIPF_EXPONENT
    zipf /= zipf.sum()
    marker_frac = BENIGN_MARKER_FRAC if label == GOODWARE else MALWARE_MARKER_FRAC
    if label == GOODWARE and MARKER_PROGRAM_FRAC < 1.0 and rng.random() >= MARKER_PROGRAM_FRAC:
        marker_frac = 0.0

    def draw(k: int) -> list[int]:
        out = []
        for u, j, jm in zip(rng.random(k), rng.choice(len(others), k, p=zipf),
                            rng.integers(0, max(len(markers), 1), k)):
            out.append(int(markers[jm]) if markers and u < marker_frac else int(others[j]))
        return out

    total = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    mand_len = min(total, max(cfg.min_len, int(np.ceil(total * 0.55))))
    opt_len = total - mand_len

    specials: list[tuple[list[int], bool]] = []  # (tokens, mandatory)
    motif_ids = rng.permutation(len(vocab.motifs))
    if label == MALWARE:
        n_mand = MAND_MOTIFS
        for k in range(n_mand):
            specials.append((list(vocab.motifs[motif_ids[k % len(motif_ids)]]), True))
        for k in range(int(rng.integers(0, OPT_MOTIF_MAX + 1))):
            specials.append((list(vocab.motifs[motif_ids[(k + n_mand) % len(motif_ids)]]), False))
    n_decoys = int(rng.integers(DECOY_MIN[label], DECOY_MAX[label] + 1))
    for _ in range(n_decoys):
        m = list(vocab.motifs[int(rng.integers(len(vocab.motifs)))])
        gaps = [q for q in DECOY_GAPS if q < len(m)]
        if DECOY_GAP_COUNT is not None:
            gaps = [int(q) for q in rng.choice(gaps, min(DECOY_GAP_COUNT, len(gaps)), replace=False)]
        d = [m[0]]
        for q, a in enumerate(m[1:], 1):
            if q in gaps:
                d += [int(x) for x in rng.choice(pool, int(rng.integers(DECOY_FILL[0], DECOY_FILL[1] + 1)))]
            d.append(a)
        specials.append((d, bool(rng.random() < 0.5)))

    mand_budget = mand_len - sum(len(t) for t, m in specials if m)
    opt_specials = [(t, m) for t, m in specials if not m]
    while opt_specials and sum(len(t) for t, _ in opt_specials) > opt_len:
        opt_specials.pop()
    opt_budget = opt_len - sum(len(t) for t, _ in opt_specials)
    specials = [(t, m) for t, m in specials if m] + opt_specials

    def fill(budget: int, mandatory: bool) -> list[tuple[list[int], bool, bool, float, int]]:
        out = []
        while budget > 0:
            size = min(budget, int(rng.integers(3, 9)))
            toks = draw(size)
            prob = 1.0 if mandatory else float(rng.uniform(0.2, 0.7))
            out.append((toks, mandatory, bool(rng.random() < 0.5), prob, 0))
            budget -= size
        return out

    n_motif_blocks = MAND_MOTIFS if label == MALWARE else 0
    raw = [(t, m, False, 1.0 if m else float(rng.uniform(0.4, 0.8)),
            MOTIF_VARIANTS if k < n_motif_blocks else 0) for k, (t, m) in enumerate(specials)]
    raw += fill(max(mand_budget, 0), True)
    raw += fill(opt_budget, False)
    order = rng.permutation(len(raw))

    blocks = []
    next_site = 1
    for i in order:
        toks, mandatory, shuffle, prob, n_var = raw[i]
        sites = []
        for t in toks:
            sites.append(Site(next_site, t, int(rng.integers(1, 8))))
            next_site += 1
        variants = []
        for _ in range(n_var):
            variants.append(tuple(Site(next_site + q, s.api, s.argsig) for q, s in enumerate(sites)))
            next_site += len(sites)
        blocks.append(Block(tuple(sites), prob, shuffle, mandatory, tuple(variants)))

    used = {s.api for b in blocks for s in b.sites}
    extra = rng.choice(vocab.ids, int(rng.integers(0, 31)), replace=False)
    imports = frozenset(used | {int(a) for a in extra})
    return BehaviorProgram(program_id, label, tuple(blocks), imports, cfg.nondet_level)


@dataclass
class Corpus:
    vocab: ApiVocabulary
    config: CorpusConfig
    sequences: list[ApiSequence]
    splits: list[str]
    programs: dict[str, BehaviorProgram] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)

    def split(self, name: str) -> list[ApiSequence]:
        return [s for s, sp in zip(self.sequences, self.splits) if sp == name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.vocab == other.vocab and asdict(self.config) == asdict(other.config)
                and self.splits == other.splits and self.programs == other.programs
                and [s.to_record() for s in self.sequences] == [s.to_record() for s in other.sequences])


def generate_corpus(cfg: CorpusConfig, vocab: Optional[ApiVocabulary] = None) -> Corpus:
    cfg.validate()
    if vocab is None:
        vocab = build_vocabulary(cfg.vocab_size, cfg.seed)
    n = cfg.n_benign + cfg.n_malicious
    split_rng = make_rng(cfg.seed, "split")
    labels = np.array([GOODWARE] * cfg.n_benign + [MALWARE] * cfg.n_malicious)
    labels = labels[split_rng.permutation(n)] if n else labels
    n_train = int(round(n * SPLIT_RATIOS[0]))
    n_val = int(round(n * SPLIT_RATIOS[1]))
    assign = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    assign = assign[split_rng.permutation(n)] if n else assign

    sequences, programs = [], {}
    for i in range(n):
        pid = f"p{i:05d}"
        prog = generate_program(int(labels[i]), cfg, vocab, derive_seed(cfg.seed, "program", i), pid)
        programs[pid] = prog
        trace = execute(prog, derive_seed(cfg.seed, "observe", i))
        trace.injected = None
        sequences.append(trace)
    return Corpus(vocab, cfg, sequences, [str(s) for s in assign], programs)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def programs_path(path) -> Path:
    p = Path(path)
    stem = p.name[:-len(".jsonl")] if p.name.endswith(".jsonl") else p.name
    return p.with_name(stem + ".programs.jsonl")


def save_corpus(corpus: Corpus, path) -> None:
    """Write the sequence file plus its sibling program file."""
    header = {"kind": "header", "format_version": FORMAT_VERSION,
              "vocab_hash": corpus.vocab.hash, "config": asdict(corpus.config),
              "n_records": len(corpus.sequences), "vocab": corpus.vocab.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps(header) + "\n")
        for seq, split in zip(corpus.sequences, corpus.splits):
            rec = {"kind": "sequence", "split": split}
            rec.update(seq.to_record())
            fh.write(_dumps(rec) + "\n")
    save_programs([corpus.programs[k] for k in sorted(corpus.programs)], programs_path(path))


def load_corpus(path, with_programs: bool = True) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusParseError(f"{path}:1: missing header record")
    try:
        header = json.loads(lines[0])
        if header.get("kind") != "header":
            raise ValueError("first record is not a header")
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {header.get('format_version')}")
        vocab = ApiVocabulary.from_dict(header["vocab"])
        cfg = CorpusConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorpusParseError(f"{path}:1: bad header: {exc}") from exc
    if vocab.hash != header.get("vocab_hash"):
        raise CorpusParseError(f"{path}:1: vocab hash mismatch")

    sequences, splits = [], []
    for lineno, line in enumerate(lines[1:], 2):
        try:
            rec = json.loads(line)
            if rec.get("kind") != "sequence":
                raise ValueError("expected a sequence record")
            seq = ApiSequence.from_record(rec)
            vocab.validate_tokens(seq.tokens)
            splits.append(str(rec["split"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusParseError(f"{path}:{lineno}: bad sequence record: {exc}") from exc
        sequences.append(seq)
    if len(sequences) != header.get("n_records"):
        raise CorpusParseError(
            f"{path}:{len(lines) + 1}: truncated file, expected {header.get('n_records')} records, "
            f"found {len(sequences)}")

    programs = {}
    ppath = programs_path(path)
    if with_programs and os.path.exists(ppath):
        programs = load_programs(ppath)
    return Corpus(vocab, cfg, sequences, splits, programs)
