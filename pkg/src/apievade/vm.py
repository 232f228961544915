"""Nondeterministic behavior VM and call-site patcher.

A program is an ordered list of blocks of call sites. Each execution walks
the blocks and emits one token per executed site. Nondeterminism comes from
four sources, all scaled by the program's ``nondet_level``:

* optional blocks run with probability ``(1 - nd) + nd * block.prob``;
* adjacent blocks may swap places (scheduling jitter);
* blocks flagged ``shuffle`` may permute their sites;
* dormancy: with probability ``nd / 2`` every optional block after a random
  cut point is skipped;
* blocks with ``variants`` (equivalent implementations: same APIs and
  argument tags at other call sites) switch, with probability
  ``VARIANT_SWITCH * nd``, to an implementation drawn uniformly from the
  primary and its variants.

Mandatory blocks always run, in full and in order of the (jittered) block
list, which is what keeps malicious motifs present in every execution.

A patch maps site ids to lists of APIs emitted immediately before the site's
own call, every time that site executes. The random stream consumed by an
execution never depends on the patch, so for a fixed seed a patched trace
minus its injected tokens is exactly the unpatched trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import ApiSequence, ApiVocabulary, MALWARE
from .errors import ConfigError, CorpusParseError, VerdictError

# Argument signature used for every injected call; real sites use tags >= 1.
NEUTRAL_ARGSIG = 0
VARIANT_SWITCH = 0.5  # share of nondeterminism that reroutes variant blocks


@dataclass(frozen=True)
class Site:
    site_id: int
    api: int
    argsig: int


@dataclass(frozen=True)
class Block:
    sites: tuple[Site, ...]
    prob: float = 1.0
    shuffle: bool = False
    mandatory: bool = True
    variants: tuple[tuple[Site, ...], ...] = ()

    def __post_init__(self):
        sig = [(s.api, s.argsig) for s in self.sites]
        for v in self.variants:
            if [(s.api, s.argsig) for s in v] != sig:
                raise ConfigError("block variants must repeat the primary's apis and argument tags")

    @property
    def all_sites(self) -> tuple[Site, ...]:
        return self.sites + tuple(s for v in self.variants for s in v)


@dataclass(frozen=True)
class BehaviorProgram:
    program_id: str
    label: int
    blocks: tuple[Block, ...]
    imports: frozenset[int]
    nondet_level: float = 0.0

    def __post_init__(self):
        ids = [s.site_id for b in self.blocks for s in b.all_sites]
        if len(ids) != len(set(ids)):
            raise ConfigError(f"{self.program_id}: duplicate site ids")
        apis = {s.api for b in self.blocks for s in b.all_sites}
        if not apis <= set(self.imports):
            raise ConfigError(f"{self.program_id}: sites reference apis outside imports")
        if not 0.0 <= self.nondet_level <= 1.0:
            raise ConfigError("nondet_level must be in [0, 1]")

    @property
    def sites(self) -> dict[int, Site]:
        return {s.site_id: s for b in self.blocks for s in b.all_sites}

    def with_nondet(self, level: float) -> "BehaviorProgram":
        return BehaviorProgram(self.program_id, self.label, self.blocks, self.imports, level)

    def to_record(self) -> dict:
        return {
            "program_id": self.program_id,
            "label": self.label,
            "nondet_level": self.nondet_level,
            "imports": sorted(self.imports),
            "blocks": [
                {"prob": b.prob, "shuffle": b.shuffle, "mandatory": b.mandatory,
                 "sites": [[s.site_id, s.api, s.argsig] for s in b.sites],
                 **({"variants": [[[s.site_id, s.api, s.argsig] for s in v] for v in b.variants]}
                    if b.variants else {})}
                for b in self.blocks
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "BehaviorProgram":
        blocks = tuple(
            Block(
                sites=tuple(Site(int(i), int(a), int(g)) for i, a, g in b["sites"]),
                prob=float(b["prob"]),
                shuffle=bool(b["shuffle"]),
                mandatory=bool(b["mandatory"]),
                variants=tuple(tuple(Site(int(i), int(a), int(g)) for i, a, g in v)
                               for v in b.get("variants", ())),
            )
            for b in rec["blocks"]
        )
        return cls(str(rec["program_id"]), int(rec["label"]), blocks,
                   frozenset(int(x) for x in rec["imports"]), float(rec["nondet_level"]))


@dataclass(frozen=True)
class PatchedProgram:
    base: BehaviorProgram
    directives: Mapping[int, tuple[int, ...]]

    @classmethod
    def from_plan(cls, base: BehaviorProgram, plan, arsenal: Optional[Iterable[int]] = None):
        """Build from anything exposing ``directives`` as (site_id, apis) pairs."""
        sites = base.sites
        allowed = set(base.imports) | set(arsenal or ())
        merged: dict[int, list[int]] = {}
        for site_id, apis in plan.directives:
            if site_id not in sites:
                raise ConfigError(f"directive site {site_id} not in program {base.program_id}")
            for a in apis:
                if a not in allowed:
                    raise ConfigError(f"injected api {a} not importable by {base.program_id}")
            merged.setdefault(site_id, []).extend(apis)
        return cls(base, {k: tuple(v) for k, v in merged.items()})


def _schedule(program: BehaviorProgram, rng: np.random.Generator):
    """Yield the sites executed in one run. Draw count is patch independent."""
    nd = program.nondet_level
    nb = len(program.blocks)
    order = list(range(nb))
    swaps = rng.random(max(nb - 1, 0))
    if nd > 0:
        for i in range(nb - 1):
            if swaps[i] < nd * 0.25:
                order[i], order[i + 1] = order[i + 1], order[i]
    dormant = rng.random() < nd * 0.5
    cut = int(rng.integers(0, nb + 1)) if nb else 0
    gates = rng.random(nb)
    shuffles = rng.random(nb)
    perm_keys = [rng.random(len(b.sites)) for b in program.blocks]
    switches = rng.random(nb)
    picks = rng.random(nb)
    for pos, bi in enumerate(order):
        block = program.blocks[bi]
        if not block.mandatory:
            if dormant and pos >= cut:
                continue
            p = (1.0 - nd) + nd * block.prob
            if gates[bi] >= p:
                continue
        sites = block.sites
        if block.variants and switches[bi] < VARIANT_SWITCH * nd:
            k = int(picks[bi] * (len(block.variants) + 1))
            sites = block.variants[k - 1] if k else sites
        if block.shuffle and nd > 0 and shuffles[bi] < nd:
            sites = tuple(sites[k] for k in np.argsort(perm_keys[bi], kind="stable"))
        yield from sites


def execute(program, seed: int) -> ApiSequence:
    """Run a program (or a PatchedProgram) once; deterministic for a fixed seed."""
    if isinstance(program, PatchedProgram):
        base, directives = program.base, program.directives
        origin = "observed-post-patch"
    else:
        base, directives = program, {}
        origin = "observed"
    rng = np.random.default_rng(seed)
    tokens, prov, inj, args = [], [], [], []
    for site in _schedule(base, rng):
        for api in directives.get(site.site_id, ()):
            tokens.append(api)
            prov.append(site.site_id)
            inj.append(True)
            args.append(NEUTRAL_ARGSIG)
        tokens.append(site.api)
        prov.append(site.site_id)
        inj.append(False)
        args.append(site.argsig)
    return ApiSequence(tokens, label=base.label, origin=origin, provenance=prov,
                       injected=inj, args=args, program_id=base.program_id)


def strip_injected(trace: ApiSequence) -> ApiSequence:
    keep = [i for i, f in enumerate(trace.injected or [False] * len(trace)) if not f]
    pick = lambda xs: None if xs is None else [xs[i] for i in keep]
    return ApiSequence([trace.tokens[i] for i in keep], trace.label, "observed",
                       pick(trace.provenance), [False] * len(keep), pick(trace.args),
                       trace.program_id)


@dataclass
class PreservationVerdict:
    invariant_set: frozenset
    post_union: frozenset
    preserved: bool
    witness: frozenset = field(default_factory=frozenset)

    def to_record(self) -> dict:
        return {"preserved": self.preserved,
                "invariant_size": len(self.invariant_set),
                "post_union_size": len(self.post_union),
                "witness": sorted(list(w) for w in self.witness)}


def _behavior_set(trace: ApiSequence) -> set[tuple[int, int]]:
    if trace.args is None:
        return {(t, NEUTRAL_ARGSIG) for t in trace.tokens}
    return set(zip(trace.tokens, trace.args))


def check_preservation(original_runs: Sequence[ApiSequence],
                       modified_runs: Sequence[ApiSequence],
                       plan=None) -> PreservationVerdict:
    """Invariant-subset test over (api, argument signature) behavior sets.

    Injected calls are removed from the post-patch union by their neutral
    signature, so an injected API that the program also calls legitimately
    keeps its legitimate entries.
    """
    nonempty = [r for r in original_runs if len(r) > 0]
    if not nonempty:
        raise VerdictError("all original runs are empty")
    if not modified_runs:
        raise VerdictError("no modified runs")
    invariant = set.intersection(*(_behavior_set(r) for r in nonempty))
    post = set().union(*(_behavior_set(r) for r in modified_runs))
    injected_apis = set()
    if plan is not None:
        for _, apis in plan.directives:
            injected_apis.update(apis)
    post -= {(a, NEUTRAL_ARGSIG) for a in injected_apis}
    missing = invariant - post
    return PreservationVerdict(frozenset(invariant), frozenset(post), not missing, frozenset(missing))


def arsenal_for(program: BehaviorProgram, vocab: ApiVocabulary) -> list[int]:
    """imports ∩ safe_to_inject ∩ tracked, ascending."""
    ok = vocab.safe_ids() & vocab.tracked_ids()
    return sorted(a for a in program.imports if a in ok)


def save_programs(programs: Sequence[BehaviorProgram], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in programs:
            fh.write(json.dumps(p.to_record(), sort_keys=True, separators=(",", ":")) + "\n")


def load_programs(path) -> dict[str, BehaviorProgram]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                p = BehaviorProgram.from_record(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusParseError(f"{path}:{lineno}: bad program record: {exc}") from exc
            out[p.program_id] = p
    return out
