"""Problem-space planners for nondeterministic programs.

Both planners run the attack in exhaust-budget mode and keep the partial
sequence with the lowest oracle score.

* LKB attacks only the longest observed behavior.
* BCO cascades over all distinct behaviors, most malicious first. Each
  solution is re-expressed as anchored injections ("insert ``a`` before the
  k-th occurrence of ``b``") and propagated into every other behavior before
  the next one is attacked.

Plans end up as call-site directives: the APIs to emit right before a given
site's own call.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .attack import AttackConfig, AttackResult, ps_fgsm
from .core import ApiSequence
from .errors import CorpusParseError, NothingToAttackError, SynthesisError
from .vm import NEUTRAL_ARGSIG

STRATEGIES = ("LKB", "BCO")


@dataclass
class BehaviorSet:
    traces: list[ApiSequence]
    scores: list[float]

    def __post_init__(self):
        if not self.traces:
            raise ValueError("a behavior set needs at least one trace")
        pids = {t.program_id for t in self.traces}
        if len(pids) > 1:
            raise ValueError(f"traces from several programs: {sorted(map(str, pids))}")

    @classmethod
    def observe(cls, traces: Sequence[ApiSequence], oracle) -> "BehaviorSet":
        return cls(list(traces), [oracle.sequence_score(t.tokens) for t in traces])


@dataclass(frozen=True)
class AnchoredInjection:
    injected_api: int
    anchor_api: int
    anchor_occurrence: int  # 1-based, counted over the original trace
    after: bool = False

    def __post_init__(self):
        if self.anchor_occurrence < 1:
            raise ValueError("anchor occurrence must be >= 1")


@dataclass
class DirectivePlan:
    directives: list[tuple[int, tuple[int, ...]]]
    source: str
    expected_scores: list[float] = field(default_factory=list)
    program_id: Optional[str] = None
    fully_benign: bool = False
    planned_overhead: list[int] = field(default_factory=list)

    @property
    def n_injected(self) -> int:
        return sum(len(a) for _, a in self.directives)

    def to_record(self) -> dict:
        return {
            "program_id": self.program_id,
            "strategy": self.source,
            "directives": [{"site_id": s, "apis": list(a)} for s, a in self.directives],
            "expected_scores": self.expected_scores,
            "fully_benign": self.fully_benign,
            "planned_overhead": self.planned_overhead,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DirectivePlan":
        return cls(
            directives=[(int(d["site_id"]), tuple(int(a) for a in d["apis"])) for d in rec["directives"]],
            source=str(rec["strategy"]),
            expected_scores=[float(x) for x in rec.get("expected_scores", [])],
            program_id=rec.get("program_id"),
            fully_benign=bool(rec.get("fully_benign", False)),
            planned_overhead=[int(x) for x in rec.get("planned_overhead", [])],
        )


def save_patch(plan: DirectivePlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_record(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_patch(path) -> DirectivePlan:
    try:
        with open(path, encoding="utf-8") as fh:
            return DirectivePlan.from_record(json.load(fh))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorpusParseError(f"{path}: bad patch file: {exc}") from exc


# ---------------------------------------------------------------------------
# anchors and propagation

def _occurrence_keys(tokens: Sequence[int]) -> list[tuple[int, int]]:
    seen: Counter = Counter()
    keys = []
    for t in tokens:
        seen[t] += 1
        keys.append((t, seen[t]))
    return keys


def anchors_for_positions(original: Sequence[int],
                          insertions: Sequence[tuple[int, int]]) -> list[AnchoredInjection]:
    """Anchor (original position p, api) pairs meaning "insert api before token p".

    ``p == len(original)`` anchors after the last token.
    """
    keys = _occurrence_keys(original)
    out = []
    for p, api in insertions:
        if p < len(original):
            a, k = keys[p]
            out.append(AnchoredInjection(api, a, k))
        else:
            a, k = keys[-1]
            out.append(AnchoredInjection(api, a, k, after=True))
    return out


def injections_by_position(source_index: Sequence[int], tokens: Sequence[int],
                           n_original: int) -> list[tuple[int, int]]:
    """(original position, api) per injected token, in sequence order.

    Each injected token is attached to the first original token after it.
    """
    out, pending = [], []
    for s, t in zip(source_index, tokens):
        if s < 0:
            pending.append(t)
        else:
            out.extend((s, a) for a in pending)
            pending = []
    out.extend((n_original, a) for a in pending)
    return out


def propagate(anchored: Sequence[AnchoredInjection], trace: ApiSequence) -> ApiSequence:
    """Insert each anchored API before (or after) its anchor occurrence.

    Occurrences are counted on ``trace`` as given; absent anchors are skipped.
    """
    before: dict[tuple[int, int], list[int]] = {}
    after: dict[tuple[int, int], list[int]] = {}
    for a in anchored:
        dest = after if a.after else before
        dest.setdefault((a.anchor_api, a.anchor_occurrence), []).append(a.injected_api)
    tokens, inj, prov, args = [], [], [], []
    has_prov = trace.provenance is not None
    has_args = trace.args is not None
    for i, key in enumerate(_occurrence_keys(trace.tokens)):
        site = trace.provenance[i] if has_prov else None
        for pos_list, is_orig in ((before.get(key, ()), False), ([trace.tokens[i]], True),
                                  (after.get(key, ()), False)):
            for t in pos_list:
                tokens.append(t)
                inj.append(not is_orig)
                prov.append(site)
                args.append(trace.args[i] if (is_orig and has_args) else NEUTRAL_ARGSIG)
    return ApiSequence(tokens, trace.label, trace.origin, prov if has_prov else None, inj,
                       args if has_args else None, trace.program_id)


# ---------------------------------------------------------------------------
# directive synthesis

def synthesize_directives(insertions: Sequence[tuple[int, int]], trace: ApiSequence,
                          source: str = "LKB") -> DirectivePlan:
    """Map "insert api before trace position p" to "inject api before site(p)".

    Injections past the last token attach to the last token's site.
    """
    if trace.provenance is None:
        raise SynthesisError("trace has no call-site provenance")
    per_site: dict[int, list[int]] = {}
    for p, api in insertions:
        site = trace.provenance[min(p, len(trace) - 1)]
        per_site.setdefault(site, []).append(api)
    return DirectivePlan(sorted((s, tuple(a)) for s, a in per_site.items()), source,
                         program_id=trace.program_id)


def _best_prefix(res: AttackResult, limit: Optional[int] = None) -> int:
    """1-based count of injections with the minimum recorded score (0 if none)."""
    k = len(res.score_trace) if limit is None else min(limit, len(res.score_trace))
    if k == 0:
        return 0
    return int(np.argmin(res.score_trace[:k])) + 1


def _exhaust(cfg: AttackConfig, budget: int) -> AttackConfig:
    return replace(cfg, mode="exhaust-budget", budget=budget)


def _check_attackable(bs: BehaviorSet, thr: float) -> None:
    if not any(s >= thr for s in bs.scores):
        raise NothingToAttackError("no observed behavior is detected as malicious")


def lkb_plan(bs: BehaviorSet, cfg: AttackConfig) -> DirectivePlan:
    oracle = cfg.oracle
    _check_attackable(bs, oracle.threshold)
    lengths = [len(t) for t in bs.traces]
    i = int(np.argmax(lengths))
    x = bs.traces[i]
    budget = cfg.budget_for(len(x))
    res = ps_fgsm(x, _exhaust(cfg, budget), require_malicious=False)
    k = _best_prefix(res)
    insertions = []
    if k:
        toks, src = res.partial(k)
        insertions = injections_by_position(src, toks, len(x))
    plan = synthesize_directives(insertions, x, "LKB")
    anchored = anchors_for_positions(x.tokens, insertions)
    props = [propagate(anchored, t) for t in bs.traces]
    plan.expected_scores = [oracle.sequence_score(p.tokens) for p in props]
    plan.planned_overhead = [sum(p.injected) for p in props]
    plan.fully_benign = all(s < oracle.threshold for s in plan.expected_scores)
    plan.program_id = x.program_id
    return plan


class _Solution:
    """Anchored injections keyed by (anchor api, occurrence, after)."""

    def __init__(self):
        self.entries: dict[tuple[int, int, bool], tuple[list[int], int]] = {}

    def anchored(self) -> list[AnchoredInjection]:
        return [AnchoredInjection(a, k[0], k[1], k[2])
                for k, (apis, _) in self.entries.items() for a in apis]

    def updated(self, trace_idx: int, original: Sequence[int],
                insertions: Sequence[tuple[int, int]]) -> "_Solution":
        """Copy where every anchor of ``original`` takes the observed injection list."""
        observed: dict[tuple[int, int, bool], list[int]] = {}
        for a in anchors_for_positions(original, insertions):
            observed.setdefault((a.anchor_api, a.anchor_occurrence, a.after), []).append(a.injected_api)
        present = set((a, k, False) for a, k in _occurrence_keys(original))
        out = _Solution()
        for key, val in self.entries.items():
            if key not in present and key not in observed:
                out.entries[key] = val
        for key, apis in observed.items():
            out.entries[key] = (apis, trace_idx)
        return out


def bco_plan(bs: BehaviorSet, cfg: AttackConfig, round_limit: int = 10) -> DirectivePlan:
    oracle = cfg.oracle
    thr = oracle.threshold
    _check_attackable(bs, thr)

    distinct, seen = [], set()
    for i, t in enumerate(bs.traces):
        # Same calls from different sites count as distinct behaviors.
        key = (tuple(t.tokens), tuple(t.provenance or ()))
        if key not in seen:
            seen.add(key)
            distinct.append(i)
    originals = {i: bs.traces[i] for i in distinct}
    caps = {i: cfg.budget_for(len(originals[i])) for i in distinct}
    order = sorted(distinct, key=lambda i: (-bs.scores[i], i))

    sol = _Solution()
    modified = {i: propagate([], originals[i]) for i in distinct}
    scores = {i: bs.scores[i] for i in distinct}
    attacked_state: dict[int, tuple] = {}

    def feasible(candidate: _Solution) -> bool:
        anchored = candidate.anchored()
        return all(sum(propagate(anchored, originals[j]).injected) <= caps[j] for j in distinct)

    def attack(i: int) -> Optional[_Solution]:
        current = modified[i]
        remaining = caps[i] - sum(current.injected)
        if remaining <= 0:
            return None
        x = ApiSequence(current.tokens, current.label, "observed", program_id=current.program_id)
        res = ps_fgsm(x, _exhaust(cfg, remaining), require_malicious=False)
        # Map indices of the attacked (already propagated) sequence back to the original.
        to_orig, k_orig = [], 0
        for flag in current.injected:
            to_orig.append(-1 if flag else k_orig)
            k_orig += 0 if flag else 1
        limit = len(res.score_trace)
        while limit > 0:
            k = _best_prefix(res, limit)
            toks, src = res.partial(k)
            src_orig = [to_orig[s] if s >= 0 else -1 for s in src]
            insertions = injections_by_position(src_orig, toks, len(originals[i]))
            cand = sol.updated(i, originals[i].tokens, insertions)
            if feasible(cand):
                return cand
            limit = k - 1
        return None

    for _ in range(round_limit):
        added = False
        while not added:
            if all(scores[j] < thr for j in distinct):
                break
            eligible = [j for j in distinct if scores[j] >= thr
                        and attacked_state.get(j) != tuple(modified[j].tokens)]
            if not eligible:
                break
            i = min(eligible, key=lambda j: (-scores[j], order.index(j)))
            attacked_state[i] = tuple(modified[i].tokens)
            chosen = attack(i)
            if chosen is None or chosen.entries == sol.entries:
                continue
            sol = chosen
            added = True
            anchored = sol.anchored()
            for j in distinct:
                modified[j] = propagate(anchored, originals[j])
                scores[j] = oracle.sequence_score(modified[j].tokens)
            attacked_state[i] = tuple(modified[i].tokens)
        if not added:
            break

    # Each anchor maps to its call site in every behavior that contains it, so
    # runs reaching the same calls through other sites are patched too. A site
    # keeps the first anchor occurrence that claims it.
    per_site: dict[int, list[int]] = {}
    claimed: dict[int, tuple[int, int]] = {}
    for key, (apis, src_idx) in sol.entries.items():
        done = set()
        for j in [src_idx] + [j for j in distinct if j != src_idx]:
            t = originals[j]
            if t.provenance is None:
                raise SynthesisError("trace has no call-site provenance")
            pos = [p for p, k in enumerate(_occurrence_keys(t.tokens)) if k == key[:2]]
            if not pos:
                continue
            site = t.provenance[pos[0]]
            if site in done or claimed.setdefault(site, key[:2]) != key[:2]:
                continue
            done.add(site)
            per_site.setdefault(site, []).extend(apis)
    anchored = sol.anchored()
    props = [propagate(anchored, t) for t in bs.traces]
    exp = [oracle.sequence_score(p.tokens) for p in props]
    return DirectivePlan(sorted((s, tuple(a)) for s, a in per_site.items()), "BCO", exp,
                         bs.traces[0].program_id, all(s < thr for s in exp),
                         [sum(p.injected) for p in props])


def plan(strategy: str, bs: BehaviorSet, cfg: AttackConfig, **kw) -> DirectivePlan:
    if strategy.upper() == "LKB":
        return lkb_plan(bs, cfg)
    if strategy.upper() == "BCO":
        return bco_plan(bs, cfg, **kw)
    raise ValueError(f"unknown strategy {strategy!r}")
