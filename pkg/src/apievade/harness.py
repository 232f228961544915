"""Experiment orchestration and metrics.

Three experiments are supported:

``feature-space``
    Attack detected malicious test sequences directly and report evasion
    rate and overhead per attack and overhead limit.
``problem-space-whitebox`` / ``problem-space-blackbox``
    For every detected malicious test program: ``b`` pre-runs, a LKB or BCO
    plan against the oracle, patching, ``b`` fresh post-runs, and
    classification of each post-run by the target model. White-box uses the
    oracle as the target; black-box uses a separately trained model.

Every aggregate is a fold over the per-sample audit records, so a report can
be re-derived from its own audits (see :func:`aggregate_feature_space` and
:func:`aggregate_problem_space`).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attack import ATTACKS, AttackConfig
from .core import MALWARE, derive_seed
from .corpus import Corpus, load_corpus
from .detector import load_model, score_sequences, sweep_threshold
from .detector.model import OracleModel
from .errors import ConfigError, EmptyDetectedSetError, NothingToAttackError
from .strategies import BehaviorSet, DirectivePlan, plan as make_plan
from .vm import PatchedProgram, arsenal_for, check_preservation, execute

log = logging.getLogger(__name__)

EXPERIMENTS = ("feature-space", "problem-space-whitebox", "problem-space-blackbox")
STRATEGY_NAMES = ("lkb", "bco")
ATTACK_ORDER = tuple(ATTACKS)
REPORT_VERSION = 1


@dataclass
class ExperimentSpec:
    experiment: str = "feature-space"
    corpus: str = "corpus.jsonl"
    oracle: str = "plain.model"
    target: Optional[str] = None
    attacks: tuple[str, ...] = ATTACK_ORDER
    strategies: tuple[str, ...] = STRATEGY_NAMES
    b: int = 5
    overhead_limits: tuple[float, ...] = (0.20,)
    arsenal_buckets: tuple[float, ...] = (0.0, 0.05, 0.10, 0.15, 1.0)
    thresholds: tuple[float, ...] = ()
    seed: int = 0
    split: str = "test"
    nondet_level: Optional[float] = None
    max_samples: Optional[int] = None
    bco_rounds: int = 10
    jobs: int = 1

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        for a in self.attacks:
            if a not in ATTACKS:
                raise ConfigError(f"unknown attack {a!r}")
        for s in self.strategies:
            if s.lower() not in STRATEGY_NAMES:
                raise ConfigError(f"unknown strategy {s!r}")
        if self.b < 1:
            raise ConfigError("b must be >= 1")
        if not self.overhead_limits or any(x < 0 for x in self.overhead_limits):
            raise ConfigError("overhead limits must be a non-empty list of fractions >= 0")
        edges = list(self.arsenal_buckets)
        if len(edges) < 2 or edges != sorted(edges) or len(set(edges)) != len(edges):
            raise ConfigError("arsenal buckets must be >= 2 strictly increasing edges")
        if any(not 0 <= t <= 1 for t in self.thresholds):
            raise ConfigError("thresholds must lie in [0, 1]")
        if self.nondet_level is not None and not 0 <= self.nondet_level <= 1:
            raise ConfigError("nondet_level must lie in [0, 1]")
        if self.experiment == "problem-space-blackbox" and not self.target:
            raise ConfigError("black-box experiments need a target model")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {self.split!r}")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec.pop("jobs")
        for k in ("corpus", "oracle", "target"):
            if rec[k] is not None:
                rec[k] = os.path.basename(rec[k])
        return rec


@dataclass
class ExperimentReport:
    experiment: str
    spec: dict
    audits: list[dict]
    aggregates: dict
    skipped: list[dict] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"report_version": REPORT_VERSION, "experiment": self.experiment, "spec": self.spec,
                "aggregates": self.aggregates, "skipped": self.skipped, "audits": self.audits}


# ---------------------------------------------------------------------------
# loading

def load_inputs(spec: ExperimentSpec, corpus: Optional[Corpus] = None,
                oracle: Optional[OracleModel] = None, target: Optional[OracleModel] = None):
    """Resolve corpus, oracle and target, checking vocabulary hashes.

    White-box runs never open the target file and black-box runs never use
    the oracle as the target.
    """
    spec.validate()
    if corpus is None:
        if not Path(spec.corpus).exists():
            raise ConfigError(f"corpus file not found: {spec.corpus}")
        corpus = load_corpus(spec.corpus)
    vh = corpus.vocab.hash
    if oracle is None:
        if not Path(spec.oracle).exists():
            raise ConfigError(f"oracle model not found: {spec.oracle}")
        oracle = load_model(spec.oracle, expect_vocab_hash=vh)
    elif oracle.vocab_hash and oracle.vocab_hash != vh:
        raise ConfigError("oracle vocabulary does not match the corpus")
    if spec.experiment == "problem-space-blackbox":
        if target is None:
            if not Path(spec.target).exists():
                raise ConfigError(f"target model not found: {spec.target}")
            target = load_model(spec.target, expect_vocab_hash=vh)
        elif target.vocab_hash and target.vocab_hash != vh:
            raise ConfigError("target vocabulary does not match the corpus")
    else:
        target = oracle
    return corpus, oracle, target


def _samples(corpus: Corpus, spec: ExperimentSpec) -> list[tuple[int, object]]:
    """(corpus index, sequence) of malicious sequences in the chosen split."""
    split_set = set(id(s) for s in corpus.split(spec.split))
    out = [(i, s) for i, s in enumerate(corpus.sequences) if id(s) in split_set and s.label == MALWARE]
    return out


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# ---------------------------------------------------------------------------
# feature space

def _feature_worker(task):
    idx, seq, arsenal, oracle, attacks, max_limit, seed = task
    rows = []
    for name in attacks:
        cfg = AttackConfig(oracle, arsenal, overhead_limit=max_limit, mode="stop-on-evasion",
                           seed=derive_seed(seed, "attack", idx, ATTACK_ORDER.index(name)))
        res = ATTACKS[name](seq, cfg)
        rows.append((name, res))
    return idx, rows


def run_feature_space(spec: ExperimentSpec, corpus: Optional[Corpus] = None,
                      oracle: Optional[OracleModel] = None) -> ExperimentReport:
    """Evasion rate and overhead per attack and overhead limit.

    Stop-on-evasion trajectories under a smaller budget are prefixes of the
    trajectory under the largest budget, so each attack runs once per sample
    at the largest limit and the outcome at every smaller limit is read off
    the injection count it needed.
    """
    corpus, oracle, _ = load_inputs(replace_experiment(spec, "feature-space"), corpus, oracle)
    samples = _samples(corpus, spec)
    scores = score_sequences(oracle, [s for _, s in samples]) if samples else np.zeros(0)
    detected = [(i, s) for (i, s), sc in zip(samples, scores) if sc >= oracle.threshold]
    if spec.max_samples is not None:
        detected = detected[: spec.max_samples]
    if not detected:
        raise EmptyDetectedSetError("no malicious sequence in the split is detected by the oracle")

    skipped, tasks = [], []
    max_limit = max(spec.overhead_limits)
    for i, s in detected:
        arsenal = arsenal_for(corpus.programs[s.program_id], corpus.vocab) if s.program_id in corpus.programs \
            else sorted(corpus.vocab.safe_ids() & corpus.vocab.tracked_ids())
        if not arsenal:
            skipped.append({"index": i, "program_id": s.program_id, "reason": "empty-arsenal"})
            continue
        tasks.append((i, s, arsenal, oracle, tuple(spec.attacks), max_limit, spec.seed))

    audits = []
    for idx, rows in _map(_feature_worker, tasks, spec.jobs):
        for name, res in rows:
            needed = res.overhead if res.evaded else None
            for limit in sorted(spec.overhead_limits):
                budget = int(np.floor(limit * len(res.original) + 1e-9))
                evaded = needed is not None and needed <= budget
                audits.append({
                    "index": idx,
                    "program_id": res.original.program_id,
                    "attack": name,
                    "overhead_limit": limit,
                    "length": len(res.original),
                    "budget": budget,
                    "initial_score": res.initial_score,
                    "evaded": evaded,
                    "overhead": needed if evaded else min(res.overhead, budget),
                    "final_score": _score_at(res, needed if evaded else budget),
                })
    audits.sort(key=lambda r: (r["overhead_limit"], ATTACK_ORDER.index(r["attack"]), r["index"]))
    return ExperimentReport("feature-space", spec.to_record(), audits,
                            aggregate_feature_space(audits), skipped)


def replace_experiment(spec: ExperimentSpec, experiment: str) -> ExperimentSpec:
    return replace(spec, experiment=experiment)


def _score_at(res, k: int) -> float:
    """Full-sequence score after the first ``k`` injections."""
    k = min(k, len(res.score_trace))
    return res.score_trace[k - 1] if k > 0 else res.initial_score


def _stats(values: Sequence[float]) -> dict:
    if not values:
        return {"n": 0, "mean": None, "median": None, "q1": None, "q3": None, "min": None, "max": None}
    v = np.asarray(values, dtype=float)
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
            "q1": float(np.percentile(v, 25)), "q3": float(np.percentile(v, 75)),
            "min": float(v.min()), "max": float(v.max())}


def aggregate_feature_space(audits: Sequence[dict]) -> dict:
    out = []
    limits = sorted({r["overhead_limit"] for r in audits})
    attacks = [a for a in ATTACK_ORDER if any(r["attack"] == a for r in audits)]
    for limit in limits:
        rows = [r for r in audits if r["overhead_limit"] == limit]
        evaded_by = {a: {r["index"] for r in rows if r["attack"] == a and r["evaded"]} for a in attacks}
        common = set.intersection(*evaded_by.values()) if evaded_by else set()
        for a in attacks:
            mine = [r for r in rows if r["attack"] == a]
            ev = [r for r in mine if r["evaded"]]
            out.append({
                "overhead_limit": limit,
                "attack": a,
                "n": len(mine),
                "evaded": len(ev),
                "evasion_rate": len(ev) / len(mine) if mine else 0.0,
                "overhead": _stats([r["overhead"] for r in ev]),
                "overhead_fraction": _stats([r["overhead"] / r["length"] for r in ev]),
                "common_evaded_overhead": _stats([r["overhead"] for r in ev if r["index"] in common]),
            })
    return {"by_attack": out}


# ---------------------------------------------------------------------------
# problem space

def _bucket_label(frac: float, edges: Sequence[float]) -> str:
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo < frac <= hi or (lo == edges[0] and frac == lo):
            return f"({lo * 100:g}%, {hi * 100:g}%]"
    return f"(>{edges[-1] * 100:g}%)"


def _problem_worker(task):
    (idx, program, vocab_size, arsenal, oracle, target, strategies, limits, b, seed,
     rounds, thresholds) = task
    pre = [execute(program, derive_seed(seed, "pre-run", idx, k)) for k in range(b)]
    pre_target = [target.sequence_score(t.tokens) for t in pre]
    pre_oracle = [oracle.sequence_score(t.tokens) for t in pre]
    bs = BehaviorSet(pre, pre_oracle)
    rows = []
    for strategy in strategies:
        for limit in limits:
            cfg = AttackConfig(oracle, arsenal, overhead_limit=limit, mode="exhaust-budget",
                               seed=derive_seed(seed, "attack", idx))
            status = "ok"
            try:
                plan = make_plan(strategy.upper(), bs, cfg, **({"round_limit": rounds}
                                                               if strategy.lower() == "bco" else {}))
            except NothingToAttackError:
                status = "oracle-benign"
                plan = DirectivePlan([], strategy.upper(), list(pre_oracle), program.program_id)
            patched = PatchedProgram.from_plan(program, plan, arsenal)
            post = [execute(patched, derive_seed(seed, "post-run", idx, k)) for k in range(b)]
            replay = [execute(patched, derive_seed(seed, "pre-run", idx, k)) for k in range(b)]
            fresh = check_preservation(pre, post, plan)
            replayed = check_preservation(pre, replay, plan)
            rows.append({
                "index": idx,
                "program_id": program.program_id,
                "strategy": strategy.lower(),
                "overhead_limit": limit,
                "status": status,
                "arsenal_size": len(arsenal),
                "arsenal_fraction": len(arsenal) / vocab_size,
                "pre_lengths": [len(t) for t in pre],
                "pre_target_scores": pre_target,
                "post_target_scores": [target.sequence_score(t.tokens) for t in post],
                "expected_scores": list(plan.expected_scores),
                "expected_fully_benign": plan.fully_benign,
                "plan_injected_apis": plan.n_injected,
                "planned_overhead": float(np.mean(plan.planned_overhead)) if plan.planned_overhead else 0.0,
                "realized_overhead": float(np.mean([sum(t.injected) for t in post])),
                "directives": [[s, list(a)] for s, a in plan.directives],
                "preserved": replayed.preserved,
                "preserved_fresh_seeds": fresh.preserved,
            })
    return rows


def run_problem_space(spec: ExperimentSpec, corpus: Optional[Corpus] = None,
                      oracle: Optional[OracleModel] = None,
                      target: Optional[OracleModel] = None) -> ExperimentReport:
    if spec.experiment == "feature-space":
        spec = replace_experiment(spec, "problem-space-whitebox")
    corpus, oracle, target = load_inputs(spec, corpus, oracle, target)
    thresholds = tuple(spec.thresholds) or (target.threshold,)
    samples = _samples(corpus, spec)
    if spec.max_samples is not None:
        samples = samples[: spec.max_samples]
    skipped, tasks = [], []
    for i, s in samples:
        program = corpus.programs.get(s.program_id)
        if program is None:
            skipped.append({"index": i, "program_id": s.program_id, "reason": "no-program"})
            continue
        if spec.nondet_level is not None:
            program = program.with_nondet(spec.nondet_level)
        arsenal = arsenal_for(program, corpus.vocab)
        if not arsenal:
            skipped.append({"index": i, "program_id": s.program_id, "reason": "empty-arsenal"})
            continue
        tasks.append((i, program, corpus.vocab.size, arsenal, oracle, target, tuple(spec.strategies),
                      tuple(sorted(spec.overhead_limits)), spec.b, spec.seed, spec.bco_rounds, thresholds))
    audits = [row for rows in _map(_problem_worker, tasks, spec.jobs) for row in rows]
    audits.sort(key=lambda r: (r["strategy"] != "lkb", r["overhead_limit"], r["index"]))
    if not any(min(r["pre_target_scores"]) >= min(thresholds) for r in audits):
        raise EmptyDetectedSetError("no malicious program is detected by the target")
    aggregates = aggregate_problem_space(audits, thresholds, spec.arsenal_buckets)
    if spec.experiment == "problem-space-blackbox":
        test = corpus.split(spec.split)
        rows = sweep_threshold(target, test, thresholds)
        for entry in aggregates["by_threshold"]:
            for t, tpr, fpr in rows:
                if t == entry["threshold"]:
                    entry["tpr"], entry["fpr"] = tpr, fpr
    return ExperimentReport(spec.experiment, spec.to_record(), audits, aggregates, skipped)


def aggregate_problem_space(audits: Sequence[dict], thresholds: Sequence[float],
                            bucket_edges: Sequence[float]) -> dict:
    """Attack effectiveness = evasive post-patch executions / total executions.

    At each threshold only programs whose pre-runs are all detected by the
    target are counted.
    """
    by_cell, by_bucket, by_thr = [], [], []
    strategies = [s for s in STRATEGY_NAMES if any(r["strategy"] == s for r in audits)]
    limits = sorted({r["overhead_limit"] for r in audits})

    def fold(rows, t):
        elig = [r for r in rows if min(r["pre_target_scores"]) >= t]
        total = sum(len(r["post_target_scores"]) for r in elig)
        evasive = sum(sum(1 for s in r["post_target_scores"] if s < t) for r in elig)
        return {
            "programs": len(elig),
            "executions": total,
            "evasive_executions": evasive,
            "effectiveness": evasive / total if total else 0.0,
            "planned_overhead_mean": float(np.mean([r["planned_overhead"] for r in elig])) if elig else 0.0,
            "realized_overhead_mean": float(np.mean([r["realized_overhead"] for r in elig])) if elig else 0.0,
            "preservation_rate": (sum(r["preserved"] for r in elig) / len(elig)) if elig else 1.0,
            "preservation_rate_fresh_seeds": (sum(r["preserved_fresh_seeds"] for r in elig) / len(elig))
            if elig else 1.0,
        }

    for t in thresholds:
        for s in strategies:
            for limit in limits:
                rows = [r for r in audits if r["strategy"] == s and r["overhead_limit"] == limit]
                by_cell.append({"threshold": t, "strategy": s, "overhead_limit": limit, **fold(rows, t)})
                labels = sorted({_bucket_label(r["arsenal_fraction"], bucket_edges) for r in rows},
                                key=lambda x: float(x.strip("(>").split("%")[0]))
                for lab in labels:
                    sub = [r for r in rows if _bucket_label(r["arsenal_fraction"], bucket_edges) == lab]
                    by_bucket.append({"threshold": t, "strategy": s, "overhead_limit": limit,
                                      "arsenal_bucket": lab, **fold(sub, t)})
        by_thr.append({"threshold": t, "tpr": None, "fpr": None,
                       "effectiveness": {f"{c['strategy']}@{c['overhead_limit']:g}": c["effectiveness"]
                                         for c in by_cell if c["threshold"] == t}})
    plans = {(r["index"], r["strategy"], r["overhead_limit"]) for r in audits}
    preserved = sum(r["preserved"] for r in audits)
    return {"by_cell": by_cell, "by_arsenal_bucket": by_bucket, "by_threshold": by_thr,
            "preservation_rate": preserved / len(audits) if audits else 1.0,
            "n_plans": len(plans)}


def run_preservation(spec: ExperimentSpec, corpus=None, oracle=None, target=None,
                     report: Optional[ExperimentReport] = None) -> float:
    """Fraction of patched programs whose invariant behavior survives patching."""
    if report is None:
        report = run_problem_space(spec, corpus, oracle, target)
    if not report.audits:
        return 1.0
    return sum(r["preserved"] for r in report.audits) / len(report.audits)


def run_experiment(spec: ExperimentSpec, corpus=None, oracle=None, target=None) -> ExperimentReport:
    if spec.experiment == "feature-space":
        return run_feature_space(spec, corpus, oracle)
    return run_problem_space(spec, corpus, oracle, target)


# ---------------------------------------------------------------------------
# emission

FEATURE_COLUMNS = ("index", "program_id", "attack", "overhead_limit", "length", "budget",
                   "initial_score", "evaded", "overhead", "final_score")
PROBLEM_COLUMNS = ("index", "program_id", "strategy", "overhead_limit", "status", "arsenal_size",
                   "arsenal_fraction", "pre_lengths", "pre_target_scores", "post_target_scores",
                   "expected_fully_benign", "plan_injected_apis", "planned_overhead",
                   "realized_overhead", "preserved", "preserved_fresh_seeds")


def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (list, tuple)):
        return ";".join(_cell(x) for x in v)
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_record(), sort_keys=True, indent=1) + "\n"


def report_csv(report: ExperimentReport) -> str:
    cols = FEATURE_COLUMNS if report.experiment == "feature-space" else PROBLEM_COLUMNS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in report.audits:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def emit_report(report: ExperimentReport, path, fmt: str = "json") -> Path:
    """Write one report file; re-emission is byte-identical."""
    path = Path(path)
    if fmt == "json":
        text = report_json(report)
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def load_report(path) -> ExperimentReport:
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    return ExperimentReport(rec["experiment"], rec["spec"], rec["audits"], rec["aggregates"],
                            rec.get("skipped", []))
