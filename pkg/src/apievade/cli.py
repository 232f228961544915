"""``apievade`` command-line entry point.

Quickstart, from an empty directory::

    apievade gen-corpus --seed 7
    apievade train --encoding plain
    apievade train --encoding triple
    apievade run --experiment feature-space
    apievade run --experiment problem-space-whitebox
    apievade run --experiment problem-space-blackbox
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .attack import ATTACKS, AttackConfig, MODES
from .config import Config, load_config, schema_doc
from .core import MALWARE, derive_seed
from .corpus import CorpusConfig, generate_corpus, load_corpus, save_corpus
from .detector import ENCODINGS, TrainConfig, load_model, new_model, save_model, sweep_threshold, train
from .errors import ApiEvadeError, ConfigError, EmptyDetectedSetError, ModelLoadError
from .harness import EXPERIMENTS, ExperimentSpec, emit_report, load_report, run_experiment
from .strategies import BehaviorSet, load_patch, plan as make_plan, save_patch
from .vm import PatchedProgram, arsenal_for, check_preservation, execute

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_EMPTY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"apievade: error: usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI manifest (see `apievade schema`)")
    common.add_argument("--seed", type=int, help="master seed (overrides general.seed)")
    common.add_argument("--workdir", default=".", help="base directory for every relative path")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for experiments")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common.add_argument("overrides", nargs="*", metavar="section.key=value",
                        help="config overrides, e.g. train.epochs=10")

    p = _Parser(prog="apievade", description="Toy API-sequence malware detectors, evasion attacks "
                "and call-site patching under nondeterminism.",
                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=__doc__.split("::")[1])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-corpus", parents=[common], help="generate vocabulary, programs and traces")
    s.add_argument("--out", help="corpus path (default paths.corpus)")

    s = sub.add_parser("train", parents=[common], help="train a detector")
    s.add_argument("--encoding", choices=ENCODINGS, default="plain")
    s.add_argument("--corpus")
    s.add_argument("--out", help="model path (default <encoding>.model)")

    s = sub.add_parser("attack", parents=[common], help="attack detected malicious sequences")
    s.add_argument("--corpus")
    s.add_argument("--model")
    s.add_argument("--attack", choices=list(ATTACKS))
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--out", default="attacks.jsonl", help="one audit record per line")

    s = sub.add_parser("plan", parents=[common], help="plan call-site directives for one program")
    s.add_argument("--corpus")
    s.add_argument("--model")
    s.add_argument("--program-id", required=True)
    s.add_argument("--strategy", choices=["lkb", "bco"], default="bco")
    s.add_argument("--out", help="patch file (default <program-id>.patch.json)")

    s = sub.add_parser("patch", parents=[common], help="execute a patched program and check preservation")
    s.add_argument("--corpus")
    s.add_argument("--patch", required=True)
    s.add_argument("--runs", type=int, help="executions before and after (default experiment.b)")
    s.add_argument("--out", help="trace dump (default <program-id>.traces.jsonl)")

    s = sub.add_parser("run", parents=[common], help="run an experiment and write reports")
    s.add_argument("--experiment", choices=EXPERIMENTS, required=True)
    s.add_argument("--corpus")
    s.add_argument("--oracle")
    s.add_argument("--target")
    s.add_argument("--out", help="report stem (default <reports>/<experiment>)")

    s = sub.add_parser("sweep", parents=[common], help="threshold sweep of a model: (threshold, TPR, FPR)")
    s.add_argument("--corpus")
    s.add_argument("--model")
    s.add_argument("--out", default="sweep.csv")

    s = sub.add_parser("report", parents=[common], help="re-emit CSV and figures from a JSON report")
    s.add_argument("--input", required=True, help="JSON report written by `run`")

    sub.add_parser("schema", help="print the config schema")
    return p


def _path(args, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(args.workdir) / p


def _config(args) -> Config:
    overrides = list(args.overrides or [])
    if args.seed is not None:
        overrides.append(f"general.seed={args.seed}")
    return load_config(str(_path(args, args.config)) if args.config else None, overrides)


def _corpus_config(cfg: Config) -> CorpusConfig:
    return CorpusConfig(seed=cfg["general"]["seed"], **cfg["corpus"])


def cmd_gen_corpus(args, cfg: Config) -> int:
    out = _path(args, args.out or cfg["paths"]["corpus"])
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(_corpus_config(cfg))
    save_corpus(corpus, out)
    print(f"wrote {out} ({len(corpus)} sequences, vocab {corpus.vocab.hash})")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    corpus = load_corpus(_path(args, args.corpus or cfg["paths"]["corpus"]), with_programs=False)
    seed = cfg["general"]["seed"]
    k = ENCODINGS.index(args.encoding)
    m = cfg["model"]
    model = new_model(args.encoding, corpus.vocab, n=m["window"], d=m["embed_dim"], h=m["hidden"],
                      seed=derive_seed(seed, "init", k), threshold=m["threshold"])
    tc = TrainConfig(seed=derive_seed(seed, "train", k), **cfg["train"])
    res = train(model, corpus.split("train"), corpus.split("val"), tc)
    out = _path(args, args.out or f"{args.encoding}.model")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    f = res.final
    print(f"wrote {out}: epochs {f.epoch} val accuracy {f.accuracy:.4f} TPR {f.tpr:.4f} FPR {f.fpr:.4f}")
    return EXIT_OK


def cmd_attack(args, cfg: Config) -> int:
    corpus = load_corpus(_path(args, args.corpus or cfg["paths"]["corpus"]))
    model = load_model(_path(args, args.model or cfg["paths"]["oracle"]), expect_vocab_hash=corpus.vocab.hash)
    a = cfg["attack"]
    name = args.attack or a["attack"]
    if name not in ATTACKS:
        raise ConfigError(f"unknown attack {name!r}")
    seed = cfg["general"]["seed"]
    out = _path(args, args.out)
    n = 0
    with open(out, "w", encoding="utf-8") as fh:
        for i, s in enumerate(corpus.sequences):
            if corpus.splits[i] != cfg["experiment"]["split"] or s.label != MALWARE:
                continue
            if model.sequence_score(s.tokens) < model.threshold:
                continue
            arsenal = arsenal_for(corpus.programs[s.program_id], corpus.vocab)
            if not arsenal:
                continue
            ac = AttackConfig(model, arsenal, a["cadence"], a["max_injections_per_window"],
                              a["overhead_limit"], args.mode or a["mode"], derive_seed(seed, "attack", i))
            rec = ATTACKS[name](s, ac, require_malicious=False).to_record()
            rec["index"] = i
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    if n == 0:
        raise EmptyDetectedSetError("no detected malicious sequence to attack")
    print(f"wrote {out} ({n} attacks)")
    return EXIT_OK


def cmd_plan(args, cfg: Config) -> int:
    corpus = load_corpus(_path(args, args.corpus or cfg["paths"]["corpus"]))
    model = load_model(_path(args, args.model or cfg["paths"]["oracle"]), expect_vocab_hash=corpus.vocab.hash)
    if args.program_id not in corpus.programs:
        raise ConfigError(f"unknown program id {args.program_id!r}")
    idx = [s.program_id for s in corpus.sequences].index(args.program_id)
    program = corpus.programs[args.program_id]
    seed, b = cfg["general"]["seed"], cfg["experiment"]["b"]
    runs = [execute(program, derive_seed(seed, "pre-run", idx, k)) for k in range(b)]
    a = cfg["attack"]
    ac = AttackConfig(model, arsenal_for(program, corpus.vocab), a["cadence"], a["max_injections_per_window"],
                      a["overhead_limit"], "exhaust-budget", derive_seed(seed, "attack", idx))
    plan = make_plan(args.strategy.upper(), BehaviorSet.observe(runs, model), ac,
                     **({"round_limit": cfg["experiment"]["bco_rounds"]} if args.strategy == "bco" else {}))
    out = _path(args, args.out or f"{args.program_id}.patch.json")
    save_patch(plan, out)
    print(f"wrote {out}: {plan.n_injected} injected APIs at {len(plan.directives)} sites, "
          f"fully benign on observed runs: {plan.fully_benign}")
    return EXIT_OK


def cmd_patch(args, cfg: Config) -> int:
    corpus = load_corpus(_path(args, args.corpus or cfg["paths"]["corpus"]))
    plan = load_patch(_path(args, args.patch))
    if plan.program_id not in corpus.programs:
        raise ConfigError(f"patch refers to unknown program {plan.program_id!r}")
    program = corpus.programs[plan.program_id]
    idx = [s.program_id for s in corpus.sequences].index(plan.program_id)
    seed = cfg["general"]["seed"]
    b = args.runs or cfg["experiment"]["b"]
    patched = PatchedProgram.from_plan(program, plan, arsenal_for(program, corpus.vocab))
    pre = [execute(program, derive_seed(seed, "pre-run", idx, k)) for k in range(b)]
    post = [execute(patched, derive_seed(seed, "post-run", idx, k)) for k in range(b)]
    verdict = check_preservation(pre, post, plan)
    out = _path(args, args.out or f"{plan.program_id}.traces.jsonl")
    with open(out, "w", encoding="utf-8") as fh:
        for k, t in enumerate(post):
            rec = t.to_record()
            rec["run"] = k
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    print(json.dumps({"program_id": plan.program_id, "traces": str(out), **verdict.to_record()},
                     sort_keys=True))
    return EXIT_OK


def cmd_run(args, cfg: Config) -> int:
    e, p = cfg["experiment"], cfg["paths"]
    spec = ExperimentSpec(
        experiment=args.experiment,
        corpus=str(_path(args, args.corpus or p["corpus"])),
        oracle=str(_path(args, args.oracle or p["oracle"])),
        target=str(_path(args, args.target or p["target"])) if args.experiment.endswith("blackbox") else None,
        attacks=e["attacks"], strategies=e["strategies"], b=e["b"],
        overhead_limits=e["overhead_limits"], arsenal_buckets=e["arsenal_buckets"],
        thresholds=e["thresholds"], seed=cfg["general"]["seed"], split=e["split"],
        nondet_level=e["nondet_level"], max_samples=e["max_samples"], bco_rounds=e["bco_rounds"],
        jobs=args.jobs,
    )
    report = run_experiment(spec)
    stem = _path(args, args.out or str(Path(p["reports"]) / args.experiment))
    j = emit_report(report, stem.with_suffix(".json"), "json")
    c = emit_report(report, stem.with_suffix(".csv"), "csv")
    written = [j, c]
    if e["figures"]:
        from .plotting import render_figures
        written += render_figures(report, stem.parent, stem.name)
    _print_summary(report)
    print("wrote " + " ".join(str(w) for w in written))
    return EXIT_OK


def _print_summary(report) -> None:
    agg = report.aggregates
    if report.experiment == "feature-space":
        print("limit   attack                n     evasion  mean_ovh  median_ovh")
        for r in agg["by_attack"]:
            o = r["overhead"]
            print(f"{r['overhead_limit']:<7g} {r['attack']:<21} {r['n']:<5} {r['evasion_rate']:<8.4f} "
                  f"{o['mean'] if o['mean'] is not None else float('nan'):<9.2f} "
                  f"{o['median'] if o['median'] is not None else float('nan'):.1f}")
        return
    print("threshold  strategy  limit   programs  effectiveness  planned  realized  preserved")
    for r in agg["by_cell"]:
        print(f"{r['threshold']:<10g} {r['strategy']:<9} {r['overhead_limit']:<7g} {r['programs']:<9} "
              f"{r['effectiveness']:<14.4f} {r['planned_overhead_mean']:<8.2f} "
              f"{r['realized_overhead_mean']:<9.2f} {r['preservation_rate']:.4f}")
    for r in agg["by_threshold"]:
        if r["tpr"] is not None:
            print(f"threshold {r['threshold']:g}: TPR {r['tpr']:.4f} FPR {r['fpr']:.4f} "
                  + " ".join(f"{k}={v:.4f}" for k, v in r["effectiveness"].items()))


def cmd_sweep(args, cfg: Config) -> int:
    corpus = load_corpus(_path(args, args.corpus or cfg["paths"]["corpus"]), with_programs=False)
    model = load_model(_path(args, args.model or cfg["paths"]["oracle"]), expect_vocab_hash=corpus.vocab.hash)
    rows = sweep_threshold(model, corpus.split(cfg["experiment"]["split"]), cfg["experiment"]["thresholds"] or None)
    out = _path(args, args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("threshold,tpr,fpr\n")
        for t, tpr, fpr in rows:
            fh.write(f"{t!r},{tpr!r},{fpr!r}\n")
    print(f"wrote {out} ({len(rows)} thresholds)")
    return EXIT_OK


def cmd_report(args, cfg: Config) -> int:
    src = _path(args, args.input)
    try:
        report = load_report(src)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read report {src}: {exc}") from exc
    written = [emit_report(report, src.with_suffix(".csv"), "csv")]
    if cfg["experiment"]["figures"]:
        from .plotting import render_figures
        written += render_figures(report, src.parent, src.stem)
    _print_summary(report)
    print("wrote " + " ".join(str(w) for w in written))
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "train": cmd_train, "attack": cmd_attack, "plan": cmd_plan,
    "patch": cmd_patch, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "schema":
        print(schema_doc())
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        Path(args.workdir).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ModelLoadError) as exc:
        print(f"apievade: error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyDetectedSetError as exc:
        print(f"apievade: error: empty-detected-set: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except ApiEvadeError as exc:
        print(f"apievade: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
