import json

import numpy as np
import pytest

from apievade.corpus import save_corpus
from apievade.detector import save_model
from apievade.errors import ConfigError, EmptyDetectedSetError
from apievade.harness import (ExperimentSpec, aggregate_feature_space, aggregate_problem_space, emit_report,
                              load_report, report_csv, run_experiment, run_feature_space, run_preservation,
                              run_problem_space)
from apievade.plotting import render_figures

from conftest import random_model

CAP = 6


@pytest.fixture(scope="module")
def oracle(small_corpus):
    m = random_model(vocab=small_corpus.vocab, n=32, seed=21, threshold=0.5)
    scores = sorted(m.sequence_score(s.tokens) for s in small_corpus.sequences)
    m.threshold = float(np.median(scores))
    return m


@pytest.fixture(scope="module")
def target(small_corpus):
    m = random_model("triple", vocab=small_corpus.vocab, n=32, seed=22)
    scores = sorted(m.sequence_score(s.tokens) for s in small_corpus.sequences)
    m.threshold = float(np.median(scores))
    return m


@pytest.fixture(scope="module")
def feature_report(small_corpus, oracle):
    spec = ExperimentSpec("feature-space", overhead_limits=(0.1, 0.3), seed=3, split="train", max_samples=CAP)
    return run_feature_space(spec, small_corpus, oracle)


@pytest.fixture(scope="module")
def problem_report(small_corpus, oracle):
    spec = ExperimentSpec("problem-space-whitebox", b=3, overhead_limits=(0.2,), seed=3, split="train",
                          max_samples=CAP, bco_rounds=3, thresholds=(oracle.threshold, 0.9))
    return run_problem_space(spec, small_corpus, oracle)


def test_feature_aggregates_recomputable(feature_report):
    rep = feature_report
    assert rep.aggregates == aggregate_feature_space(rep.audits)
    for row in rep.aggregates["by_attack"]:
        mine = [a for a in rep.audits if a["attack"] == row["attack"] and a["overhead_limit"] == row["overhead_limit"]]
        assert row["n"] == len(mine)
        assert row["evasion_rate"] == sum(a["evaded"] for a in mine) / len(mine)
        ev = [a["overhead"] for a in mine if a["evaded"]]
        assert row["overhead"]["mean"] == (float(np.mean(ev)) if ev else None)


def test_feature_space_budget_monotone_and_within_limit(feature_report):
    by = {(a["attack"], a["index"], a["overhead_limit"]): a for a in feature_report.audits}
    for (att, idx, lim), a in by.items():
        assert a["overhead"] <= a["budget"]
        if lim == 0.1 and a["evaded"]:
            assert by[(att, idx, 0.3)]["evaded"]


def test_feature_space_limits_match_direct_runs(small_corpus, oracle, feature_report):
    spec = ExperimentSpec("feature-space", overhead_limits=(0.1,), seed=3, split="train", max_samples=CAP)
    direct = run_feature_space(spec, small_corpus, oracle)
    derived = [a for a in feature_report.audits if a["overhead_limit"] == 0.1]
    assert direct.audits == derived


def test_budget_zero_means_no_evasion(small_corpus, oracle):
    spec = ExperimentSpec("feature-space", overhead_limits=(0.0,), seed=3, split="train", max_samples=CAP)
    rep = run_feature_space(spec, small_corpus, oracle)
    assert all(r["evasion_rate"] == 0 for r in rep.aggregates["by_attack"])


def test_empty_detected_set(small_corpus):
    m = random_model(vocab=small_corpus.vocab, n=32, seed=21, head_scale=0.0, threshold=0.9)
    with pytest.raises(EmptyDetectedSetError):
        run_feature_space(ExperimentSpec("feature-space"), small_corpus, m)
    with pytest.raises(EmptyDetectedSetError):
        run_problem_space(ExperimentSpec("problem-space-whitebox", b=2, max_samples=3), small_corpus, m)


def test_sample_audits_independent_of_sample_set(small_corpus, oracle, problem_report):
    spec = ExperimentSpec("problem-space-whitebox", b=3, overhead_limits=(0.2,), seed=3, split="train",
                          max_samples=CAP // 2, bco_rounds=3, thresholds=(oracle.threshold, 0.9))
    half = run_problem_space(spec, small_corpus, oracle)
    idx = {a["index"] for a in half.audits}
    assert idx
    assert half.audits == [a for a in problem_report.audits if a["index"] in idx]


def test_problem_aggregates_recomputable(problem_report):
    rep = problem_report
    thr = [r["threshold"] for r in rep.aggregates["by_threshold"]]
    assert rep.aggregates == aggregate_problem_space(rep.audits, thr, (0.0, 0.05, 0.10, 0.15, 1.0))
    for cell in rep.aggregates["by_cell"]:
        t = cell["threshold"]
        rows = [a for a in rep.audits if a["strategy"] == cell["strategy"] and min(a["pre_target_scores"]) >= t]
        runs = [s for a in rows for s in a["post_target_scores"]]
        assert cell["executions"] == len(runs)
        assert cell["effectiveness"] == (sum(s < t for s in runs) / len(runs) if runs else 0.0)
    for cell in rep.aggregates["by_cell"]:
        buckets = [b for b in rep.aggregates["by_arsenal_bucket"]
                   if (b["threshold"], b["strategy"]) == (cell["threshold"], cell["strategy"])]
        assert sum(b["executions"] for b in buckets) == cell["executions"]


def test_preservation_is_total(small_corpus, oracle, problem_report):
    assert problem_report.aggregates["preservation_rate"] == 1.0
    assert all(a["preserved"] and a["preserved_fresh_seeds"] for a in problem_report.audits)
    assert run_preservation(None, report=problem_report) == 1.0


def test_planned_overhead_within_limit(problem_report):
    for a in problem_report.audits:
        assert a["planned_overhead"] <= 0.2 * max(a["pre_lengths"]) + 1e-9


def test_zero_nondeterminism_closes_the_loop(small_corpus, oracle):
    spec = ExperimentSpec("problem-space-whitebox", strategies=("lkb",), b=2, seed=3, split="train",
                          max_samples=CAP, nondet_level=0.0)
    rep = run_problem_space(spec, small_corpus, oracle)
    from apievade.attack import AttackConfig, ps_fgsm
    from apievade.vm import arsenal_for, execute
    for a in rep.audits:
        prog = small_corpus.programs[a["program_id"]].with_nondet(0.0)
        trace = execute(prog, 0)
        if oracle.sequence_score(trace.tokens) < oracle.threshold:
            continue
        res = ps_fgsm(trace, AttackConfig(oracle, arsenal_for(prog, small_corpus.vocab), overhead_limit=0.2))
        assert all((s < oracle.threshold) == res.evaded for s in a["post_target_scores"])


def test_blackbox_reports_rates(small_corpus, oracle, target):
    spec = ExperimentSpec("problem-space-blackbox", target="t.model", b=2, seed=3, split="train",
                          max_samples=CAP, bco_rounds=2, thresholds=(0.3, target.threshold, 0.7))
    rep = run_problem_space(spec, small_corpus, oracle, target)
    rows = rep.aggregates["by_threshold"]
    assert [r["threshold"] for r in rows] == [0.3, target.threshold, 0.7]
    assert all(r["tpr"] is not None and r["fpr"] is not None for r in rows)


def test_mode_separation(tmp_path, small_corpus, oracle):
    save_corpus(small_corpus, tmp_path / "c.jsonl")
    save_model(oracle, tmp_path / "o.model")
    (tmp_path / "t.model").write_bytes(b"not a model")
    common = dict(corpus=str(tmp_path / "c.jsonl"), oracle=str(tmp_path / "o.model"), b=2, seed=3,
                  split="train", max_samples=2, strategies=("lkb",))
    # White-box never opens the target file, even when one is configured.
    rep = run_experiment(ExperimentSpec("problem-space-whitebox", target=str(tmp_path / "t.model"), **common))
    assert rep.audits
    with pytest.raises(Exception):
        run_experiment(ExperimentSpec("problem-space-blackbox", target=str(tmp_path / "t.model"), **common))
    with pytest.raises(ConfigError):
        run_experiment(ExperimentSpec("problem-space-blackbox", **common))


def test_spec_validation():
    for bad in (dict(experiment="x"), dict(attacks=("nope",)), dict(b=0), dict(overhead_limits=()),
                dict(arsenal_buckets=(0.1, 0.05)), dict(thresholds=(1.5,)), dict(split="dev")):
        with pytest.raises(ConfigError):
            ExperimentSpec(**bad).validate()


@pytest.mark.parametrize("which", ["feature_report", "problem_report"])
def test_emission_byte_identical_and_round_trip(tmp_path, request, which):
    rep = request.getfixturevalue(which)
    a = emit_report(rep, tmp_path / "a.json").read_bytes()
    assert emit_report(rep, tmp_path / "b.json").read_bytes() == a
    again = load_report(tmp_path / "a.json")
    assert emit_report(again, tmp_path / "c.json").read_bytes() == a
    assert json.loads(a)["audits"] == rep.audits
    csv_text = emit_report(rep, tmp_path / "a.csv", "csv").read_text()
    assert len(csv_text.splitlines()) == len(rep.audits) + 1
    assert report_csv(again) == csv_text
    with pytest.raises(ConfigError):
        emit_report(rep, tmp_path / "x", "xml")


def test_figures_written(tmp_path, feature_report, problem_report):
    files = render_figures(feature_report, tmp_path, "fs") + render_figures(problem_report, tmp_path, "ps")
    assert files and all(f.exists() and f.stat().st_size > 0 for f in files)
