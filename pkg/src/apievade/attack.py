"""Position-sensitive gradient-sign insertion attack and two baselines.

All three attacks share one engine. Windows of ``n`` tokens are visited left
to right; each injection inserts one API inside the current window, and when
the window overflows its last token is pushed to the front of the remaining
suffix, so no behavior token is ever dropped.

The engine leaves a window once the window itself scores benign while the
whole sequence still does not. Stop-on-evasion mode halts as soon as the whole
sequence (max over windows) is benign; exhaust-budget mode instead keeps
injecting into the current window until its allowance or the budget runs out.
Both modes therefore follow the same trajectory up to the first evasion.

The variants differ only in how the insertion position and the injected API
are chosen:

=====================  ==================  ====================
attack                 position            api
=====================  ==================  ====================
``ps_fgsm``            norm-matrix rule    sign-distance rule
gradient / random pos  uniform             sign-distance rule
``baseline_random``    uniform             uniform over arsenal
=====================  ==================  ====================
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ApiSequence, PAD, stable_hash
from .detector.model import OracleModel
from .errors import AttackStateError, ConfigError, PreconditionError

MODES = ("stop-on-evasion", "exhaust-budget")


@dataclass
class AttackConfig:
    oracle: OracleModel
    arsenal: tuple[int, ...]
    cadence: int = 4
    max_injections_per_window: int = 800
    overhead_limit: float = 0.20
    mode: str = "stop-on-evasion"
    seed: int = 0
    budget: Optional[int] = None  # absolute cap; overrides overhead_limit when set

    def __post_init__(self):
        self.arsenal = tuple(sorted(set(int(a) for a in self.arsenal)))

    @property
    def window_size(self) -> int:
        return self.oracle.n

    def validate(self) -> None:
        if not self.arsenal:
            raise ConfigError("empty arsenal")
        if self.cadence < 1:
            raise ConfigError("cadence must be >= 1")
        if self.overhead_limit < 0:
            raise ConfigError("overhead_limit must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        for a in self.arsenal:
            if not 1 <= a <= self.oracle.vocab_size:
                raise ConfigError(f"arsenal api {a} outside the oracle vocabulary")

    def budget_for(self, length: int) -> int:
        if self.budget is not None:
            return int(self.budget)
        return int(math.floor(self.overhead_limit * length + 1e-9))

    def to_record(self) -> dict:
        return {"cadence": self.cadence, "max_injections_per_window": self.max_injections_per_window,
                "overhead_limit": self.overhead_limit, "mode": self.mode, "seed": self.seed,
                "budget": self.budget, "arsenal": list(self.arsenal), "window_size": self.window_size}


@dataclass(frozen=True)
class InjectionRecord:
    window_index: int
    position: int
    api: int
    oracle_score_after: float
    iteration: int


@dataclass
class AttackResult:
    original: ApiSequence
    adversarial: ApiSequence
    injections: list[InjectionRecord]
    evaded: bool
    initial_score: float
    final_score: float
    score_trace: list[float]
    oracle_calls: int
    attack: str = "ps-fgsm"
    # Per token of ``adversarial``: index into the original sequence, or
    # -(q + 1) for the token added by the q-th injection.
    source_index: list[int] = field(default_factory=list)
    # Exhaust mode only: source_index snapshot after each injection.
    partials: list[list[int]] = field(default_factory=list)

    @property
    def overhead(self) -> int:
        return len(self.injections)

    @property
    def overhead_fraction(self) -> float:
        return self.overhead / max(len(self.original), 1)

    def partial(self, k: int) -> tuple[list[int], list[int]]:
        """(tokens, source_index) after the first ``k`` injections (k >= 1)."""
        src = self.partials[k - 1]
        toks = [self.original.tokens[s] if s >= 0 else self.injections[-s - 1].api for s in src]
        return toks, src

    def to_record(self) -> dict:
        return {
            "attack": self.attack,
            "input_hash": stable_hash(self.original.tokens),
            "program_id": self.original.program_id,
            "original_length": len(self.original),
            "evaded": self.evaded,
            "overhead": self.overhead,
            "overhead_fraction": round(self.overhead_fraction, 6),
            "initial_score": self.initial_score,
            "final_score": self.final_score,
            "oracle_calls": self.oracle_calls,
            "injections": [[r.window_index, r.position, r.api, r.oracle_score_after, r.iteration]
                           for r in self.injections],
            "score_trace": self.score_trace,
        }


# ---------------------------------------------------------------------------
# selection rules

def norm_matrix(jacobian: np.ndarray) -> np.ndarray:
    """(d, n) matrix of absolute gradient entries, one column per position."""
    return np.abs(np.asarray(jacobian)).T


def compute_best_position(N: np.ndarray, r: int, c: int, n_valid: Optional[int] = None) -> int:
    """Greatest-absolute rule every ``c``-th iteration, greatest-smallest otherwise.

    Only the first ``n_valid`` columns (non-padding positions) are eligible.
    Ties resolve to the lowest index.
    """
    N = np.asarray(N)
    n_valid = N.shape[1] if n_valid is None else int(n_valid)
    if n_valid <= 0:
        raise AttackStateError("no non-padding position in window")
    cols = N[:, :n_valid]
    per_col = cols.max(axis=0) if r % c == 0 else cols.min(axis=0)
    return int(np.argmax(per_col))


def select_api(window: Sequence[int], position: int, jacobian: np.ndarray,
               arsenal: Sequence[int], model: OracleModel) -> int:
    """API whose insertion at ``position`` best matches the descent direction.

    Minimizes ``|| sign(embed(w[:P] + [a] + w[P:n-1])) - sign(-J) ||_1`` over
    the arsenal. Only row ``position`` of the modified window depends on the
    candidate, so the other rows are a shared constant and drop out.
    """
    arsenal = sorted(arsenal)
    if not arsenal:
        raise ConfigError("empty arsenal")
    target = np.sign(-np.asarray(jacobian)[position])
    cand = model._embed(np.asarray(arsenal, dtype=np.int64)[None, :])[0]
    dist = np.abs(np.sign(cand) - target).sum(axis=1)
    return int(arsenal[int(np.argmin(dist))])


# ---------------------------------------------------------------------------
# engine

PositionRule = Callable[[np.ndarray, int, int], int]
ApiRule = Callable[[list, int, np.ndarray], int]


class _Scorer:
    """Per-window scores of the evolving sequence, recomputed from a window on."""

    def __init__(self, oracle: OracleModel):
        self.oracle = oracle
        self.calls = 0
        self.scores = np.zeros(0)

    def full(self, tokens) -> float:
        self.scores = self.oracle.scores(self.oracle.windows(tokens))
        self.calls += 1
        return float(self.scores.max())

    def from_window(self, j: int, tokens) -> float:
        n = self.oracle.n
        tail = self.oracle.scores(self.oracle.windows(tokens[j * n:]))
        self.scores = np.concatenate([self.scores[:j], tail])
        self.calls += 1
        return float(self.scores.max())


def _run(x: ApiSequence, cfg: AttackConfig, name: str, position_rule: PositionRule,
         api_rule: ApiRule, require_malicious: bool, needs_gradient: bool = True) -> AttackResult:
    cfg.validate()
    oracle = cfg.oracle
    n, thr = oracle.n, oracle.threshold
    exhaust = cfg.mode == "exhaust-budget"
    budget = cfg.budget_for(len(x))
    scorer = _Scorer(oracle)
    orig = list(x.tokens)
    score = scorer.full(orig)
    initial = score
    if require_malicious and not exhaust and score < thr:
        raise PreconditionError(f"sequence already benign (score {score:.4f} < {thr})")

    done: list[tuple[int, int]] = []  # (token, source index)
    rest = deque((t, i) for i, t in enumerate(orig))
    injections, trace, partials = [], [], []
    r = total = 0
    w_index = 0
    while rest:
        w = [rest.popleft() for _ in range(min(n, len(rest)))]
        per_window = 0
        while True:
            if per_window >= cfg.max_injections_per_window or total >= budget:
                break
            if score < thr:
                # Whole sequence benign: stop, or keep lowering this window.
                if not exhaust:
                    break
            elif scorer.scores[w_index] < thr:
                # This window is benign but a later one is not: move on.
                break
            wt = [t for t, _ in w]
            J = None
            if needs_gradient:
                J = oracle.input_jacobian(oracle.pad(wt))
                scorer.calls += 1
            pos = position_rule(J, len(w), r)
            api = api_rule(wt, pos, J)
            w.insert(pos, (api, -(total + 1)))
            if len(w) > n:
                rest.appendleft(w.pop())
            r += 1
            per_window += 1
            total += 1
            seq = done + w + list(rest)
            score = scorer.from_window(w_index, [t for t, _ in seq])
            injections.append(InjectionRecord(w_index, pos, api, score, r - 1))
            trace.append(score)
            if exhaust:
                partials.append([s for _, s in seq])
        done.extend(w)
        w_index += 1

    tokens = [t for t, _ in done]
    src = [s for _, s in done]
    adv = ApiSequence(tokens, label=x.label, origin="adversarial-feature-space",
                      injected=[s < 0 for s in src], program_id=x.program_id)
    return AttackResult(x, adv, injections, score < thr, initial, score, trace, scorer.calls,
                        name, src, partials)


def ps_fgsm(x: ApiSequence, cfg: AttackConfig, require_malicious: bool = True) -> AttackResult:
    oracle = cfg.oracle

    def position(J, n_valid, r):
        return compute_best_position(norm_matrix(J), r, cfg.cadence, n_valid)

    def api(window, pos, J):
        return select_api(window, pos, J, cfg.arsenal, oracle)

    return _run(x, cfg, "ps-fgsm", position, api, require_malicious)


def baseline_gradient_api_random_pos(x: ApiSequence, cfg: AttackConfig,
                                     require_malicious: bool = True) -> AttackResult:
    rng = np.random.default_rng(cfg.seed)
    oracle = cfg.oracle

    def position(J, n_valid, r):
        return int(rng.integers(0, n_valid))

    def api(window, pos, J):
        return select_api(window, pos, J, cfg.arsenal, oracle)

    return _run(x, cfg, "gradient-random-pos", position, api, require_malicious)


def baseline_random(x: ApiSequence, cfg: AttackConfig, require_malicious: bool = True) -> AttackResult:
    rng = np.random.default_rng(cfg.seed)
    arsenal = cfg.arsenal

    def position(J, n_valid, r):
        return int(rng.integers(0, n_valid))

    def api(window, pos, J):
        return int(arsenal[int(rng.integers(0, len(arsenal)))])

    return _run(x, cfg, "random", position, api, require_malicious, needs_gradient=False)


ATTACKS = {
    "ps-fgsm": ps_fgsm,
    "gradient-random-pos": baseline_gradient_api_random_pos,
    "random": baseline_random,
}
