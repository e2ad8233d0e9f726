"""Batch-wide frequency reward over the K x N rollout pool of one question.

Each rollout is scored by the empirical frequency of its extracted answer
across the whole pool, minus an entropy penalty shared by the pool. Invalid
outputs are excluded from the frequencies but receive a fixed penalty reward
and still count towards their subset's average.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .extract import ExtractedAnswer


class NoValidAnswerError(ValueError):
    """Raised when a pool has no parseable answer to vote on."""


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 0.75
    invalid_reward: float = -1.0
    # when set, a rollout's frequency score is c(a) / |pool| rather than c(a) / #valid;
    # the reported freqs and the entropy stay over valid answers
    invalid_in_denominator: bool = False

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class PoolEntry:
    k: int
    n: int
    answer: ExtractedAnswer


@dataclass
class AnswerPool:
    entries: list[PoolEntry]
    K: int
    N: int

    def __post_init__(self):
        if self.K < 1 or self.N < 1:
            raise ValueError("K and N must be >= 1")
        if len(self.entries) != self.K * self.N:
            raise ValueError(f"pool has {len(self.entries)} entries, expected K*N={self.K * self.N}")
        seen = {(e.k, e.n) for e in self.entries}
        expected = {(k, n) for k in range(self.K) for n in range(self.N)}
        if seen != expected:
            raise ValueError("every (k, n) pair must appear exactly once")

    @classmethod
    def from_subsets(cls, answers: Sequence[Sequence[ExtractedAnswer | str]]) -> "AnswerPool":
        """Build a pool from ``answers[k][n]``; plain strings are taken as canonical tokens."""
        K = len(answers)
        if K == 0:
            raise ValueError("need at least one subset")
        N = len(answers[0])
        entries = []
        for k, row in enumerate(answers):
            if len(row) != N:
                raise ValueError("all subsets must have the same number of rollouts")
            for n, a in enumerate(row):
                if isinstance(a, str):
                    a = ExtractedAnswer.of(a)
                entries.append(PoolEntry(k, n, a))
        return cls(entries, K, N)

    def valid_answers(self) -> list[str]:
        return [e.answer.value for e in self.entries if e.answer.valid]


@dataclass
class RewardReport:
    counts: dict[str, int]
    freqs: dict[str, float]
    entropy_norm: float
    per_rollout: list[float]  # aligned with pool.entries
    per_subset: list[float]
    baseline: float
    majority: str | None
    skipped: bool = False
    entries: list[PoolEntry] = field(default_factory=list, repr=False)


def compute_frequencies(pool: AnswerPool) -> tuple[dict[str, int], dict[str, float]]:
    """Counts and empirical frequencies over valid answers; both empty for a degenerate pool."""
    counter = Counter(pool.valid_answers())
    total = sum(counter.values())
    counts = {a: counter[a] for a in sorted(counter)}
    freqs = {a: c / total for a, c in counts.items()}
    return counts, freqs


def normalized_entropy(freqs: dict[str, float]) -> float:
    if not freqs:
        raise ValueError("entropy of an empty distribution is undefined")
    if len(freqs) == 1:
        return 0.0
    h = -math.fsum(p * math.log(p) for p in freqs.values() if p > 0)
    return min(1.0, max(0.0, h / math.log(len(freqs))))


def majority_answer(counts: dict[str, int]) -> str:
    # ties go to the lexicographically smallest token
    return min(counts, key=lambda a: (-counts[a], a))


def _subset_means(pool: AnswerPool, per_rollout: Sequence[float]) -> list[float]:
    sums = [[] for _ in range(pool.K)]
    for e, r in zip(pool.entries, per_rollout):
        sums[e.k].append(r)
    return [math.fsum(s) / len(s) for s in sums]


def compute_rewards(pool: AnswerPool, params: RewardParams = RewardParams()) -> RewardReport:
    counts, freqs = compute_frequencies(pool)
    if not counts:
        per = [params.invalid_reward] * len(pool.entries)
        subs = _subset_means(pool, per)
        return RewardReport({}, {}, 0.0, per, subs, math.fsum(subs) / pool.K, None,
                            skipped=True, entries=list(pool.entries))

    h_norm = normalized_entropy(freqs)
    penalty = params.alpha * h_norm
    if params.invalid_in_denominator:
        score = {a: c / len(pool.entries) for a, c in counts.items()}
    else:
        score = freqs
    per = [score[e.answer.value] - penalty if e.answer.valid else params.invalid_reward
           for e in pool.entries]
    subs = _subset_means(pool, per)
    return RewardReport(
        counts=counts,
        freqs=freqs,
        entropy_norm=h_norm,
        per_rollout=per,
        per_subset=subs,
        baseline=math.fsum(subs) / pool.K,
        majority=majority_answer(counts),
        entries=list(pool.entries),
    )


def compute_gt_rewards(pool: AnswerPool, truth: str) -> RewardReport:
    """Ground-truth ablation: r = 1[answer == truth] in place of the frequency reward."""
    counts, freqs = compute_frequencies(pool)
    per = [1.0 if e.answer.valid and e.answer.value == truth else 0.0 for e in pool.entries]
    subs = _subset_means(pool, per)
    return RewardReport(
        counts=counts,
        freqs=freqs,
        entropy_norm=normalized_entropy(freqs) if freqs else 0.0,
        per_rollout=per,
        per_subset=subs,
        baseline=math.fsum(subs) / pool.K,
        majority=majority_answer(counts) if counts else None,
        skipped=not counts,
        entries=list(pool.entries),
    )


def self_consistency_answer(answers: AnswerPool | Iterable[ExtractedAnswer | str]) -> str:
    """Majority vote over valid answers, same tie-break as the reward pool."""
    if isinstance(answers, AnswerPool):
        values = answers.valid_answers()
    else:
        values = []
        for a in answers:
            if isinstance(a, str):
                a = ExtractedAnswer.of(a)
            if a.valid:
                values.append(a.value)
    if not values:
        raise NoValidAnswerError("no valid answers to vote on")
    return majority_answer(Counter(values))
