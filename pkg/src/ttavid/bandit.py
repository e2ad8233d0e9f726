"""Multiplicative-weights bandit over a video's frame grid.

Each frame is an arm. After a round of K subsets, every frame's weight is
multiplied by ``exp(eta * sum_k (rbar_k - baseline) * [t in S_k])`` where the
baseline is the mean subset reward; probabilities are the normalized weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

WEIGHT_FLOOR = 1e-12
EXPONENT_CLAMP = 50.0
DEFAULT_GRID = 40


@dataclass(frozen=True)
class FrameDistribution:
    weights: np.ndarray
    probs: np.ndarray
    init_kind: str = "uniform"  # "uniform" | "clip"
    step_count: int = 0

    @property
    def T(self) -> int:
        return len(self.probs)

    def __eq__(self, other):
        if not isinstance(other, FrameDistribution):
            return NotImplemented
        return (self.init_kind == other.init_kind and self.step_count == other.step_count
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.probs, other.probs))

    @classmethod
    def from_weights(cls, weights, init_kind: str = "uniform", step_count: int = 0):
        w = np.asarray(weights, dtype=float)
        return cls(w, _normalize(w), init_kind, step_count)

    def mass(self, indices) -> float:
        return float(math.fsum(self.probs[list(indices)]))


@dataclass(frozen=True)
class BanditUpdateInput:
    subsets: Sequence[Sequence[int]]
    per_subset_rewards: Sequence[float]
    eta_fs: float = 3.0

    def check(self, T: int, F: int | None = None):
        if len(self.subsets) == 0:
            raise ValueError("need at least one subset")
        if len(self.subsets) != len(self.per_subset_rewards):
            raise ValueError("one reward per subset required")
        sizes = {len(s) for s in self.subsets}
        if len(sizes) != 1:
            raise ValueError(f"subsets must share one size, got sizes {sorted(sizes)}")
        if F is not None and sizes != {F}:
            raise ValueError(f"subsets must have exactly {F} frames")
        for s in self.subsets:
            if len(set(s)) != len(s):
                raise ValueError(f"subset {list(s)} repeats a frame")
            if min(s) < 0 or max(s) >= T:
                raise ValueError(f"subset {list(s)} out of range for T={T}")


def _normalize(w: np.ndarray) -> np.ndarray:
    total = math.fsum(w)
    if not total > 0:
        raise ValueError("weights must have positive total")
    return w / total


def init_distribution(T: int = DEFAULT_GRID, clip_scores=None) -> FrameDistribution:
    """Uniform weights, or CLIP similarity scores normalized to sum to one."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if clip_scores is None:
        w = np.full(T, 1.0 / T)
        return FrameDistribution(w, w.copy(), "uniform", 0)
    scores = np.asarray(clip_scores, dtype=float)
    if scores.shape != (T,):
        raise ValueError(f"expected {T} clip scores, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)) or np.any(scores < 0):
        raise ValueError("clip scores must be finite and nonnegative")
    if not scores.sum() > 0:
        raise ValueError("clip scores are all zero")
    w = np.maximum(_normalize(scores), WEIGHT_FLOOR)
    return FrameDistribution(w, _normalize(w), "clip", 0)


def frame_exponents(T: int, inp: BanditUpdateInput) -> np.ndarray:
    """Unclamped exponent per frame: eta * sum_k (rbar_k - baseline) over subsets containing it."""
    rewards = [float(r) for r in inp.per_subset_rewards]
    baseline = math.fsum(rewards) / len(rewards)
    acc = [[] for _ in range(T)]
    for s, r in zip(inp.subsets, rewards):
        for t in s:
            acc[t].append(r - baseline)
    return np.array([inp.eta_fs * math.fsum(a) for a in acc])


def update(dist: FrameDistribution, inp: BanditUpdateInput) -> FrameDistribution:
    inp.check(dist.T)
    e = np.clip(frame_exponents(dist.T, inp), -EXPONENT_CLAMP, EXPONENT_CLAMP)
    # weights are rescaled to unit total before flooring so the floor is scale-free
    w = np.maximum(_normalize(dist.weights * np.exp(e)), WEIGHT_FLOOR)
    return replace(dist, weights=w, probs=_normalize(w), step_count=dist.step_count + 1)


def sample_subset(probs, F: int, rng: np.random.Generator) -> tuple[int, ...]:
    """F distinct indices drawn one at a time in proportion to the remaining mass."""
    if isinstance(probs, FrameDistribution):
        probs = probs.probs
    p = np.array(probs, dtype=float)
    T = len(p)
    if F > T:
        raise ValueError(f"cannot draw {F} distinct frames from {T}")
    if F < 0:
        raise ValueError("F must be nonnegative")
    chosen = []
    for _ in range(F):
        cdf = np.cumsum(p)
        total = cdf[-1]
        if not total > 0:
            # only zero-mass frames remain; fall back to uniform over them
            p = np.where(np.isin(np.arange(T), chosen), 0.0, 1.0)
            cdf = np.cumsum(p)
            total = cdf[-1]
        idx = int(np.searchsorted(cdf, rng.random() * total, side="right"))
        idx = min(idx, T - 1)
        while p[idx] == 0.0:  # guard rounding onto an exhausted slot
            idx -= 1
        chosen.append(idx)
        p[idx] = 0.0
    return tuple(sorted(chosen))
