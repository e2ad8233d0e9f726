"""Synthetic video-QA world.

A video has ``T`` frames, a hidden set of informative frames ``I`` and a
correct option out of ``M``. Looking at a frame subset ``S`` the oracle answers
correctly with probability ``p_base + gain * min(1, |S & I| / m)`` and spreads
the remaining mass evenly over the wrong options.

Also home to the reference implementations used to check the reward engine:
a loop-based recomputation of the pool reward and an exact expected subset
reward computed from the oracle's answer distribution.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .extract import AnswerFormat

SIMENV_VERSION = "simenv-v1"
LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
EXACT_MAX_POOL = 16
EXACT_MAX_OPTIONS = 4


@dataclass(frozen=True)
class SimEnvironment:
    T: int
    M: int
    informative: tuple[int, ...]
    truth: int
    p_base: float
    gain: float
    m: int
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "informative", tuple(sorted(int(i) for i in self.informative)))
        if self.M < 2 or self.M > 26:
            raise ValueError(f"M must be in [2, 26], got {self.M}")
        if not 0 <= self.truth < self.M:
            raise ValueError("truth out of range")
        if any(i < 0 or i >= self.T for i in self.informative):
            raise ValueError("informative index out of range")
        if len(set(self.informative)) != len(self.informative):
            raise ValueError("informative indices must be distinct")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        lo, hi = self.p_base, self.p_base + max(self.gain, 0.0)
        if min(lo, self.p_base + self.gain) < -1e-12 or hi > 1 + 1e-12:
            raise ValueError(f"p_correct leaves [0, 1]: p_base={self.p_base}, gain={self.gain}")

    @property
    def truth_letter(self) -> str:
        return LETTERS[self.truth]

    @property
    def answer_format(self) -> AnswerFormat:
        return AnswerFormat.multiple_choice(self.M)

    def coverage(self, subset) -> float:
        hits = len(set(int(t) for t in subset) & set(self.informative))
        return min(1.0, hits / self.m)

    def p_correct(self, subset) -> float:
        return min(1.0, max(0.0, self.p_base + self.gain * self.coverage(subset)))

    def answer_probs(self, subset) -> np.ndarray:
        pc = self.p_correct(subset)
        q = np.full(self.M, (1.0 - pc) / (self.M - 1))
        q[self.truth] = pc
        return q

    def to_dict(self) -> dict:
        d = asdict(self)
        d["informative"] = list(self.informative)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimEnvironment":
        return cls(T=int(d["T"]), M=int(d["M"]), informative=tuple(d["informative"]),
                   truth=int(d["truth"]), p_base=float(d["p_base"]), gain=float(d["gain"]),
                   m=int(d["m"]), seed=d.get("seed"))


def default_gain(p_base: float, full_coverage: float = 0.9) -> float:
    return full_coverage - p_base


def generate_env(T: int = 40, M: int = 10, informative_count: int = 4, shared_prior=None,
                 seed: int = 0, p_base: float | None = None, gain: float | None = None,
                 m: int | None = None) -> SimEnvironment:
    """Draw an environment; fully determined by its arguments and ``seed``."""
    if M < 2:
        raise ValueError("M must be >= 2")
    if not 1 <= informative_count <= T:
        raise ValueError(f"informative_count must be in [1, T={T}]")
    rng = np.random.default_rng(seed)
    if shared_prior is None:
        prior = np.full(T, 1.0 / T)
    else:
        prior = np.asarray(shared_prior, dtype=float)
        if prior.shape != (T,) or np.any(prior < 0) or not prior.sum() > 0:
            raise ValueError("shared_prior must be a nonnegative length-T vector")
        if np.count_nonzero(prior) < informative_count:
            raise ValueError("shared_prior support smaller than informative_count")
        prior = prior / prior.sum()
    informative = rng.choice(T, size=informative_count, replace=False, p=prior)
    truth = int(rng.integers(M))
    if p_base is None:
        p_base = 1.0 / M
    if gain is None:
        gain = default_gain(p_base)
    return SimEnvironment(T, M, tuple(int(i) for i in informative), truth, float(p_base),
                          float(gain), m if m is not None else informative_count, seed)


def positional_prior(T: int, center: float, width: float) -> np.ndarray:
    """Gaussian bump over frame positions, normalized."""
    x = np.arange(T)
    p = np.exp(-0.5 * ((x - center) / width) ** 2)
    return p / p.sum()


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def generate_batch(V: int, seed: int, T: int = 40, M: int = 10, informative_count: int = 4,
                   shared_prior=None, **kwargs) -> list[SimEnvironment]:
    if V < 1:
        raise ValueError("batch must be nonempty")
    return [generate_env(T, M, informative_count, shared_prior, derive_seed(seed, i), **kwargs)
            for i in range(V)]


def oracle_answer(env: SimEnvironment, subset, rng: np.random.Generator) -> str:
    if rng.random() < env.p_correct(subset):
        return env.truth_letter
    wrong = int(rng.integers(env.M - 1))
    return LETTERS[wrong + (wrong >= env.truth)]


def oracle_answers(env: SimEnvironment, subset, n: int, rng: np.random.Generator) -> list[str]:
    return [oracle_answer(env, subset, rng) for _ in range(n)]


def features(env: SimEnvironment, subset) -> np.ndarray:
    """Toy-policy input: evidence for the correct option scaled by coverage, plus a bias."""
    phi = np.zeros(env.M + 1)
    phi[env.truth] = env.coverage(subset)
    phi[env.M] = 1.0
    return phi


def clip_like_scores(env: SimEnvironment, rng: np.random.Generator, base: float = 0.25,
                     spread: float = 0.03, boost: float = 0.04) -> np.ndarray:
    """Stand-in for question/frame CLIP similarities: noisy, mildly higher on informative frames."""
    s = base + spread * rng.standard_normal(env.T)
    s[list(env.informative)] += boost
    return np.maximum(s, 0.01)


# -- reference reward computations ------------------------------------------------

def reference_pool_rewards(answers: Sequence[Sequence[str | None]], alpha: float,
                           invalid_reward: float = -1.0):
    """Direct loop evaluation of the frequency reward; ``None`` marks an invalid output.

    Returns ``(per_rollout[k][n], per_subset[k], baseline, freqs, h_norm)``.
    """
    flat = [a for row in answers for a in row if a is not None]
    if not flat:
        per = [[invalid_reward for _ in row] for row in answers]
        subs = [sum(r) / len(r) for r in per]
        return per, subs, sum(subs) / len(subs), {}, 0.0
    counts: dict[str, int] = {}
    for a in flat:
        counts[a] = counts.get(a, 0) + 1
    total = len(flat)
    freqs = {a: Fraction(c, total) for a, c in counts.items()}
    h = 0.0
    for p in freqs.values():
        h -= float(p) * math.log(float(p))
    h_norm = h / math.log(len(freqs)) if len(freqs) > 1 else 0.0
    per = [[float(freqs[a]) - alpha * h_norm if a is not None else invalid_reward for a in row]
           for row in answers]
    subs = [sum(r) / len(r) for r in per]
    return per, subs, sum(subs) / len(subs), {a: float(p) for a, p in freqs.items()}, h_norm


def _check_exact_bounds(K: int, N: int, M: int):
    if K * N > EXACT_MAX_POOL or M > EXACT_MAX_OPTIONS:
        raise ValueError(
            f"exact enumeration limited to K*N <= {EXACT_MAX_POOL} and M <= {EXACT_MAX_OPTIONS} "
            f"(got K*N={K * N}, M={M}); use monte_carlo_subset_reward instead")


def _count_distribution(dists: Sequence[np.ndarray]) -> dict[tuple[int, ...], float]:
    """Distribution of the answer-count vector of independent categorical draws."""
    M = len(dists[0])
    table = {tuple([0] * M): 1.0}
    for q in dists:
        nxt: dict[tuple[int, ...], float] = {}
        for c, pr in table.items():
            for a in range(M):
                if q[a] == 0.0:
                    continue
                c2 = list(c)
                c2[a] += 1
                c2 = tuple(c2)
                nxt[c2] = nxt.get(c2, 0.0) + pr * q[a]
        table = nxt
    return table


def _h_norm_counts(c: Sequence[int]) -> float:
    nz = [x for x in c if x > 0]
    if len(nz) <= 1:
        return 0.0
    tot = sum(nz)
    h = -sum((x / tot) * math.log(x / tot) for x in nz)
    return h / math.log(len(nz))


def expected_subset_reward(env: SimEnvironment, subsets, N: int, alpha: float = 0.75) -> np.ndarray:
    """Exact expectation of each subset's mean reward under the oracle.

    Pools are grouped into classes by their answer-count vector, which
    determines every frequency and the entropy; the expectation sums each
    class weighted by its exact probability.
    """
    K = len(subsets)
    _check_exact_bounds(K, N, env.M)
    qs = [env.answer_probs(s) for s in subsets]
    total = K * N
    draws = [q for q in qs for _ in range(N)]
    table = _count_distribution(draws)
    exp_h = math.fsum(pr * _h_norm_counts(c) for c, pr in table.items())
    exp_counts = np.sum(draws, axis=0)
    out = np.empty(K)
    for k, q in enumerate(qs):
        # E[c(a_kn)] = sum_a q(a) * (1 + E[c(a)] - q(a)) since a_kn is independent of the rest
        exp_freq = math.fsum(q[a] * (1.0 + exp_counts[a] - q[a]) for a in range(env.M)) / total
        out[k] = exp_freq - alpha * exp_h
    return out


def enumerate_subset_reward(env: SimEnvironment, subsets, N: int, alpha: float = 0.75,
                            max_pools: int = 300_000) -> np.ndarray:
    """Literal enumeration of all M^(K*N) pools; only for tiny instances."""
    K = len(subsets)
    if env.M ** (K * N) > max_pools:
        raise ValueError("instance too large for literal enumeration")
    qs = [env.answer_probs(s) for s in subsets]
    acc = np.zeros(K)
    for pool in itertools.product(range(env.M), repeat=K * N):
        pr = 1.0
        for i, a in enumerate(pool):
            pr *= qs[i // N][a]
        if pr == 0.0:
            continue
        rows = [[LETTERS[a] for a in pool[k * N:(k + 1) * N]] for k in range(K)]
        _, subs, _, _, _ = reference_pool_rewards(rows, alpha)
        acc += pr * np.asarray(subs)
    return acc


def monte_carlo_subset_reward(env: SimEnvironment, subsets, N: int, alpha: float = 0.75,
                              draws: int = 1_000_000, seed: int = 0, chunk: int = 200_000):
    """Monte Carlo estimate of each subset's mean reward; returns ``(mean, stderr)``."""
    K = len(subsets)
    rng = np.random.default_rng(seed)
    qs = np.array([env.answer_probs(s) for s in subsets])
    cdfs = np.cumsum(qs, axis=1)
    total = K * N
    s1 = np.zeros(K)
    s2 = np.zeros(K)
    done = 0
    while done < draws:
        b = min(chunk, draws - done)
        u = rng.random((b, K, N))
        ans = np.empty((b, K, N), dtype=np.int64)
        for k in range(K):
            ans[:, k, :] = np.minimum(np.searchsorted(cdfs[k], u[:, k, :], side="right"), env.M - 1)
        flat = ans.reshape(b, total)
        counts = np.zeros((b, env.M))
        for a in range(env.M):
            counts[:, a] = (flat == a).sum(axis=1)
        p = counts / total
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(p), 0.0)
        support = (counts > 0).sum(axis=1)
        h = -plogp.sum(axis=1)
        h_norm = np.where(support > 1, h / np.log(np.maximum(support, 2)), 0.0)
        freq_of = np.take_along_axis(p, flat, axis=1).reshape(b, K, N)
        rbar = freq_of.mean(axis=2) - alpha * h_norm[:, None]
        s1 += rbar.sum(axis=0)
        s2 += (rbar ** 2).sum(axis=0)
        done += b
    mean = s1 / draws
    var = np.maximum(s2 / draws - mean ** 2, 0.0)
    return mean, np.sqrt(var / draws)


# -- simenv-v1 ---------------------------------------------------------------

def dump_envs(envs: Sequence[SimEnvironment], path, meta: dict | None = None):
    doc = {"version": SIMENV_VERSION, "environments": [e.to_dict() for e in envs]}
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_envs(path) -> list[SimEnvironment]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != SIMENV_VERSION:
        raise ValueError(f"{path}: expected version {SIMENV_VERSION!r}, got {doc.get('version')!r}")
    return [SimEnvironment.from_dict(d) for d in doc["environments"]]
