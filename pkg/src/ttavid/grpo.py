"""Group-relative advantages and REINFORCE-style updates on a softmax toy policy."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

GREEDY_TEMPERATURE = 1e-6


class Grouping(str, enum.Enum):
    PER_SUBSET = "per_subset"
    WHOLE_POOL = "whole_pool"


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: np.ndarray
    advantages: np.ndarray
    groups: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 5e-2
    epochs: int = 5
    kl_coeff: float = 0.0
    std_epsilon: float = 1e-8
    # False keeps the bias row (last feature, the answer prior) fixed during adaptation
    train_bias: bool = True

    # peak AdamW learning rate for 7B-scale VLM runs; documented only, the toy policy ignores it
    REFERENCE_PEAK_LR = 5e-7

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be >= 0")


def group_ids(K: int, N: int, grouping: Grouping | str) -> np.ndarray:
    """Group label per rollout for a pool laid out subset-major (k, n)."""
    if Grouping(grouping) is Grouping.PER_SUBSET:
        return np.repeat(np.arange(K), N)
    return np.zeros(K * N, dtype=int)


def compute_advantages(rewards, groups=None, std_epsilon: float = 1e-8) -> AdvantageGroup:
    """Standardize rewards within each group (population std).

    Groups whose std falls below ``std_epsilon`` get all-zero advantages.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a nonempty vector")
    g = np.zeros(r.size, dtype=int) if groups is None else np.asarray(groups)
    if g.shape != r.shape:
        raise ValueError("groups must label every reward")
    adv = np.zeros_like(r)
    for label in np.unique(g):
        idx = np.flatnonzero(g == label)
        vals = r[idx]
        mean = math.fsum(vals) / len(vals)
        centered = vals - mean
        std = math.sqrt(math.fsum(centered ** 2) / len(vals))
        if std < std_epsilon:
            continue
        adv[idx] = centered / std
    return AdvantageGroup(r, adv, g)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class ToyPolicy:
    """Linear-softmax answer policy: pi(a | phi) = softmax(theta^T phi / temperature)."""

    theta: np.ndarray  # (feature_dim, answer_count)
    temperature: float = 1.0
    ref_theta: np.ndarray | None = field(default=None, compare=False)

    @property
    def feature_dim(self) -> int:
        return self.theta.shape[0]

    @property
    def answer_count(self) -> int:
        return self.theta.shape[1]

    def logits(self, phi) -> np.ndarray:
        return np.asarray(phi, dtype=float) @ self.theta

    def probs(self, phi) -> np.ndarray:
        z = self.logits(phi)
        if self.temperature < GREEDY_TEMPERATURE:
            out = np.zeros_like(z)
            out[int(np.argmax(z))] = 1.0
            return out
        return _softmax(z / self.temperature)

    def log_prob(self, phi, answer: int) -> float:
        z = self.logits(phi) / self.temperature
        zmax = z.max()
        return float(z[answer] - zmax - math.log(np.exp(z - zmax).sum()))

    def grad_log_prob(self, phi, answer: int) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        onehot = np.zeros(self.answer_count)
        onehot[answer] = 1.0
        return np.outer(phi, onehot - self.probs(phi)) / self.temperature

    def with_theta(self, theta: np.ndarray) -> "ToyPolicy":
        return replace(self, theta=theta)

    def to_dict(self) -> dict:
        d = {"version": "toypolicy-v1", "temperature": self.temperature,
             "theta": self.theta.tolist()}
        if self.ref_theta is not None:
            d["ref_theta"] = self.ref_theta.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyPolicy":
        ref = d.get("ref_theta")
        return cls(np.asarray(d["theta"], dtype=float), float(d["temperature"]),
                   None if ref is None else np.asarray(ref, dtype=float))


def initial_policy(answer_count: int, evidence_weight: float = 1.0,
                   temperature: float = 1.0) -> ToyPolicy:
    """Evidence-block identity scaled by ``evidence_weight`` plus a zero bias row.

    Feature layout matches ``sim.features``: one evidence slot per option, then a bias.
    """
    theta = np.zeros((answer_count + 1, answer_count))
    theta[:answer_count, :] = evidence_weight * np.eye(answer_count)
    return ToyPolicy(theta, temperature, theta.copy())


def surrogate_objective(theta: np.ndarray, rollouts, temperature: float = 1.0) -> float:
    """Mean of advantage * log pi(answer | features); its gradient is the policy step direction."""
    pol = ToyPolicy(theta, temperature)
    return math.fsum(a * pol.log_prob(phi, ans) for phi, ans, a in rollouts) / len(rollouts)


def kl_to_reference(policy: ToyPolicy, phi) -> float:
    p = policy.probs(phi)
    q = ToyPolicy(policy.ref_theta, policy.temperature).probs(phi)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _kl_grad(policy: ToyPolicy, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    p = policy.probs(phi)
    q = ToyPolicy(policy.ref_theta, policy.temperature).probs(phi)
    logratio = np.log(np.maximum(p, 1e-300)) - np.log(np.maximum(q, 1e-300))
    kl = float(np.sum(p * logratio))
    return np.outer(phi, p * (logratio - kl)) / policy.temperature


def fsum_arrays(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise compensated sum, so the result does not depend on input order."""
    stacked = np.stack(arrays)
    flat = stacked.reshape(len(arrays), -1)
    out = np.array([math.fsum(flat[:, j]) for j in range(flat.shape[1])])
    return out.reshape(stacked.shape[1:])


def policy_gradient(policy: ToyPolicy, rollouts) -> np.ndarray:
    """Mean of advantage * grad log pi over ``(features, answer, advantage)`` triples."""
    if not rollouts:
        raise ValueError("no rollouts")
    terms = []
    for i, (phi, ans, adv) in enumerate(rollouts):
        g = adv * policy.grad_log_prob(phi, ans)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient at rollout {i} (answer={ans}, advantage={adv}, "
                f"features={np.asarray(phi).tolist()})")
        terms.append(g)
    return fsum_arrays(terms) / len(terms)


def policy_step(policy: ToyPolicy, rollouts, config: TrainConfig = TrainConfig(),
                gradient: np.ndarray | None = None) -> ToyPolicy:
    """One ascent step on the surrogate, minus an optional KL pull toward ``ref_theta``.

    ``gradient`` may be supplied precomputed (batch aggregation); otherwise it is
    computed from ``rollouts``.
    """
    grad = policy_gradient(policy, rollouts) if gradient is None else gradient
    if config.kl_coeff > 0:
        if policy.ref_theta is None:
            raise ValueError("kl_coeff > 0 needs a policy with ref_theta")
        kl = fsum_arrays([_kl_grad(policy, phi) for phi, _, _ in rollouts]) / len(rollouts)
        grad = grad - config.kl_coeff * kl
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite aggregated gradient")
    if not config.train_bias:
        grad = grad.copy()
        grad[-1, :] = 0.0
    return policy.with_theta(policy.theta + config.eta * grad)


def rollout_policy(policy: ToyPolicy, phi, N: int, rng: np.random.Generator) -> list[int]:
    """N independent answer draws; greedy when the temperature is effectively zero."""
    if N < 1:
        raise ValueError("N must be >= 1")
    p = policy.probs(phi)
    if policy.temperature < GREEDY_TEMPERATURE:
        return [int(np.argmax(p))] * N
    cdf = np.cumsum(p)
    u = rng.random(N) * cdf[-1]
    return [int(min(np.searchsorted(cdf, x, side="right"), len(p) - 1)) for x in u]
