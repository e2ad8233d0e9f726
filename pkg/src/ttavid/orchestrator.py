"""The adaptation loop and adapted inference.

Per epoch and per question: draw K frame subsets from the question's current
frame distribution, collect N rollouts for each, score the K x N pool, update
the frame bandit with the per-subset rewards, and (with a toy policy) add the
question's GRPO gradient to the epoch's batch update.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import bandit, grpo, sim
from .distribution import GlobalPrior, SelectMode, interpolate, select_inference_frames
from .extract import INVALID, AnswerFormat, ExtractedAnswer, extract_answer
from .remote import BackendError, EndpointConfig, remote_generate
from .reward import (AnswerPool, NoValidAnswerError, PoolEntry, RewardParams, compute_gt_rewards,
                     compute_rewards, self_consistency_answer)

log = logging.getLogger(__name__)

ROLLOUTLOG_VERSION = "rolloutlog-v1"

# stream tags for per-purpose random generators
_SUBSETS, _ROLLOUTS, _INFER = 1, 2, 3


@dataclass
class VideoSample:
    video_id: str
    question: str = ""
    fmt: AnswerFormat = field(default_factory=lambda: AnswerFormat.multiple_choice(4))
    frames: list = field(default_factory=list)
    env: sim.SimEnvironment | None = None
    clip_scores: np.ndarray | None = None
    question_id: str = ""
    answer: str | None = None  # ground truth, when known

    def __post_init__(self):
        if not self.question_id:
            self.question_id = self.video_id
        if self.clip_scores is not None:
            self.clip_scores = np.asarray(self.clip_scores, dtype=float)
            if self.clip_scores.shape != (self.T,) or np.any(self.clip_scores < 0):
                raise ValueError(f"{self.video_id}: clip_scores must be {self.T} nonnegative values")

    @property
    def T(self) -> int:
        return self.env.T if self.env is not None else len(self.frames)

    @classmethod
    def from_env(cls, env: sim.SimEnvironment, video_id: str, clip_scores=None) -> "VideoSample":
        return cls(video_id=video_id, question=f"sim question {video_id}", fmt=env.answer_format,
                   frames=list(range(env.T)), env=env, clip_scores=clip_scores,
                   answer=env.truth_letter)


@dataclass
class AdaptationConfig:
    K: int = 4
    F: int = 4
    N: int = 8
    epochs: int = 5
    temperature: float = 1.0
    batch_size: int = 32
    reward: RewardParams = field(default_factory=RewardParams)
    eta_fs: float = 3.0
    grouping: grpo.Grouping = grpo.Grouping.PER_SUBSET
    train: grpo.TrainConfig = field(default_factory=grpo.TrainConfig)
    reward_mode: str = "frequency"  # or "gt"
    policy_cadence: str = "epoch"  # or "question"
    use_clip_init: bool = True
    seed: int = 0
    max_prompt_tokens: int = 7524
    max_response_tokens: int = 1024
    max_in_flight: int = 4

    def __post_init__(self):
        for name in ("K", "F", "N", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        self.grouping = grpo.Grouping(self.grouping)
        if self.reward_mode not in ("frequency", "gt"):
            raise ValueError("reward_mode must be 'frequency' or 'gt'")
        if self.policy_cadence not in ("epoch", "question"):
            raise ValueError("policy_cadence must be 'epoch' or 'question'")


@dataclass
class RolloutRecord:
    video_id: str
    question_id: str
    epoch: int
    subset_index: int
    rollout_index: int
    subset: list[int]
    text: str
    answer: str
    reward: float | None = None
    latency_ms: float | None = None

    def to_json(self) -> str:
        d = {"version": ROLLOUTLOG_VERSION}
        d.update(asdict(self))
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "RolloutRecord":
        d = json.loads(line)
        if d.pop("version", None) != ROLLOUTLOG_VERSION:
            raise ValueError(f"not a {ROLLOUTLOG_VERSION} record")
        return cls(**d)


def write_log(records: Sequence[RolloutRecord], path, append: bool = False):
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
        fh.flush()


def read_log(path) -> list[RolloutRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RolloutRecord.from_json(line) for line in fh if line.strip()]


# -- backends -------------------------------------------------------------------

@dataclass(frozen=True)
class Generation:
    text: str | None  # None when the backend failed for this rollout
    latency_ms: float | None = None


class SimBackend:
    """Answers come from the simulator oracle; optionally wrapped as ``Answer: X`` text."""

    def __init__(self, text_mode: bool = True):
        self.text_mode = text_mode

    def _wrap(self, letter: str) -> str:
        return f"Reasoning over the frames.\nAnswer: {letter}" if self.text_mode else letter

    def generate(self, sample: VideoSample, subset, n: int, rng) -> list[Generation]:
        if sample.env is None:
            raise BackendError(f"{sample.video_id}: sim backend needs a simulated sample")
        return [Generation(self._wrap(a)) for a in sim.oracle_answers(sample.env, subset, n, rng)]

    def features(self, sample: VideoSample, subset) -> np.ndarray:
        return sim.features(sample.env, subset)

    def wrap(self, letter: str) -> str:
        return self._wrap(letter)


class ConstantBackend:
    """Always returns the same text; a fixture for loop invariants."""

    def __init__(self, text: str):
        self.text = text

    def generate(self, sample, subset, n, rng) -> list[Generation]:
        return [Generation(self.text) for _ in range(n)]


class RemoteBackend:
    """Remote VLM; frame selection and bandit learning only, no parameter updates."""

    def __init__(self, endpoint: EndpointConfig, temperature: float = 1.0,
                 max_tokens: int = 1024, max_prompt_tokens: int = 7524, max_in_flight: int = 4,
                 client=None, sleep=None):
        self.endpoint = endpoint
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.max_prompt_tokens = max_prompt_tokens
        self.max_in_flight = max_in_flight
        self.client = client
        self.sleep = sleep

    def _one(self, sample: VideoSample, images) -> Generation:
        kwargs = {"client": self.client}
        if self.sleep is not None:
            kwargs["sleep"] = self.sleep
        try:
            c = remote_generate(sample.question, images, self.temperature, self.max_tokens,
                                self.endpoint, self.max_prompt_tokens, **kwargs)
        except BackendError as exc:
            log.error("%s: %s", sample.video_id, exc)
            return Generation(None)
        return Generation(c.text, c.latency_ms)

    def generate(self, sample: VideoSample, subset, n: int, rng) -> list[Generation]:
        images = [sample.frames[t] for t in subset]
        if self.max_in_flight <= 1 or n == 1:
            return [self._one(sample, images) for _ in range(n)]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            # map preserves submission order, so results stay ordered by rollout index
            return list(pool.map(lambda _: self._one(sample, images), range(n)))


# -- helpers ----------------------------------------------------------------------

def _video_key(video_id: str) -> int:
    return int.from_bytes(hashlib.sha256(video_id.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, video_id: str, *parts: int) -> np.random.Generator:
    """Generator keyed by content, not batch position, so batch order does not matter."""
    return np.random.default_rng([int(seed), _video_key(video_id), *[int(p) for p in parts]])


def initial_distribution(sample: VideoSample, config: AdaptationConfig) -> bandit.FrameDistribution:
    scores = sample.clip_scores if config.use_clip_init else None
    return bandit.init_distribution(sample.T, scores)


def _letter_index(letter: str) -> int:
    return ord(letter) - ord("A")


class _PolicyResponder:
    def __init__(self, policy: grpo.ToyPolicy, backend, wrap: Callable[[str], str]):
        self.policy = policy
        self.backend = backend
        self.wrap = wrap

    def generate(self, sample, subset, n, rng) -> list[Generation]:
        phi = self.backend.features(sample, subset)
        picks = grpo.rollout_policy(self.policy, phi, n, rng)
        return [Generation(self.wrap(sim.LETTERS[a])) for a in picks]


def _responder(backend, policy: grpo.ToyPolicy | None):
    if policy is None:
        return backend
    wrap = getattr(backend, "wrap", lambda letter: f"Answer: {letter}")
    return _PolicyResponder(policy, backend, wrap)


@dataclass
class EpochStats:
    epoch: int
    mean_reward: float
    majority_freq: float
    informative_mass: float | None
    skipped: int
    majority_accuracy: float | None

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class AdaptResult:
    distributions: list[bandit.FrameDistribution]
    policy: grpo.ToyPolicy | None
    records: list[RolloutRecord]
    stats: list[EpochStats]
    bandit_updates: int = 0
    policy_steps: int = 0


def _question_gradient(policy, backend, sample, subsets, picks, rewards, config):
    K, N = config.K, config.N
    adv = grpo.compute_advantages(rewards, grpo.group_ids(K, N, config.grouping),
                                  config.train.std_epsilon).advantages
    rollouts = []
    for k in range(K):
        phi = backend.features(sample, subsets[k])
        for n in range(N):
            a = picks[k * N + n]
            if a is None:
                continue
            rollouts.append((phi, a, float(adv[k * N + n])))
    if not rollouts:
        return None, []
    return grpo.policy_gradient(policy, rollouts), rollouts


def adapt_batch(samples: Sequence[VideoSample], config: AdaptationConfig, backend,
                policy: grpo.ToyPolicy | None = None,
                distributions: Sequence[bandit.FrameDistribution] | None = None,
                log_path=None, on_epoch: Callable[[int, "AdaptResult"], None] | None = None
                ) -> AdaptResult:
    """Run the test-time adaptation loop over a batch of questions."""
    if not samples:
        raise ValueError("empty batch")
    grids = {s.T for s in samples}
    if len(grids) != 1:
        raise ValueError(f"samples must share one frame grid, got {sorted(grids)}")
    if config.F > samples[0].T:
        raise ValueError(f"F={config.F} exceeds grid size {samples[0].T}")
    if policy is not None and not hasattr(backend, "features"):
        raise ValueError("toy-policy mode needs a backend that provides features")

    dists = list(distributions) if distributions is not None else [
        initial_distribution(s, config) for s in samples]
    if log_path is not None:
        Path(log_path).write_text("", encoding="utf-8")
    result = AdaptResult(dists, policy, [], [])
    K, N = config.K, config.N

    for epoch in range(config.epochs):
        epoch_records: list[RolloutRecord] = []
        grads, all_rollouts = [], []
        rewards_seen, maj_freqs, masses, correct = [], [], [], []
        skipped = 0
        failures = 0

        for i, sample in enumerate(samples):
            responder = _responder(backend, result.policy)
            sub_rng = stream(config.seed, sample.video_id, epoch, _SUBSETS)
            subsets = [bandit.sample_subset(dists[i], config.F, sub_rng) for _ in range(K)]

            entries, recs, picks = [], [], []
            for k, s in enumerate(subsets):
                gens = responder.generate(sample, s, N, stream(config.seed, sample.video_id,
                                                               epoch, _ROLLOUTS, k))
                if len(gens) != N:
                    raise BackendError(f"backend returned {len(gens)} rollouts, expected {N}")
                for n, g in enumerate(gens):
                    if g.text is None:
                        failures += 1
                        ans = ExtractedAnswer.invalid()
                    else:
                        ans = extract_answer(g.text, sample.fmt)
                    entries.append(PoolEntry(k, n, ans))
                    picks.append(_letter_index(ans.value) if ans.valid and len(ans.value) == 1
                                 and ans.value.isalpha() else None)
                    recs.append(RolloutRecord(sample.video_id, sample.question_id, epoch, k, n,
                                              list(s), g.text or "", ans.value,
                                              latency_ms=g.latency_ms))

            pool = AnswerPool(entries, K, N)
            if config.reward_mode == "gt":
                if sample.answer is None:
                    raise ValueError(f"{sample.video_id}: gt reward needs a ground-truth answer")
                report = compute_gt_rewards(pool, sample.answer)
            else:
                report = compute_rewards(pool, config.reward)
            for rec, r in zip(recs, report.per_rollout):
                rec.reward = float(r)
            epoch_records.extend(recs)
            rewards_seen.extend(report.per_rollout)

            if report.skipped:
                skipped += 1
            else:
                maj_freqs.append(report.freqs[report.majority])
                if sample.answer is not None:
                    correct.append(report.majority == sample.answer)
                dists[i] = bandit.update(dists[i], bandit.BanditUpdateInput(
                    subsets, report.per_subset, config.eta_fs))
                result.bandit_updates += 1
                if result.policy is not None:
                    g, rollouts = _question_gradient(result.policy, backend, sample, subsets,
                                                     picks, report.per_rollout, config)
                    if g is not None:
                        if config.policy_cadence == "question":
                            result.policy = grpo.policy_step(result.policy, rollouts,
                                                             config.train, gradient=g)
                            result.policy_steps += 1
                        else:
                            grads.append(g)
                            all_rollouts.extend(rollouts)
            if sample.env is not None:
                masses.append(dists[i].mass(sample.env.informative))

        if grads:
            mean_grad = grpo.fsum_arrays(grads) / len(grads)
            result.policy = grpo.policy_step(result.policy, all_rollouts, config.train,
                                             gradient=mean_grad)
            result.policy_steps += 1

        result.records.extend(epoch_records)
        if log_path is not None:
            write_log(epoch_records, log_path, append=True)
        result.stats.append(EpochStats(
            epoch=epoch,
            mean_reward=math.fsum(rewards_seen) / len(rewards_seen),
            majority_freq=math.fsum(maj_freqs) / len(maj_freqs) if maj_freqs else 0.0,
            informative_mass=math.fsum(masses) / len(masses) if masses else None,
            skipped=skipped,
            majority_accuracy=sum(correct) / len(correct) if correct else None,
        ))
        if on_epoch is not None:
            on_epoch(epoch, result)
        if failures == len(epoch_records):
            raise BackendError(f"every rollout failed in epoch {epoch}; partial log flushed")

    result.distributions = dists
    return result


@dataclass
class Prediction:
    question_id: str
    answer: str | None  # None: no prediction available
    frames: tuple[int, ...] = ()
    correct: bool | None = None


def adapted_inference(samples: Sequence[VideoSample], prior, config: AdaptationConfig, backend,
                      mode: SelectMode | str = SelectMode.SAMPLE, F_out: int = 32,
                      votes: int = 1, policy: grpo.ToyPolicy | None = None,
                      allow_interpolate: bool = False) -> list[Prediction]:
    """Predict each sample's answer from frames chosen by ``prior``.

    ``prior`` may be a GlobalPrior, a probability vector, or a callable mapping a
    sample to its own probability vector (e.g. CLIP-score sampling).
    """
    responder = _responder(backend, policy)
    out = []
    for sample in samples:
        if callable(prior):
            probs = np.asarray(prior(sample), dtype=float)
        else:
            probs = prior.probs if isinstance(prior, GlobalPrior) else np.asarray(prior, dtype=float)
        if len(probs) != sample.T:
            if not allow_interpolate:
                raise ValueError(f"prior grid {len(probs)} does not match sample grid {sample.T} "
                                 f"for {sample.video_id}; interpolate first")
            probs = interpolate(probs, sample.T)
        rng = stream(config.seed, sample.video_id, _INFER)
        frames = select_inference_frames(probs, min(F_out, sample.T), mode, rng)
        gens = responder.generate(sample, frames, votes, rng)
        answers = [extract_answer(g.text, sample.fmt) for g in gens if g.text is not None]
        if not answers:
            pred = None
        elif votes == 1:
            pred = answers[0].value if answers[0].valid else INVALID
        else:
            try:
                pred = self_consistency_answer(answers)
            except NoValidAnswerError:
                pred = INVALID
        correct = None if sample.answer is None or pred is None else pred == sample.answer
        out.append(Prediction(sample.question_id, pred, frames, correct))
    return out


def accuracy(preds: Sequence[Prediction]) -> float:
    scored = [p.correct for p in preds if p.correct is not None]
    return sum(scored) / len(scored) if scored else float("nan")
