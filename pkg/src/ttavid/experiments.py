"""Glue between a RunConfig and the adaptation machinery: worlds, backends, evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bandit, grpo, sim
from .config import RunConfig
from .distribution import BlendSpec, GlobalPrior, average_distributions, blend
from .extract import AnswerFormat
from .orchestrator import (AdaptResult, Prediction, RemoteBackend, SimBackend, VideoSample,
                           accuracy, adapt_batch, adapted_inference)
from .remote import EndpointConfig, load_frame_dir

SAMPLES_VERSION = "samples-v1"


@dataclass
class SimWorld:
    train: list[VideoSample]
    eval: list[VideoSample]
    shared_prior: np.ndarray | None


def shared_prior_for(cfg: RunConfig) -> np.ndarray | None:
    if cfg.sim.shared_prior == "none":
        return None
    rng = np.random.default_rng([cfg.run.seed, 77])
    T, w = cfg.sim.T, cfg.sim.prior_width
    center = rng.uniform(min(w, T / 4), max(T - 1 - w, 3 * T / 4))
    return sim.positional_prior(T, center, w)


def _sim_samples(cfg: RunConfig, envs, tag: str, stream: int) -> list[VideoSample]:
    out = []
    for i, env in enumerate(envs):
        scores = None
        if cfg.sim.clip_scores:
            scores = sim.clip_like_scores(env, np.random.default_rng([cfg.run.seed, stream, i]))
        out.append(VideoSample.from_env(env, f"sim{cfg.run.seed}-{tag}-{i:03d}", scores))
    return out


def build_sim_world(cfg: RunConfig) -> SimWorld:
    s = cfg.sim
    prior = shared_prior_for(cfg)
    kw = dict(T=s.T, M=s.M, informative_count=s.informative_count, shared_prior=prior,
              p_base=s.p_base, gain=s.gain, m=s.m)
    train = sim.generate_batch(s.videos, sim.derive_seed(cfg.run.seed, 0), **kw)
    held = sim.generate_batch(s.eval_videos, sim.derive_seed(cfg.run.seed, 1), **kw)
    return SimWorld(_sim_samples(cfg, train, "train", 2), _sim_samples(cfg, held, "eval", 3), prior)


def make_policy(cfg: RunConfig) -> grpo.ToyPolicy | None:
    if cfg.policy.policy != "toy":
        return None
    return grpo.initial_policy(cfg.sim.M, cfg.policy.evidence_weight, cfg.adapt.temperature)


def make_backend(cfg: RunConfig, environ=None, **remote_kw):
    if cfg.run.backend == "sim":
        return SimBackend(text_mode=cfg.sim.text_mode)
    endpoint = EndpointConfig.from_env(environ)
    a = cfg.adapt
    return RemoteBackend(endpoint, a.temperature, a.max_response_tokens, a.max_prompt_tokens,
                         a.max_in_flight, **remote_kw)


def load_samples(path, labels_path: str | None = None) -> list[VideoSample]:
    """Read a samples-v1 file; frame directories resolve relative to the file."""
    p = Path(path)
    doc = json.loads(p.read_text(encoding="utf-8"))
    if doc.get("version") != SAMPLES_VERSION:
        raise ValueError(f"{p}: expected version {SAMPLES_VERSION!r}")
    labels = {}
    if labels_path:
        labels = json.loads(Path(labels_path).read_text(encoding="utf-8"))
    out = []
    for d in doc["samples"]:
        frames = load_frame_dir(p.parent / d["frames_dir"])
        qid = d.get("question_id", d["video_id"])
        out.append(VideoSample(
            video_id=d["video_id"], question=d["question"],
            fmt=AnswerFormat.from_dict(d.get("format", {"kind": "mc", "option_count": 4})),
            frames=frames, clip_scores=d.get("clip_scores"), question_id=qid,
            answer=labels.get(qid, d.get("answer"))))
    return out


def created_unix(cfg: RunConfig) -> int:
    if cfg.run.created_unix is not None:
        return cfg.run.created_unix
    # sim runs stay byte-reproducible
    return 0 if cfg.run.backend == "sim" else int(time.time())


def run_adapt(cfg: RunConfig, samples, backend=None, policy=None, log_path=None,
              on_epoch=None) -> AdaptResult:
    backend = backend if backend is not None else make_backend(cfg)
    return adapt_batch(samples, cfg.adaptation(), backend, policy=policy, log_path=log_path,
                       on_epoch=on_epoch)


def inference_prior(cfg: RunConfig, learned: GlobalPrior | np.ndarray | None, T: int,
                    baseline: str | None = None):
    """Frame-selection distribution for a baseline; may be per-sample (callable)."""
    baseline = baseline or cfg.infer.baseline
    if baseline in ("random", "self-consistency"):
        return np.full(T, 1.0 / T)
    if baseline == "clip":
        def per_sample(sample: VideoSample):
            if sample.clip_scores is None:
                return np.full(sample.T, 1.0 / sample.T)
            return bandit.init_distribution(sample.T, sample.clip_scores).probs
        return per_sample
    if learned is None:
        raise ValueError(f"baseline {baseline!r} needs a learned prior")
    if baseline == "blend":
        spec = BlendSpec(cfg.infer.w_clip, cfg.infer.w_dist)
        lp = learned.probs if isinstance(learned, GlobalPrior) else np.asarray(learned)

        def blended(sample: VideoSample):
            if sample.clip_scores is None:
                clip = np.full(sample.T, 1.0 / sample.T)
            else:
                clip = bandit.init_distribution(sample.T, sample.clip_scores).probs
            return blend(clip, lp, spec)
        return blended
    return learned


def evaluate(cfg: RunConfig, samples, prior, backend=None, policy=None, baseline: str | None = None,
             votes: int | None = None, allow_interpolate: bool = False) -> list[Prediction]:
    backend = backend if backend is not None else make_backend(cfg)
    baseline = baseline or cfg.infer.baseline
    T = samples[0].T
    if votes is None:
        votes = cfg.infer.votes
    if baseline == "self-consistency" and votes == 1:
        votes = 8
    sel = inference_prior(cfg, prior, T, baseline)
    return adapted_inference(samples, sel, cfg.adaptation(), backend, cfg.infer.mode,
                             cfg.infer.frames, votes, policy, allow_interpolate)


def global_prior(result: AdaptResult) -> GlobalPrior:
    return average_distributions(result.distributions)


def heldout_accuracy(cfg: RunConfig, world: SimWorld, prior, policy=None, baseline=None) -> float:
    return accuracy(evaluate(cfg, world.eval, prior, policy=policy, baseline=baseline))
